//! Language branch: series patches become tokens for a small transformer,
//! with a shared class token; whole variates become tokens for the selection path.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Encoder, EncoderConfig, Linear};
use crate::tensor::{DenseArray, Graph, Group, InitRule, ParamId, ParamStore, Var};

pub const EMBED_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub patch_len: usize,
    pub stride: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            patch_len: 16,
            stride: 8,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self, lookback: usize) -> Result<()> {
        let (pl, s) = (self.patch_len, self.stride);
        if s == 0 || s > pl || pl > lookback {
            return Err(Error::Config(format!(
                "need 1 <= stride <= patch_len <= lookback (stride {s}, patch_len {pl}, lookback {lookback})"
            )));
        }
        Ok(())
    }

    /// `floor((T - PL) / S) + 2`.
    pub fn num_patches(&self, lookback: usize) -> Result<usize> {
        self.validate(lookback)?;
        Ok((lookback - self.patch_len) / self.stride + 2)
    }

    /// Replicated steps appended to reach a full final patch.
    pub fn padding(&self, lookback: usize) -> Result<usize> {
        let m = self.num_patches(lookback)?;
        Ok((m - 1) * self.stride + self.patch_len - lookback)
    }
}

/// `M x PL` patches; patch `k` covers `[k*S, k*S + PL)` of the series padded
/// at the end by repeating its last value.
pub fn patchify(v: &[f64], cfg: &PatchConfig) -> Result<DenseArray> {
    let t = v.len();
    let m = cfg.num_patches(t)?;
    let mut out = Vec::with_capacity(m * cfg.patch_len);
    append_patches(v, cfg, m, &mut out);
    DenseArray::matrix(m, cfg.patch_len, out)
}

fn append_patches(v: &[f64], cfg: &PatchConfig, m: usize, out: &mut Vec<f64>) {
    let last = v[v.len() - 1];
    for k in 0..m {
        let s = k * cfg.stride;
        out.extend((s..s + cfg.patch_len).map(|i| v.get(i).copied().unwrap_or(last)));
    }
}

/// Patchify every row of `rows x T` into `(rows * M) x PL`.
pub fn patchify_rows(x: &DenseArray, cfg: &PatchConfig) -> Result<DenseArray> {
    let (r, t) = (x.rows(), x.cols());
    let m = cfg.num_patches(t)?;
    let mut out = Vec::with_capacity(r * m * cfg.patch_len);
    for i in 0..r {
        append_patches(x.row_slice(i), cfg, m, &mut out);
    }
    DenseArray::matrix(r * m, cfg.patch_len, out)
}

#[derive(Debug, Clone)]
pub struct LanguageBranch {
    pub patch: PatchConfig,
    pub lookback: usize,
    pub num_patches: usize,
    pub variates: usize,
    /// Patch tokenizer `PL -> D` (convolution-like: one kernel applied per patch).
    pub tokenizer: Linear,
    /// Single class token shared by every variate.
    pub cls: ParamId,
    /// `(M + 1) x D` positional table for the patch path.
    pub pos: ParamId,
    /// Whole-variate tokenizer `T -> D` for the selection path.
    pub variate_tokenizer: Linear,
    /// `N x D` positional table for the variate path.
    pub variate_pos: ParamId,
    pub encoder: Encoder,
}

impl LanguageBranch {
    pub fn new(
        store: &mut ParamStore,
        lookback: usize,
        variates: usize,
        patch: PatchConfig,
        enc: EncoderConfig,
    ) -> Result<Self> {
        if variates == 0 {
            return Err(Error::EmptyVariates);
        }
        let m = patch.num_patches(lookback)?;
        let d = enc.dim;
        let normal = InitRule::Normal { std: EMBED_STD };
        let tokenizer = Linear::conv_like(store, "lang.tokenizer", patch.patch_len, d, Group::Head)?;
        let cls = store.add("lang.cls", Group::Head, DenseArray::zeros(&[1, d]), normal, false)?;
        let pos = store.add("lang.pos", Group::Head, DenseArray::zeros(&[m + 1, d]), normal, true)?;
        let variate_tokenizer = Linear::new(store, "lang.variate_tokenizer", lookback, d, Group::Head)?;
        let variate_pos = store.add("lang.variate_pos", Group::Head, DenseArray::zeros(&[variates, d]), normal, true)?;
        let encoder = Encoder::new(store, "lang.encoder", enc, Group::Encoder)?;
        Ok(Self {
            patch,
            lookback,
            num_patches: m,
            variates,
            tokenizer,
            cls,
            pos,
            variate_tokenizer,
            variate_pos,
            encoder,
        })
    }

    pub fn dim(&self) -> usize {
        self.encoder.cfg.dim
    }

    pub fn seq_len(&self) -> usize {
        self.num_patches + 1
    }

    /// Tokenize `(G * M) x PL` patches, prepend the class token to each of the
    /// `G` sequences and add positions: `(G * (M + 1)) x D`.
    pub fn embed(&self, g: &mut Graph, patches: Var, groups: usize) -> Result<Var> {
        let m = self.num_patches;
        if g.value(patches).rows() != groups * m {
            return Err(Error::Config(format!(
                "{} patch rows do not form {groups} sequences of {m} (positional table has {} rows)",
                g.value(patches).rows(),
                m + 1
            )));
        }
        let tokens = self.tokenizer.forward(g, patches)?;
        let cls = g.param(self.cls);
        let seq = g.interleave(tokens, m, cls, 1, true, true)?;
        let pos = g.param(self.pos);
        g.add_rows_cyclic(seq, pos)
    }

    /// Encoded features `(G * (M + 1)) x D` and the class outputs `G x D`.
    pub fn encode(&self, g: &mut Graph, patches: Var, groups: usize) -> Result<(Var, Var)> {
        let seq = self.embed(g, patches, groups)?;
        let feats = self.encoder.forward(g, seq, groups, self.seq_len())?;
        let idx = (0..groups).map(|i| i * self.seq_len()).collect();
        let cls = g.gather_rows(feats, idx)?;
        Ok((feats, cls))
    }

    /// Variate-level representations `H`: `(B * N) x T` in, `(B * N) x D` out,
    /// through the same encoder with the variate positional table.
    pub fn encode_variates(&self, g: &mut Graph, x: Var, batch: usize) -> Result<Var> {
        let n = self.variates;
        if g.value(x).rows() != batch * n {
            return Err(Error::DimMismatch(format!(
                "{} variate rows, expected {batch} x {n}",
                g.value(x).rows()
            )));
        }
        let tok = self.variate_tokenizer.forward(g, x)?;
        let pos = g.param(self.variate_pos);
        let tok = g.add_rows_cyclic(tok, pos)?;
        self.encoder.forward(g, tok, batch, n)
    }
}
