//! Variate selection by cross-attention from each language class token over
//! the variate-level representations, fusion back into the token sequence,
//! and the flatten + linear forecasting head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::{DenseArray, Graph, Group, ParamStore, Var};

#[derive(Debug, Clone)]
pub struct SelectionBlock {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

/// Selection results for `B * N` class tokens.
#[derive(Debug, Clone, Copy)]
pub struct SelectionOutput {
    /// `cls + attention` before the feed-forward residual.
    pub attended: Var,
    pub out: Var,
    /// Attention node; weights via [`Graph::attention_weights`].
    pub attn: Var,
}

impl SelectionBlock {
    pub fn new(store: &mut ParamStore, dim: usize, heads: usize, ffn_ratio: usize, act: Activation) -> Result<Self> {
        Ok(Self {
            norm_q: LayerNorm::new(store, "select.ln_q", dim, Group::Head)?,
            norm_kv: LayerNorm::new(store, "select.ln_kv", dim, Group::Head)?,
            attn: MultiHeadAttention::new(store, "select.attn", dim, heads, Group::Head)?,
            norm_ffn: LayerNorm::new(store, "select.ln_ffn", dim, Group::Head)?,
            ffn: FeedForward::new(store, "select.ffn", dim, dim * ffn_ratio, act, Group::Head)?,
        })
    }

    /// `cls`: `(B * N) x D` class tokens (query); `h`: `(B * N) x D` variate
    /// representations (keys and values); each sample's N queries see its N variates.
    pub fn forward(&self, g: &mut Graph, cls: Var, h: Var, batch: usize, variates: usize) -> Result<SelectionOutput> {
        if variates == 0 {
            return Err(Error::EmptyVariates);
        }
        let q = self.norm_q.forward(g, cls)?;
        let kv = self.norm_kv.forward(g, h)?;
        let (a, attn) = self.attn.forward(g, q, kv, batch, variates, variates)?;
        let attended = g.add(cls, a)?;
        let f = self.norm_ffn.forward(g, attended)?;
        let f = self.ffn.forward(g, f)?;
        let out = g.add(attended, f)?;
        Ok(SelectionOutput { attended, out, attn })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    ReplaceLast,
    ReplaceFirst,
    ConcatEnd,
}

impl Fusion {
    pub const ALL: [Fusion; 3] = [Fusion::ReplaceLast, Fusion::ReplaceFirst, Fusion::ConcatEnd];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "replace_last" => Ok(Fusion::ReplaceLast),
            "replace_first" => Ok(Fusion::ReplaceFirst),
            "concat_end" => Ok(Fusion::ConcatEnd),
            other => Err(Error::Config(format!(
                "unknown fusion `{other}` (replace_last, replace_first, concat_end)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Fusion::ReplaceLast => "replace_last",
            Fusion::ReplaceFirst => "replace_first",
            Fusion::ConcatEnd => "concat_end",
        }
    }

    /// Sequence length after fusing into a sequence of `len` tokens.
    pub fn fused_len(self, len: usize) -> usize {
        match self {
            Fusion::ConcatEnd => len + 1,
            _ => len,
        }
    }
}

/// Fuse one selected vector per sequence into `G` sequences of `len` tokens.
pub fn fuse(g: &mut Graph, feats: Var, selected: Var, len: usize, strategy: Fusion) -> Result<Var> {
    if len < 2 {
        return Err(Error::Config(format!("fusion needs sequences of >= 2 tokens, got {len}")));
    }
    let groups = g.value(selected).rows();
    if g.value(feats).rows() != groups * len {
        return Err(Error::DimMismatch(format!(
            "{} feature rows for {groups} sequences of {len}",
            g.value(feats).rows()
        )));
    }
    match strategy {
        Fusion::ReplaceLast => g.replace_rows(feats, selected, (0..groups).map(|i| i * len + len - 1).collect()),
        Fusion::ReplaceFirst => g.replace_rows(feats, selected, (0..groups).map(|i| i * len).collect()),
        Fusion::ConcatEnd => g.interleave(feats, len, selected, 1, false, false),
    }
}

/// Plain-array replace-last on one `(M + 1) x D` sequence.
pub fn fuse_replace_last(feats: &DenseArray, selected: &[f64]) -> Result<DenseArray> {
    let (len, d) = (feats.rows(), feats.cols());
    if len < 2 {
        return Err(Error::Config(format!("fusion needs sequences of >= 2 tokens, got {len}")));
    }
    if selected.len() != d {
        return Err(Error::DimMismatch(format!("selected vector has {} values, tokens {d}", selected.len())));
    }
    let mut out = feats.clone();
    out.data_mut()[(len - 1) * d..].copy_from_slice(selected);
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ForecastHead {
    pub linear: Linear,
    pub seq_len: usize,
    pub dim: usize,
    pub horizon: usize,
}

impl ForecastHead {
    pub fn new(store: &mut ParamStore, seq_len: usize, dim: usize, horizon: usize) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(store, "head", seq_len * dim, horizon, Group::Head)?,
            seq_len,
            dim,
            horizon,
        })
    }

    /// Normalized-scale forecast `G x H_f` from `G` fused sequences.
    pub fn forward_normalized(&self, g: &mut Graph, fused: Var) -> Result<Var> {
        let rows = g.value(fused).rows();
        if !rows.is_multiple_of(self.seq_len) || g.value(fused).cols() != self.dim {
            return Err(Error::DimMismatch(format!(
                "head expects sequences of {} x {}, got {:?}",
                self.seq_len,
                self.dim,
                g.value(fused).shape()
            )));
        }
        let flat = g.reshape(fused, &[rows / self.seq_len, self.seq_len * self.dim])?;
        self.linear.forward(g, flat)
    }

    /// Forecast in the original scale: `pred * std + mean`, one `(mean, std)` per sequence.
    pub fn forward(&self, g: &mut Graph, fused: Var, mean: &[f64], std: &[f64]) -> Result<Var> {
        let p = self.forward_normalized(g, fused)?;
        g.affine_rows(p, std.to_vec(), mean.to_vec())
    }
}
