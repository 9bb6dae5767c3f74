//! Vision branch: a small patch transformer over rendered variate images and
//! the projection into the shared embedding space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lang::EMBED_STD;
use crate::nn::{Encoder, EncoderConfig, Linear};
use crate::raster::VariateImage;
use crate::tensor::{DenseArray, Graph, Group, InitRule, ParamId, ParamStore, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    ClsToken,
    Mean,
}

impl Pooling {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cls_token" => Ok(Pooling::ClsToken),
            "mean" => Ok(Pooling::Mean),
            other => Err(Error::Config(format!("unknown pooling `{other}` (cls_token, mean)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::ClsToken => "cls_token",
            Pooling::Mean => "mean",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisionConfig {
    pub image_patch: usize,
    pub encoder: EncoderConfig,
    pub pooling: Pooling,
    /// Freeze the image encoder (patch embedding, tokens, transformer); the projection still trains.
    pub freeze: bool,
}

impl VisionConfig {
    pub fn tokens(&self, height: usize, width: usize) -> Result<usize> {
        let p = self.image_patch;
        if p == 0 || !height.is_multiple_of(p) || !width.is_multiple_of(p) {
            return Err(Error::Config(format!(
                "image {height}x{width} is not divisible by image_patch {p}"
            )));
        }
        Ok((height / p) * (width / p))
    }
}

#[derive(Debug, Clone)]
pub struct VisionBranch {
    pub cfg: VisionConfig,
    pub tokens: usize,
    pub patch_embed: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub encoder: Encoder,
    pub projection: Linear,
}

impl VisionBranch {
    pub fn new(store: &mut ParamStore, cfg: VisionConfig, height: usize, width: usize, out_dim: usize) -> Result<Self> {
        let tokens = cfg.tokens(height, width)?;
        let dv = cfg.encoder.dim;
        let feat = cfg.image_patch * cfg.image_patch * 3;
        let normal = InitRule::Normal { std: EMBED_STD };
        let first = store.len();
        let patch_embed = Linear::conv_like(store, "vision.patch_embed", feat, dv, Group::Head)?;
        let cls = store.add("vision.cls", Group::Head, DenseArray::zeros(&[1, dv]), normal, false)?;
        let pos = store.add("vision.pos", Group::Head, DenseArray::zeros(&[tokens + 1, dv]), normal, true)?;
        let encoder = Encoder::new(store, "vision.encoder", cfg.encoder, Group::Encoder)?;
        let frozen_end = store.len();
        let projection = Linear::new(store, "vision.projection", dv, out_dim, Group::Head)?;
        if cfg.freeze {
            for i in store.ids().skip(first).take(frozen_end - first) {
                store.get_mut(i).frozen = true;
            }
        }
        Ok(Self {
            cfg,
            tokens,
            patch_embed,
            cls,
            pos,
            encoder,
            projection,
        })
    }

    /// Patch rows for a list of images: `(G * P) x (p * p * 3)`.
    pub fn patch_rows(&self, images: &[VariateImage]) -> Result<DenseArray> {
        let mut data = Vec::new();
        for img in images {
            let p = img.patches(self.cfg.image_patch)?;
            if p.rows() != self.tokens {
                return Err(Error::DimMismatch(format!(
                    "image yields {} patches, encoder expects {}",
                    p.rows(),
                    self.tokens
                )));
            }
            data.extend_from_slice(p.data());
        }
        let feat = self.cfg.image_patch * self.cfg.image_patch * 3;
        DenseArray::matrix(images.len() * self.tokens, feat, data)
    }

    /// Pooled image features `G x D_v`.
    pub fn encode(&self, g: &mut Graph, patches: Var, groups: usize) -> Result<Var> {
        let p = self.tokens;
        if g.value(patches).rows() != groups * p {
            return Err(Error::DimMismatch(format!(
                "{} image patch rows, expected {groups} x {p}",
                g.value(patches).rows()
            )));
        }
        let tok = self.patch_embed.forward(g, patches)?;
        let cls = g.param(self.cls);
        let seq = g.interleave(tok, p, cls, 1, true, true)?;
        let pos = g.param(self.pos);
        let seq = g.add_rows_cyclic(seq, pos)?;
        let feats = self.encoder.forward(g, seq, groups, p + 1)?;
        match self.cfg.pooling {
            Pooling::ClsToken => g.gather_rows(feats, (0..groups).map(|i| i * (p + 1)).collect()),
            Pooling::Mean => {
                // averaging matrix over each group's patch tokens (class token excluded)
                let cols = groups * (p + 1);
                let mut avg = vec![0.0; groups * cols];
                for i in 0..groups {
                    for j in 1..=p {
                        avg[i * cols + i * (p + 1) + j] = 1.0 / p as f64;
                    }
                }
                let avg = g.input(DenseArray::matrix(groups, cols, avg)?);
                g.matmul(avg, feats)
            }
        }
    }

    /// Single affine map into the shared space: `G x D_v -> G x D`.
    pub fn project(&self, g: &mut Graph, f: Var) -> Result<Var> {
        self.projection.forward(g, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::raster::{render_variate, RasterConfig};

    fn cfg(pooling: Pooling, freeze: bool) -> VisionConfig {
        VisionConfig {
            image_patch: 16,
            encoder: EncoderConfig {
                dim: 8,
                depth: 1,
                heads: 2,
                ffn_ratio: 2,
                act: Activation::Gelu,
            },
            pooling,
            freeze,
        }
    }

    #[test]
    fn token_count_and_divisibility() {
        assert_eq!(cfg(Pooling::ClsToken, false).tokens(64, 64).unwrap(), 16);
        assert!(matches!(cfg(Pooling::ClsToken, false).tokens(64, 40), Err(Error::Config(_))));
    }

    #[test]
    fn blank_and_lined_images_differ() {
        for pooling in [Pooling::ClsToken, Pooling::Mean] {
            let mut s = ParamStore::new();
            let vb = VisionBranch::new(&mut s, cfg(pooling, false), 64, 64, 4).unwrap();
            s.initialize(11);
            let line = render_variate(&[0.0, 1.0, 0.2], 0, &RasterConfig::default()).unwrap();
            let mut blank = line.clone();
            blank.pixels.fill(255);
            let rows = vb.patch_rows(&[line.clone(), blank, line]).unwrap();
            let mut g = Graph::new(&s);
            let x = g.input(rows);
            let f = vb.encode(&mut g, x, 3).unwrap();
            let out = g.value(f);
            assert_eq!(out.shape(), &[3, 8]);
            assert_eq!(out.row_slice(0), out.row_slice(2));
            assert_ne!(out.row_slice(0), out.row_slice(1));
        }
    }
}
