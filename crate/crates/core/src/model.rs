//! The assembled forecaster: language branch, optional vision branch with
//! contrastive alignment, variate selection, fusion and head.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{self, Temperature};
use crate::dataset::{normalize_with, SeriesWindow};
use crate::error::{Error, Result};
use crate::lang::{patchify_rows, LanguageBranch, PatchConfig};
use crate::nn::{Activation, EncoderConfig};
use crate::raster::{render_sample, RasterConfig};
use crate::select::{fuse, ForecastHead, Fusion, SelectionBlock};
use crate::tensor::{DenseArray, Graph, ParamStore, Var};
use crate::training::{total_loss, LossConfig};
use crate::vision::{Pooling, VisionBranch, VisionConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Ablations {
    /// Drop the contrastive term; the vision branch is never evaluated.
    pub no_align: bool,
    /// Draw every variate in the same line color.
    pub no_colorize: bool,
    /// Skip variate selection and fusion: the head reads the language features directly.
    pub no_select: bool,
    /// No vision branch at all (implies `no_align`).
    pub language_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub variates: usize,
    pub patch: PatchConfig,
    pub language: EncoderConfig,
    pub vision: VisionConfig,
    pub raster: RasterConfig,
    pub fusion: Fusion,
    /// Contrast individual variates (batch B * N) instead of whole samples.
    pub align_per_variate: bool,
    pub ablations: Ablations,
}

impl ModelConfig {
    pub fn toy(lookback: usize, horizon: usize, variates: usize) -> Self {
        let enc = EncoderConfig {
            dim: 64,
            depth: 2,
            heads: 4,
            ffn_ratio: 4,
            act: Activation::Gelu,
        };
        Self {
            lookback,
            horizon,
            variates,
            patch: PatchConfig::default(),
            language: enc,
            vision: VisionConfig {
                image_patch: 16,
                encoder: enc,
                pooling: Pooling::ClsToken,
                freeze: false,
            },
            raster: RasterConfig::default(),
            fusion: Fusion::ReplaceLast,
            align_per_variate: false,
            ablations: Ablations::default(),
        }
    }

    pub fn uses_vision(&self) -> bool {
        !self.ablations.no_align && !self.ablations.language_only
    }

    /// Raster settings with the colorization ablation applied.
    pub fn raster_config(&self) -> RasterConfig {
        RasterConfig {
            colorize: self.raster.colorize && !self.ablations.no_colorize,
            ..self.raster
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lookback == 0 || self.horizon == 0 {
            return Err(Error::Config("lookback and horizon must be >= 1".into()));
        }
        if self.variates == 0 {
            return Err(Error::EmptyVariates);
        }
        self.patch.validate(self.lookback)?;
        self.raster.validate()?;
        if self.uses_vision() {
            self.vision.tokens(self.raster.height, self.raster.width)?;
        }
        Ok(())
    }
}

/// `B` windows laid out variate-major per sample: row `b * N + n`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub size: usize,
    pub variates: usize,
    /// Instance-normalized lookback rows, `(B * N) x T`.
    pub x_norm: DenseArray,
    /// Raw lookback rows, `(B * N) x T`.
    pub history: DenseArray,
    /// Horizon rows in the original scale, `(B * N) x H_f`.
    pub target: DenseArray,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Image patch rows `(B * N * P) x F`, present when the vision branch runs.
    pub images: Option<DenseArray>,
}

impl Batch {
    pub fn new(windows: &[&SeriesWindow], model: &TimesClip) -> Result<Self> {
        Self::build(windows, model, model.vision.is_some())
    }

    /// Batch without images (forecast-only evaluation).
    pub fn without_images(windows: &[&SeriesWindow], model: &TimesClip) -> Result<Self> {
        Self::build(windows, model, false)
    }

    fn build(windows: &[&SeriesWindow], model: &TimesClip, render: bool) -> Result<Self> {
        let cfg = &model.cfg;
        if windows.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let n = cfg.variates;
        for w in windows {
            if w.variates() != n || w.lookback() != cfg.lookback || w.horizon() != cfg.horizon {
                return Err(Error::DimMismatch(format!(
                    "window has N={}, T={}, H_f={}; model expects N={n}, T={}, H_f={}",
                    w.variates(),
                    w.lookback(),
                    w.horizon(),
                    cfg.lookback,
                    cfg.horizon
                )));
            }
        }
        let b = windows.len();
        let mut x_norm = Vec::with_capacity(b * n * cfg.lookback);
        let mut history = Vec::with_capacity(b * n * cfg.lookback);
        let mut target = Vec::with_capacity(b * n * cfg.horizon);
        let (mut mean, mut std) = (Vec::with_capacity(b * n), Vec::with_capacity(b * n));
        let raster = cfg.raster_config();
        for w in windows {
            let xn = normalize_with(&w.x, &w.stats).transpose();
            x_norm.extend_from_slice(xn.data());
            history.extend_from_slice(w.x.transpose().data());
            target.extend_from_slice(w.y.transpose().data());
            mean.extend_from_slice(&w.stats.mean);
            std.extend_from_slice(&w.stats.std);
        }
        let images = match (&model.vision, render) {
            (Some(v), true) => {
                let rendered: Vec<Vec<_>> = windows
                    .par_iter()
                    .map(|w| render_sample(&w.x, &raster))
                    .collect::<Result<_>>()?;
                Some(v.patch_rows(&rendered.concat())?)
            }
            _ => None,
        };
        Ok(Self {
            size: b,
            variates: n,
            x_norm: DenseArray::matrix(b * n, cfg.lookback, x_norm)?,
            history: DenseArray::matrix(b * n, cfg.lookback, history)?,
            target: DenseArray::matrix(b * n, cfg.horizon, target)?,
            mean,
            std,
            images,
        })
    }
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// Forecast in the original scale, `(B * N) x H_f`.
    pub pred: Var,
    pub gen_loss: Var,
    pub align_loss: Option<Var>,
    pub total: Var,
    /// Language class outputs `(B * N) x D`.
    pub lang_cls: Var,
    /// Projected image class outputs `(B * N) x D`.
    pub vision_cls: Option<Var>,
    pub selection_attn: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct TimesClip {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub lang: LanguageBranch,
    pub select: SelectionBlock,
    pub head: ForecastHead,
    pub vision: Option<VisionBranch>,
    pub temperature: Option<Temperature>,
}

impl TimesClip {
    /// Build with parameters registered in a fixed order (forecast path
    /// first, vision and temperature last) and initialized from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let lang = LanguageBranch::new(&mut store, cfg.lookback, cfg.variates, cfg.patch, cfg.language)?;
        let d = lang.dim();
        let select = SelectionBlock::new(&mut store, d, cfg.language.heads, cfg.language.ffn_ratio, cfg.language.act)?;
        let head = ForecastHead::new(&mut store, cfg.fusion.fused_len(lang.seq_len()), d, cfg.horizon)?;
        let (vision, temperature) = if cfg.uses_vision() {
            let v = VisionBranch::new(&mut store, cfg.vision, cfg.raster.height, cfg.raster.width, d)?;
            (Some(v), Some(Temperature::new(&mut store)?))
        } else {
            (None, None)
        };
        store.initialize(seed);
        Ok(Self {
            cfg,
            store,
            lang,
            select,
            head,
            vision,
            temperature,
        })
    }

    pub fn tau(&self) -> Option<f64> {
        self.temperature.as_ref().map(|t| t.tau(&self.store))
    }

    /// Forecast path only: `(pred, lang_cls, selection attention)`.
    pub fn forecast(&self, g: &mut Graph, batch: &Batch) -> Result<(Var, Var, Option<Var>)> {
        let (b, n) = (batch.size, batch.variates);
        let groups = b * n;
        let patches = g.input(patchify_rows(&batch.x_norm, &self.cfg.patch)?);
        let (feats, cls) = self.lang.encode(g, patches, groups)?;
        let (fused, attn) = if self.cfg.ablations.no_select {
            (feats, None)
        } else {
            let x = g.input(batch.x_norm.clone());
            let h = self.lang.encode_variates(g, x, b)?;
            let sel = self.select.forward(g, cls, h, b, n)?;
            let fused = fuse(g, feats, sel.out, self.lang.seq_len(), self.cfg.fusion)?;
            (fused, Some(sel.attn))
        };
        // without selection there is nothing to concatenate
        let fused = if self.cfg.ablations.no_select && self.cfg.fusion == Fusion::ConcatEnd {
            let zeros = g.input(DenseArray::zeros(&[groups, self.lang.dim()]));
            g.interleave(fused, self.lang.seq_len(), zeros, 1, false, false)?
        } else {
            fused
        };
        let pred = self.head.forward(g, fused, &batch.mean, &batch.std)?;
        Ok((pred, cls, attn))
    }

    /// Image class embeddings projected into the shared space, `(B * N) x D`.
    pub fn vision_embeddings(&self, g: &mut Graph, batch: &Batch) -> Result<Option<Var>> {
        let (Some(vision), Some(images)) = (&self.vision, &batch.images) else {
            return Ok(None);
        };
        let x = g.input(images.clone());
        let f = vision.encode(g, x, batch.size * batch.variates)?;
        Ok(Some(vision.project(g, f)?))
    }

    /// Reshape `(B * N) x D` class outputs into contrastive rows.
    pub fn contrastive_rows(&self, g: &mut Graph, cls: Var, batch: &Batch) -> Result<Var> {
        if self.cfg.align_per_variate {
            Ok(cls)
        } else {
            g.reshape(cls, &[batch.size, batch.variates * self.lang.dim()])
        }
    }

    pub fn forward(&self, g: &mut Graph, batch: &Batch, loss: &LossConfig) -> Result<ForwardOutput> {
        let (pred, lang_cls, selection_attn) = self.forecast(g, batch)?;
        let gen_loss = loss.gen_loss.apply(g, pred, batch.target.clone())?;
        let mut vision_cls = None;
        let mut align_loss = None;
        if self.cfg.uses_vision() {
            let v = self
                .vision_embeddings(g, batch)?
                .ok_or_else(|| Error::Config("batch built without images for a vision model".into()))?;
            let temp = self.temperature.as_ref().expect("temperature exists with vision");
            let log_tau = g.param(temp.log_tau);
            let vr = self.contrastive_rows(g, v, batch)?;
            let lr = self.contrastive_rows(g, lang_cls, batch)?;
            align_loss = Some(align::align_loss(g, vr, lr, log_tau)?);
            vision_cls = Some(v);
        }
        let total = total_loss(g, gen_loss, align_loss, loss)?;
        Ok(ForwardOutput {
            pred,
            gen_loss,
            align_loss,
            total,
            lang_cls,
            vision_cls,
            selection_attn,
        })
    }

    /// Retrieval accuracy of image rows against language rows for this batch.
    pub fn retrieval(&self, g: &Graph, out: &ForwardOutput, batch: &Batch) -> Result<Option<f64>> {
        let Some(v) = out.vision_cls else { return Ok(None) };
        let (vv, lv) = (g.value(v), g.value(out.lang_cls));
        let (vr, lr) = if self.cfg.align_per_variate {
            (vv.clone(), lv.clone())
        } else {
            let shape = [batch.size, batch.variates * self.lang.dim()];
            (vv.reshaped(&shape)?, lv.reshaped(&shape)?)
        };
        align::retrieval_accuracy(&vr, &lr).map(Some)
    }
}
