//! Flat `key = value` run configuration with dotted namespaces.
//!
//! Parsing starts from defaults and applies each line; unknown keys,
//! duplicate keys and malformed values are errors. [`RunConfig::to_text`]
//! writes every key, and parsing that snapshot reproduces it exactly.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{self, RawSeries, SplitSpec};
use crate::error::{Error, Result};
use crate::lang::PatchConfig;
use crate::metrics::{MaseMode, ReferenceMetrics};
use crate::model::{Ablations, ModelConfig};
use crate::nn::{Activation, EncoderConfig};
use crate::raster::RasterConfig;
use crate::select::Fusion;
use crate::synth::{self, Sinusoid, SynthConfig, VariateSpec};
use crate::training::{GenLoss, Schedule, TrainConfig};
use crate::vision::{Pooling, VisionConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Csv,
    M4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricMode {
    /// MSE / MAE.
    LongTerm,
    /// SMAPE / MASE / OWA.
    ShortTerm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub path: String,
    pub has_header: bool,
    pub date_column: Option<usize>,
    /// Seasonal period; 0 means "take it from the generator" (synthetic only).
    pub period: usize,
}

#[derive(Debug, Clone)]
pub struct MetricsConfig {
    pub mode: MetricMode,
    pub mase_mode: MaseMode,
    pub naive2: bool,
    /// Externally supplied reference metrics; override the computed Naive2 ones.
    pub reference: Option<ReferenceMetrics>,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub split: SplitSpec,
    pub lookback: usize,
    pub horizon: usize,
    pub stride: usize,
    pub patch: PatchConfig,
    pub lang: EncoderConfig,
    pub vision: VisionConfig,
    pub raster: RasterConfig,
    pub fusion: Fusion,
    pub align_per_variate: bool,
    pub ablations: Ablations,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
    pub out: String,
    /// Directory relative data paths are resolved against (not serialized).
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let toy = ModelConfig::toy(96, 24, 1);
        Self {
            data: DataConfig {
                source: DataSource::Synthetic,
                path: String::new(),
                has_header: true,
                date_column: Some(0),
                period: 0,
            },
            synth: SynthConfig::default(),
            split: SplitSpec::default(),
            lookback: 96,
            horizon: 24,
            stride: 1,
            patch: toy.patch,
            lang: toy.language,
            vision: toy.vision,
            raster: toy.raster,
            fusion: toy.fusion,
            align_per_variate: false,
            ablations: Ablations::default(),
            train: TrainConfig::default(),
            metrics: MetricsConfig {
                mode: MetricMode::LongTerm,
                mase_mode: MaseMode::Horizon,
                naive2: true,
                reference: None,
            },
            out: "runs/default".into(),
            base_dir: PathBuf::from("."),
        }
    }
}

fn invalid(key: &str, detail: impl Into<String>) -> Error {
    Error::InvalidValue {
        key: key.into(),
        detail: detail.into(),
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| invalid(key, format!("cannot parse `{v}`")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(invalid(key, format!("expected true or false, got `{v}`"))),
    }
}

fn opt_usize(key: &str, v: &str) -> Result<Option<usize>> {
    if v == "none" {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

fn opt_f64(key: &str, v: &str) -> Result<Option<f64>> {
    if v == "none" {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

fn show_opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "none".to_string(), |x| x.to_string())
}

fn activation(key: &str, v: &str) -> Result<Activation> {
    match v {
        "gelu" => Ok(Activation::Gelu),
        "relu" => Ok(Activation::Relu),
        _ => Err(invalid(key, format!("expected gelu or relu, got `{v}`"))),
    }
}

fn act_name(a: Activation) -> &'static str {
    match a {
        Activation::Gelu => "gelu",
        Activation::Relu => "relu",
    }
}

/// `offset; period:amplitude:phase, ...`
fn parse_variate(key: &str, v: &str) -> Result<VariateSpec> {
    let (offset, comps) = v
        .split_once(';')
        .ok_or_else(|| invalid(key, "expected `offset; period:amplitude:phase, ...`"))?;
    let components = comps
        .split(',')
        .map(str::trim)
        .filter(|c| !c.is_empty())
        .map(|c| {
            let parts: Vec<&str> = c.split(':').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(invalid(key, format!("component `{c}` is not period:amplitude:phase")));
            }
            Ok(Sinusoid {
                period: num(key, parts[0])?,
                amplitude: num(key, parts[1])?,
                phase: num(key, parts[2])?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(VariateSpec {
        offset: num(key, offset.trim())?,
        components,
    })
}

fn show_variate(v: &VariateSpec) -> String {
    let comps: Vec<String> = v
        .components
        .iter()
        .map(|c| format!("{}:{}:{}", c.period, c.amplitude, c.phase))
        .collect();
    format!("{}; {}", v.offset, comps.join(", "))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        let mut variates: Vec<(usize, VariateSpec)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                detail: format!("expected `key = value`, got `{line}`"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Parse {
                    line: i + 1,
                    detail: format!("duplicate key `{k}`"),
                });
            }
            if let Some(idx) = k.strip_prefix("synth.v") {
                let idx: usize = idx.parse().map_err(|_| Error::UnknownKey(k.into()))?;
                variates.push((idx, parse_variate(k, v)?));
                continue;
            }
            cfg.set(k, v)?;
        }
        if !variates.is_empty() {
            variates.sort_by_key(|(i, _)| *i);
            if variates.iter().enumerate().any(|(pos, (i, _))| pos != *i) {
                return Err(invalid("synth.v*", "variate keys must be synth.v0, synth.v1, ... without gaps"));
            }
            cfg.synth.variates = variates.into_iter().map(|(_, v)| v).collect();
        }
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    /// Derived settings: language-only implies no alignment; short-term data defaults.
    pub fn resolve(&mut self) {
        if self.ablations.language_only {
            self.ablations.no_align = true;
        }
    }

    /// Apply one `key = value` override.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let k = key;
        match k {
            "data.source" => {
                self.data.source = match v {
                    "synthetic" => DataSource::Synthetic,
                    "csv" => DataSource::Csv,
                    "m4" => DataSource::M4,
                    _ => return Err(invalid(k, format!("expected synthetic, csv or m4, got `{v}`"))),
                }
            }
            "data.path" => self.data.path = v.to_string(),
            "data.has_header" => self.data.has_header = boolean(k, v)?,
            "data.date_column" => self.data.date_column = opt_usize(k, v)?,
            "data.period" => self.data.period = num(k, v)?,
            "synth.length" => self.synth.length = num(k, v)?,
            "synth.noise_std" => self.synth.noise_std = num(k, v)?,
            "synth.seed" => self.synth.seed = num(k, v)?,
            "split.train" => self.split.train_fraction = num(k, v)?,
            "split.val" => self.split.val_fraction = num(k, v)?,
            "split.test" => self.split.test_fraction = num(k, v)?,
            "split.few_shot" => self.split.few_shot_fraction = num(k, v)?,
            "window.lookback" => self.lookback = num(k, v)?,
            "window.horizon" => self.horizon = num(k, v)?,
            "window.stride" => self.stride = num(k, v)?,
            "patch.PL" => self.patch.patch_len = num(k, v)?,
            "patch.stride" => self.patch.stride = num(k, v)?,
            "lang.dim" => self.lang.dim = num(k, v)?,
            "lang.depth" => self.lang.depth = num(k, v)?,
            "lang.heads" => self.lang.heads = num(k, v)?,
            "lang.ffn_ratio" => self.lang.ffn_ratio = num(k, v)?,
            "lang.activation" => self.lang.act = activation(k, v)?,
            "vision.patch" => self.vision.image_patch = num(k, v)?,
            "vision.dim" => self.vision.encoder.dim = num(k, v)?,
            "vision.depth" => self.vision.encoder.depth = num(k, v)?,
            "vision.heads" => self.vision.encoder.heads = num(k, v)?,
            "vision.ffn_ratio" => self.vision.encoder.ffn_ratio = num(k, v)?,
            "vision.activation" => self.vision.encoder.act = activation(k, v)?,
            "vision.pooling" => self.vision.pooling = Pooling::parse(v).map_err(|e| invalid(k, e.to_string()))?,
            "vision.freeze" => self.vision.freeze = boolean(k, v)?,
            "raster.height" => self.raster.height = num(k, v)?,
            "raster.width" => self.raster.width = num(k, v)?,
            "raster.stroke" => self.raster.stroke_width = num(k, v)?,
            "raster.palette" => {
                self.raster.colorize = match v {
                    "color" => true,
                    "grayscale" => false,
                    _ => return Err(invalid(k, format!("expected color or grayscale, got `{v}`"))),
                }
            }
            "model.fusion" => self.fusion = Fusion::parse(v).map_err(|e| invalid(k, e.to_string()))?,
            "align.per_variate" => self.align_per_variate = boolean(k, v)?,
            "ablations.no_align" => self.ablations.no_align = boolean(k, v)?,
            "ablations.no_colorize" => self.ablations.no_colorize = boolean(k, v)?,
            "ablations.no_select" => self.ablations.no_select = boolean(k, v)?,
            "ablations.language_only" => self.ablations.language_only = boolean(k, v)?,
            "train.lambda1" => self.train.loss.lambda1 = num(k, v)?,
            "train.lambda2" => self.train.loss.lambda2 = num(k, v)?,
            "train.gen_loss" => self.train.loss.gen_loss = GenLoss::parse(v).map_err(|e| invalid(k, e.to_string()))?,
            "train.lr_encoder" => self.train.lr_encoder = num(k, v)?,
            "train.lr_head" => self.train.lr_head = num(k, v)?,
            "train.weight_decay" => self.train.weight_decay = num(k, v)?,
            "train.clip_norm" => self.train.clip_norm = opt_f64(k, v)?,
            "train.schedule" => {
                self.train.schedule = match v {
                    "cosine" => Schedule::CosineToZero,
                    "constant" => Schedule::Constant,
                    _ => match v.strip_prefix("exponential:") {
                        Some(g) => Schedule::Exponential { gamma: num(k, g)? },
                        None => {
                            return Err(invalid(k, format!("expected cosine, constant or exponential:<gamma>, got `{v}`")))
                        }
                    },
                }
            }
            "train.batch_size" => self.train.batch_size = num(k, v)?,
            "train.max_epochs" => self.train.max_epochs = num(k, v)?,
            "train.patience" => self.train.patience = num(k, v)?,
            "train.retrieval_batch" => self.train.retrieval_batch = num(k, v)?,
            "metrics.mode" => {
                self.metrics.mode = match v {
                    "long_term" => MetricMode::LongTerm,
                    "short_term" => MetricMode::ShortTerm,
                    _ => return Err(invalid(k, format!("expected long_term or short_term, got `{v}`"))),
                }
            }
            "metrics.mase_mode" => {
                self.metrics.mase_mode = match v {
                    "horizon" => MaseMode::Horizon,
                    "classical" => MaseMode::Classical,
                    _ => return Err(invalid(k, format!("expected horizon or classical, got `{v}`"))),
                }
            }
            "metrics.naive2" => self.metrics.naive2 = boolean(k, v)?,
            "metrics.reference" => {
                self.metrics.reference = if v == "none" {
                    None
                } else {
                    let (s, m) = v
                        .split_once(',')
                        .ok_or_else(|| invalid(k, "expected `smape,mase` or none"))?;
                    Some(ReferenceMetrics {
                        smape: num(k, s.trim())?,
                        mase: num(k, m.trim())?,
                    })
                }
            }
            "run.seed" => self.train.seed = num(k, v)?,
            "run.out" => self.out = v.to_string(),
            _ => match k.strip_prefix("synth.v").and_then(|i| i.parse::<usize>().ok()) {
                // Replace an existing variate or append the next one.
                Some(i) if i < self.synth.variates.len() => self.synth.variates[i] = parse_variate(k, v)?,
                Some(i) if i == self.synth.variates.len() => self.synth.variates.push(parse_variate(k, v)?),
                _ => return Err(Error::UnknownKey(k.to_string())),
            },
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let schedule = match self.train.schedule {
            Schedule::CosineToZero => "cosine".to_string(),
            Schedule::Constant => "constant".to_string(),
            Schedule::Exponential { gamma } => format!("exponential:{gamma}"),
        };
        let mut e: Vec<(&str, String)> = vec![
            ("run.seed", self.train.seed.to_string()),
            ("run.out", self.out.clone()),
            (
                "data.source",
                match self.data.source {
                    DataSource::Synthetic => "synthetic",
                    DataSource::Csv => "csv",
                    DataSource::M4 => "m4",
                }
                .into(),
            ),
            ("data.path", self.data.path.clone()),
            ("data.has_header", self.data.has_header.to_string()),
            ("data.date_column", show_opt(self.data.date_column)),
            ("data.period", self.data.period.to_string()),
            ("synth.length", self.synth.length.to_string()),
            ("synth.noise_std", self.synth.noise_std.to_string()),
            ("synth.seed", self.synth.seed.to_string()),
            ("split.train", self.split.train_fraction.to_string()),
            ("split.val", self.split.val_fraction.to_string()),
            ("split.test", self.split.test_fraction.to_string()),
            ("split.few_shot", self.split.few_shot_fraction.to_string()),
            ("window.lookback", self.lookback.to_string()),
            ("window.horizon", self.horizon.to_string()),
            ("window.stride", self.stride.to_string()),
            ("patch.PL", self.patch.patch_len.to_string()),
            ("patch.stride", self.patch.stride.to_string()),
            ("lang.dim", self.lang.dim.to_string()),
            ("lang.depth", self.lang.depth.to_string()),
            ("lang.heads", self.lang.heads.to_string()),
            ("lang.ffn_ratio", self.lang.ffn_ratio.to_string()),
            ("lang.activation", act_name(self.lang.act).into()),
            ("vision.patch", self.vision.image_patch.to_string()),
            ("vision.dim", self.vision.encoder.dim.to_string()),
            ("vision.depth", self.vision.encoder.depth.to_string()),
            ("vision.heads", self.vision.encoder.heads.to_string()),
            ("vision.ffn_ratio", self.vision.encoder.ffn_ratio.to_string()),
            ("vision.activation", act_name(self.vision.encoder.act).into()),
            ("vision.pooling", self.vision.pooling.as_str().into()),
            ("vision.freeze", self.vision.freeze.to_string()),
            ("raster.height", self.raster.height.to_string()),
            ("raster.width", self.raster.width.to_string()),
            ("raster.stroke", self.raster.stroke_width.to_string()),
            ("raster.palette", if self.raster.colorize { "color" } else { "grayscale" }.into()),
            ("model.fusion", self.fusion.as_str().into()),
            ("align.per_variate", self.align_per_variate.to_string()),
            ("ablations.no_align", self.ablations.no_align.to_string()),
            ("ablations.no_colorize", self.ablations.no_colorize.to_string()),
            ("ablations.no_select", self.ablations.no_select.to_string()),
            ("ablations.language_only", self.ablations.language_only.to_string()),
            ("train.lambda1", self.train.loss.lambda1.to_string()),
            ("train.lambda2", self.train.loss.lambda2.to_string()),
            ("train.gen_loss", self.train.loss.gen_loss.as_str().into()),
            ("train.lr_encoder", self.train.lr_encoder.to_string()),
            ("train.lr_head", self.train.lr_head.to_string()),
            ("train.weight_decay", self.train.weight_decay.to_string()),
            ("train.clip_norm", show_opt(self.train.clip_norm)),
            ("train.schedule", schedule),
            ("train.batch_size", self.train.batch_size.to_string()),
            ("train.max_epochs", self.train.max_epochs.to_string()),
            ("train.patience", self.train.patience.to_string()),
            ("train.retrieval_batch", self.train.retrieval_batch.to_string()),
            (
                "metrics.mode",
                match self.metrics.mode {
                    MetricMode::LongTerm => "long_term",
                    MetricMode::ShortTerm => "short_term",
                }
                .into(),
            ),
            (
                "metrics.mase_mode",
                match self.metrics.mase_mode {
                    MaseMode::Horizon => "horizon",
                    MaseMode::Classical => "classical",
                }
                .into(),
            ),
            ("metrics.naive2", self.metrics.naive2.to_string()),
            (
                "metrics.reference",
                self.metrics
                    .reference
                    .map_or_else(|| "none".into(), |r| format!("{},{}", r.smape, r.mase)),
            ),
        ];
        let mut out: Vec<(String, String)> = e.drain(..).map(|(k, v)| (k.to_string(), v)).collect();
        for (i, v) in self.synth.variates.iter().enumerate() {
            out.push((format!("synth.v{i}"), show_variate(v)));
        }
        out
    }

    /// Resolved snapshot: one `key = value` line per key.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.source != DataSource::Synthetic && self.data.path.is_empty() {
            return Err(invalid("data.path", "required for csv and m4 sources"));
        }
        if self.data.source != DataSource::Synthetic && self.data.period == 0 {
            return Err(invalid("data.period", "seasonal period must be set (>= 1) for custom data"));
        }
        if self.lookback == 0 || self.horizon == 0 || self.stride == 0 {
            return Err(invalid("window.*", "lookback, horizon and stride must be >= 1"));
        }
        self.patch.validate(self.lookback).map_err(|e| invalid("patch.PL", e.to_string()))?;
        self.raster.validate().map_err(|e| invalid("raster.*", e.to_string()))?;
        self.train.validate()?;
        for (key, enc) in [("lang", &self.lang), ("vision", &self.vision.encoder)] {
            if enc.dim == 0 || enc.heads == 0 || enc.dim % enc.heads != 0 {
                return Err(invalid(
                    &format!("{key}.heads"),
                    format!("dim {} must be a positive multiple of heads {}", enc.dim, enc.heads),
                ));
            }
            if enc.ffn_ratio == 0 {
                return Err(invalid(&format!("{key}.ffn_ratio"), "must be >= 1"));
            }
        }
        if self.ablations.language_only && !self.ablations.no_align {
            return Err(invalid("ablations.language_only", "implies no_align"));
        }
        Ok(())
    }

    pub fn data_path(&self) -> PathBuf {
        let p = Path::new(&self.data.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Load (or generate) the configured series.
    pub fn load_series(&self) -> Result<Vec<RawSeries>> {
        match self.data.source {
            DataSource::Synthetic => {
                let mut s = synth::generate(&self.synth)?;
                if self.data.period > 0 {
                    s.period = self.data.period;
                }
                Ok(vec![s])
            }
            DataSource::Csv => Ok(vec![dataset::load_csv(
                self.data_path(),
                self.data.has_header,
                self.data.date_column,
                self.data.period,
            )?]),
            DataSource::M4 => dataset::load_m4_csv(self.data_path(), self.data.has_header, self.data.period),
        }
    }

    pub fn model_config(&self, variates: usize) -> ModelConfig {
        ModelConfig {
            lookback: self.lookback,
            horizon: self.horizon,
            variates,
            patch: self.patch,
            language: self.lang,
            vision: self.vision,
            raster: self.raster,
            fusion: self.fusion,
            align_per_variate: self.align_per_variate,
            ablations: self.ablations,
        }
    }
}
