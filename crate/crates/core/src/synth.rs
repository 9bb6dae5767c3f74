//! Sums-of-sinusoids generator used as the bundled toy dataset.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::RawSeries;
use crate::error::{Error, Result};
use crate::tensor::DenseArray;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sinusoid {
    pub period: f64,
    pub amplitude: f64,
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariateSpec {
    pub offset: f64,
    pub components: Vec<Sinusoid>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub length: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub variates: Vec<VariateSpec>,
}

impl Default for SynthConfig {
    /// Three variates built from mutually incommensurate periods, so no two
    /// lookback windows are alike.
    fn default() -> Self {
        let s = |period, amplitude, phase| Sinusoid {
            period,
            amplitude,
            phase,
        };
        Self {
            length: 2400,
            noise_std: 0.05,
            seed: 7,
            variates: vec![
                VariateSpec {
                    offset: 0.0,
                    components: vec![s(24.0, 1.0, 0.0), s(67.3, 0.5, 1.1)],
                },
                VariateSpec {
                    offset: 1.0,
                    components: vec![s(37.1, 0.8, 0.4), s(101.7, 0.6, 2.0)],
                },
                VariateSpec {
                    offset: -0.5,
                    components: vec![s(17.9, 0.7, 2.7), s(53.3, 0.9, 0.3)],
                },
            ],
        }
    }
}

impl SynthConfig {
    /// Seasonal period reported for MASE/Naive2: the shortest component period, rounded.
    pub fn period(&self) -> usize {
        self.variates
            .iter()
            .flat_map(|v| v.components.iter().map(|c| c.period))
            .fold(f64::INFINITY, f64::min)
            .round()
            .max(1.0) as usize
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<RawSeries> {
    if cfg.variates.is_empty() {
        return Err(Error::EmptyVariates);
    }
    if cfg.length < 2 {
        return Err(Error::InsufficientData(format!("length {} < 2", cfg.length)));
    }
    if cfg.variates.iter().flat_map(|v| &v.components).any(|c| !(c.period > 0.0)) {
        return Err(Error::Config("sinusoid periods must be positive".into()));
    }
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(format!("noise_std: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.variates.len();
    let mut d = Vec::with_capacity(cfg.length * n);
    for t in 0..cfg.length {
        for v in &cfg.variates {
            let clean: f64 = v
                .components
                .iter()
                .map(|c| c.amplitude * (std::f64::consts::TAU * t as f64 / c.period + c.phase).sin())
                .sum();
            d.push(v.offset + clean + noise.sample(&mut rng));
        }
    }
    RawSeries::new("synthetic", DenseArray::matrix(cfg.length, n, d)?, cfg.period())
}

/// CSV text with a leading integer time column: `t,v0,v1,...`.
pub fn to_csv(series: &RawSeries) -> String {
    let mut out = String::from("t");
    for v in 0..series.variates() {
        let _ = write!(out, ",v{v}");
    }
    out.push('\n');
    for t in 0..series.len() {
        let _ = write!(out, "{t}");
        for x in series.values.row_slice(t) {
            let _ = write!(out, ",{x}");
        }
        out.push('\n');
    }
    out
}

pub fn write_csv(series: &RawSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_csv(series)).map_err(|e| Error::io(path, e))
}
