//! Loss composition, two-group AdamW, learning-rate schedules, early
//! stopping and the epoch loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::SeriesWindow;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalOptions, ForecastItem, MetricReport};
use crate::model::{Batch, TimesClip};
use crate::tensor::{DenseArray, Graph, Group, ParamStore, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenLoss {
    Mse,
    Smape,
}

impl GenLoss {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(GenLoss::Mse),
            "smape" => Ok(GenLoss::Smape),
            other => Err(Error::Config(format!("unknown gen_loss `{other}` (mse, smape)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GenLoss::Mse => "mse",
            GenLoss::Smape => "smape",
        }
    }

    pub fn apply(self, g: &mut Graph, pred: Var, target: DenseArray) -> Result<Var> {
        match self {
            GenLoss::Mse => g.mse(pred, target),
            GenLoss::Smape => g.smape(pred, target),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub gen_loss: GenLoss,
}

/// `lambda1 * L_gen + lambda2 * L_align`; a missing align term contributes nothing.
pub fn total_loss(g: &mut Graph, gen: Var, align: Option<Var>, cfg: &LossConfig) -> Result<Var> {
    check_term("generation loss (L_gen)", g.scalar(gen))?;
    let weighted = g.scale(gen, cfg.lambda1);
    match align {
        None => Ok(weighted),
        Some(a) => {
            check_term("alignment loss (L_align)", g.scalar(a))?;
            let wa = g.scale(a, cfg.lambda2);
            g.add(weighted, wa)
        }
    }
}

/// Same composition on plain numbers.
pub fn total_loss_value(gen: f64, align: Option<f64>, cfg: &LossConfig) -> Result<f64> {
    check_term("generation loss (L_gen)", gen)?;
    let mut t = cfg.lambda1 * gen;
    if let Some(a) = align {
        check_term("alignment loss (L_align)", a)?;
        t += cfg.lambda2 * a;
    }
    Ok(t)
}

fn check_term(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{name} = {v}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// `lr0 * (1 + cos(pi * e / (E - 1))) / 2`, reaching zero at the last epoch.
    CosineToZero,
    /// `lr0 * gamma^e`.
    Exponential { gamma: f64 },
    Constant,
}

impl Schedule {
    pub fn factor(self, epoch: usize, max_epochs: usize) -> f64 {
        match self {
            Schedule::CosineToZero => {
                if max_epochs <= 1 {
                    1.0
                } else {
                    let p = epoch.min(max_epochs - 1) as f64 / (max_epochs - 1) as f64;
                    0.5 * (1.0 + (std::f64::consts::PI * p).cos())
                }
            }
            Schedule::Exponential { gamma } => gamma.powi(epoch as i32),
            Schedule::Constant => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub lr_encoder: f64,
    pub lr_head: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Batch size used when measuring retrieval accuracy on held-out windows.
    pub retrieval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig {
                lambda1: 1.0,
                lambda2: 0.1,
                gen_loss: GenLoss::Mse,
            },
            lr_encoder: 1e-4,
            lr_head: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: Some(1.0),
            schedule: Schedule::CosineToZero,
            batch_size: 64,
            max_epochs: 100,
            patience: 30,
            seed: 2024,
            retrieval_batch: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, d: String| Err(Error::InvalidValue { key: k.into(), detail: d });
        if !(self.loss.lambda1 > 0.0) {
            return bad("train.lambda1", format!("{} must be > 0 for forecasting", self.loss.lambda1));
        }
        if !(self.loss.lambda2 >= 0.0) {
            return bad("train.lambda2", format!("{} must be >= 0", self.loss.lambda2));
        }
        if !(self.lr_encoder > 0.0) || !(self.lr_head > 0.0) {
            return bad("train.lr_*", "learning rates must be positive".into());
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("train.batch_size/max_epochs/patience", "must be positive".into());
        }
        if let Schedule::Exponential { gamma } = self.schedule {
            if !(gamma > 0.0 && gamma <= 1.0) {
                return bad("train.gamma", format!("{gamma} must be in (0, 1]"));
            }
        }
        Ok(())
    }

    pub fn lr(&self, group: Group) -> f64 {
        match group {
            Group::Encoder => self.lr_encoder,
            Group::Head => self.lr_head,
        }
    }
}

/// Decoupled-weight-decay Adam with per-group learning rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![0.0; p.array.len()]).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update. `grads[i]` is `None` for parameters without gradient
    /// (frozen or unused), which are left untouched.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<DenseArray>], cfg: &TrainConfig, lr_factor: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let p = store.get_mut(id);
            if p.frozen {
                continue;
            }
            let lr = cfg.lr(p.group) * lr_factor;
            let wd = if p.decay { cfg.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (w, &gk)) in p.array.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                *w -= lr * (mh / (vh.sqrt() + cfg.adam_eps) + wd * *w);
            }
        }
    }
}

/// Scale gradients so their global L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Option<DenseArray>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g.sum_squares()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Per-parameter gradients of `out`, indexed like the store.
pub fn param_grads(g: &Graph, out: Var, n_params: usize) -> Result<Vec<Option<DenseArray>>> {
    let grads = g.backward_scalar(out)?;
    let mut by_id = vec![None; n_params];
    for (id, d) in grads.params() {
        by_id[id.index()] = Some(d);
    }
    Ok(by_id)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr_scale: f64,
    pub train_loss: f64,
    pub train_gen: f64,
    pub align_loss: f64,
    pub val_gen: f64,
    pub train_retrieval: Option<f64>,
    pub val_retrieval: Option<f64>,
    pub tau: Option<f64>,
    pub grad_norm: f64,
    pub seconds: f64,
}

impl EpochLog {
    /// One `key=value` line.
    pub fn to_line(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("na".to_string(), |x| format!("{x:.6}"));
        let mut s = String::new();
        let _ = write!(
            s,
            "epoch={} lr_scale={:.6} train_loss={:.6} train_gen={:.6} align_loss={:.6} val_gen={:.6} train_retrieval={} val_retrieval={} tau={} grad_norm={:.4} seconds={:.2}",
            self.epoch,
            self.lr_scale,
            self.train_loss,
            self.train_gen,
            self.align_loss,
            self.val_gen,
            opt(self.train_retrieval),
            opt(self.val_retrieval),
            opt(self.tau),
            self.grad_norm,
            self.seconds
        );
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StopReason {
    Completed,
    EarlyStopped { epoch: usize },
    Diverged { epoch: usize, detail: String },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation `L_gen`.
    pub best: ParamStore,
    pub best_epoch: usize,
    pub best_val: f64,
    pub optimizer: AdamW,
    pub log: Vec<EpochLog>,
    pub stop: StopReason,
}

/// Mean `L_gen` over `windows`, evaluated in batches without gradients.
/// Batches run in parallel; their results are summed in order.
pub fn validation_loss(model: &TimesClip, windows: &[SeriesWindow], cfg: &TrainConfig) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let parts: Vec<(f64, usize)> = windows
        .par_chunks(cfg.batch_size)
        .map(|chunk| {
            let refs: Vec<&SeriesWindow> = chunk.iter().collect();
            let batch = Batch::without_images(&refs, model)?;
            let mut g = Graph::new(&model.store);
            let (pred, _, _) = model.forecast(&mut g, &batch)?;
            let l = cfg.loss.gen_loss.apply(&mut g, pred, batch.target.clone())?;
            Ok((g.scalar(l) * chunk.len() as f64, chunk.len()))
        })
        .collect::<Result<_>>()?;
    let total: f64 = parts.iter().map(|p| p.0).sum();
    let count: usize = parts.iter().map(|p| p.1).sum();
    Ok(total / count as f64)
}

/// Mean in-batch retrieval accuracy over seeded random batches of `batch_size`
/// drawn without replacement from `windows` (a trailing partial batch is dropped).
pub fn retrieval_accuracy(model: &TimesClip, windows: &[SeriesWindow], batch_size: usize, seed: u64) -> Result<Option<f64>> {
    if model.vision.is_none() {
        return Ok(None);
    }
    if batch_size < 2 || windows.len() < batch_size {
        return Err(Error::InsufficientData(format!(
            "retrieval needs at least {batch_size} windows (>= 2), have {}",
            windows.len()
        )));
    }
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let accs: Vec<f64> = order
        .par_chunks_exact(batch_size)
        .map(|chunk| {
            let refs: Vec<&SeriesWindow> = chunk.iter().map(|&i| &windows[i]).collect();
            let batch = Batch::new(&refs, model)?;
            let mut g = Graph::new(&model.store);
            let (_, cls, _) = model.forecast(&mut g, &batch)?;
            let v = model.vision_embeddings(&mut g, &batch)?.expect("vision model");
            let shape = if model.cfg.align_per_variate {
                vec![batch.size * batch.variates, model.lang.dim()]
            } else {
                vec![batch.size, batch.variates * model.lang.dim()]
            };
            let vr = g.value(v).reshaped(&shape)?;
            let lr = g.value(cls).reshaped(&shape)?;
            crate::align::retrieval_accuracy(&vr, &lr)
        })
        .collect::<Result<_>>()?;
    Ok(Some(accs.iter().sum::<f64>() / accs.len() as f64))
}

/// Original-scale forecasts for `windows`: one `N x H_f` array per window.
pub fn predict(model: &TimesClip, windows: &[SeriesWindow], batch_size: usize) -> Result<Vec<DenseArray>> {
    let (n, h) = (model.cfg.variates, model.cfg.horizon);
    let parts: Vec<Vec<DenseArray>> = windows
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let refs: Vec<&SeriesWindow> = chunk.iter().collect();
            let batch = Batch::without_images(&refs, model)?;
            let mut g = Graph::new(&model.store);
            let (pred, _, _) = model.forecast(&mut g, &batch)?;
            let p = g.value(pred);
            (0..chunk.len())
                .map(|b| DenseArray::matrix(n, h, p.data()[b * n * h..(b + 1) * n * h].to_vec()))
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Metric report for forecasts (`N x H_f` each) against their windows.
pub fn report_for(windows: &[SeriesWindow], preds: &[DenseArray], opts: &EvalOptions) -> Result<MetricReport> {
    let cols: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = windows
        .iter()
        .zip(preds)
        .flat_map(|(w, p)| {
            (0..w.variates()).map(move |v| {
                let hist = (0..w.lookback()).map(|t| w.x.get(t, v)).collect();
                let truth = (0..w.horizon()).map(|t| w.y.get(t, v)).collect();
                (hist, truth, p.row_slice(v).to_vec())
            })
        })
        .collect();
    let items: Vec<ForecastItem<'_>> = cols
        .iter()
        .map(|(h, t, p)| ForecastItem {
            history: h,
            truth: t,
            pred: p,
        })
        .collect();
    evaluate(&items, opts)
}

/// Last-value naive forecasts, shaped like [`predict`]'s output.
pub fn naive_predictions(windows: &[SeriesWindow]) -> Vec<DenseArray> {
    windows
        .iter()
        .map(|w| {
            let last = w.x.row_slice(w.lookback() - 1);
            let mut d = Vec::with_capacity(w.variates() * w.horizon());
            for &v in last {
                d.extend(std::iter::repeat_n(v, w.horizon()));
            }
            DenseArray::from_raw(vec![w.variates(), w.horizon()], d)
        })
        .collect()
}

/// Run the epoch loop. Divergence stops training but still returns the best
/// parameters seen so far, with the reason recorded in `stop`.
pub fn train(
    model: &mut TimesClip,
    train_set: &[SeriesWindow],
    val_set: &[SeriesWindow],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("training and validation splits must be non-empty".into()));
    }
    let mut opt = AdamW::new(&model.store);
    let mut best = model.store.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut bad_epochs = 0;
    let mut log = Vec::new();
    let mut stop = StopReason::Completed;
    let n_params = model.store.len();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    'epochs: for epoch in 0..cfg.max_epochs {
        let started = std::time::Instant::now();
        let lr_scale = cfg.schedule.factor(epoch, cfg.max_epochs);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64)));
        let (mut loss_sum, mut gen_sum, mut align_sum, mut seen) = (0.0, 0.0, 0.0, 0usize);
        let (mut ret_sum, mut ret_n, mut norm_sum, mut steps) = (0.0, 0usize, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&SeriesWindow> = chunk.iter().map(|&i| &train_set[i]).collect();
            let batch = Batch::new(&refs, model)?;
            let (mut grads, total, gen, align, ret) = {
                let mut g = Graph::new(&model.store);
                let out = match model.forward(&mut g, &batch, &cfg.loss) {
                    Ok(o) => o,
                    Err(Error::NonFinite(detail)) => {
                        stop = StopReason::Diverged { epoch, detail };
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                };
                let grads = param_grads(&g, out.total, n_params)?;
                let ret = if batch.size >= 2 { model.retrieval(&g, &out, &batch)? } else { None };
                (
                    grads,
                    g.scalar(out.total),
                    g.scalar(out.gen_loss),
                    out.align_loss.map_or(0.0, |a| g.scalar(a)),
                    ret,
                )
            };
            if let Some((i, _)) = grads.iter().enumerate().find(|(_, g)| g.as_ref().is_some_and(|g| !g.all_finite())) {
                let name = &model.store.get(model.store.ids().nth(i).expect("index")).name;
                stop = StopReason::Diverged {
                    epoch,
                    detail: format!("non-finite gradient for `{name}`"),
                };
                break 'epochs;
            }
            let norm = match cfg.clip_norm {
                Some(c) => clip_global_norm(&mut grads, c),
                None => grads.iter().flatten().map(|g| g.sum_squares()).sum::<f64>().sqrt(),
            };
            opt.update(&mut model.store, &grads, cfg, lr_scale);
            let w = chunk.len() as f64;
            loss_sum += total * w;
            gen_sum += gen * w;
            align_sum += align * w;
            seen += chunk.len();
            norm_sum += norm;
            steps += 1;
            if let Some(r) = ret {
                ret_sum += r;
                ret_n += 1;
            }
        }
        let val_gen = validation_loss(model, val_set, cfg)?;
        if !val_gen.is_finite() {
            stop = StopReason::Diverged {
                epoch,
                detail: format!("validation L_gen = {val_gen}"),
            };
            break;
        }
        let val_retrieval = if model.vision.is_some() && val_set.len() >= cfg.retrieval_batch {
            retrieval_accuracy(model, val_set, cfg.retrieval_batch, cfg.seed)?
        } else {
            None
        };
        let entry = EpochLog {
            epoch,
            lr_scale,
            train_loss: loss_sum / seen as f64,
            train_gen: gen_sum / seen as f64,
            align_loss: align_sum / seen as f64,
            val_gen,
            train_retrieval: (ret_n > 0).then(|| ret_sum / ret_n as f64),
            val_retrieval,
            tau: model.tau(),
            grad_norm: norm_sum / steps.max(1) as f64,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.push(entry);
        if val_gen < best_val {
            best_val = val_gen;
            best_epoch = epoch;
            best = model.store.clone();
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= cfg.patience {
                stop = StopReason::EarlyStopped { epoch };
                break;
            }
        }
    }
    model.store.load_values(&best)?;
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val,
        optimizer: opt,
        log,
        stop,
    })
}
