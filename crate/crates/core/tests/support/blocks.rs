//! Small differentiable blocks with random inputs, shared by the gradient
//! suite and the acceptance run. Each function builds one block for `seed`
//! and returns its central-difference report.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use timesclip_core::align::{align_loss, info_nce, Temperature};
use timesclip_core::dataset::{make_windows, RawSeries, SeriesWindow};
use timesclip_core::lang::{patchify_rows, LanguageBranch, PatchConfig};
use timesclip_core::model::{Ablations, Batch, ModelConfig, TimesClip};
use timesclip_core::nn::{Activation, EncoderConfig, LayerNorm, MultiHeadAttention};
use timesclip_core::raster::{render_sample, RasterConfig};
use timesclip_core::select::{fuse, ForecastHead, Fusion, SelectionBlock};
use timesclip_core::tensor::{grad_check, DenseArray, GradCheckReport, Graph, Group, InitRule, ParamId, ParamStore, Var};
use timesclip_core::training::{GenLoss, LossConfig};
use timesclip_core::vision::{Pooling, VisionBranch, VisionConfig};
use timesclip_core::Result;

pub const EPS: f64 = 1e-5;

pub type Check = fn(u64) -> Result<GradCheckReport>;

pub const BLOCKS: [(&str, Check); 8] = [
    ("layer norm", layer_norm),
    ("attention", attention),
    ("tokenizer", tokenizer),
    ("vision encoder", vision_encoder),
    ("selection", selection),
    ("fusion + head", fusion_head),
    ("info_nce / align_loss", contrastive),
    ("total loss", total_loss),
];

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> DenseArray {
    let n = shape.iter().product();
    let d = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    DenseArray::new(shape, d).unwrap()
}

/// Register a random array as a trainable input so its gradient is checked too.
fn input(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, shape: &[usize]) -> ParamId {
    let a = random(rng, shape, 1.0);
    store.add(name, Group::Head, a, InitRule::Constant(0.0), false).unwrap()
}

/// `sum(y * w)` with fixed random weights, so no output direction is trivially zero.
fn weighted(g: &mut Graph, y: Var, w: &DenseArray) -> Result<Var> {
    let wv = g.input(w.clone());
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

fn enc(dim: usize) -> EncoderConfig {
    EncoderConfig {
        dim,
        depth: 1,
        heads: 2,
        ffn_ratio: 2,
        act: Activation::Gelu,
    }
}

fn small_raster() -> RasterConfig {
    RasterConfig {
        height: 16,
        width: 16,
        stroke_width: 1,
        colorize: true,
    }
}

pub fn layer_norm(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", 6, Group::Head)?;
    store.initialize(seed);
    // Perturb the affine so gamma != 1 and beta != 0.
    for id in [ln.gamma, ln.beta] {
        let noise = random(&mut rng, &[6], 0.5);
        for (v, n) in store.value_mut(id).data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    let x = input(&mut store, &mut rng, "x", &[4, 6]);
    let w = random(&mut rng, &[4, 6], 1.0);
    grad_check(&store, |g| {
        let xv = g.param(x);
        let y = ln.forward(g, xv)?;
        weighted(g, y, &w)
    }, EPS)
}

pub fn attention(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "mha", 8, 2, Group::Head)?;
    store.initialize(seed);
    let q = input(&mut store, &mut rng, "q", &[2 * 3, 8]);
    let kv = input(&mut store, &mut rng, "kv", &[2 * 4, 8]);
    let w = random(&mut rng, &[6, 8], 1.0);
    grad_check(&store, |g| {
        let (qv, kvv) = (g.param(q), g.param(kv));
        let (y, _) = mha.forward(g, qv, kvv, 2, 3, 4)?;
        weighted(g, y, &w)
    }, EPS)
}

/// Patch tokenizer, shared class token, positions and the language encoder.
pub fn tokenizer(seed: u64) -> Result<GradCheckReport> {
    let patch = PatchConfig { patch_len: 8, stride: 4 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let lang = LanguageBranch::new(&mut store, 16, 2, patch, enc(8))?;
    store.initialize(seed);
    let series = random(&mut rng, &[2, 16], 1.0);
    let patches = patchify_rows(&series, &patch)?;
    let m = lang.num_patches;
    let w = random(&mut rng, &[2 * (m + 1), 8], 1.0);
    let wc = random(&mut rng, &[2, 8], 1.0);
    grad_check(&store, |g| {
        let p = g.input(patches.clone());
        let (feats, cls) = lang.encode(g, p, 2)?;
        let a = weighted(g, feats, &w)?;
        let b = weighted(g, cls, &wc)?;
        g.add(a, b)
    }, EPS)
}

/// Image patch embedding, encoder and projection; pooling alternates with the seed.
pub fn vision_encoder(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = VisionConfig {
        image_patch: 8,
        encoder: enc(8),
        pooling: if seed.is_multiple_of(2) { Pooling::ClsToken } else { Pooling::Mean },
        freeze: false,
    };
    let vision = VisionBranch::new(&mut store, cfg, 16, 16, 6)?;
    store.initialize(seed);
    let x = random(&mut rng, &[12, 2], 1.0);
    let images = render_sample(&x, &small_raster())?;
    let rows = vision.patch_rows(&images)?;
    let w = random(&mut rng, &[2, 6], 1.0);
    grad_check(&store, |g| {
        let p = g.input(rows.clone());
        let f = vision.encode(g, p, 2)?;
        let y = vision.project(g, f)?;
        weighted(g, y, &w)
    }, EPS)
}

pub fn selection(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let sel = SelectionBlock::new(&mut store, 8, 2, 2, Activation::Gelu)?;
    store.initialize(seed);
    let cls = input(&mut store, &mut rng, "cls", &[2 * 3, 8]);
    let h = input(&mut store, &mut rng, "h", &[2 * 3, 8]);
    let w = random(&mut rng, &[6, 8], 1.0);
    grad_check(&store, |g| {
        let (c, hv) = (g.param(cls), g.param(h));
        let out = sel.forward(g, c, hv, 2, 3)?;
        weighted(g, out.out, &w)
    }, EPS)
}

/// Fusion (strategy cycles with the seed), head and de-normalization under MSE.
pub fn fusion_head(seed: u64) -> Result<GradCheckReport> {
    let strategy = Fusion::ALL[seed as usize % 3];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let head = ForecastHead::new(&mut store, strategy.fused_len(4), 5, 3)?;
    store.initialize(seed);
    let feats = input(&mut store, &mut rng, "feats", &[2 * 4, 5]);
    let selected = input(&mut store, &mut rng, "selected", &[2, 5]);
    let target = random(&mut rng, &[2, 3], 2.0);
    grad_check(&store, |g| {
        let (f, s) = (g.param(feats), g.param(selected));
        let fused = fuse(g, f, s, 4, strategy)?;
        let pred = head.forward(g, fused, &[0.5, -1.0], &[2.0, 0.3])?;
        g.mse(pred, target.clone())
    }, EPS)
}

/// InfoNCE plus the symmetric loss, with gradients for both sides and the temperature.
pub fn contrastive(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let t = Temperature::new(&mut store)?;
    // A temperature near 1 keeps the logits in a range where differences are accurate.
    store.value_mut(t.log_tau).data_mut()[0] = rng.random_range(-0.5..0.5);
    let v = input(&mut store, &mut rng, "v", &[4, 6]);
    let l = input(&mut store, &mut rng, "l", &[4, 6]);
    grad_check(&store, |g| {
        let (vv, lv, tv) = (g.param(v), g.param(l), g.param(t.log_tau));
        let a = info_nce(g, vv, lv, tv)?;
        let b = align_loss(g, vv, lv, tv)?;
        let b = g.scale(b, 0.5);
        g.add(a, b)
    }, EPS)
}

/// `lambda1 * L_gen + lambda2 * L_align` through the whole model; MSE and SMAPE alternate.
pub fn total_loss(seed: u64) -> Result<GradCheckReport> {
    let mut cfg = ModelConfig::toy(16, 4, 2);
    cfg.patch = PatchConfig { patch_len: 8, stride: 4 };
    cfg.language = enc(8);
    cfg.vision = VisionConfig {
        image_patch: 8,
        encoder: enc(8),
        pooling: Pooling::ClsToken,
        freeze: false,
    };
    cfg.raster = small_raster();
    cfg.ablations = Ablations::default();
    let model = TimesClip::new(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let s = RawSeries::new("rand", random(&mut rng, &[22, 2], 1.0), 1)?;
    let windows = make_windows(&s, 16, 4, 1)?;
    let refs: Vec<&SeriesWindow> = windows.iter().take(3).collect();
    let batch = Batch::new(&refs, &model)?;
    let loss = LossConfig {
        lambda1: 1.0,
        lambda2: 0.1,
        gen_loss: if seed.is_multiple_of(2) { GenLoss::Mse } else { GenLoss::Smape },
    };
    grad_check(&model.store, |g| Ok(model.forward(g, &batch, &loss)?.total), EPS)
}
