//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! `TIMESCLIP_BLESS=1` rewrites the golden raster hashes instead of comparing.

#[path = "../../core/tests/support/blocks.rs"]
mod blocks;
#[path = "../../core/tests/support/oracle.rs"]
mod oracle;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use timesclip_cli::{cmd_ablate, run_training, AblationTable};
use timesclip_core::align::{align_loss_value, info_nce_value};
use timesclip_core::config::RunConfig;
use timesclip_core::metrics::point_metrics;
use timesclip_core::raster::{render_sample, RasterConfig};
use timesclip_core::select::{fuse_replace_last, Fusion};
use timesclip_core::tensor::DenseArray;

type Outcome = Result<String, String>;

const QUICK: &str = "\
synth.length = 400
window.lookback = 32
window.horizon = 8
lang.dim = 16
lang.depth = 1
lang.heads = 2
vision.dim = 16
vision.depth = 1
vision.heads = 2
vision.patch = 8
raster.height = 32
raster.width = 32
train.batch_size = 32
train.max_epochs = 3
train.retrieval_batch = 8
";

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gradient_fidelity() -> Outcome {
    const TOL: f64 = 1e-4;
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    for (name, check) in blocks::BLOCKS {
        for seed in 0..20 {
            let r = check(seed).map_err(|e| format!("{name} seed {seed}: {e}"))?;
            if r.max_rel_error > worst.0 {
                worst = (r.max_rel_error, format!("{name} `{}`", r.worst));
            }
            ensure(r.max_rel_error <= TOL, || {
                format!("{name} seed {seed}: {:.2e} at `{}`", r.max_rel_error, r.worst)
            })?;
        }
    }
    let took = start.elapsed();
    ensure(took < Duration::from_secs(120), || format!("took {took:.1?}"))?;
    Ok(format!(
        "{} blocks x 20 seeds, worst {:.2e} ({}), {took:.1?}",
        blocks::BLOCKS.len(),
        worst.0,
        worst.1
    ))
}

fn contrastive_cases() -> Outcome {
    let e = |e: timesclip_core::Error| e.to_string();
    let one = DenseArray::matrix(1, 3, vec![0.3, -1.0, 2.0]).map_err(e)?;
    let other = DenseArray::matrix(1, 3, vec![5.0, 0.1, 0.0]).map_err(e)?;
    let b1 = info_nce_value(&one, &other, 0.07).map_err(e)?;
    ensure(b1 == 0.0, || format!("B=1 gives {b1}"))?;
    for b in [2usize, 4, 8, 16] {
        let same = DenseArray::matrix(b, 3, [0.5, -2.0, 1.0].repeat(b)).map_err(e)?;
        let got = info_nce_value(&same, &same, 0.3).map_err(e)?;
        ensure((got - (b as f64).ln()).abs() <= 1e-9, || format!("identical B={b}: {got}"))?;
        for tau in [0.07, 0.5, 1.0, 2.0] {
            let eye = DenseArray::matrix(b, b, (0..b * b).map(|i| f64::from(i % (b + 1) == 0)).collect()).map_err(e)?;
            let got = info_nce_value(&eye, &eye, tau).map_err(e)?;
            let x = (1.0 / tau).exp();
            let want = -(x / (x + b as f64 - 1.0)).ln();
            ensure((got - want).abs() <= 1e-9, || format!("orthonormal B={b} tau={tau}: {got} vs {want}"))?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..20 {
        let mut rand = |r, c| DenseArray::matrix(r, c, (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect());
        let (v, l) = (rand(6, 5).map_err(e)?, rand(6, 5).map_err(e)?);
        let tau = 0.1 + case as f64 * 0.05;
        let base = align_loss_value(&v, &l, tau).map_err(e)?;
        let perm = [3, 0, 5, 1, 4, 2];
        let pick = |x: &DenseArray| DenseArray::from_rows(&perm.iter().map(|&i| x.row_slice(i).to_vec()).collect::<Vec<_>>());
        let permuted = align_loss_value(&pick(&v).map_err(e)?, &pick(&l).map_err(e)?, tau).map_err(e)?;
        ensure((permuted - base).abs() <= 1e-9, || format!("case {case}: permutation {permuted} vs {base}"))?;
        for c in [0.01, 3.0, 250.0] {
            let scale = |x: &DenseArray| DenseArray::matrix(6, 5, x.data().iter().map(|a| a * c).collect());
            let sv = align_loss_value(&scale(&v).map_err(e)?, &l, tau).map_err(e)?;
            let sl = align_loss_value(&v, &scale(&l).map_err(e)?, tau).map_err(e)?;
            ensure((sv - base).abs() <= 1e-9 && (sl - base).abs() <= 1e-9, || {
                format!("case {case}: scaling by {c} gives {sv} / {sl} vs {base}")
            })?;
        }
    }
    Ok("B=1, identical (B=2..16), orthonormal (4 B x 4 tau), 20 permutation/scaling cases".into())
}

fn patchify_oracle() -> Outcome {
    let (checked, failures) = oracle::patchify_sweep();
    ensure(failures.is_empty(), || format!("{} failures, first: {}", failures.len(), failures[0]))?;
    Ok(format!("{checked} (T, PL, S) configurations, 0 failures"))
}

/// Ten fixed inputs built from integer arithmetic only, so every platform sees the same values.
fn raster_corpus() -> Vec<(&'static str, DenseArray, RasterConfig)> {
    let cfg = |h, w, stroke| RasterConfig {
        height: h,
        width: w,
        stroke_width: stroke,
        colorize: true,
    };
    let col = |v: Vec<f64>| DenseArray::matrix(v.len(), 1, v).unwrap();
    let cols = |c: Vec<Vec<f64>>| {
        let rows: Vec<Vec<f64>> = (0..c[0].len()).map(|t| c.iter().map(|v| v[t]).collect()).collect();
        DenseArray::from_rows(&rows).unwrap()
    };
    let ramp: Vec<f64> = (0..96).map(f64::from).collect();
    vec![
        ("ramp_up", col(ramp.clone()), cfg(64, 64, 1)),
        ("ramp_down", col(ramp.iter().rev().cloned().collect()), cfg(64, 64, 1)),
        ("constant", col(vec![3.5; 48]), cfg(32, 48, 2)),
        ("step", col((0..60).map(|i| if i < 30 { -1.0 } else { 2.0 }).collect()), cfg(64, 64, 2)),
        ("sawtooth", col((0..96).map(|i| f64::from(i % 7)).collect()), cfg(64, 96, 1)),
        ("triangle", col((0..80).map(|i| f64::from((i % 16 - 8i32).abs())).collect()), cfg(48, 64, 3)),
        ("spike", col((0..40).map(|i| if i == 17 { 10.0 } else { 0.0 }).collect()), cfg(64, 64, 1)),
        ("parabola", col((0..97).map(|i| f64::from((i - 48) * (i - 48))).collect()), cfg(64, 64, 2)),
        (
            "three_variates",
            cols(vec![
                ramp.clone(),
                (0..96).map(|i| f64::from(i % 5)).collect(),
                (0..96).map(|i| f64::from((i * i) % 13) / 4.0).collect(),
            ]),
            cfg(64, 64, 1),
        ),
        (
            "gaps_and_extremes",
            cols(vec![
                (0..50).map(|i| if i % 11 == 3 { f64::NAN } else { f64::from(i) * 0.25 }).collect(),
                (0..50).map(|i| if i % 2 == 0 { 1e6 } else { -1e6 }).collect(),
            ]),
            cfg(32, 32, 1),
        ),
    ]
}

fn raster_determinism() -> Outcome {
    let e = |e: timesclip_core::Error| e.to_string();
    let golden_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/raster_corpus.sha256");
    let mut lines = String::new();
    for (name, x, cfg) in raster_corpus() {
        let a = render_sample(&x, &cfg).map_err(e)?;
        let b = render_sample(&x, &cfg).map_err(e)?;
        let mut hash = Sha256::new();
        for (ia, ib) in a.iter().zip(&b) {
            ensure(ia.pixels == ib.pixels, || format!("{name}: pixels differ between runs"))?;
            ensure(ia.encode_png().map_err(e)? == ib.encode_png().map_err(e)?, || {
                format!("{name}: PNG bytes differ between runs")
            })?;
            hash.update(&ia.pixels);
        }
        let gray = render_sample(&x, &RasterConfig { colorize: false, ..cfg }).map_err(e)?;
        for (c, g) in a.iter().zip(&gray) {
            ensure(c.ink() == g.ink(), || format!("{name} variate {}: grayscale moved pixels", c.variate_index))?;
        }
        let hex: String = hash.finalize().iter().map(|b| format!("{b:02x}")).collect();
        let _ = writeln!(lines, "{name} {hex}");
    }
    if std::env::var_os("TIMESCLIP_BLESS").is_some() {
        std::fs::write(&golden_path, &lines).map_err(|err| err.to_string())?;
        return Ok("golden hashes rewritten".into());
    }
    let golden = std::fs::read_to_string(&golden_path).map_err(|err| format!("{}: {err}", golden_path.display()))?;
    for (got, want) in lines.lines().zip(golden.lines()) {
        ensure(got == want, || format!("hash mismatch: got `{got}`, golden `{want}`"))?;
    }
    ensure(lines.lines().count() == golden.lines().count(), || "golden corpus size differs".into())?;
    Ok(format!(
        "{} inputs match golden SHA-256 of the pixel buffers; PNG bytes identical across two renders; grayscale keeps positions",
        golden.lines().count()
    ))
}

fn metric_oracle() -> Outcome {
    let bad = oracle::metric_cases(20, 17);
    ensure(bad.is_empty(), || format!("{} mismatches, first: {}", bad.len(), bad[0]))?;
    let hand = point_metrics(&[1.0, 2.0], &[2.0, 2.0]).map_err(|e| e.to_string())?.smape;
    ensure((hand - 100.0 / 3.0).abs() < 1e-9, || format!("SMAPE([1,2],[2,2]) = {hand}"))?;
    Ok(format!("20 random cases within 1e-9; SMAPE([1,2],[2,2]) = {hand:.4}"))
}

fn end_to_end() -> Outcome {
    let cfg = RunConfig::load(workspace().join("configs/toy.cfg")).map_err(|e| e.to_string())?;
    ensure(cfg.train.retrieval_batch == 16, || "retrieval batch is not 16".into())?;
    ensure(cfg.train.max_epochs <= 200, || "more than 200 epochs".into())?;
    let start = Instant::now();
    let run = run_training(&cfg, "acceptance", |_| {}).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    let w = &run.prepared.windows;
    let windows = w.train.len() + w.val.len() + w.test.len();
    let ratio = run.report.mse / run.naive.mse;
    let acc = run.test_retrieval.ok_or("retrieval accuracy unavailable")?;
    let detail = format!(
        "{windows} windows, {} epochs, test MSE {:.4} vs naive {:.4} (ratio {ratio:.3}), retrieval@16 {acc:.3}, {took:.0?}",
        run.outcome.log.len(),
        run.report.mse,
        run.naive.mse
    );
    ensure(ratio <= 0.5 && acc >= 0.80 && took <= Duration::from_secs(15 * 60), || detail.clone())?;
    Ok(detail)
}

fn quick() -> RunConfig {
    RunConfig::parse(QUICK).expect("quick config parses")
}

fn ablation_harness(dir: &Path) -> Result<(String, AblationTable), String> {
    let mut cfg = quick();
    cfg.base_dir = dir.to_path_buf();
    cfg.out = "ablation".into();
    let table = cmd_ablate(&cfg, false).map_err(|e| e.to_string())?;
    let want = [
        (false, false, false),
        (true, false, false),
        (true, true, false),
        (true, false, true),
        (true, true, true),
    ];
    let components: Vec<_> = table.rows.iter().filter(|r| r.section == "components").collect();
    ensure(components.len() == 5, || format!("{} component rows", components.len()))?;
    for (r, flags) in components.iter().zip(want) {
        ensure((r.align, r.colorize, r.select) == flags, || format!("row `{}` has wrong flags", r.label))?;
        ensure(r.seed == cfg.train.seed, || format!("row `{}` seed {}", r.label, r.seed))?;
        ensure(r.metrics.is_some(), || format!("row `{}` failed: {:?}", r.label, r.error))?;
    }
    let text = std::fs::read_to_string(dir.join("ablation/ablation.txt")).map_err(|e| e.to_string())?;
    ensure(text.contains("NOT comparable") && text.contains("11.642") && text.contains("0.083"), || {
        "header lacks the comparability statement".into()
    })?;
    ensure(table.directions().len() == 5 && text.contains("observed effects"), || "effect directions missing".into())?;
    Ok(("5 component rows, seed shared, table + header written, 5 effect directions reported".into(), table))
}

fn determinism() -> Outcome {
    let mut cfg = quick();
    cfg.train.max_epochs = 5;
    let a = run_training(&cfg, "a", |_| {}).map_err(|e| e.to_string())?.report.mse;
    let b = run_training(&cfg, "b", |_| {}).map_err(|e| e.to_string())?.report.mse;
    ensure(a.to_bits() == b.to_bits(), || format!("{a:e} vs {b:e}"))?;
    Ok(format!("test MSE {a:.17} twice"))
}

fn fusion_contract(table: Option<&AblationTable>) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..50 {
        let (len, dim) = (rng.random_range(2..12), rng.random_range(1..9));
        let feats = DenseArray::matrix(len, dim, (0..len * dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .map_err(|e| e.to_string())?;
        let sel: Vec<f64> = (0..dim).map(|_| rng.random_range(2.0..3.0)).collect();
        let out = fuse_replace_last(&feats, &sel).map_err(|e| e.to_string())?;
        let changed: Vec<usize> = (0..len).filter(|&r| out.row_slice(r) != feats.row_slice(r)).collect();
        ensure(changed == [len - 1] && out.row_slice(len - 1) == sel.as_slice(), || {
            format!("case {case}: rows {changed:?} changed")
        })?;
    }
    let table = table.ok_or("ablation harness did not run")?;
    for f in Fusion::ALL {
        let row = table
            .rows
            .iter()
            .find(|r| r.section == "fusion" && r.fusion == f)
            .ok_or_else(|| format!("no row for {}", f.as_str()))?;
        ensure(row.metrics.is_some(), || format!("{} failed: {:?}", f.as_str(), row.error))?;
    }
    Ok("50 random cases alter only the final token; replace_last, replace_first, concat_end all ran".into())
}

fn main() -> ExitCode {
    let tmp = tempfile::TempDir::new().expect("temp dir");
    let ablation = ablation_harness(tmp.path());
    let table = ablation.as_ref().ok().map(|(_, t)| t.clone());
    let results: Vec<(&str, Outcome)> = vec![
        ("gradient fidelity", gradient_fidelity()),
        ("contrastive analytic cases", contrastive_cases()),
        ("patchify oracle", patchify_oracle()),
        ("raster determinism", raster_determinism()),
        ("metric oracle", metric_oracle()),
        ("end-to-end toy forecast", end_to_end()),
        ("ablation harness", ablation.map(|(s, _)| s)),
        ("determinism", determinism()),
        ("fusion contract", fusion_contract(table.as_ref())),
    ];
    let mut failed = 0;
    for (i, (name, r)) in results.iter().enumerate() {
        match r {
            Ok(d) => println!("criterion {} ({name}): PASS {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {} ({name}): FAIL {d}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} of {} criteria failed", results.len());
        ExitCode::FAILURE
    }
}
