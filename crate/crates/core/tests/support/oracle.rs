//! Straightforward re-implementations written directly from the formulas,
//! plus sweeps comparing them with the library.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use timesclip_core::lang::{patchify, PatchConfig};
use timesclip_core::metrics::{mase, owa, point_metrics};

pub fn mse(y: &[f64], p: &[f64]) -> f64 {
    y.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64
}

pub fn mae(y: &[f64], p: &[f64]) -> f64 {
    y.iter().zip(p).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64
}

pub fn smape(y: &[f64], p: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..y.len() {
        let den = y[i].abs() + p[i].abs();
        if den > 0.0 {
            s += (y[i] - p[i]).abs() / den;
        }
    }
    200.0 / y.len() as f64 * s
}

pub fn mape(y: &[f64], p: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..y.len() {
        s += (y[i] - p[i]).abs() / y[i].abs();
    }
    100.0 / y.len() as f64 * s
}

pub fn mase_oracle(y: &[f64], p: &[f64], m: usize) -> f64 {
    let h = y.len();
    let num = mae(y, p);
    let mut den = 0.0;
    for j in m..h {
        den += (y[j] - y[j - m]).abs();
    }
    num / (den / (h - m) as f64)
}

/// Compare every metric with the oracle on `cases` random series; returns the mismatches.
pub fn metric_cases(cases: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = Vec::new();
    for case in 0..cases {
        let h = rng.random_range(6..40);
        let m = rng.random_range(1..h.min(8));
        let y: Vec<f64> = (0..h)
            .map(|_| rng.random_range(0.5..10.0) * if rng.random_bool(0.3) { -1.0 } else { 1.0 })
            .collect();
        let p: Vec<f64> = y.iter().map(|v| v + rng.random_range(-2.0..2.0)).collect();
        let (rs, rm) = (rng.random_range(1.0..50.0), rng.random_range(0.2..3.0));
        let mut close = |what: &str, a: Option<f64>, b: f64| match a {
            Some(a) if (a - b).abs() <= 1e-9 * b.abs().max(1.0) => {}
            _ => bad.push(format!("case {case} {what}: {a:?} vs {b}")),
        };
        let Ok(got) = point_metrics(&y, &p) else {
            bad.push(format!("case {case}: point_metrics failed"));
            continue;
        };
        let got_mase = mase(&y, &p, m).ok().flatten();
        close("mse", Some(got.mse), mse(&y, &p));
        close("mae", Some(got.mae), mae(&y, &p));
        close("smape", Some(got.smape), smape(&y, &p));
        close("mape", got.mape, mape(&y, &p));
        close("mase", got_mase, mase_oracle(&y, &p, m));
        let want = 0.5 * (smape(&y, &p) / rs + mase_oracle(&y, &p, m) / rm);
        close("owa", got_mase.and_then(|g| owa(got.smape, g, rs, rm)), want);
    }
    bad
}

/// Brute-force sliding window over the series padded with `S` copies of its last value.
pub fn enumerate_patches(t: usize, pl: usize, s: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start + pl <= t + s {
        out.push((start, start + pl));
        start += s;
    }
    out
}

/// Patch count, contents and coverage over a grid of (T, PL, S); returns
/// the number of configurations checked and the failures.
pub fn patchify_sweep() -> (usize, Vec<String>) {
    let mut failures = Vec::new();
    let mut checked = 0;
    for t in [24, 48, 96, 192, 336, 512] {
        for pl in [8, 16, 24] {
            for s in [4, 8, 16] {
                checked += 1;
                let cfg = PatchConfig { patch_len: pl, stride: s };
                // Strides longer than the patch would skip steps and are rejected.
                if s > pl {
                    if cfg.validate(t).is_ok() {
                        failures.push(format!("T={t} PL={pl} S={s}: stride > patch accepted"));
                    }
                    continue;
                }
                let series: Vec<f64> = (0..t).map(|i| i as f64).collect();
                let p = match patchify(&series, &cfg) {
                    Ok(p) => p,
                    Err(e) => {
                        failures.push(format!("T={t} PL={pl} S={s}: {e}"));
                        continue;
                    }
                };
                let want = enumerate_patches(t, pl, s);
                let formula = (t - pl) / s + 2;
                if p.rows() != want.len() || p.rows() != formula {
                    failures.push(format!("T={t} PL={pl} S={s}: {} patches, enumerator {}", p.rows(), want.len()));
                    continue;
                }
                let mut covered = vec![false; t];
                for (k, &(a, b)) in want.iter().enumerate() {
                    for (j, i) in (a..b).enumerate() {
                        if p.get(k, j) != i.min(t - 1) as f64 {
                            failures.push(format!("T={t} PL={pl} S={s}: patch {k} element {j}"));
                        }
                        if i < t {
                            covered[i] = true;
                        }
                    }
                }
                if covered.iter().any(|c| !c) {
                    failures.push(format!("T={t} PL={pl} S={s}: coverage gap"));
                }
            }
        }
    }
    (checked, failures)
}
