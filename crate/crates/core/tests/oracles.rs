//! Library results against straightforward re-implementations written
//! directly from the formulas.

use timesclip_core::metrics::{mase, naive2_forecast, owa, point_metrics};

#[path = "support/oracle.rs"]
mod oracle;

#[test]
fn metrics_match_oracle_on_random_cases() {
    let bad = oracle::metric_cases(20, 17);
    assert!(bad.is_empty(), "{bad:#?}");
}

#[test]
fn hand_cases() {
    let m = point_metrics(&[1.0, 2.0], &[2.0, 2.0]).unwrap();
    assert!((m.mse - 0.5).abs() < 1e-12 && (m.mae - 0.5).abs() < 1e-12);
    assert!((m.smape - 100.0 / 3.0).abs() < 1e-9);
    assert!((m.mape.unwrap() - 50.0).abs() < 1e-12);
    assert_eq!(point_metrics(&[0.0, 1.0], &[0.0, 1.0]).unwrap().smape, 0.0);
    assert!(point_metrics(&[0.0, 1.0], &[0.5, 1.0]).unwrap().mape.is_none());
    assert!((mase(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 5.0], 1).unwrap().unwrap() - 0.25).abs() < 1e-12);
    assert!(mase(&[1.0, 2.0], &[1.0, 2.0], 2).is_err());
    assert_eq!(owa(10.0, 1.0, 20.0, 1.0), Some(0.75));
    assert_eq!(owa(10.0, 1.0, 0.0, 1.0), None);
}

#[test]
fn mase_is_one_when_errors_equal_seasonal_differences() {
    // |y_j - p_j| = |y_j - y_{j-m}| for every j, with the first m errors equal to the mean difference.
    let y: [f64; 8] = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0];
    let m = 2;
    let diffs: Vec<f64> = (m..y.len()).map(|j| (y[j] - y[j - m]).abs()).collect();
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let mut p = Vec::new();
    for j in 0..y.len() {
        p.push(if j < m { y[j] + mean } else { y[j - m] });
    }
    assert!((mase(&y, &p, m).unwrap().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn naive2_repeats_the_final_period_of_periodic_series() {
    let pattern = [10.0, 14.0, 9.0, 12.0, 20.0, 7.0];
    let m = pattern.len();
    let history: Vec<f64> = (0..8 * m).map(|i| pattern[i % m]).collect();
    let f = naive2_forecast(&history, 15, m).unwrap();
    for (j, v) in f.iter().enumerate() {
        assert!((v - pattern[j % m]).abs() < 1e-6, "step {j}: {v}");
    }
    assert_eq!(naive2_forecast(&[4.0, 7.0, 2.0], 3, 1).unwrap(), vec![2.0; 3]);
    assert_eq!(naive2_forecast(&[5.0; 40], 4, 12).unwrap(), vec![5.0; 4]);
    assert!(naive2_forecast(&[1.0], 2, 1).is_err());
}

#[test]
fn patchify_sweep_matches_enumerator() {
    let (checked, failures) = oracle::patchify_sweep();
    assert_eq!(checked, 54);
    assert!(failures.is_empty(), "{failures:#?}");
}
