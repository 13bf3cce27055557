use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use ruleprompt::telemetry::{apply_rule, estimate_stats, flag_sensor, normalize};
use ruleprompt::{Label, RuleConfig, Snapshot, ZScoreVector};

fn two_pass(samples: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = samples.len() as f64;
    let d = samples[0].len();
    let mean: Vec<f64> = (0..d).map(|j| samples.iter().map(|s| s[j]).sum::<f64>() / n).collect();
    let std = (0..d)
        .map(|j| (samples.iter().map(|s| (s[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    (mean, std)
}

#[test]
fn welford_matches_two_pass_on_gaussian_snapshots() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dists: Vec<Normal<f64>> = (0..12)
        .map(|j| Normal::new(1000.0 * (j as f64 - 6.0), 0.5 + j as f64).unwrap())
        .collect();
    let raw: Vec<Vec<f64>> = (0..500)
        .map(|_| dists.iter().map(|d| d.sample(&mut rng)).collect())
        .collect();
    let snaps: Vec<Snapshot> = raw.iter().map(|v| Snapshot::new(v.clone()).unwrap()).collect();
    let stats = estimate_stats(&snaps).unwrap();
    let (mean, std) = two_pass(&raw);
    assert_eq!(stats.sample_count, 500);
    for j in 0..12 {
        approx::assert_relative_eq!(stats.means[j], mean[j], max_relative = 1e-12, epsilon = 1e-9);
        approx::assert_relative_eq!(stats.stds[j], std[j], max_relative = 1e-9);
    }
}

#[test]
fn normalize_matches_formula() {
    let snaps = [vec![1.0, 10.0], vec![3.0, 10.0], vec![2.0, 10.0]]
        .into_iter()
        .map(|v| Snapshot::new(v).unwrap())
        .collect::<Vec<_>>();
    let stats = estimate_stats(&snaps).unwrap();
    let rule = RuleConfig::default();
    let x = Snapshot::new(vec![4.0, 10.5]).unwrap();
    let z = normalize(&x, &stats, &rule).unwrap();
    let sigma = (2.0f64 / 3.0).sqrt();
    approx::assert_relative_eq!(z.as_slice()[0], 2.0 / sigma, max_relative = 1e-12);
    // Constant sensor: epsilon guard.
    approx::assert_relative_eq!(z.as_slice()[1], 0.5 / 1e-9, max_relative = 1e-9);
}

fn brute_force(abs: &[f64], tau: f64) -> (Label, Vec<usize>) {
    let mut max = f64::NEG_INFINITY;
    for &v in abs {
        if v > max {
            max = v;
        }
    }
    let flagged: Vec<usize> = (0..abs.len()).filter(|&i| abs[i] >= tau).collect();
    let label = if max >= tau { Label::Anomaly } else { Label::Nominal };
    (label, flagged)
}

#[test]
fn rule_agrees_with_max_scan_oracle() {
    let rule = RuleConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..2000 {
        let n = rng.random_range(1..64);
        let abs: Vec<f64> = (0..n)
            .map(|_| match rng.random_range(0..10) {
                0 => 3.0,
                1 => 2.9999999999999996,
                _ => rng.random_range(0.0..4.0),
            })
            .collect();
        let z = ZScoreVector::new(abs.clone()).unwrap();
        assert_eq!(apply_rule(&z, &rule).unwrap(), brute_force(&abs, rule.tau));
    }
}

#[test]
fn threshold_boundary_flags() {
    let rule = RuleConfig::default();
    assert!(flag_sensor(3.0, &rule));
    assert!(!flag_sensor(3.0 - f64::EPSILON * 4.0, &rule));
    let z = ZScoreVector::new(vec![0.0, 3.0]).unwrap();
    assert_eq!(apply_rule(&z, &rule).unwrap(), (Label::Anomaly, vec![1]));
}
