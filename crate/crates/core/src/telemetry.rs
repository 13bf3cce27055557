//! Telemetry types, per-sensor statistics, z-score normalization and the
//! three-sigma rule.
//!
//! The rule implemented here is the ground truth for every other module:
//! datasets are labeled with it, the simulated responder applies it, and the
//! harness scores against it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TelemetryError {
    #[error("empty input")]
    EmptyInput,
    #[error("shape mismatch: expected {expected} values, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("non-finite value at sensor index {index}")]
    NonFinite { index: usize },
    #[error("invalid rule config: {0}")]
    InvalidRule(String),
}

/// Physical measurement kind of a sensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorKind {
    ActiveInjection,
    ReactiveInjection,
    ActiveFlow,
    ReactiveFlow,
    VoltageMagnitude,
}

impl SensorKind {
    pub const ALL: [SensorKind; 5] = [
        SensorKind::ActiveInjection,
        SensorKind::ReactiveInjection,
        SensorKind::ActiveFlow,
        SensorKind::ReactiveFlow,
        SensorKind::VoltageMagnitude,
    ];

    pub fn symbol(self) -> &'static str {
        match self {
            SensorKind::ActiveInjection => "P",
            SensorKind::ReactiveInjection => "Q",
            SensorKind::ActiveFlow => "Pf",
            SensorKind::ReactiveFlow => "Qf",
            SensorKind::VoltageMagnitude => "V",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorMeta {
    pub id: usize,
    pub name: String,
    pub kind: SensorKind,
}

impl SensorMeta {
    /// Display names are 1-based: sensor id 0 is shown as "Sensor 1".
    pub fn display_name(id: usize) -> String {
        format!("Sensor {}", id + 1)
    }
}

/// Builds a contiguous sensor set of `count` sensors, splitting ids into five
/// consecutive blocks, one per measurement kind.
pub fn sensor_layout(count: usize) -> Vec<SensorMeta> {
    (0..count)
        .map(|id| SensorMeta {
            id,
            name: SensorMeta::display_name(id),
            kind: SensorKind::ALL[(id * SensorKind::ALL.len()) / count.max(1)],
        })
        .collect()
}

/// One multivariate telemetry sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Snapshot {
    values: Vec<f64>,
}

impl Snapshot {
    pub fn new(values: Vec<f64>) -> Result<Self, TelemetryError> {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(TelemetryError::NonFinite { index });
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

/// Per-sensor nominal statistics.
///
/// `stds` are population standard deviations (divisor N, not N - 1), the
/// usual control-chart convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorStats {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub sample_count: usize,
}

impl SensorStats {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }
}

/// Absolute z-scores, one per sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ZScoreVector {
    abs_z: Vec<f64>,
}

impl ZScoreVector {
    pub fn new(abs_z: Vec<f64>) -> Result<Self, TelemetryError> {
        if let Some(index) = abs_z.iter().position(|z| !z.is_finite() || *z < 0.0) {
            return Err(TelemetryError::NonFinite { index });
        }
        Ok(Self { abs_z })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.abs_z
    }

    pub fn len(&self) -> usize {
        self.abs_z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.abs_z.is_empty()
    }

    pub fn max(&self) -> Option<f64> {
        self.abs_z.iter().copied().reduce(f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuleConfig {
    pub tau: f64,
    pub epsilon: f64,
}

impl Default for RuleConfig {
    fn default() -> Self {
        Self {
            tau: 3.0,
            epsilon: 1e-9,
        }
    }
}

impl RuleConfig {
    pub fn new(tau: f64, epsilon: f64) -> Result<Self, TelemetryError> {
        let cfg = Self { tau, epsilon };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TelemetryError> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(TelemetryError::InvalidRule(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(TelemetryError::InvalidRule(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// Threshold as it appears in prompt text, e.g. `3.0`.
    pub fn tau_text(&self) -> String {
        format!("{:?}", self.tau)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "normal")]
    Nominal,
    #[serde(rename = "anomaly")]
    Anomaly,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Nominal => "normal",
            Label::Anomaly => "anomaly",
        }
    }

    pub fn opposite(self) -> Label {
        match self {
            Label::Nominal => Label::Anomaly,
            Label::Anomaly => Label::Nominal,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normal" => Ok(Label::Nominal),
            "anomaly" => Ok(Label::Anomaly),
            other => Err(format!("unknown label '{other}'")),
        }
    }
}

/// Fits per-sensor mean and population standard deviation.
pub fn estimate_stats(samples: &[Snapshot]) -> Result<SensorStats, TelemetryError> {
    let first = samples.first().ok_or(TelemetryError::EmptyInput)?;
    let width = first.len();
    if width == 0 {
        return Err(TelemetryError::EmptyInput);
    }
    for s in samples {
        if s.len() != width {
            return Err(TelemetryError::ShapeMismatch {
                expected: width,
                actual: s.len(),
            });
        }
    }

    // Welford per sensor keeps the variance accurate for large offsets.
    let mut means = vec![0.0; width];
    let mut m2 = vec![0.0; width];
    for (n, s) in samples.iter().enumerate() {
        let count = (n + 1) as f64;
        for (i, &x) in s.values().iter().enumerate() {
            let delta = x - means[i];
            means[i] += delta / count;
            m2[i] += delta * (x - means[i]);
        }
    }
    let n = samples.len() as f64;
    let stds = m2.iter().map(|v| (v / n).max(0.0).sqrt()).collect();

    Ok(SensorStats {
        means,
        stds,
        sample_count: samples.len(),
    })
}

/// Signed z-scores `(x - mean) / max(std, epsilon)`.
pub fn signed_z(
    x: &Snapshot,
    stats: &SensorStats,
    cfg: &RuleConfig,
) -> Result<Vec<f64>, TelemetryError> {
    if x.len() != stats.len() || stats.stds.len() != stats.means.len() {
        return Err(TelemetryError::ShapeMismatch {
            expected: stats.len(),
            actual: x.len(),
        });
    }
    Ok(x.values()
        .iter()
        .zip(stats.means.iter().zip(&stats.stds))
        .map(|(&v, (&mu, &sigma))| (v - mu) / sigma.max(cfg.epsilon))
        .collect())
}

pub fn normalize(
    x: &Snapshot,
    stats: &SensorStats,
    cfg: &RuleConfig,
) -> Result<ZScoreVector, TelemetryError> {
    let abs_z = signed_z(x, stats, cfg)?
        .into_iter()
        .map(f64::abs)
        .collect::<Vec<_>>();
    ZScoreVector::new(abs_z)
}

/// Boundary inclusive: `abs_z == tau` flags.
pub fn flag_sensor(abs_z: f64, cfg: &RuleConfig) -> bool {
    abs_z >= cfg.tau
}

/// Sample-level verdict plus the ascending list of flagged sensor ids.
pub fn apply_rule(
    z: &ZScoreVector,
    cfg: &RuleConfig,
) -> Result<(Label, Vec<usize>), TelemetryError> {
    if z.is_empty() {
        return Err(TelemetryError::EmptyInput);
    }
    let flagged: Vec<usize> = z
        .as_slice()
        .iter()
        .enumerate()
        .filter(|(_, &v)| flag_sensor(v, cfg))
        .map(|(i, _)| i)
        .collect();
    let label = if flagged.is_empty() {
        Label::Nominal
    } else {
        Label::Anomaly
    };
    Ok((label, flagged))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn snap(v: &[f64]) -> Snapshot {
        Snapshot::new(v.to_vec()).unwrap()
    }

    fn stats(means: &[f64], stds: &[f64]) -> SensorStats {
        SensorStats {
            means: means.to_vec(),
            stds: stds.to_vec(),
            sample_count: 1,
        }
    }

    #[test]
    fn constant_series_has_zero_std() {
        let s = estimate_stats(&[snap(&[1.0, 1.0]), snap(&[1.0, 1.0]), snap(&[1.0, 1.0])]).unwrap();
        assert_eq!(s.means, vec![1.0, 1.0]);
        assert_eq!(s.stds, vec![0.0, 0.0]);
        assert_eq!(s.sample_count, 3);
    }

    #[test]
    fn population_std_of_two_points() {
        let s = estimate_stats(&[snap(&[0.0]), snap(&[2.0])]).unwrap();
        assert_eq!(s.means, vec![1.0]);
        assert_eq!(s.stds, vec![1.0]);
    }

    #[test]
    fn estimate_stats_errors() {
        assert_eq!(estimate_stats(&[]), Err(TelemetryError::EmptyInput));
        assert_eq!(
            estimate_stats(&[snap(&[1.0, 2.0]), snap(&[1.0])]),
            Err(TelemetryError::ShapeMismatch {
                expected: 2,
                actual: 1
            })
        );
    }

    #[test]
    fn snapshot_rejects_non_finite() {
        assert_eq!(
            Snapshot::new(vec![1.0, f64::NAN]),
            Err(TelemetryError::NonFinite { index: 1 })
        );
        assert!(Snapshot::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn normalize_examples() {
        let cfg = RuleConfig::default();
        let z = normalize(&snap(&[1.0]), &stats(&[1.0], &[0.1]), &cfg).unwrap();
        assert_eq!(z.as_slice(), &[0.0]);

        let z = normalize(&snap(&[1.35]), &stats(&[1.0], &[0.1]), &cfg).unwrap();
        assert_abs_diff_eq!(z.as_slice()[0], 3.5, epsilon = 1e-12);

        let z = normalize(&snap(&[5.0]), &stats(&[5.0], &[0.0]), &cfg).unwrap();
        assert_eq!(z.as_slice(), &[0.0]);
    }

    #[test]
    fn normalize_shape_mismatch() {
        let err = normalize(&snap(&[1.0, 2.0]), &stats(&[1.0], &[0.1]), &RuleConfig::default());
        assert!(matches!(err, Err(TelemetryError::ShapeMismatch { .. })));
    }

    #[test]
    fn epsilon_guard_blows_up_tiny_deviation() {
        let z = normalize(&snap(&[1.0]), &stats(&[0.0], &[0.0]), &RuleConfig::default()).unwrap();
        assert_abs_diff_eq!(z.as_slice()[0], 1e9, epsilon = 1e-3);
    }

    #[test]
    fn flag_boundary_is_inclusive() {
        let cfg = RuleConfig::default();
        assert!(flag_sensor(3.0, &cfg));
        assert!(!flag_sensor(2.999, &cfg));
        assert!(flag_sensor(f64::abs(-3.2), &cfg));
    }

    #[test]
    fn apply_rule_examples() {
        let cfg = RuleConfig::default();
        let mut v = vec![1.0; 255];
        let z = ZScoreVector::new(v.clone()).unwrap();
        assert_eq!(apply_rule(&z, &cfg).unwrap(), (Label::Nominal, vec![]));

        v[254] = 3.5;
        let z = ZScoreVector::new(v).unwrap();
        assert_eq!(apply_rule(&z, &cfg).unwrap(), (Label::Anomaly, vec![254]));

        let empty = ZScoreVector::new(vec![]).unwrap();
        assert_eq!(apply_rule(&empty, &cfg), Err(TelemetryError::EmptyInput));
    }

    #[test]
    fn rule_config_validation() {
        assert!(RuleConfig::new(0.0, 1e-9).is_err());
        assert!(RuleConfig::new(3.0, 0.0).is_err());
        assert!(RuleConfig::new(3.0, 1e-9).is_ok());
        assert_eq!(RuleConfig::default().tau_text(), "3.0");
    }

    #[test]
    fn label_text_forms() {
        assert_eq!(Label::Nominal.to_string(), "normal");
        assert_eq!("Anomaly".parse::<Label>().unwrap(), Label::Anomaly);
        assert_eq!(serde_json::to_string(&Label::Nominal).unwrap(), "\"normal\"");
    }

    #[test]
    fn layout_is_contiguous_and_covers_all_kinds() {
        let metas = sensor_layout(255);
        assert_eq!(metas.len(), 255);
        assert!(metas.iter().enumerate().all(|(i, m)| m.id == i));
        assert_eq!(metas[254].name, "Sensor 255");
        for kind in SensorKind::ALL {
            assert!(metas.iter().any(|m| m.kind == kind));
        }
        assert_eq!(metas[0].kind, SensorKind::ActiveInjection);
        assert_eq!(metas[254].kind, SensorKind::VoltageMagnitude);
    }

    proptest! {
        #[test]
        fn verdict_is_scale_invariant(
            devs in prop::collection::vec(-5.0f64..5.0, 1..20),
            c in 0.01f64..100.0,
        ) {
            let cfg = RuleConfig::default();
            let n = devs.len();
            let means: Vec<f64> = (0..n).map(|i| 10.0 + i as f64).collect();
            let stds: Vec<f64> = (0..n).map(|i| 0.5 + 0.1 * i as f64).collect();
            let x: Vec<f64> = (0..n).map(|i| means[i] + devs[i] * stds[i]).collect();
            let xs: Vec<f64> = (0..n).map(|i| means[i] + c * (x[i] - means[i])).collect();
            let ss: Vec<f64> = stds.iter().map(|s| c * s).collect();

            let z1 = normalize(&snap(&x), &stats(&means, &stds), &cfg).unwrap();
            let z2 = normalize(&snap(&xs), &stats(&means, &ss), &cfg).unwrap();
            for (a, b) in z1.as_slice().iter().zip(z2.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
            let d1 = apply_rule(&z1, &cfg).unwrap();
            let d2 = apply_rule(&z2, &cfg).unwrap();
            // Scaling may move a value sitting within rounding of tau; skip those.
            let near_boundary = z1.as_slice().iter().any(|z| (z - cfg.tau).abs() < 1e-9);
            if !near_boundary {
                prop_assert_eq!(d1, d2);
            }
        }

        #[test]
        fn raising_a_score_never_clears_an_anomaly(
            z in prop::collection::vec(0.0f64..6.0, 1..40),
            idx in any::<prop::sample::Index>(),
            bump in 0.0f64..10.0,
        ) {
            let cfg = RuleConfig::default();
            let before = apply_rule(&ZScoreVector::new(z.clone()).unwrap(), &cfg).unwrap().0;
            let mut raised = z;
            let i = idx.index(raised.len());
            raised[i] += bump;
            let after = apply_rule(&ZScoreVector::new(raised).unwrap(), &cfg).unwrap().0;
            prop_assert!(!(before == Label::Anomaly && after == Label::Nominal));
        }

        #[test]
        fn fitted_set_standardizes(
            rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 3), 2..40),
        ) {
            let cfg = RuleConfig::default();
            let snaps: Vec<Snapshot> = rows.iter().map(|r| snap(r)).collect();
            let st = estimate_stats(&snaps).unwrap();
            let zs: Vec<Vec<f64>> = snaps.iter().map(|s| signed_z(s, &st, &cfg).unwrap()).collect();
            let n = zs.len() as f64;
            for i in 0..3 {
                if st.stds[i] <= cfg.epsilon * 1e3 {
                    continue;
                }
                let mean = zs.iter().map(|z| z[i]).sum::<f64>() / n;
                let var = zs.iter().map(|z| (z[i] - mean).powi(2)).sum::<f64>() / n;
                prop_assert!(mean.abs() < 1e-9);
                prop_assert!((var.sqrt() - 1.0).abs() < 1e-9);
            }
        }
    }
}
