//! Logistic detector over summary features and the hybrid filter pipeline.
//!
//! In the hybrid pipeline a rule-aware filter (optionally informed by the
//! sensors a model cited) picks the sensors whose abs_z values feed the
//! detector.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parser::ParsedVerdict;
use crate::telemetry::{Label, ZScoreVector};

pub const FEATURE_COUNT: usize = 6;
pub const MODEL_SCHEMA_VERSION: u32 = 1;
const FALLBACK_TOP: usize = 3;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("empty sensor selection")]
    EmptySelection,
    #[error("sensor id {id} out of range for {len} sensors")]
    InvalidSensor { id: usize, len: usize },
    #[error("training data contains a single class")]
    SingleClassData,
    #[error("training loss diverged at epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error("shape mismatch: model expects {expected} features, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("model format error: {0}")]
    Format(String),
}

/// `[max, second max, third max, mean, count >= 2.0, count >= 2.5]` of abs_z
/// over the selected sensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn extract_features(
    z: &ZScoreVector,
    selected_ids: Option<&[usize]>,
) -> Result<FeatureVector, DetectorError> {
    if z.is_empty() {
        return Err(DetectorError::EmptySelection);
    }
    let all = z.as_slice();
    let mut values: Vec<f64> = match selected_ids {
        None => all.to_vec(),
        Some([]) => return Err(DetectorError::EmptySelection),
        Some(ids) => ids
            .iter()
            .map(|&id| {
                all.get(id).copied().ok_or(DetectorError::InvalidSensor {
                    id,
                    len: all.len(),
                })
            })
            .collect::<Result<_, _>>()?,
    };
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let above_2 = values.iter().filter(|&&v| v >= 2.0).count() as f64;
    let above_25 = values.iter().filter(|&&v| v >= 2.5).count() as f64;
    values.sort_unstable_by(|a, b| b.total_cmp(a));
    let nth = |i: usize| values.get(i).copied().unwrap_or(0.0);
    Ok(FeatureVector(vec![nth(0), nth(1), nth(2), mean, above_2, above_25]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 2000,
            l2: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub final_loss: f64,
}

/// `p = sigmoid(w . f + b)` on raw features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub l2: f64,
    pub training_meta: Option<TrainingMeta>,
}

impl LogisticModel {
    pub fn zeros(features: usize) -> Self {
        Self {
            weights: vec![0.0; features],
            bias: 0.0,
            l2: 0.0,
            training_meta: None,
        }
    }

    pub fn probability(&self, f: &FeatureVector) -> Result<f64, DetectorError> {
        if f.0.len() != self.weights.len() {
            return Err(DetectorError::ShapeMismatch {
                expected: self.weights.len(),
                actual: f.0.len(),
            });
        }
        Ok(sigmoid(dot(&self.weights, &f.0) + self.bias))
    }
}

pub fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

fn softplus(s: f64) -> f64 {
    s.max(0.0) + (-s.abs()).exp().ln_1p()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean logistic loss plus `l2 / 2 * |w|^2` (bias unpenalized), and its
/// gradient with respect to `(w, b)`.
pub fn loss_and_gradient(
    weights: &[f64],
    bias: f64,
    l2: f64,
    xs: &[Vec<f64>],
    ys: &[f64],
) -> (f64, Vec<f64>, f64) {
    let n = xs.len() as f64;
    let mut loss = 0.0;
    let mut grad_w = vec![0.0; weights.len()];
    let mut grad_b = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let s = dot(weights, x) + bias;
        loss += softplus(s) - y * s;
        let r = sigmoid(s) - y;
        for (g, xi) in grad_w.iter_mut().zip(x) {
            *g += r * xi;
        }
        grad_b += r;
    }
    loss /= n;
    grad_b /= n;
    for (g, w) in grad_w.iter_mut().zip(weights) {
        *g = *g / n + l2 * w;
    }
    loss += 0.5 * l2 * dot(weights, weights);
    (loss, grad_w, grad_b)
}

/// Per-feature centering and scaling fitted on the training set.
#[derive(Debug, Clone)]
struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(xs: &[&FeatureVector]) -> Self {
        let d = xs[0].0.len();
        let n = xs.len() as f64;
        let mut mean = vec![0.0; d];
        for x in xs {
            for (m, v) in mean.iter_mut().zip(&x.0) {
                *m += v / n;
            }
        }
        let mut scale = vec![0.0; d];
        for x in xs {
            for ((s, v), m) in scale.iter_mut().zip(&x.0).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let scale = scale
            .into_iter()
            .map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 })
            .collect();
        Self { mean, scale }
    }

    fn apply(&self, x: &FeatureVector) -> Vec<f64> {
        x.0.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

/// Trains and also returns the objective after every epoch.
pub fn train_detector_with_history(
    samples: &[(FeatureVector, Label)],
    hyper: &TrainHyper,
) -> Result<(LogisticModel, Vec<f64>), DetectorError> {
    if !(hyper.learning_rate > 0.0 && hyper.learning_rate.is_finite()) {
        return Err(DetectorError::InvalidHyper("learning rate must be positive".into()));
    }
    if !(hyper.l2 >= 0.0 && hyper.l2.is_finite()) {
        return Err(DetectorError::InvalidHyper("l2 must be non-negative".into()));
    }
    let has = |l| samples.iter().any(|(_, label)| *label == l);
    if !(has(Label::Nominal) && has(Label::Anomaly)) {
        return Err(DetectorError::SingleClassData);
    }
    let d = samples[0].0 .0.len();
    if let Some((f, _)) = samples.iter().find(|(f, _)| f.0.len() != d) {
        return Err(DetectorError::ShapeMismatch {
            expected: d,
            actual: f.0.len(),
        });
    }

    let refs: Vec<&FeatureVector> = samples.iter().map(|(f, _)| f).collect();
    let standardizer = Standardizer::fit(&refs);
    let xs: Vec<Vec<f64>> = refs.iter().map(|f| standardizer.apply(f)).collect();
    let ys: Vec<f64> = samples
        .iter()
        .map(|(_, l)| if *l == Label::Anomaly { 1.0 } else { 0.0 })
        .collect();

    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut history = Vec::with_capacity(hyper.epochs + 1);
    let (mut loss, mut gw, mut gb) = loss_and_gradient(&w, b, hyper.l2, &xs, &ys);
    history.push(loss);
    for epoch in 0..hyper.epochs {
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= hyper.learning_rate * g;
        }
        b -= hyper.learning_rate * gb;
        (loss, gw, gb) = loss_and_gradient(&w, b, hyper.l2, &xs, &ys);
        if !loss.is_finite() {
            return Err(DetectorError::DivergedLoss { epoch });
        }
        history.push(loss);
    }

    // Fold the standardization into raw-feature weights.
    let weights: Vec<f64> = w
        .iter()
        .zip(&standardizer.scale)
        .map(|(wi, s)| wi / s)
        .collect();
    let bias = b - dot(&weights, &standardizer.mean);
    Ok((
        LogisticModel {
            weights,
            bias,
            l2: hyper.l2,
            training_meta: Some(TrainingMeta {
                epochs: hyper.epochs,
                learning_rate: hyper.learning_rate,
                seed: hyper.seed,
                final_loss: loss,
            }),
        },
        history,
    ))
}

/// Full-batch gradient descent from zero weights on standardized features.
pub fn train_detector(
    samples: &[(FeatureVector, Label)],
    hyper: &TrainHyper,
) -> Result<LogisticModel, DetectorError> {
    train_detector_with_history(samples, hyper).map(|(m, _)| m)
}

/// Anomaly iff probability >= threshold.
pub fn predict(
    model: &LogisticModel,
    f: &FeatureVector,
    threshold: f64,
) -> Result<(Label, f64), DetectorError> {
    let p = model.probability(f)?;
    let label = if p >= threshold {
        Label::Anomaly
    } else {
        Label::Nominal
    };
    Ok((label, p))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HybridConfig {
    pub filter_threshold: f64,
    pub max_selected: usize,
    pub decision_threshold: f64,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self {
            filter_threshold: 2.5,
            max_selected: 16,
            decision_threshold: 0.5,
        }
    }
}

impl HybridConfig {
    pub fn validate(&self, tau: f64) -> Result<(), DetectorError> {
        if self.filter_threshold.is_nan() || self.filter_threshold <= 0.0 {
            return Err(DetectorError::InvalidHyper("filter threshold must be positive".into()));
        }
        if self.max_selected == 0 {
            return Err(DetectorError::InvalidHyper("max_selected must be positive".into()));
        }
        if !(self.decision_threshold > 0.0 && self.decision_threshold < 1.0) {
            return Err(DetectorError::InvalidHyper(
                "decision threshold must lie in (0, 1)".into(),
            ));
        }
        if self.filter_threshold > tau {
            log::warn!(
                "filter threshold {} is above the rule threshold {tau}; near-threshold sensors will be dropped",
                self.filter_threshold
            );
        }
        Ok(())
    }
}

fn by_score_desc(abs: &[f64]) -> impl Fn(&usize, &usize) -> std::cmp::Ordering + '_ {
    move |a, b| abs[*b].total_cmp(&abs[*a]).then(a.cmp(b))
}

/// Sensors at or above the filter threshold plus any cited by the verdict,
/// capped at `max_selected` by descending abs_z. Falls back to the top three
/// sensors when nothing qualifies. Returned ids are ascending.
pub fn rule_filter(z: &ZScoreVector, cfg: &HybridConfig, verdict: Option<&ParsedVerdict>) -> Vec<usize> {
    let abs = z.as_slice();
    let mut selected: Vec<usize> = (0..abs.len())
        .filter(|&i| abs[i] >= cfg.filter_threshold)
        .collect();
    if let Some(v) = verdict {
        selected.extend(v.cited_sensor_ids.iter().copied().filter(|&id| id < abs.len()));
        selected.sort_unstable();
        selected.dedup();
    }
    if selected.is_empty() {
        let mut all: Vec<usize> = (0..abs.len()).collect();
        all.sort_by(by_score_desc(abs));
        all.truncate(FALLBACK_TOP);
        selected = all;
    } else if selected.len() > cfg.max_selected {
        selected.sort_by(by_score_desc(abs));
        selected.truncate(cfg.max_selected);
    }
    selected.sort_unstable();
    selected
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridPrediction {
    pub label: Label,
    pub probability: f64,
    pub selected_ids: Vec<usize>,
}

pub fn hybrid_predict(
    z: &ZScoreVector,
    model: &LogisticModel,
    cfg: &HybridConfig,
    verdict: Option<&ParsedVerdict>,
) -> Result<HybridPrediction, DetectorError> {
    let selected_ids = rule_filter(z, cfg, verdict);
    let f = extract_features(z, Some(&selected_ids))?;
    let (label, probability) = predict(model, &f, cfg.decision_threshold)?;
    Ok(HybridPrediction {
        label,
        probability,
        selected_ids,
    })
}

/// Which sensors the detector's features were computed over.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum FeatureConfig {
    AllSensors,
    Filtered(HybridConfig),
}

impl FeatureConfig {
    pub fn features(&self, z: &ZScoreVector, verdict: Option<&ParsedVerdict>) -> Result<FeatureVector, DetectorError> {
        match self {
            FeatureConfig::AllSensors => extract_features(z, None),
            FeatureConfig::Filtered(cfg) => extract_features(z, Some(&rule_filter(z, cfg, verdict))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: u32,
    pub feature_config: FeatureConfig,
    pub hyper: TrainHyper,
    pub model: LogisticModel,
}

impl ModelFile {
    pub fn new(feature_config: FeatureConfig, hyper: TrainHyper, model: LogisticModel) -> Self {
        Self {
            schema_version: MODEL_SCHEMA_VERSION,
            feature_config,
            hyper,
            model,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), DetectorError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| DetectorError::Format(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DetectorError> {
        let text = fs::read_to_string(path)?;
        let m: ModelFile = serde_json::from_str(&text).map_err(|e| DetectorError::Format(e.to_string()))?;
        if m.schema_version != MODEL_SCHEMA_VERSION {
            return Err(DetectorError::Format(format!(
                "unsupported schema_version {}",
                m.schema_version
            )));
        }
        if m.model.weights.len() != FEATURE_COUNT {
            return Err(DetectorError::Format(format!(
                "expected {FEATURE_COUNT} weights, found {}",
                m.model.weights.len()
            )));
        }
        Ok(m)
    }
}
