//! Seeded synthetic telemetry: nominal sampling, multiplicative anomaly
//! injection, rule-derived labels and class-balanced splits.
//!
//! Dataset files are JSON Lines. The first line is a header carrying the
//! generation manifest and the fitted statistics; every following line is one
//! labeled sample tagged with its split.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::telemetry::{
    apply_rule, estimate_stats, normalize, sensor_layout, Label, RuleConfig, SensorKind,
    SensorMeta, SensorStats, Snapshot, TelemetryError,
};

pub const DATASET_SCHEMA_VERSION: u32 = 1;

const STREAM_MODEL: u64 = 0;
const STREAM_POOL: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_VALIDATION: u64 = 3;
const STREAM_TEST: u64 = 4;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid injection spec: {0}")]
    InvalidInjection(String),
    #[error("cannot inject into {requested} sensors, snapshot has {available}")]
    TooManySensors { requested: usize, available: usize },
    #[error(
        "{split} split: could not fill the {label} quota ({filled}/{quota}) within {attempts} \
         attempts; the injection is too weak to cross the rule threshold, try a larger deviation"
    )]
    QuotaUnreachable {
        split: SplitName,
        label: Label,
        quota: usize,
        filled: usize,
        attempts: usize,
    },
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset format error: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl std::fmt::Display for SplitName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Validation => "validation",
            SplitName::Test => "test",
        })
    }
}

/// Gaussian stand-in for power-flow operating points.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticModel {
    pub sensor_metas: Vec<SensorMeta>,
    pub base_means: Vec<f64>,
    pub base_stds: Vec<f64>,
    pub seed: u64,
}

impl SyntheticModel {
    /// Kind-scaled operating point: signed injections and flows in the tens,
    /// voltages near 1.0 p.u. Each sensor gets its own coefficient of
    /// variation so a fixed relative injection crosses the threshold on some
    /// sensors and not on others.
    pub fn new(sensor_count: usize, seed: u64) -> Result<Self, DatagenError> {
        if sensor_count == 0 {
            return Err(DatagenError::InvalidModel("sensor count must be positive".into()));
        }
        let metas = sensor_layout(sensor_count);
        let mut rng = stream(seed, STREAM_MODEL);
        let mut base_means = Vec::with_capacity(sensor_count);
        let mut base_stds = Vec::with_capacity(sensor_count);
        for meta in &metas {
            let (lo, hi, cv_lo, cv_hi, signed) = match meta.kind {
                SensorKind::ActiveInjection => (10.0, 120.0, 0.01, 0.06, true),
                SensorKind::ReactiveInjection => (5.0, 40.0, 0.01, 0.06, true),
                SensorKind::ActiveFlow => (20.0, 200.0, 0.01, 0.06, true),
                SensorKind::ReactiveFlow => (5.0, 50.0, 0.01, 0.06, true),
                SensorKind::VoltageMagnitude => (0.95, 1.05, 0.005, 0.02, false),
            };
            let magnitude: f64 = rng.random_range(lo..hi);
            let cv: f64 = rng.random_range(cv_lo..cv_hi);
            let sign = if signed && rng.random_bool(0.5) { -1.0 } else { 1.0 };
            base_means.push(sign * magnitude);
            base_stds.push(cv * magnitude);
        }
        Ok(Self {
            sensor_metas: metas,
            base_means,
            base_stds,
            seed,
        })
    }

    pub fn from_parts(
        base_means: Vec<f64>,
        base_stds: Vec<f64>,
        seed: u64,
    ) -> Result<Self, DatagenError> {
        let model = Self {
            sensor_metas: sensor_layout(base_means.len()),
            base_means,
            base_stds,
            seed,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn sensor_count(&self) -> usize {
        self.sensor_metas.len()
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        let n = self.sensor_metas.len();
        if n == 0 || self.base_means.len() != n || self.base_stds.len() != n {
            return Err(DatagenError::InvalidModel(format!(
                "expected {n} means and stds, got {} and {}",
                self.base_means.len(),
                self.base_stds.len()
            )));
        }
        if self.base_stds.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(DatagenError::InvalidModel("base stds must be positive".into()));
        }
        if self.base_means.iter().any(|m| !m.is_finite()) {
            return Err(DatagenError::InvalidModel("base means must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignPolicy {
    #[serde(rename = "random")]
    RandomSign,
    #[serde(rename = "up")]
    AlwaysUp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InjectionSpec {
    #[serde(rename = "fraction")]
    pub deviation_fraction: f64,
    #[serde(rename = "k")]
    pub sensors_per_sample: usize,
    #[serde(rename = "sign")]
    pub sign_policy: SignPolicy,
}

impl Default for InjectionSpec {
    fn default() -> Self {
        Self {
            deviation_fraction: 0.15,
            sensors_per_sample: 3,
            sign_policy: SignPolicy::RandomSign,
        }
    }
}

impl InjectionSpec {
    pub fn validate(&self, sensor_count: usize) -> Result<(), DatagenError> {
        if !(self.deviation_fraction > 0.0 && self.deviation_fraction < 1.0) {
            return Err(DatagenError::InvalidInjection(format!(
                "deviation fraction must lie in (0, 1), got {}",
                self.deviation_fraction
            )));
        }
        if self.sensors_per_sample > sensor_count {
            return Err(DatagenError::TooManySensors {
                requested: self.sensors_per_sample,
                available: sensor_count,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub snapshot: Snapshot,
    pub label: Label,
    pub injected_ids: Vec<usize>,
    pub flagged_ids: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassQuota {
    pub nominal: usize,
    pub anomaly: usize,
}

impl ClassQuota {
    pub fn total(&self) -> usize {
        self.nominal + self.anomaly
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: ClassQuota,
    pub validation: ClassQuota,
    pub test: ClassQuota,
}

impl SplitCounts {
    /// Equal class quotas of the given sizes per split.
    pub fn balanced(train: usize, validation: usize, test: usize) -> Self {
        let q = |n| ClassQuota {
            nominal: n,
            anomaly: n,
        };
        Self {
            train: q(train),
            validation: q(validation),
            test: q(test),
        }
    }
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            train: ClassQuota {
                nominal: 600,
                anomaly: 600,
            },
            validation: ClassQuota {
                nominal: 100,
                anomaly: 100,
            },
            test: ClassQuota {
                nominal: 100,
                anomaly: 100,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationOptions {
    /// Nominal snapshots used only to fit the sensor statistics.
    pub pool_size: usize,
    /// Attempt cap per class quota, as a multiple of the quota.
    pub attempt_factor: usize,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        Self {
            pool_size: 2000,
            attempt_factor: 100,
        }
    }
}

/// Candidates discarded during rejection sampling.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionStats {
    /// Base snapshots that already violated the rule before any injection.
    pub base: usize,
    /// Injected candidates that stayed below the threshold.
    pub injection: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub sensor_count: usize,
    pub rule: RuleConfig,
    pub injection: InjectionSpec,
    pub counts: SplitCounts,
    pub options: GenerationOptions,
    pub rejections: RejectionStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<LabeledSample>,
    pub validation: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
    pub stats: SensorStats,
    pub rule: RuleConfig,
    pub manifest: DatasetManifest,
}

impl DatasetSplit {
    pub fn split(&self, name: SplitName) -> &[LabeledSample] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Validation => &self.validation,
            SplitName::Test => &self.test,
        }
    }

    pub fn sensor_metas(&self) -> Vec<SensorMeta> {
        sensor_layout(self.manifest.sensor_count)
    }

    /// SHA-256 of the serialized dataset, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl().as_bytes()))
    }

    pub fn to_jsonl(&self) -> String {
        let header = Header::from_split(self);
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for (name, samples) in [
            (SplitName::Train, &self.train),
            (SplitName::Validation, &self.validation),
            (SplitName::Test, &self.test),
        ] {
            for s in samples {
                let line = SampleLine {
                    split: name,
                    values: s.snapshot.values().to_vec(),
                    label: s.label,
                    injected: s.injected_ids.clone(),
                    flagged: s.flagged_ids.clone(),
                };
                out.push_str(&serde_json::to_string(&line).expect("sample serializes"));
                out.push('\n');
            }
        }
        out
    }
}

/// Hash of a snapshot's exact bit pattern, for leakage and disjointness checks.
pub fn snapshot_hash(s: &Snapshot) -> [u8; 32] {
    let mut h = Sha256::new();
    for v in s.values() {
        h.update(v.to_bits().to_le_bytes());
    }
    h.finalize().into()
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn sample_nominal<R: Rng + ?Sized>(model: &SyntheticModel, rng: &mut R) -> Snapshot {
    let values = model
        .base_means
        .iter()
        .zip(&model.base_stds)
        .map(|(&mu, &sigma)| {
            let g: f64 = rng.sample(StandardNormal);
            mu + sigma * g
        })
        .collect();
    Snapshot::new(values).expect("finite model yields finite snapshot")
}

/// Scales `sensors_per_sample` distinct, uniformly chosen readings by
/// `1 ± deviation_fraction`. Returned ids are ascending.
pub fn inject_anomaly<R: Rng + ?Sized>(
    x: &Snapshot,
    spec: &InjectionSpec,
    rng: &mut R,
) -> Result<(Snapshot, Vec<usize>), DatagenError> {
    if spec.sensors_per_sample > x.len() {
        return Err(DatagenError::TooManySensors {
            requested: spec.sensors_per_sample,
            available: x.len(),
        });
    }
    let mut ids = index::sample(rng, x.len(), spec.sensors_per_sample).into_vec();
    ids.sort_unstable();
    let mut out = x.clone();
    for &id in &ids {
        let sign = match spec.sign_policy {
            SignPolicy::AlwaysUp => 1.0,
            SignPolicy::RandomSign => {
                if rng.random_bool(0.5) {
                    1.0
                } else {
                    -1.0
                }
            }
        };
        out.values_mut()[id] *= 1.0 + sign * spec.deviation_fraction;
    }
    Ok((out, ids))
}

struct SplitBuilder<'a> {
    model: &'a SyntheticModel,
    spec: &'a InjectionSpec,
    stats: &'a SensorStats,
    rule: &'a RuleConfig,
    attempt_factor: usize,
    rejections: RejectionStats,
}

impl SplitBuilder<'_> {
    fn label(&self, x: &Snapshot) -> Result<(Label, Vec<usize>), DatagenError> {
        let z = normalize(x, self.stats, self.rule)?;
        Ok(apply_rule(&z, self.rule)?)
    }

    fn build(
        &mut self,
        split: SplitName,
        quota: ClassQuota,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<LabeledSample>, DatagenError> {
        let mut out = Vec::with_capacity(quota.total());
        for (label, want) in [(Label::Nominal, quota.nominal), (Label::Anomaly, quota.anomaly)] {
            let cap = self.attempt_factor.saturating_mul(want).max(1);
            let mut filled = 0;
            let mut attempts = 0;
            while filled < want {
                if attempts >= cap {
                    return Err(DatagenError::QuotaUnreachable {
                        split,
                        label,
                        quota: want,
                        filled,
                        attempts,
                    });
                }
                attempts += 1;
                // Anomalies are built on top of rule-nominal operating points.
                let base = sample_nominal(self.model, rng);
                let (base_label, base_flagged) = self.label(&base)?;
                if base_label != Label::Nominal {
                    self.rejections.base += 1;
                    continue;
                }
                let sample = match label {
                    Label::Nominal => LabeledSample {
                        snapshot: base,
                        label: Label::Nominal,
                        injected_ids: Vec::new(),
                        flagged_ids: base_flagged,
                    },
                    Label::Anomaly => {
                        let (x, injected) = inject_anomaly(&base, self.spec, rng)?;
                        let (got, flagged) = self.label(&x)?;
                        if got != Label::Anomaly {
                            self.rejections.injection += 1;
                            continue;
                        }
                        LabeledSample {
                            snapshot: x,
                            label: got,
                            injected_ids: injected,
                            flagged_ids: flagged,
                        }
                    }
                };
                out.push(sample);
                filled += 1;
            }
        }
        out.shuffle(rng);
        Ok(out)
    }
}

/// Fits statistics on a dedicated nominal pool, then fills every class quota
/// by rejection sampling against the rule.
pub fn generate_dataset(
    model: &SyntheticModel,
    spec: &InjectionSpec,
    counts: &SplitCounts,
    rule: &RuleConfig,
    options: &GenerationOptions,
) -> Result<DatasetSplit, DatagenError> {
    model.validate()?;
    spec.validate(model.sensor_count())?;
    rule.validate()?;
    if options.pool_size == 0 {
        return Err(DatagenError::InvalidModel("nominal pool must be non-empty".into()));
    }

    let mut pool_rng = stream(model.seed, STREAM_POOL);
    let pool: Vec<Snapshot> = (0..options.pool_size)
        .map(|_| sample_nominal(model, &mut pool_rng))
        .collect();
    let stats = estimate_stats(&pool)?;
    drop(pool);

    let mut builder = SplitBuilder {
        model,
        spec,
        stats: &stats,
        rule,
        attempt_factor: options.attempt_factor,
        rejections: RejectionStats::default(),
    };
    let train = builder.build(
        SplitName::Train,
        counts.train,
        &mut stream(model.seed, STREAM_TRAIN),
    )?;
    let validation = builder.build(
        SplitName::Validation,
        counts.validation,
        &mut stream(model.seed, STREAM_VALIDATION),
    )?;
    let test = builder.build(
        SplitName::Test,
        counts.test,
        &mut stream(model.seed, STREAM_TEST),
    )?;
    let rejections = builder.rejections;

    Ok(DatasetSplit {
        train,
        validation,
        test,
        manifest: DatasetManifest {
            schema_version: DATASET_SCHEMA_VERSION,
            seed: model.seed,
            sensor_count: model.sensor_count(),
            rule: *rule,
            injection: *spec,
            counts: *counts,
            options: *options,
            rejections,
        },
        stats,
        rule: *rule,
    })
}

/// Regenerates the nominal fitting pool of a model, for leakage audits.
pub fn nominal_pool(model: &SyntheticModel, pool_size: usize) -> Vec<Snapshot> {
    let mut rng = stream(model.seed, STREAM_POOL);
    (0..pool_size).map(|_| sample_nominal(model, &mut rng)).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    seed: u64,
    sensor_count: usize,
    rule: RuleConfig,
    means: Vec<f64>,
    stds: Vec<f64>,
    stats_sample_count: usize,
    injection: InjectionSpec,
    counts: SplitCounts,
    options: GenerationOptions,
    rejections: RejectionStats,
}

impl Header {
    fn from_split(d: &DatasetSplit) -> Self {
        let m = &d.manifest;
        Self {
            schema_version: m.schema_version,
            seed: m.seed,
            sensor_count: m.sensor_count,
            rule: d.rule,
            means: d.stats.means.clone(),
            stds: d.stats.stds.clone(),
            stats_sample_count: d.stats.sample_count,
            injection: m.injection,
            counts: m.counts,
            options: m.options,
            rejections: m.rejections,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleLine {
    split: SplitName,
    values: Vec<f64>,
    label: Label,
    injected: Vec<usize>,
    flagged: Vec<usize>,
}

pub fn write_dataset(split: &DatasetSplit, path: &Path) -> Result<(), DatagenError> {
    let mut f = fs::File::create(path)?;
    f.write_all(split.to_jsonl().as_bytes())?;
    f.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<DatasetSplit, DatagenError> {
    let f = fs::File::open(path)?;
    parse_dataset(BufReader::new(f))
}

pub fn parse_dataset<R: BufRead>(reader: R) -> Result<DatasetSplit, DatagenError> {
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| DatagenError::Format("missing header line".into()))??;
    let raw: serde_json::Value = serde_json::from_str(&header_line)
        .map_err(|e| DatagenError::Format(format!("header: {e}")))?;
    match raw.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(DATASET_SCHEMA_VERSION) => {}
        Some(v) => {
            return Err(DatagenError::Format(format!(
                "unsupported schema_version {v} (expected {DATASET_SCHEMA_VERSION})"
            )))
        }
        None => return Err(DatagenError::Format("header lacks schema_version".into())),
    }
    let header: Header =
        serde_json::from_value(raw).map_err(|e| DatagenError::Format(format!("header: {e}")))?;
    if header.means.len() != header.sensor_count || header.stds.len() != header.sensor_count {
        return Err(DatagenError::Format(
            "header statistics do not match sensor_count".into(),
        ));
    }

    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut test = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 2;
        let s: SampleLine = serde_json::from_str(&line)
            .map_err(|e| DatagenError::Format(format!("line {lineno}: {e}")))?;
        if s.values.len() != header.sensor_count {
            return Err(DatagenError::Format(format!(
                "line {lineno}: expected {} values, got {}",
                header.sensor_count,
                s.values.len()
            )));
        }
        let sample = LabeledSample {
            snapshot: Snapshot::new(s.values)
                .map_err(|e| DatagenError::Format(format!("line {lineno}: {e}")))?,
            label: s.label,
            injected_ids: s.injected,
            flagged_ids: s.flagged,
        };
        match s.split {
            SplitName::Train => train.push(sample),
            SplitName::Validation => validation.push(sample),
            SplitName::Test => test.push(sample),
        }
    }

    for (name, got, quota) in [
        (SplitName::Train, &train, header.counts.train),
        (SplitName::Validation, &validation, header.counts.validation),
        (SplitName::Test, &test, header.counts.test),
    ] {
        if got.len() != quota.total() {
            return Err(DatagenError::Format(format!(
                "{name} split has {} samples, header declares {}",
                got.len(),
                quota.total()
            )));
        }
    }

    Ok(DatasetSplit {
        train,
        validation,
        test,
        stats: SensorStats {
            means: header.means,
            stds: header.stds,
            sample_count: header.stats_sample_count,
        },
        rule: header.rule,
        manifest: DatasetManifest {
            schema_version: header.schema_version,
            seed: header.seed,
            sensor_count: header.sensor_count,
            rule: header.rule,
            injection: header.injection,
            counts: header.counts,
            options: header.options,
            rejections: header.rejections,
        },
    })
}

/// Every sample whose stored label or flagged set disagrees with the rule.
pub fn audit_labels(d: &DatasetSplit) -> Result<Vec<(SplitName, usize)>, DatagenError> {
    let mut bad = Vec::new();
    for name in [SplitName::Train, SplitName::Validation, SplitName::Test] {
        for (i, s) in d.split(name).iter().enumerate() {
            let z = normalize(&s.snapshot, &d.stats, &d.rule)?;
            let (label, flagged) = apply_rule(&z, &d.rule)?;
            if label != s.label || flagged != s.flagged_ids {
                bad.push((name, i));
            }
        }
    }
    Ok(bad)
}

/// True when no snapshot appears in more than one split (or twice in one).
pub fn splits_disjoint(d: &DatasetSplit) -> bool {
    let mut seen = HashSet::new();
    d.train
        .iter()
        .chain(&d.validation)
        .chain(&d.test)
        .all(|s| seen.insert(snapshot_hash(&s.snapshot)))
}
