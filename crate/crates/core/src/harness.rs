//! Experiment orchestration, metrics and reports.
//!
//! `evaluate_run` walks the test split, builds one prompt per sample, asks the
//! responder, parses the reply and scores it against the rule label stored in
//! the dataset. Work fans out over a fixed number of threads; results are
//! keyed by sample index so the output never depends on completion order.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{read_dataset, DatagenError, DatasetSplit, SplitName};
use crate::detector::{
    hybrid_predict, predict, train_detector, DetectorError, FeatureConfig, FeatureVector,
    HybridConfig, ModelFile, TrainHyper,
};
use crate::gateway::{
    ChatClient, EndpointConfig, GatewayError, Responder, SimulatedResponderConfig,
    TransportStatus,
};
use crate::parser::{check_rule_adherence, parse_response, AdherenceReport, ParseFailure};
use crate::promptkit::{
    attach_exemplars, compose_prompt, render_value_block, PromptError, PromptModules,
    PromptParadigm, ValueBlockStyle,
};
use crate::telemetry::{normalize, Label, TelemetryError};

const PUBLISHED_METRICS: &str = include_str!("../fixtures/published_metrics.toml");

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("dataset error: {0}")]
    Dataset(#[from] DatagenError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("prompt error: {0}")]
    Prompt(#[from] PromptError),
    #[error("responder failed on sample {index}: {source}")]
    Responder { index: usize, source: GatewayError },
    #[error("endpoint unavailable on sample {index}: {status:?}")]
    EndpointUnavailable { index: usize, status: TransportStatus },
    #[error("hybrid paradigm requires a trained detector model")]
    ModelMissing,
    #[error("detector error: {0}")]
    Detector(#[from] DetectorError),
    #[error("run has no samples")]
    EmptyRun,
    #[error("cannot compare runs over different datasets ({0} vs {1})")]
    DatasetMismatch(String, String),
    #[error("need at least two runs to compare, got {0}")]
    NotEnoughRuns(usize),
    #[error("stored run is inconsistent: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(String),
}

impl HarnessError {
    /// Process exit code: 2 config, 3 endpoint, 4 dataset.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::EndpointUnavailable { .. } => 3,
            HarnessError::Dataset(_) | HarnessError::DatasetMismatch(..) => 4,
            HarnessError::Responder {
                source: GatewayError::Client(_),
                ..
            } => 3,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Paradigm {
    ZeroShot,
    FewShot,
    Icl,
    Hybrid,
}

impl Paradigm {
    pub fn as_str(self) -> &'static str {
        match self {
            Paradigm::ZeroShot => "zero-shot",
            Paradigm::FewShot => "few-shot",
            Paradigm::Icl => "icl",
            Paradigm::Hybrid => "hybrid",
        }
    }

    /// Prompting mode used to query the model. The hybrid pipeline queries
    /// zero-shot and lets the detector decide.
    pub fn prompt_paradigm(self) -> PromptParadigm {
        match self {
            Paradigm::ZeroShot | Paradigm::Hybrid => PromptParadigm::ZeroShot,
            Paradigm::FewShot => PromptParadigm::FewShot,
            Paradigm::Icl => PromptParadigm::Icl,
        }
    }
}

impl FromStr for Paradigm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hybrid" => Ok(Paradigm::Hybrid),
            other => other.parse::<PromptParadigm>().map(|p| match p {
                PromptParadigm::ZeroShot => Paradigm::ZeroShot,
                PromptParadigm::FewShot => Paradigm::FewShot,
                PromptParadigm::Icl => Paradigm::Icl,
            }).map_err(|_| format!(
                "unknown paradigm '{other}' (expected zero-shot, few-shot, icl or hybrid)"
            )),
        }
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ResponderSpec {
    Endpoint(EndpointConfig),
    Simulated(SimulatedResponderConfig),
}

/// How replies without a usable label are scored.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnparseablePolicy {
    /// Own bucket: counts toward accuracy's denominator only.
    #[default]
    Separate,
    /// Scored as the wrong class (false negative or false positive).
    CountAsError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset_path: PathBuf,
    pub paradigm: Paradigm,
    pub style: ValueBlockStyle,
    pub responder: ResponderSpec,
    pub hybrid: Option<HybridConfig>,
    pub model_path: Option<PathBuf>,
    pub templates_dir: Option<PathBuf>,
    pub concurrency: usize,
    pub seed: u64,
    pub unparseable: UnparseablePolicy,
    /// Marks the endpoint as serving an adapted (e.g. fine-tuned) model.
    pub endpoint_adapted: bool,
}

impl RunConfig {
    pub fn new(dataset_path: impl Into<PathBuf>, responder: ResponderSpec) -> Self {
        Self {
            dataset_path: dataset_path.into(),
            paradigm: Paradigm::ZeroShot,
            style: ValueBlockStyle::default(),
            responder,
            hybrid: None,
            model_path: None,
            templates_dir: None,
            concurrency: 4,
            seed: 0,
            unparseable: UnparseablePolicy::Separate,
            endpoint_adapted: false,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.concurrency == 0 {
            return Err(HarnessError::Config("concurrency must be positive".into()));
        }
        if self.paradigm == Paradigm::Hybrid {
            if self.hybrid.is_none() {
                return Err(HarnessError::Config(
                    "hybrid paradigm requires a hybrid filter config".into(),
                ));
            }
            if self.model_path.is_none() {
                return Err(HarnessError::ModelMissing);
            }
        }
        match &self.responder {
            ResponderSpec::Endpoint(e) => e.validate(),
            ResponderSpec::Simulated(s) => s.validate(),
        }
        .map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Label recorded in the manifest.
    pub fn paradigm_label(&self) -> String {
        if self.endpoint_adapted {
            "endpoint-adapted".into()
        } else {
            self.paradigm.as_str().into()
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub unparseable: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn + self.unparseable
    }

    pub fn record(&mut self, truth: Label, predicted: Option<Label>, policy: UnparseablePolicy) {
        match (truth, predicted) {
            (Label::Anomaly, Some(Label::Anomaly)) => self.tp += 1,
            (Label::Nominal, Some(Label::Anomaly)) => self.fp += 1,
            (Label::Anomaly, Some(Label::Nominal)) => self.fn_ += 1,
            (Label::Nominal, Some(Label::Nominal)) => self.tn += 1,
            (truth, None) => match policy {
                UnparseablePolicy::Separate => self.unparseable += 1,
                UnparseablePolicy::CountAsError => match truth {
                    Label::Anomaly => self.fn_ += 1,
                    Label::Nominal => self.fp += 1,
                },
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub unparseable_rate: f64,
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    let den = precision + recall;
    if den > 0.0 {
        2.0 * precision * recall / den
    } else {
        0.0
    }
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<Metrics, HarnessError> {
    let total = cm.total();
    if total == 0 {
        return Err(HarnessError::EmptyRun);
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(cm.tp, cm.tp + cm.fp);
    let recall = ratio(cm.tp, cm.tp + cm.fn_);
    Ok(Metrics {
        accuracy: ratio(cm.tp + cm.tn, total),
        recall,
        precision,
        f1: f1_score(precision, recall),
        unparseable_rate: ratio(cm.unparseable, total),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub truth: Label,
    /// `None` when the reply carried no usable label.
    pub predicted: Option<Label>,
    pub prompt_tokens: usize,
    pub latency_secs: f64,
    pub verdict_error: Option<ParseFailure>,
    pub adherence: Option<AdherenceReport>,
    pub detector_probability: Option<f64>,
    pub selected_ids: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenStats {
    pub mean: f64,
    pub max: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdherenceSummary {
    pub parsed: usize,
    pub label_match_rate: f64,
    pub mean_citations_valid: f64,
    pub mean_citations_complete: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub paradigm: String,
    pub config: RunConfig,
    pub dataset_hash: String,
    pub started_at: String,
    pub finished_at: String,
    pub tool_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub manifest: RunManifest,
    pub records: Vec<SampleRecord>,
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
    pub token_stats: TokenStats,
    pub adherence: AdherenceSummary,
}

fn summarize(
    records: &[SampleRecord],
    policy: UnparseablePolicy,
) -> Result<(ConfusionMatrix, Metrics, TokenStats, AdherenceSummary), HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::EmptyRun);
    }
    let mut cm = ConfusionMatrix::default();
    for r in records {
        cm.record(r.truth, r.predicted, policy);
    }
    let metrics = compute_metrics(&cm)?;
    let token_stats = TokenStats {
        mean: records.iter().map(|r| r.prompt_tokens as f64).sum::<f64>() / records.len() as f64,
        max: records.iter().map(|r| r.prompt_tokens).max().unwrap_or(0),
    };
    let parsed: Vec<&AdherenceReport> = records.iter().filter_map(|r| r.adherence.as_ref()).collect();
    let n = parsed.len().max(1) as f64;
    let adherence = AdherenceSummary {
        parsed: parsed.len(),
        label_match_rate: parsed.iter().filter(|a| a.label_matches_rule).count() as f64 / n,
        mean_citations_valid: parsed.iter().map(|a| a.citations_valid).sum::<f64>() / n,
        mean_citations_complete: parsed.iter().map(|a| a.citations_complete).sum::<f64>() / n,
    };
    Ok((cm, metrics, token_stats, adherence))
}

impl RunResult {
    /// Recomputes confusion and metrics from the per-sample records.
    pub fn recompute(&self) -> Result<(ConfusionMatrix, Metrics), HarnessError> {
        let (cm, m, _, _) = summarize(&self.records, self.manifest.config.unparseable)?;
        Ok((cm, m))
    }

    pub fn check_consistency(&self) -> Result<(), HarnessError> {
        let (cm, m) = self.recompute()?;
        if cm != self.confusion {
            return Err(HarnessError::Inconsistent(format!(
                "confusion {:?} does not match records {:?}",
                self.confusion, cm
            )));
        }
        if m != self.metrics {
            return Err(HarnessError::Inconsistent(format!(
                "metrics {:?} do not match records {:?}",
                self.metrics, m
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| HarnessError::Serde(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    /// Loads a saved run and verifies its metrics against its records.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path)?;
        let r: RunResult = serde_json::from_str(&text).map_err(|e| HarnessError::Serde(e.to_string()))?;
        r.check_consistency()?;
        Ok(r)
    }

    /// Per-sample records as canonical JSON, for byte-level comparisons.
    pub fn records_json(&self) -> String {
        serde_json::to_string(&self.records).expect("records serialize")
    }
}

struct Pipeline<'a> {
    dataset: &'a DatasetSplit,
    modules: PromptModules,
    exemplars: Vec<crate::promptkit::Exemplar>,
    style: ValueBlockStyle,
    responder: &'a dyn Responder,
    detector: Option<(&'a ModelFile, HybridConfig)>,
}

impl Pipeline<'_> {
    fn run_sample(&self, index: usize) -> Result<SampleRecord, HarnessError> {
        let ds = self.dataset;
        let sample = &ds.test[index];
        let metas = ds.sensor_metas();
        let z = normalize(&sample.snapshot, &ds.stats, &ds.rule)?;
        let block = render_value_block(&sample.snapshot, &ds.stats, &z, &self.style, &metas)?;
        let prompt = compose_prompt(&self.modules, &self.exemplars, &block)?;
        let exchange = self
            .responder
            .respond(&prompt, index)
            .map_err(|source| HarnessError::Responder { index, source })?;
        match exchange.transport_status {
            TransportStatus::Ok | TransportStatus::ParseError => {}
            status => return Err(HarnessError::EndpointUnavailable { index, status }),
        }

        let verdict = parse_response(&exchange.reply_text);
        let adherence = verdict
            .as_ref()
            .ok()
            .map(|v| check_rule_adherence(v, &z, &ds.rule));
        let mut record = SampleRecord {
            index,
            truth: sample.label,
            predicted: verdict.as_ref().ok().map(|v| v.label),
            prompt_tokens: prompt.token_count,
            latency_secs: exchange.latency_secs,
            verdict_error: verdict.as_ref().err().copied(),
            adherence,
            detector_probability: None,
            selected_ids: None,
        };
        if let Some((model, hybrid)) = &self.detector {
            let hp = hybrid_predict(&z, &model.model, hybrid, verdict.as_ref().ok())?;
            record.predicted = Some(hp.label);
            record.detector_probability = Some(hp.probability);
            record.selected_ids = Some(hp.selected_ids);
        }
        Ok(record)
    }
}

fn load_modules(cfg: &RunConfig, ds: &DatasetSplit) -> Result<PromptModules, HarnessError> {
    let modules = match &cfg.templates_dir {
        Some(dir) => PromptModules::load(dir, &ds.rule)?,
        None => PromptModules::defaults(&ds.rule),
    };
    modules.validate(&ds.rule)?;
    Ok(modules)
}

/// Runs an experiment over an in-memory dataset with a caller-supplied
/// responder and (for the hybrid paradigm) detector.
pub fn evaluate_with(
    cfg: &RunConfig,
    dataset: &DatasetSplit,
    responder: &dyn Responder,
    model: Option<&ModelFile>,
) -> Result<RunResult, HarnessError> {
    if cfg.concurrency == 0 {
        return Err(HarnessError::Config("concurrency must be positive".into()));
    }
    let started_at = chrono::Utc::now().to_rfc3339();
    if dataset.test.is_empty() {
        return Err(HarnessError::EmptyRun);
    }
    let detector = match cfg.paradigm {
        Paradigm::Hybrid => {
            let model = model.ok_or(HarnessError::ModelMissing)?;
            let hybrid = cfg
                .hybrid
                .ok_or_else(|| HarnessError::Config("hybrid paradigm requires a hybrid filter config".into()))?;
            hybrid.validate(dataset.rule.tau)?;
            match model.feature_config {
                FeatureConfig::Filtered(trained) if trained != hybrid => log::warn!(
                    "detector was trained with filter {trained:?}, running with {hybrid:?}"
                ),
                FeatureConfig::AllSensors => log::warn!(
                    "detector was trained on all-sensor features; hybrid inference uses filtered features"
                ),
                _ => {}
            }
            Some((model, hybrid))
        }
        _ => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let exemplars = attach_exemplars(dataset, cfg.paradigm.prompt_paradigm(), &cfg.style, &mut rng)?;
    let pipeline = Pipeline {
        dataset,
        modules: load_modules(cfg, dataset)?,
        exemplars,
        style: cfg.style,
        responder,
        detector,
    };

    let n = dataset.test.len();
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let slots: Mutex<Vec<Option<Result<SampleRecord, HarnessError>>>> =
        Mutex::new((0..n).map(|_| None).collect());
    let workers = cfg.concurrency.min(n);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if stop.load(Ordering::Relaxed) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let out = pipeline.run_sample(i);
                if out.is_err() {
                    stop.store(true, Ordering::Relaxed);
                }
                slots.lock().expect("result slots poisoned")[i] = Some(out);
            });
        }
    });

    let mut records = Vec::with_capacity(n);
    for slot in slots.into_inner().expect("result slots poisoned") {
        match slot {
            Some(Ok(r)) => records.push(r),
            Some(Err(e)) => return Err(e),
            None => {}
        }
    }
    if records.len() != n {
        return Err(HarnessError::Inconsistent(format!(
            "{} of {n} samples completed",
            records.len()
        )));
    }

    let (confusion, metrics, token_stats, adherence) = summarize(&records, cfg.unparseable)?;
    Ok(RunResult {
        manifest: RunManifest {
            paradigm: cfg.paradigm_label(),
            config: cfg.clone(),
            dataset_hash: dataset.content_hash(),
            started_at,
            finished_at: chrono::Utc::now().to_rfc3339(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        },
        records,
        confusion,
        metrics,
        token_stats,
        adherence,
    })
}

/// Loads the dataset (and detector, for the hybrid paradigm) named by `cfg`
/// and runs the experiment.
pub fn evaluate_run(cfg: &RunConfig) -> Result<RunResult, HarnessError> {
    cfg.validate()?;
    let dataset = read_dataset(&cfg.dataset_path)?;
    let model = match (&cfg.paradigm, &cfg.model_path) {
        (Paradigm::Hybrid, Some(p)) => Some(ModelFile::load(p)?),
        _ => None,
    };
    match &cfg.responder {
        ResponderSpec::Simulated(sim) => evaluate_with(cfg, &dataset, sim, model.as_ref()),
        ResponderSpec::Endpoint(ep) => {
            let client = ChatClient::new(ep.clone())
                .map_err(|e| HarnessError::Config(e.to_string()))?;
            evaluate_with(cfg, &dataset, &client, model.as_ref())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub mean_tokens: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub dataset_hash: String,
    pub rows: Vec<ComparisonRow>,
}

impl fmt::Display for ComparisonTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(3);
        writeln!(
            f,
            "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}  {:>11}",
            "run", "acc(%)", "rec(%)", "prec(%)", "f1(%)", "mean tokens"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<width$}  {:>8.1}  {:>8.1}  {:>8.1}  {:>8.1}  {:>11.1}",
                r.name,
                r.accuracy * 100.0,
                r.recall * 100.0,
                r.precision * 100.0,
                r.f1 * 100.0,
                r.mean_tokens
            )?;
        }
        Ok(())
    }
}

fn run_name(r: &RunResult) -> String {
    let style = r.manifest.config.style.setup;
    let responder = match &r.manifest.config.responder {
        ResponderSpec::Simulated(s) => format!("sim@{}", s.fidelity),
        ResponderSpec::Endpoint(e) => e.model_name.clone(),
    };
    format!("{} / {} / {}", r.manifest.paradigm, style, responder)
}

/// One row per run, in the order given. All runs must share a dataset.
pub fn compare_runs(results: &[RunResult]) -> Result<ComparisonTable, HarnessError> {
    if results.len() < 2 {
        return Err(HarnessError::NotEnoughRuns(results.len()));
    }
    let hash = &results[0].manifest.dataset_hash;
    if let Some(other) = results.iter().find(|r| &r.manifest.dataset_hash != hash) {
        return Err(HarnessError::DatasetMismatch(
            hash.clone(),
            other.manifest.dataset_hash.clone(),
        ));
    }
    Ok(ComparisonTable {
        dataset_hash: hash.clone(),
        rows: results
            .iter()
            .map(|r| ComparisonRow {
                name: run_name(r),
                accuracy: r.metrics.accuracy,
                recall: r.metrics.recall,
                precision: r.metrics.precision,
                f1: r.metrics.f1,
                mean_tokens: r.token_stats.mean,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, Deserialize)]
struct PublishedFixture {
    version: u32,
    tolerance_pct: f64,
    rows: Vec<PublishedRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishedRow {
    pub table: String,
    pub method: String,
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRow {
    pub table: String,
    pub method: String,
    pub precision: f64,
    pub recall: f64,
    pub published_f1: f64,
    pub recomputed_f1: f64,
    pub delta: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub fixture_version: u32,
    pub tolerance_pct: f64,
    pub rows: Vec<ConsistencyRow>,
}

impl ConsistencyReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }
}

impl fmt::Display for ConsistencyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<22} {:<20} {:>7} {:>7} {:>9} {:>10} {:>7}  status",
            "table", "method", "prec", "rec", "f1(pub)", "f1(calc)", "delta"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<22} {:<20} {:>7.1} {:>7.1} {:>9.1} {:>10.3} {:>+7.3}  {}",
                r.table,
                r.method,
                r.precision,
                r.recall,
                r.published_f1,
                r.recomputed_f1,
                r.delta,
                if r.pass { "PASS" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

pub fn published_rows() -> Vec<PublishedRow> {
    load_fixture().rows
}

fn load_fixture() -> PublishedFixture {
    toml::from_str(PUBLISHED_METRICS).expect("embedded metrics fixture parses")
}

/// Recomputes F1 from each published (precision, recall) pair and compares it
/// with the published F1, all in percentage points.
pub fn verify_published_consistency() -> ConsistencyReport {
    let fixture = load_fixture();
    let tol = fixture.tolerance_pct;
    let rows = fixture
        .rows
        .into_iter()
        .map(|r| {
            let recomputed = f1_score(r.precision, r.recall);
            let delta = recomputed - r.f1;
            ConsistencyRow {
                pass: delta.abs() <= tol,
                table: r.table,
                method: r.method,
                precision: r.precision,
                recall: r.recall,
                published_f1: r.f1,
                recomputed_f1: recomputed,
                delta,
            }
        })
        .collect();
    ConsistencyReport {
        fixture_version: fixture.version,
        tolerance_pct: tol,
        rows,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    JsonSummary,
    CsvPerSample,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "json" | "json-summary" | "summary" => Ok(ReportFormat::JsonSummary),
            "csv" | "csv-per-sample" | "per-sample" => Ok(ReportFormat::CsvPerSample),
            other => Err(format!("unknown report format '{other}' (expected json or csv)")),
        }
    }
}

/// Run summary without wall-clock fields, so repeated runs serialize identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsonSummary {
    pub paradigm: String,
    pub config: RunConfig,
    pub dataset_hash: String,
    pub tool_version: String,
    pub samples: usize,
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
    pub token_stats: TokenStats,
    pub adherence: AdherenceSummary,
}

impl JsonSummary {
    pub fn from_result(r: &RunResult) -> Self {
        Self {
            paradigm: r.manifest.paradigm.clone(),
            config: r.manifest.config.clone(),
            dataset_hash: r.manifest.dataset_hash.clone(),
            tool_version: r.manifest.tool_version.clone(),
            samples: r.records.len(),
            confusion: r.confusion,
            metrics: r.metrics,
            token_stats: r.token_stats,
            adherence: r.adherence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub index: usize,
    pub truth: Label,
    /// `normal`, `anomaly` or `unparseable`.
    pub predicted: String,
    pub tokens: usize,
    pub latency: f64,
    /// Empty when the reply was unparseable.
    pub label_matches_rule: Option<bool>,
}

pub fn render_report(result: &RunResult, format: ReportFormat) -> Result<String, HarnessError> {
    if result.records.is_empty() {
        return Err(HarnessError::EmptyRun);
    }
    match format {
        ReportFormat::JsonSummary => {
            let mut s = serde_json::to_string_pretty(&JsonSummary::from_result(result))
                .map_err(|e| HarnessError::Serde(e.to_string()))?;
            s.push('\n');
            Ok(s)
        }
        ReportFormat::CsvPerSample => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in &result.records {
                w.serialize(CsvRow {
                    index: r.index,
                    truth: r.truth,
                    predicted: r
                        .predicted
                        .map(|l| l.as_str().to_string())
                        .unwrap_or_else(|| "unparseable".into()),
                    tokens: r.prompt_tokens,
                    latency: r.latency_secs,
                    label_matches_rule: r.adherence.map(|a| a.label_matches_rule),
                })
                .map_err(|e| HarnessError::Serde(e.to_string()))?;
            }
            let bytes = w.into_inner().map_err(|e| HarnessError::Serde(e.to_string()))?;
            String::from_utf8(bytes).map_err(|e| HarnessError::Serde(e.to_string()))
        }
    }
}

/// Writes a report; an empty run is rejected before the file is touched.
pub fn emit_report(result: &RunResult, format: ReportFormat, path: &Path) -> Result<(), HarnessError> {
    let text = render_report(result, format)?;
    fs::write(path, text)?;
    Ok(())
}

pub fn read_csv_report(path: &Path) -> Result<Vec<CsvRow>, HarnessError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| HarnessError::Serde(e.to_string()))?;
    r.deserialize()
        .collect::<Result<Vec<CsvRow>, _>>()
        .map_err(|e| HarnessError::Serde(e.to_string()))
}

/// Rebuilds a confusion matrix from CSV rows.
pub fn confusion_from_csv(rows: &[CsvRow], policy: UnparseablePolicy) -> Result<ConfusionMatrix, HarnessError> {
    let mut cm = ConfusionMatrix::default();
    for row in rows {
        let predicted = match row.predicted.as_str() {
            "unparseable" => None,
            other => Some(other.parse::<Label>().map_err(HarnessError::Serde)?),
        };
        cm.record(row.truth, predicted, policy);
    }
    Ok(cm)
}

/// Feature/label pairs for one split. Training uses the rule-side filter only
/// (no verdict), so the same model serves any responder at inference time.
pub fn detector_training_set(
    dataset: &DatasetSplit,
    split: SplitName,
    features: &FeatureConfig,
) -> Result<Vec<(FeatureVector, Label)>, HarnessError> {
    dataset
        .split(split)
        .iter()
        .map(|s| {
            let z = normalize(&s.snapshot, &dataset.stats, &dataset.rule)?;
            Ok((features.features(&z, None)?, s.label))
        })
        .collect()
}

/// Fits a detector on the train split.
pub fn train_on_dataset(
    dataset: &DatasetSplit,
    features: FeatureConfig,
    hyper: &TrainHyper,
) -> Result<ModelFile, HarnessError> {
    let samples = detector_training_set(dataset, SplitName::Train, &features)?;
    let model = train_detector(&samples, hyper)?;
    Ok(ModelFile::new(features, *hyper, model))
}

/// Scores a detector on its own (no responder) over one split.
pub fn detector_confusion(
    dataset: &DatasetSplit,
    split: SplitName,
    model: &ModelFile,
    decision_threshold: f64,
) -> Result<ConfusionMatrix, HarnessError> {
    let mut cm = ConfusionMatrix::default();
    for (f, truth) in detector_training_set(dataset, split, &model.feature_config)? {
        let (label, _) = predict(&model.model, &f, decision_threshold)?;
        cm.record(truth, Some(label), UnparseablePolicy::Separate);
    }
    Ok(cm)
}

/// Convenience constructor used by the CLI and tests.
pub fn simulated(fidelity: f64, seed: u64) -> ResponderSpec {
    ResponderSpec::Simulated(SimulatedResponderConfig {
        fidelity,
        seed,
        ..SimulatedResponderConfig::default()
    })
}
