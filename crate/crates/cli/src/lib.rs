//! Subcommand driver for the `ruleprompt` binary.
//!
//! `run` settings resolve as flag > config file > default. The resolved
//! [`RunConfig`] is logged and stored in every run manifest.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use ruleprompt::datagen::{
    generate_dataset, read_dataset, write_dataset, DatagenError, GenerationOptions, InjectionSpec,
    SignPolicy, SplitCounts, SplitName, SyntheticModel,
};
use ruleprompt::detector::{DetectorError, FeatureConfig, HybridConfig, TrainHyper};
use ruleprompt::gateway::{EndpointConfig, SimulatedResponderConfig, Verbosity};
use ruleprompt::harness::{
    compare_runs, compute_metrics, detector_confusion, emit_report, evaluate_run,
    render_report, train_on_dataset, verify_published_consistency, HarnessError, Paradigm,
    ReportFormat, ResponderSpec, RunConfig, RunResult, UnparseablePolicy,
};
use ruleprompt::promptkit::{
    attach_exemplars, compose_prompt, render_value_block, PromptError, PromptModules, Setup,
    ValueBlockStyle,
};
use ruleprompt::telemetry::{normalize, TelemetryError};
use ruleprompt::RuleConfig;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_ENDPOINT: i32 = 3;
pub const EXIT_DATASET: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "ruleprompt", version, about = "Rule-aware prompting experiments on numeric telemetry")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Generate a rule-labeled synthetic dataset.
    Gen(GenArgs),
    /// Print the prompt for one test sample.
    Prompt(PromptArgs),
    /// Evaluate a paradigm over the test split.
    Run(RunArgs),
    /// Train the logistic detector on the train split.
    Train(TrainArgs),
    /// Compare saved runs over the same dataset.
    Compare(CompareArgs),
    /// Recompute F1 for the published metric rows.
    Check,
    /// Re-render a saved run as a report.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 255)]
    pub sensors: usize,
    #[arg(long, default_value = "dataset.jsonl")]
    pub out: PathBuf,
    /// Injected offset as a fraction of each sensor's nominal mean.
    #[arg(long, default_value_t = 0.15)]
    pub deviation: f64,
    /// Sensors perturbed per anomalous sample.
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Direction of injected offsets: random or up.
    #[arg(long, default_value = "random")]
    pub sign: String,
}

#[derive(Debug, Args)]
pub struct PromptArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Index into the test split.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// value, mean-std-value, mean-std-value-z or zscore.
    #[arg(long, default_value = "zscore")]
    pub style: String,
    /// zero-shot, few-shot or icl.
    #[arg(long, default_value = "zero-shot")]
    pub paradigm: String,
    /// Seed for exemplar selection.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory with replacement module texts.
    #[arg(long)]
    pub templates: Option<PathBuf>,
}

/// Every `run` setting. Each field is both a `--flag` and a config-file key.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunOptions {
    /// Dataset file produced by `gen`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// zero-shot, few-shot, icl or hybrid [default: zero-shot].
    #[arg(long)]
    pub paradigm: Option<String>,
    /// value, mean-std-value, mean-std-value-z or zscore [default: zscore].
    #[arg(long)]
    pub style: Option<String>,
    /// simulated or endpoint [default: simulated].
    #[arg(long)]
    pub responder: Option<String>,
    /// Simulated responder: probability of the rule-correct label [default: 1.0].
    #[arg(long)]
    pub fidelity: Option<f64>,
    /// Simulated responder: label or label+explanation [default: label+explanation].
    #[arg(long)]
    pub verbosity: Option<String>,
    /// Endpoint base URL [default: http://localhost:8000].
    #[arg(long)]
    pub base_url: Option<String>,
    /// Endpoint model name [default: gpt-oss-20b].
    #[arg(long)]
    pub model_name: Option<String>,
    /// Endpoint API key; RULEPROMPT_API_KEY is used when absent.
    #[arg(long)]
    pub api_key: Option<String>,
    /// Per-request timeout in seconds [default: 120].
    #[arg(long)]
    pub timeout_secs: Option<f64>,
    /// Retries after a timeout, connection error or 5xx [default: 2].
    #[arg(long)]
    pub max_retries: Option<u32>,
    /// Sampling temperature [default: 0.0].
    #[arg(long)]
    pub temperature: Option<f64>,
    /// First retry delay in milliseconds, doubled per retry [default: 500].
    #[arg(long)]
    pub backoff_base_ms: Option<u64>,
    /// Hybrid: abs_z at which the filter keeps a sensor [default: 2.5].
    #[arg(long)]
    pub filter_threshold: Option<f64>,
    /// Hybrid: most sensors passed to the detector [default: 16].
    #[arg(long)]
    pub max_selected: Option<usize>,
    /// Hybrid: detector probability needed for anomaly [default: 0.5].
    #[arg(long)]
    pub decision_threshold: Option<f64>,
    /// Hybrid: detector model file from `train`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Directory with replacement module texts.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    /// In-flight responder calls [default: 4].
    #[arg(long)]
    pub concurrency: Option<usize>,
    /// Seed for exemplar selection and the simulated responder [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// separate or count-as-error [default: separate].
    #[arg(long)]
    pub unparseable: Option<String>,
    /// Mark the endpoint as serving an adapted model.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub endpoint_adapted: Option<bool>,
    /// Write the full run (records and manifest) as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the JSON summary report.
    #[arg(long)]
    pub summary: Option<PathBuf>,
    /// Write the per-sample CSV report.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML file whose keys mirror the run flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub options: RunOptions,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "detector.json")]
    pub out: PathBuf,
    /// filtered (hybrid) or all (standalone detector).
    #[arg(long, default_value = "filtered")]
    pub features: String,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 2000)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub l2: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2.5)]
    pub filter_threshold: f64,
    #[arg(long, default_value_t = 16)]
    pub max_selected: usize,
    #[arg(long, default_value_t = 0.5)]
    pub decision_threshold: f64,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Saved run files.
    #[arg(required = true, num_args = 2..)]
    pub runs: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Saved run file.
    #[arg(long)]
    pub run: PathBuf,
    /// json or csv.
    #[arg(long, default_value = "json")]
    pub format: String,
    /// Output path; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Dataset(d) => d.into(),
            other => Self {
                code: other.exit_code(),
                message: other.to_string(),
            },
        }
    }
}

impl From<DatagenError> for Failure {
    fn from(e: DatagenError) -> Self {
        let code = match e {
            DatagenError::InvalidModel(_)
            | DatagenError::InvalidInjection(_)
            | DatagenError::TooManySensors { .. } => EXIT_CONFIG,
            _ => EXIT_DATASET,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<PromptError> for Failure {
    fn from(e: PromptError) -> Self {
        Self::config(e.to_string())
    }
}

impl From<DetectorError> for Failure {
    fn from(e: DetectorError) -> Self {
        HarnessError::from(e).into()
    }
}

impl From<TelemetryError> for Failure {
    fn from(e: TelemetryError) -> Self {
        Self {
            code: EXIT_DATASET,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::config(e.to_string())
    }
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Gen(a) => cmd_gen(&a),
        Command::Prompt(a) => cmd_prompt(&a),
        Command::Run(a) => cmd_run(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Compare(a) => cmd_compare(&a),
        Command::Check => cmd_check(),
        Command::Report(a) => cmd_report(&a),
    }
}

fn parse_sign(s: &str) -> Result<SignPolicy, Failure> {
    match s.trim().to_ascii_lowercase().as_str() {
        "random" => Ok(SignPolicy::RandomSign),
        "up" => Ok(SignPolicy::AlwaysUp),
        other => Err(Failure::config(format!("unknown sign policy '{other}' (expected random or up)"))),
    }
}

fn cmd_gen(a: &GenArgs) -> Result<(), Failure> {
    let model = SyntheticModel::new(a.sensors, a.seed)?;
    let spec = InjectionSpec {
        deviation_fraction: a.deviation,
        sensors_per_sample: a.k,
        sign_policy: parse_sign(&a.sign)?,
    };
    let counts = SplitCounts::default();
    let dataset = generate_dataset(
        &model,
        &spec,
        &counts,
        &RuleConfig::default(),
        &GenerationOptions::default(),
    )
    .map_err(|e| match e {
        DatagenError::QuotaUnreachable { .. } => Failure {
            code: EXIT_DATASET,
            message: format!("{e}\nhint: raise --deviation (currently {}) or --k", a.deviation),
        },
        other => other.into(),
    })?;
    write_dataset(&dataset, &a.out)?;
    println!(
        "wrote {} ({} sensors, seed {}): train {}, validation {}, test {}",
        a.out.display(),
        a.sensors,
        a.seed,
        dataset.train.len(),
        dataset.validation.len(),
        dataset.test.len()
    );
    println!("sha256 {}", dataset.content_hash());
    Ok(())
}

fn cmd_prompt(a: &PromptArgs) -> Result<(), Failure> {
    let setup: Setup = a.style.parse().map_err(Failure::config)?;
    let paradigm: Paradigm = a.paradigm.parse().map_err(Failure::config)?;
    let dataset = read_dataset(&a.dataset)?;
    let sample = dataset.test.get(a.index).ok_or_else(|| {
        Failure::config(format!(
            "index {} is outside the test split (size {})",
            a.index,
            dataset.test.len()
        ))
    })?;
    let modules = match &a.templates {
        Some(dir) => PromptModules::load(dir, &dataset.rule)?,
        None => PromptModules::defaults(&dataset.rule),
    };
    let style = ValueBlockStyle::new(setup);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let exemplars = attach_exemplars(&dataset, paradigm.prompt_paradigm(), &style, &mut rng)?;
    let z = normalize(&sample.snapshot, &dataset.stats, &dataset.rule)?;
    let block = render_value_block(&sample.snapshot, &dataset.stats, &z, &style, &dataset.sensor_metas())?;
    let prompt = compose_prompt(&modules, &exemplars, &block)?;
    println!("{}", prompt.text);
    println!("# tokens: {}", prompt.token_count);
    Ok(())
}

/// Loads a run config file. Unknown keys are rejected.
pub fn load_run_options(path: &Path) -> Result<RunOptions, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure::config(format!("invalid config {}: {e}", path.display())))
}

impl RunOptions {
    /// Field-wise merge: values already set in `self` win.
    pub fn or(self, fallback: RunOptions) -> RunOptions {
        macro_rules! pick {
            ($($f:ident),*) => { RunOptions { $($f: self.$f.or(fallback.$f)),* } };
        }
        pick!(
            dataset, paradigm, style, responder, fidelity, verbosity, base_url, model_name,
            api_key, timeout_secs, max_retries, temperature, backoff_base_ms, filter_threshold,
            max_selected, decision_threshold, model, templates, concurrency, seed, unparseable,
            endpoint_adapted, out, summary, csv
        )
    }

    /// Builds the run configuration, filling defaults for anything unset.
    pub fn resolve(&self) -> Result<RunConfig, Failure> {
        let dataset = self
            .dataset
            .clone()
            .ok_or_else(|| Failure::config("no dataset given (--dataset or `dataset` in the config file)"))?;
        let paradigm: Paradigm = self
            .paradigm
            .as_deref()
            .unwrap_or("zero-shot")
            .parse()
            .map_err(Failure::config)?;
        let setup: Setup = self.style.as_deref().unwrap_or("zscore").parse().map_err(Failure::config)?;
        let seed = self.seed.unwrap_or(0);

        let responder = match self.responder.as_deref().unwrap_or("simulated").trim() {
            "simulated" | "sim" => {
                let verbosity = match self.verbosity.as_deref().unwrap_or("label+explanation") {
                    "label" | "label-only" | "label_only" => Verbosity::LabelOnly,
                    "label+explanation" | "label-plus-explanation" | "label_plus_explanation" => {
                        Verbosity::LabelPlusExplanation
                    }
                    other => {
                        return Err(Failure::config(format!(
                            "unknown verbosity '{other}' (expected label or label+explanation)"
                        )))
                    }
                };
                ResponderSpec::Simulated(SimulatedResponderConfig {
                    rule: RuleConfig::default(),
                    fidelity: self.fidelity.unwrap_or(1.0),
                    verbosity,
                    seed,
                })
            }
            "endpoint" => {
                let d = EndpointConfig::default();
                ResponderSpec::Endpoint(EndpointConfig {
                    base_url: self.base_url.clone().unwrap_or(d.base_url),
                    model_name: self.model_name.clone().unwrap_or(d.model_name),
                    api_key: self.api_key.clone(),
                    timeout_secs: self.timeout_secs.unwrap_or(d.timeout_secs),
                    max_retries: self.max_retries.unwrap_or(d.max_retries),
                    temperature: self.temperature.unwrap_or(d.temperature),
                    backoff_base_ms: self.backoff_base_ms.unwrap_or(d.backoff_base_ms),
                })
            }
            other => {
                return Err(Failure::config(format!(
                    "unknown responder '{other}' (expected simulated or endpoint)"
                )))
            }
        };

        let hybrid = (paradigm == Paradigm::Hybrid).then(|| {
            let d = HybridConfig::default();
            HybridConfig {
                filter_threshold: self.filter_threshold.unwrap_or(d.filter_threshold),
                max_selected: self.max_selected.unwrap_or(d.max_selected),
                decision_threshold: self.decision_threshold.unwrap_or(d.decision_threshold),
            }
        });
        let unparseable = match self.unparseable.as_deref().unwrap_or("separate") {
            "separate" => UnparseablePolicy::Separate,
            "count-as-error" | "count_as_error" | "error" => UnparseablePolicy::CountAsError,
            other => {
                return Err(Failure::config(format!(
                    "unknown unparseable policy '{other}' (expected separate or count-as-error)"
                )))
            }
        };

        let mut cfg = RunConfig::new(dataset, responder);
        cfg.paradigm = paradigm;
        cfg.style = ValueBlockStyle::new(setup);
        cfg.hybrid = hybrid;
        cfg.model_path = self.model.clone();
        cfg.templates_dir = self.templates.clone();
        cfg.concurrency = self.concurrency.unwrap_or(cfg.concurrency);
        cfg.seed = seed;
        cfg.unparseable = unparseable;
        cfg.endpoint_adapted = self.endpoint_adapted.unwrap_or(false);
        Ok(cfg)
    }
}

fn print_summary(r: &RunResult) {
    let m = &r.metrics;
    let c = &r.confusion;
    println!("paradigm      {}", r.manifest.paradigm);
    println!("style         {}", r.manifest.config.style.setup);
    println!("samples       {}", r.records.len());
    println!("accuracy      {:.3}", m.accuracy);
    println!("recall        {:.3}", m.recall);
    println!("precision     {:.3}", m.precision);
    println!("f1            {:.3}", m.f1);
    println!("unparseable   {:.3}", m.unparseable_rate);
    println!(
        "confusion     tp {} fp {} fn {} tn {} unparseable {}",
        c.tp, c.fp, c.fn_, c.tn, c.unparseable
    );
    println!("mean tokens   {:.1} (max {})", r.token_stats.mean, r.token_stats.max);
    println!(
        "adherence     label {:.3}, citations valid {:.3}, complete {:.3}",
        r.adherence.label_match_rate, r.adherence.mean_citations_valid, r.adherence.mean_citations_complete
    );
}

fn cmd_run(a: &RunArgs) -> Result<(), Failure> {
    let from_file = match &a.config {
        Some(p) => load_run_options(p)?,
        None => RunOptions::default(),
    };
    let opts = a.options.clone().or(from_file);
    let cfg = opts.resolve()?;
    log::info!(
        "resolved run config: {}",
        serde_json::to_string(&cfg).unwrap_or_default()
    );
    let result = evaluate_run(&cfg)?;
    if let Some(p) = &opts.out {
        result.save(p)?;
    }
    if let Some(p) = &opts.summary {
        emit_report(&result, ReportFormat::JsonSummary, p)?;
    }
    if let Some(p) = &opts.csv {
        emit_report(&result, ReportFormat::CsvPerSample, p)?;
    }
    print_summary(&result);
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<(), Failure> {
    let dataset = read_dataset(&a.dataset)?;
    let hybrid = HybridConfig {
        filter_threshold: a.filter_threshold,
        max_selected: a.max_selected,
        decision_threshold: a.decision_threshold,
    };
    hybrid.validate(dataset.rule.tau)?;
    let features = match a.features.trim() {
        "filtered" | "hybrid" => FeatureConfig::Filtered(hybrid),
        "all" | "all-sensors" | "standalone" => FeatureConfig::AllSensors,
        other => {
            return Err(Failure::config(format!(
                "unknown feature mode '{other}' (expected filtered or all)"
            )))
        }
    };
    let hyper = TrainHyper {
        learning_rate: a.lr,
        epochs: a.epochs,
        l2: a.l2,
        seed: a.seed,
    };
    let model = train_on_dataset(&dataset, features, &hyper)?;
    model.save(&a.out)?;
    println!("wrote {}", a.out.display());
    if let Some(meta) = &model.model.training_meta {
        println!("final loss    {:.6}", meta.final_loss);
    }
    for split in [SplitName::Validation, SplitName::Test] {
        let cm = detector_confusion(&dataset, split, &model, a.decision_threshold)?;
        let m = compute_metrics(&cm)?;
        println!(
            "{:<12}  acc {:.3}  rec {:.3}  prec {:.3}  f1 {:.3}",
            split.to_string(),
            m.accuracy,
            m.recall,
            m.precision,
            m.f1
        );
    }
    Ok(())
}

fn cmd_compare(a: &CompareArgs) -> Result<(), Failure> {
    let runs = a
        .runs
        .iter()
        .map(|p| RunResult::load(p).map_err(Failure::from))
        .collect::<Result<Vec<_>, _>>()?;
    let table = compare_runs(&runs)?;
    println!("dataset {}", table.dataset_hash);
    print!("{table}");
    Ok(())
}

fn cmd_check() -> Result<(), Failure> {
    let report = verify_published_consistency();
    print!("{report}");
    if report.all_pass() {
        println!("all {} rows within {} points", report.rows.len(), report.tolerance_pct);
        Ok(())
    } else {
        Err(Failure {
            code: 1,
            message: "published F1 values are inconsistent with precision/recall".into(),
        })
    }
}

fn cmd_report(a: &ReportArgs) -> Result<(), Failure> {
    let format: ReportFormat = a.format.parse().map_err(Failure::config)?;
    let run = RunResult::load(&a.run)?;
    match &a.out {
        Some(p) => emit_report(&run, format, p)?,
        None => print!("{}", render_report(&run, format)?),
    }
    Ok(())
}
