//! Modular prompt composition.
//!
//! A prompt is the concatenation role, context, normalization, rule,
//! optional labeled examples, value block and output schema, separated by
//! blank lines. The value block has four encodings ranging from raw readings
//! to absolute z-scores only.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{DatasetSplit, LabeledSample};
use crate::telemetry::{
    normalize, Label, RuleConfig, SensorMeta, SensorStats, Snapshot, TelemetryError,
    ZScoreVector,
};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("prompt module '{0}' is empty")]
    EmptyModule(&'static str),
    #[error("rule module does not mention the threshold {0}")]
    MissingThreshold(String),
    #[error("need {needed} exemplars of class {label}, training split has {available}")]
    InsufficientExemplars {
        label: Label,
        needed: usize,
        available: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("cannot read template {path}: {source}")]
    Template {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
}

pub const TEMPLATE_FILES: [&str; 5] = [
    "role.txt",
    "context.txt",
    "normalization.txt",
    "rule.txt",
    "output_schema.txt",
];

const DEFAULT_ROLE: &str = include_str!("../templates/role.txt");
const DEFAULT_CONTEXT: &str = include_str!("../templates/context.txt");
const DEFAULT_NORMALIZATION: &str = include_str!("../templates/normalization.txt");
const DEFAULT_RULE: &str = include_str!("../templates/rule.txt");
const DEFAULT_OUTPUT_SCHEMA: &str = include_str!("../templates/output_schema.txt");

/// The five fixed text modules of a prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptModules {
    pub role_text: String,
    pub context_text: String,
    pub normalization_text: String,
    pub rule_text: String,
    pub output_schema_text: String,
}

impl PromptModules {
    /// Built-in module texts with `{tau}` substituted from `rule`.
    pub fn defaults(rule: &RuleConfig) -> Self {
        Self::from_texts(
            DEFAULT_ROLE,
            DEFAULT_CONTEXT,
            DEFAULT_NORMALIZATION,
            DEFAULT_RULE,
            DEFAULT_OUTPUT_SCHEMA,
            rule,
        )
    }

    /// Loads the five template files from `dir`.
    pub fn load(dir: &Path, rule: &RuleConfig) -> Result<Self, PromptError> {
        let mut texts = Vec::with_capacity(TEMPLATE_FILES.len());
        for name in TEMPLATE_FILES {
            let path = dir.join(name);
            let text = fs::read_to_string(&path).map_err(|source| PromptError::Template {
                path: path.display().to_string(),
                source,
            })?;
            texts.push(text);
        }
        let modules =
            Self::from_texts(&texts[0], &texts[1], &texts[2], &texts[3], &texts[4], rule);
        modules.validate(rule)?;
        Ok(modules)
    }

    fn from_texts(
        role: &str,
        context: &str,
        normalization: &str,
        rule_text: &str,
        output_schema: &str,
        rule: &RuleConfig,
    ) -> Self {
        Self {
            role_text: role.trim().to_string(),
            context_text: context.trim().to_string(),
            normalization_text: normalization.trim().to_string(),
            rule_text: rule_text.trim().replace("{tau}", &rule.tau_text()),
            output_schema_text: output_schema.trim().to_string(),
        }
    }

    fn sections(&self) -> [(&'static str, &str); 5] {
        [
            ("role", &self.role_text),
            ("context", &self.context_text),
            ("normalization", &self.normalization_text),
            ("rule", &self.rule_text),
            ("output_schema", &self.output_schema_text),
        ]
    }

    fn check_non_empty(&self) -> Result<(), PromptError> {
        for (name, text) in self.sections() {
            if text.trim().is_empty() {
                return Err(PromptError::EmptyModule(name));
            }
        }
        Ok(())
    }

    /// Every module is non-empty and the rule text states the threshold.
    pub fn validate(&self, rule: &RuleConfig) -> Result<(), PromptError> {
        self.check_non_empty()?;
        let tau = rule.tau_text();
        if !self.rule_text.contains(&tau) {
            return Err(PromptError::MissingThreshold(tau));
        }
        Ok(())
    }
}

/// Value block encodings, in ablation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Setup {
    #[serde(rename = "value")]
    ValueOnly,
    #[serde(rename = "mean-std-value")]
    MeanStdValue,
    #[serde(rename = "mean-std-value-z")]
    MeanStdValueZ,
    #[serde(rename = "zscore")]
    ZScoreOnly,
}

impl Setup {
    pub const ALL: [Setup; 4] = [
        Setup::ValueOnly,
        Setup::MeanStdValue,
        Setup::MeanStdValueZ,
        Setup::ZScoreOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Setup::ValueOnly => "value",
            Setup::MeanStdValue => "mean-std-value",
            Setup::MeanStdValueZ => "mean-std-value-z",
            Setup::ZScoreOnly => "zscore",
        }
    }

    pub fn includes_abs_z(self) -> bool {
        matches!(self, Setup::MeanStdValueZ | Setup::ZScoreOnly)
    }
}

impl FromStr for Setup {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "value" | "value-only" | "value_only" | "setup1" | "1" => Ok(Setup::ValueOnly),
            "mean-std-value" | "mean_std_value" | "setup2" | "2" => Ok(Setup::MeanStdValue),
            "mean-std-value-z" | "mean_std_value_z" | "setup3" | "3" => Ok(Setup::MeanStdValueZ),
            "zscore" | "z-score" | "zscore-only" | "z_score_only" | "setup4" | "4" => {
                Ok(Setup::ZScoreOnly)
            }
            other => Err(format!(
                "unknown style '{other}' (expected value, mean-std-value, mean-std-value-z or zscore)"
            )),
        }
    }
}

impl std::fmt::Display for Setup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueBlockStyle {
    pub setup: Setup,
    pub value_decimals: usize,
    pub stat_decimals: usize,
    pub z_decimals: usize,
}

impl ValueBlockStyle {
    pub fn new(setup: Setup) -> Self {
        Self {
            setup,
            value_decimals: 4,
            stat_decimals: 4,
            z_decimals: 1,
        }
    }
}

impl Default for ValueBlockStyle {
    fn default() -> Self {
        Self::new(Setup::ZScoreOnly)
    }
}

/// Formats `z` truncated (not rounded) to `decimals` places.
///
/// The displayed value never exceeds the true one, so for any threshold
/// expressible in `decimals` places the displayed value meets the threshold
/// exactly when the true value does.
pub fn format_abs_z(z: f64, decimals: usize) -> String {
    let scale = 10f64.powi(decimals as i32);
    let mut q = (z * scale).floor();
    while q > 0.0 && q / scale > z {
        q -= 1.0;
    }
    format!("{:.*}", decimals, q / scale)
}

pub fn render_value_block(
    x: &Snapshot,
    stats: &SensorStats,
    z: &ZScoreVector,
    style: &ValueBlockStyle,
    metas: &[SensorMeta],
) -> Result<String, PromptError> {
    let n = metas.len();
    if x.len() != n || stats.means.len() != n || stats.stds.len() != n || z.len() != n {
        return Err(PromptError::ShapeMismatch(format!(
            "{n} sensors, snapshot {}, stats {}/{}, z {}",
            x.len(),
            stats.means.len(),
            stats.stds.len(),
            z.len()
        )));
    }
    let vd = style.value_decimals;
    let sd = style.stat_decimals;
    let mut out = String::with_capacity(n * 48);
    for (i, meta) in metas.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let name = SensorMeta::display_name(meta.id);
        let v = x.values()[i];
        let abs_z = || format_abs_z(z.as_slice()[i], style.z_decimals);
        match style.setup {
            Setup::ValueOnly => write!(out, "{name}: value = {v:.vd$}"),
            Setup::MeanStdValue => write!(
                out,
                "{name}: value = {v:.vd$}, mean = {:.sd$}, std = {:.sd$}",
                stats.means[i], stats.stds[i]
            ),
            Setup::MeanStdValueZ => write!(
                out,
                "{name}: value = {v:.vd$}, mean = {:.sd$}, std = {:.sd$}, abs_z = {}",
                stats.means[i],
                stats.stds[i],
                abs_z()
            ),
            Setup::ZScoreOnly => write!(out, "{name}: abs_z = {}", abs_z()),
        }
        .expect("writing to a String cannot fail");
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exemplar {
    pub value_block: String,
    pub label: Label,
    pub rationale: String,
}

impl Exemplar {
    /// Renders a labeled training sample with the same style as the query.
    pub fn from_sample(
        sample: &LabeledSample,
        stats: &SensorStats,
        rule: &RuleConfig,
        style: &ValueBlockStyle,
        metas: &[SensorMeta],
    ) -> Result<Self, PromptError> {
        let z = normalize(&sample.snapshot, stats, rule)?;
        let value_block = render_value_block(&sample.snapshot, stats, &z, style, metas)?;
        let tau = rule.tau_text();
        let rationale = if sample.flagged_ids.is_empty() {
            format!("Every |z| is below {tau}, so no sensor is flagged.")
        } else {
            let cited: Vec<String> = sample
                .flagged_ids
                .iter()
                .map(|&id| {
                    format!(
                        "{} (|z| = {})",
                        SensorMeta::display_name(id),
                        format_abs_z(z.as_slice()[id], style.z_decimals)
                    )
                })
                .collect();
            format!("At or above {tau}: {}.", cited.join(", "))
        };
        Ok(Self {
            value_block,
            label: sample.label,
            rationale,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Section {
    Role,
    Context,
    Normalization,
    Rule,
    Exemplars,
    Values,
    OutputSchema,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub text: String,
    pub token_count: usize,
    /// Byte span of every section present in `text`.
    pub section_offsets: BTreeMap<Section, Range<usize>>,
}

impl RenderedPrompt {
    pub fn section(&self, s: Section) -> Option<&str> {
        self.section_offsets.get(&s).map(|r| &self.text[r.clone()])
    }
}

fn render_exemplars(exemplars: &[Exemplar]) -> String {
    let mut out = String::from("Labeled examples:");
    for (i, ex) in exemplars.iter().enumerate() {
        write!(
            out,
            "\n\nExample {}:\n{}\nLabel: {}\nRationale: {}",
            i + 1,
            ex.value_block,
            ex.label,
            ex.rationale
        )
        .expect("writing to a String cannot fail");
    }
    out
}

pub fn compose_prompt(
    modules: &PromptModules,
    exemplars: &[Exemplar],
    value_block: &str,
) -> Result<RenderedPrompt, PromptError> {
    modules.check_non_empty()?;
    if value_block.trim().is_empty() {
        return Err(PromptError::EmptyModule("values"));
    }
    let exemplar_text = (!exemplars.is_empty()).then(|| render_exemplars(exemplars));
    let mut parts: Vec<(Section, &str)> = vec![
        (Section::Role, &modules.role_text),
        (Section::Context, &modules.context_text),
        (Section::Normalization, &modules.normalization_text),
        (Section::Rule, &modules.rule_text),
    ];
    if let Some(ex) = &exemplar_text {
        parts.push((Section::Exemplars, ex));
    }
    parts.push((Section::Values, value_block));
    parts.push((Section::OutputSchema, &modules.output_schema_text));

    let mut text = String::new();
    let mut section_offsets = BTreeMap::new();
    for (i, (section, body)) in parts.into_iter().enumerate() {
        if i > 0 {
            text.push_str("\n\n");
        }
        let start = text.len();
        text.push_str(body);
        section_offsets.insert(section, start..text.len());
    }
    Ok(RenderedPrompt {
        token_count: count_tokens(&text),
        text,
        section_offsets,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptParadigm {
    ZeroShot,
    FewShot,
    Icl,
}

impl PromptParadigm {
    pub fn exemplar_count(self) -> usize {
        match self {
            PromptParadigm::ZeroShot => 0,
            PromptParadigm::FewShot => 2,
            PromptParadigm::Icl => 5,
        }
    }
}

impl FromStr for PromptParadigm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "zero-shot" | "zeroshot" | "zero_shot" | "zero" => Ok(PromptParadigm::ZeroShot),
            "few-shot" | "fewshot" | "few_shot" | "few" => Ok(PromptParadigm::FewShot),
            "icl" | "in-context" => Ok(PromptParadigm::Icl),
            other => Err(format!(
                "unknown paradigm '{other}' (expected zero-shot, few-shot or icl)"
            )),
        }
    }
}

/// Picks training-sample indices to use as exemplars.
///
/// Few-shot takes one sample per class. ICL takes one nominal sample and four
/// anomalies whose flagged-sensor sets differ pairwise, preferring distinct
/// flag counts first.
pub fn select_exemplars<R: Rng + ?Sized>(
    train: &[LabeledSample],
    paradigm: PromptParadigm,
    rng: &mut R,
) -> Result<Vec<usize>, PromptError> {
    if paradigm == PromptParadigm::ZeroShot {
        return Ok(Vec::new());
    }
    let mut nominal: Vec<usize> = (0..train.len())
        .filter(|&i| train[i].label == Label::Nominal)
        .collect();
    let mut anomaly: Vec<usize> = (0..train.len())
        .filter(|&i| train[i].label == Label::Anomaly)
        .collect();
    nominal.shuffle(rng);
    anomaly.shuffle(rng);

    let anomalies_needed = paradigm.exemplar_count() - 1;
    if nominal.is_empty() {
        return Err(PromptError::InsufficientExemplars {
            label: Label::Nominal,
            needed: 1,
            available: 0,
        });
    }
    if anomaly.len() < anomalies_needed {
        return Err(PromptError::InsufficientExemplars {
            label: Label::Anomaly,
            needed: anomalies_needed,
            available: anomaly.len(),
        });
    }

    let mut chosen_anomalies: Vec<usize> = Vec::with_capacity(anomalies_needed);
    let distinct_pattern = |chosen: &[usize], cand: usize| {
        chosen
            .iter()
            .all(|&c| train[c].flagged_ids != train[cand].flagged_ids)
    };
    // Pass 1: distinct pattern and distinct flag count.
    for &cand in &anomaly {
        if chosen_anomalies.len() == anomalies_needed {
            break;
        }
        let new_count = chosen_anomalies
            .iter()
            .all(|&c| train[c].flagged_ids.len() != train[cand].flagged_ids.len());
        if new_count && distinct_pattern(&chosen_anomalies, cand) {
            chosen_anomalies.push(cand);
        }
    }
    // Pass 2: distinct pattern only.
    for &cand in &anomaly {
        if chosen_anomalies.len() == anomalies_needed {
            break;
        }
        if !chosen_anomalies.contains(&cand) && distinct_pattern(&chosen_anomalies, cand) {
            chosen_anomalies.push(cand);
        }
    }
    // Pass 3: anything left.
    for &cand in &anomaly {
        if chosen_anomalies.len() == anomalies_needed {
            break;
        }
        if !chosen_anomalies.contains(&cand) {
            chosen_anomalies.push(cand);
        }
    }

    let mut picked = vec![nominal[0]];
    picked.extend(chosen_anomalies);
    picked.shuffle(rng);
    Ok(picked)
}

pub fn attach_exemplars<R: Rng + ?Sized>(
    dataset: &DatasetSplit,
    paradigm: PromptParadigm,
    style: &ValueBlockStyle,
    rng: &mut R,
) -> Result<Vec<Exemplar>, PromptError> {
    let metas = dataset.sensor_metas();
    select_exemplars(&dataset.train, paradigm, rng)?
        .into_iter()
        .map(|i| Exemplar::from_sample(&dataset.train[i], &dataset.stats, &dataset.rule, style, &metas))
        .collect()
}

/// Deterministic token surrogate: each maximal ASCII alphanumeric run is one
/// token, each other non-whitespace character is one token.
pub fn count_tokens(text: &str) -> usize {
    let mut tokens = 0;
    let mut in_run = false;
    for c in text.chars() {
        if c.is_ascii_alphanumeric() {
            if !in_run {
                tokens += 1;
                in_run = true;
            }
        } else {
            in_run = false;
            if !c.is_whitespace() {
                tokens += 1;
            }
        }
    }
    tokens
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::telemetry::sensor_layout;

    fn stub_modules() -> PromptModules {
        PromptModules {
            role_text: "R".into(),
            context_text: "C".into(),
            normalization_text: "N".into(),
            rule_text: "S".into(),
            output_schema_text: "O".into(),
        }
    }

    fn one_sensor(v: f64, mu: f64, sigma: f64) -> (Snapshot, SensorStats, ZScoreVector) {
        let x = Snapshot::new(vec![v]).unwrap();
        let st = SensorStats {
            means: vec![mu],
            stds: vec![sigma],
            sample_count: 1,
        };
        let z = normalize(&x, &st, &RuleConfig::default()).unwrap();
        (x, st, z)
    }

    #[test]
    fn token_examples() {
        assert_eq!(count_tokens(""), 0);
        assert_eq!(count_tokens("abs_z = 3.5"), 7);
        assert_eq!(count_tokens("Sensor 255: abs_z = 3.5"), 10);
        assert_eq!(count_tokens("  \n\t "), 0);
        assert_eq!(count_tokens("-12.5000"), 4);
    }

    #[test]
    fn zscore_line_matches_listing() {
        let metas = sensor_layout(255);
        let mut abs = vec![0.8; 255];
        abs[254] = 3.5;
        let z = ZScoreVector::new(abs).unwrap();
        let x = Snapshot::new(vec![0.0; 255]).unwrap();
        let st = SensorStats {
            means: vec![0.0; 255],
            stds: vec![1.0; 255],
            sample_count: 1,
        };
        let block = render_value_block(&x, &st, &z, &ValueBlockStyle::default(), &metas).unwrap();
        assert_eq!(block.lines().count(), 255);
        assert_eq!(block.lines().last().unwrap(), "Sensor 255: abs_z = 3.5");
        assert_eq!(block.lines().next().unwrap(), "Sensor 1: abs_z = 0.8");
    }

    #[test]
    fn zero_z_renders_with_one_decimal() {
        let (x, st, z) = one_sensor(1.0, 1.0, 0.1);
        let block =
            render_value_block(&x, &st, &z, &ValueBlockStyle::default(), &sensor_layout(1)).unwrap();
        assert_eq!(block, "Sensor 1: abs_z = 0.0");
    }

    #[test]
    fn setup_formats() {
        let (x, st, z) = one_sensor(1.35, 1.0, 0.1);
        let metas = sensor_layout(1);
        let render = |setup| {
            render_value_block(&x, &st, &z, &ValueBlockStyle::new(setup), &metas).unwrap()
        };
        assert_eq!(render(Setup::ValueOnly), "Sensor 1: value = 1.3500");
        assert_eq!(
            render(Setup::MeanStdValue),
            "Sensor 1: value = 1.3500, mean = 1.0000, std = 0.1000"
        );
        assert_eq!(
            render(Setup::MeanStdValueZ),
            "Sensor 1: value = 1.3500, mean = 1.0000, std = 0.1000, abs_z = 3.5"
        );
        assert_eq!(render(Setup::ZScoreOnly), "Sensor 1: abs_z = 3.5");
    }

    #[test]
    fn shape_mismatch_detected() {
        let (x, st, z) = one_sensor(1.0, 1.0, 0.1);
        let err = render_value_block(&x, &st, &z, &ValueBlockStyle::default(), &sensor_layout(2));
        assert!(matches!(err, Err(PromptError::ShapeMismatch(_))));
    }

    #[test]
    fn abs_z_truncates_toward_zero() {
        assert_eq!(format_abs_z(2.96, 1), "2.9");
        assert_eq!(format_abs_z(3.0, 1), "3.0");
        assert_eq!(format_abs_z(3.04, 1), "3.0");
        assert_eq!(format_abs_z(2.9999999999999996, 1), "2.9");
        assert_eq!(format_abs_z(0.0, 1), "0.0");
        assert_eq!(format_abs_z(12.345, 2), "12.34");
    }

    #[test]
    fn stub_composition_order() {
        let p = compose_prompt(&stub_modules(), &[], "V").unwrap();
        assert_eq!(p.text, "R\n\nC\n\nN\n\nS\n\nV\n\nO");
        assert_eq!(p.token_count, 6);
        assert!(!p.section_offsets.contains_key(&Section::Exemplars));
        assert_eq!(p.section(Section::Values), Some("V"));
    }

    #[test]
    fn exemplar_sits_between_rule_and_values() {
        let ex = Exemplar {
            value_block: "Sensor 1: abs_z = 4.0".into(),
            label: Label::Anomaly,
            rationale: "At or above 3.0: Sensor 1 (|z| = 4.0).".into(),
        };
        let p = compose_prompt(&stub_modules(), &[ex], "V").unwrap();
        let rule = &p.section_offsets[&Section::Rule];
        let exs = &p.section_offsets[&Section::Exemplars];
        let vals = &p.section_offsets[&Section::Values];
        assert!(rule.end <= exs.start && exs.end <= vals.start);
        assert!(p.section(Section::Exemplars).unwrap().contains("Label: anomaly"));
    }

    #[test]
    fn empty_module_rejected() {
        let mut m = stub_modules();
        m.context_text = "  ".into();
        assert!(matches!(
            compose_prompt(&m, &[], "V"),
            Err(PromptError::EmptyModule("context"))
        ));
    }

    #[test]
    fn default_modules_mention_threshold() {
        let rule = RuleConfig::default();
        let m = PromptModules::defaults(&rule);
        m.validate(&rule).unwrap();
        assert!(m.rule_text.contains("3.0"));
        assert!(!m.rule_text.contains("{tau}"));
        let other = RuleConfig::new(2.5, 1e-9).unwrap();
        assert!(matches!(m.validate(&other), Err(PromptError::MissingThreshold(_))));
    }

    #[test]
    fn template_directory_loads() {
        let dir = tempfile::tempdir().unwrap();
        for name in TEMPLATE_FILES {
            let body = if name == "rule.txt" { "flag at {tau}" } else { "text" };
            fs::write(dir.path().join(name), body).unwrap();
        }
        let rule = RuleConfig::new(2.5, 1e-9).unwrap();
        let m = PromptModules::load(dir.path(), &rule).unwrap();
        assert_eq!(m.rule_text, "flag at 2.5");
        fs::write(dir.path().join("role.txt"), "").unwrap();
        assert!(matches!(
            PromptModules::load(dir.path(), &rule),
            Err(PromptError::EmptyModule("role"))
        ));
    }

    #[test]
    fn parse_style_and_paradigm() {
        assert_eq!("zscore".parse::<Setup>().unwrap(), Setup::ZScoreOnly);
        assert_eq!("setup2".parse::<Setup>().unwrap(), Setup::MeanStdValue);
        assert!("bogus".parse::<Setup>().is_err());
        assert_eq!("icl".parse::<PromptParadigm>().unwrap(), PromptParadigm::Icl);
        assert!("lora".parse::<PromptParadigm>().is_err());
    }
}
