//! Verdict extraction from model replies and rule-adherence scoring.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::telemetry::{apply_rule, Label, RuleConfig, ZScoreVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseFailure {
    #[error("reply is empty")]
    EmptyReply,
    #[error("reply contains no normal/anomaly label")]
    MissingLabel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedVerdict {
    pub label: Label,
    pub explanation: String,
    /// 0-based ids, sorted and deduplicated.
    pub cited_sensor_ids: Vec<usize>,
    pub raw_reply: String,
}

// "abnormal" is deliberately not a keyword; \b keeps it from matching "normal".
static KEYWORD: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(normal|anomaly|anomalous)\b").expect("valid regex"));

static CITATION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\bsensor\s+(\d+)\b").expect("valid regex"));

/// Finds the first standalone label keyword. The explanation is the rest of
/// that line after the keyword plus every following line.
pub fn parse_response(reply: &str) -> Result<ParsedVerdict, ParseFailure> {
    let cleaned: String = reply.chars().filter(|c| !matches!(c, '*' | '`')).collect();
    let cleaned = cleaned.trim();
    if cleaned.is_empty() {
        return Err(ParseFailure::EmptyReply);
    }
    let m = KEYWORD.find(cleaned).ok_or(ParseFailure::MissingLabel)?;
    let label = match m.as_str().to_ascii_lowercase().as_str() {
        "normal" => Label::Nominal,
        _ => Label::Anomaly,
    };

    let rest = &cleaned[m.end()..];
    let (same_line, following) = match rest.find('\n') {
        Some(i) => (&rest[..i], &rest[i + 1..]),
        None => (rest, ""),
    };
    let same_line = same_line.trim_start_matches(|c: char| c.is_whitespace() || ".:;,-".contains(c));
    let explanation = [same_line.trim(), following.trim()]
        .iter()
        .filter(|s| !s.is_empty())
        .copied()
        .collect::<Vec<_>>()
        .join("\n");

    let mut cited: Vec<usize> = CITATION
        .captures_iter(&explanation)
        .filter_map(|c| c[1].parse::<usize>().ok())
        .filter_map(|display| display.checked_sub(1))
        .collect();
    cited.sort_unstable();
    cited.dedup();

    Ok(ParsedVerdict {
        label,
        explanation,
        cited_sensor_ids: cited,
        raw_reply: reply.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdherenceReport {
    pub label_matches_rule: bool,
    /// Fraction of cited sensors that the rule flags (1.0 when nothing is cited).
    pub citations_valid: f64,
    /// Fraction of flagged sensors that are cited (1.0 when nothing is flagged).
    pub citations_complete: f64,
}

pub fn check_rule_adherence(v: &ParsedVerdict, z: &ZScoreVector, rule: &RuleConfig) -> AdherenceReport {
    let (truth, flagged) = apply_rule(z, rule).unwrap_or((Label::Nominal, Vec::new()));
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    let valid = v
        .cited_sensor_ids
        .iter()
        .filter(|id| flagged.binary_search(id).is_ok())
        .count();
    let complete = flagged
        .iter()
        .filter(|id| v.cited_sensor_ids.binary_search(id).is_ok())
        .count();
    AdherenceReport {
        label_matches_rule: v.label == truth,
        citations_valid: ratio(valid, v.cited_sensor_ids.len()),
        citations_complete: ratio(complete, flagged.len()),
    }
}
