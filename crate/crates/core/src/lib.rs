//! Rule-aware prompting for numeric telemetry.
//!
//! The crate turns multivariate sensor snapshots into modular prompts whose
//! value block carries normalized deviations, queries a chat-completions
//! endpoint (or a deterministic simulated responder), parses the verdicts and
//! scores them against the three-sigma rule. A small logistic detector fed by
//! a rule-aware sensor filter provides the hybrid pipeline.

pub mod datagen;
pub mod detector;
pub mod gateway;
pub mod harness;
pub mod parser;
pub mod promptkit;
pub mod telemetry;

pub use telemetry::{Label, RuleConfig, SensorStats, Snapshot, ZScoreVector};
