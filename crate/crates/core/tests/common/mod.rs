#![allow(dead_code)]

use std::sync::OnceLock;

use ruleprompt::datagen::{
    generate_dataset, DatasetSplit, GenerationOptions, InjectionSpec, SplitCounts, SyntheticModel,
};
use ruleprompt::RuleConfig;

pub const SEED: u64 = 42;

/// The default 255-sensor dataset, generated once per test binary.
pub fn default_dataset() -> &'static DatasetSplit {
    static DS: OnceLock<DatasetSplit> = OnceLock::new();
    DS.get_or_init(|| {
        let model = SyntheticModel::new(255, SEED).unwrap();
        generate_dataset(
            &model,
            &InjectionSpec::default(),
            &SplitCounts::default(),
            &RuleConfig::default(),
            &GenerationOptions::default(),
        )
        .unwrap()
    })
}
