mod common;

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::default_dataset;
use ruleprompt::datagen::DatasetSplit;
use ruleprompt::promptkit::{
    attach_exemplars, compose_prompt, count_tokens, render_value_block, PromptModules,
    PromptParadigm, Section, Setup, ValueBlockStyle,
};
use ruleprompt::telemetry::normalize;

fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Compares against a frozen file; `UPDATE_GOLDEN=1` rewrites it.
fn assert_golden(name: &str, actual: &str) {
    let path = golden_path(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, actual).unwrap();
    }
    let expected = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("missing golden {}: {e}", path.display()));
    assert!(expected == actual, "{name} differs from golden file");
}

fn prompt_for(d: &DatasetSplit, index: usize, setup: Setup, paradigm: PromptParadigm) -> (String, usize) {
    let style = ValueBlockStyle::new(setup);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let exemplars = attach_exemplars(d, paradigm, &style, &mut rng).unwrap();
    let s = &d.test[index];
    let z = normalize(&s.snapshot, &d.stats, &d.rule).unwrap();
    let block = render_value_block(&s.snapshot, &d.stats, &z, &style, &d.sensor_metas()).unwrap();
    let p = compose_prompt(&PromptModules::defaults(&d.rule), &exemplars, &block).unwrap();
    (p.text, p.token_count)
}

#[test]
fn zero_shot_zscore_prompt_is_frozen() {
    let (text, tokens) = prompt_for(default_dataset(), 0, Setup::ZScoreOnly, PromptParadigm::ZeroShot);
    assert_golden("zero_shot_zscore_255.txt", &text);
    assert_eq!(tokens, count_tokens(&text));
    assert_eq!(text.lines().filter(|l| l.contains(": abs_z = ")).count(), 255);
}

#[test]
fn setup_token_ordering_holds_on_every_test_sample() {
    let d = default_dataset();
    for i in 0..d.test.len() {
        let t = |s| prompt_for(d, i, s, PromptParadigm::ZeroShot).1;
        let (v, msv, msvz, zs) = (
            t(Setup::ValueOnly),
            t(Setup::MeanStdValue),
            t(Setup::MeanStdValueZ),
            t(Setup::ZScoreOnly),
        );
        assert!(v < msv && msv < msvz, "sample {i}: {v} {msv} {msvz}");
        assert!(zs as f64 <= 1.2 * v as f64, "sample {i}: {zs} vs {v}");
    }
}

#[test]
fn paradigm_token_ordering() {
    let d = default_dataset();
    for i in [0, 1, 57, 199] {
        let t = |p| prompt_for(d, i, Setup::ZScoreOnly, p).1;
        let (zs, fs, icl) = (
            t(PromptParadigm::ZeroShot),
            t(PromptParadigm::FewShot),
            t(PromptParadigm::Icl),
        );
        assert!(zs < fs && fs < icl, "sample {i}: {zs} {fs} {icl}");
    }
}

#[test]
fn icl_prompt_has_five_labels_before_the_query() {
    let d = default_dataset();
    let (text, _) = prompt_for(d, 3, Setup::ZScoreOnly, PromptParadigm::Icl);
    let query_start = text.rfind("\n\nSensor 1: ").unwrap();
    assert_eq!(text[..query_start].lines().filter(|l| l.starts_with("Label: ")).count(), 5);
    assert_eq!(text[query_start..].lines().filter(|l| l.starts_with("Label: ")).count(), 0);
}

#[test]
fn value_only_prompt_never_mentions_abs_z() {
    let d = default_dataset();
    for p in [PromptParadigm::ZeroShot, PromptParadigm::FewShot, PromptParadigm::Icl] {
        let (text, _) = prompt_for(d, 0, Setup::ValueOnly, p);
        assert!(!text.contains("abs_z"), "{p:?}");
    }
}

#[test]
fn sections_are_contiguous_and_ordered() {
    let d = default_dataset();
    let style = ValueBlockStyle::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ex = attach_exemplars(d, PromptParadigm::FewShot, &style, &mut rng).unwrap();
    let s = &d.test[0];
    let z = normalize(&s.snapshot, &d.stats, &d.rule).unwrap();
    let block = render_value_block(&s.snapshot, &d.stats, &z, &style, &d.sensor_metas()).unwrap();
    let p = compose_prompt(&PromptModules::defaults(&d.rule), &ex, &block).unwrap();
    let order = [
        Section::Role,
        Section::Context,
        Section::Normalization,
        Section::Rule,
        Section::Exemplars,
        Section::Values,
        Section::OutputSchema,
    ];
    let spans: Vec<_> = order.iter().map(|s| p.section_offsets[s].clone()).collect();
    assert_eq!(spans[0].start, 0);
    assert_eq!(spans.last().unwrap().end, p.text.len());
    for w in spans.windows(2) {
        assert_eq!(w[0].end + 2, w[1].start);
        assert_eq!(&p.text[w[0].end..w[1].start], "\n\n");
    }
    assert_eq!(p.section(Section::Values).unwrap(), block);
}
