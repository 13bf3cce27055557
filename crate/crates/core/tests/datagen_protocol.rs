mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::default_dataset;
use ruleprompt::datagen::{
    audit_labels, generate_dataset, parse_dataset, read_dataset, sample_nominal, splits_disjoint,
    write_dataset, DatagenError, GenerationOptions, InjectionSpec, SplitCounts, SplitName,
    SyntheticModel,
};
use ruleprompt::{Label, RuleConfig};

fn class_counts(d: &ruleprompt::datagen::DatasetSplit, name: SplitName) -> (usize, usize) {
    let s = d.split(name);
    let anomalies = s.iter().filter(|x| x.label == Label::Anomaly).count();
    (s.len() - anomalies, anomalies)
}

#[test]
fn default_protocol_sizes_and_labels() {
    let d = default_dataset();
    assert_eq!(class_counts(d, SplitName::Train), (600, 600));
    assert_eq!(class_counts(d, SplitName::Validation), (100, 100));
    assert_eq!(class_counts(d, SplitName::Test), (100, 100));
    assert!(audit_labels(d).unwrap().is_empty());
    assert!(splits_disjoint(d));
    assert_eq!(d.manifest.sensor_count, 255);
}

#[test]
fn anomalies_carry_their_injection() {
    let d = default_dataset();
    for s in d.train.iter().chain(&d.test) {
        match s.label {
            Label::Anomaly => {
                assert_eq!(s.injected_ids.len(), 3);
                assert!(!s.flagged_ids.is_empty());
            }
            Label::Nominal => {
                assert!(s.injected_ids.is_empty());
                assert!(s.flagged_ids.is_empty());
            }
        }
    }
}

#[test]
fn file_round_trip_is_exact() {
    let d = default_dataset();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    write_dataset(d, &path).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!(&back, d);
    assert_eq!(back.content_hash(), d.content_hash());
}

#[test]
fn same_seed_same_bytes_different_seed_different_bytes() {
    let counts = SplitCounts::balanced(20, 5, 5);
    let gen = |seed| {
        let model = SyntheticModel::new(8, seed).unwrap();
        generate_dataset(
            &model,
            &InjectionSpec::default(),
            &counts,
            &RuleConfig::default(),
            &GenerationOptions::default(),
        )
        .unwrap()
        .to_jsonl()
    };
    assert_eq!(gen(7), gen(7));
    assert_ne!(gen(7), gen(8));
}

#[test]
fn nominal_sampling_mean_is_within_four_standard_errors() {
    let model = SyntheticModel::new(10, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let n = 10_000;
    let mut sums = vec![0.0; 10];
    for _ in 0..n {
        for (s, v) in sums.iter_mut().zip(sample_nominal(&model, &mut rng).values()) {
            *s += v;
        }
    }
    for j in 0..10 {
        let mean = sums[j] / n as f64;
        let bound = 4.0 * model.base_stds[j] / (n as f64).sqrt();
        assert!(
            (mean - model.base_means[j]).abs() <= bound,
            "sensor {j}: {mean} vs {} (bound {bound})",
            model.base_means[j]
        );
    }
}

#[test]
fn tiny_deviation_cannot_fill_anomaly_quota() {
    let model = SyntheticModel::new(255, 0).unwrap();
    let spec = InjectionSpec {
        deviation_fraction: 0.0001,
        ..InjectionSpec::default()
    };
    let err = generate_dataset(
        &model,
        &spec,
        &SplitCounts::default(),
        &RuleConfig::default(),
        &GenerationOptions::default(),
    )
    .unwrap_err();
    match err {
        DatagenError::QuotaUnreachable { label, .. } => assert_eq!(label, Label::Anomaly),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn header_must_match_body() {
    let d = default_dataset();
    let text = d.to_jsonl();
    let truncated: String = text.lines().take(10).map(|l| format!("{l}\n")).collect();
    assert!(matches!(
        parse_dataset(truncated.as_bytes()),
        Err(DatagenError::Format(_))
    ));
    let bumped = text.replacen("\"schema_version\":1", "\"schema_version\":7", 1);
    let err = parse_dataset(bumped.as_bytes()).unwrap_err();
    assert!(err.to_string().contains("unsupported schema_version 7"), "{err}");
}
