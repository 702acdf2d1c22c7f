use mlkit_core::dataset::{read_manifest, write_manifest};
use mlkit_core::{
    compute_class_weights, generate_synthetic_dataset, Dataset, LabelSet, LabelVocabulary, MultiLabelExample,
    SyntheticConfig, SyntheticTask, WeightScheme,
};
use proptest::prelude::*;
use std::path::Path;

fn config() -> impl Strategy<Value = SyntheticConfig> {
    (2usize..12, 0usize..8, 0.0..2.5f64, 0.0..=1.0f64, 0.0..1.0f64).prop_flat_map(
        |(classes, extra_features, zipf, co, noise)| {
            (classes..classes * 6 + 1).prop_map(move |examples| SyntheticConfig {
                classes,
                features: classes + extra_features,
                examples,
                zipf_exponent: zipf,
                co_label_prob: co,
                noise_std: noise,
            })
        },
    )
}

fn random_dataset() -> impl Strategy<Value = Dataset> {
    (2usize..6, 1usize..5)
        .prop_flat_map(|(classes, features)| {
            let example = (
                prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), features),
                prop::collection::btree_set(0..classes, 1..=classes),
            );
            (Just(classes), prop::collection::vec(example, 0..12))
        })
        .prop_map(|(classes, rows)| {
            let examples = rows
                .into_iter()
                .enumerate()
                .map(|(i, (f, l))| MultiLabelExample::new(format!("ex \"{i}\""), f, LabelSet::new(l)))
                .collect();
            let names: Vec<String> = (0..classes).map(|c| format!("name {c}, ünï")).collect();
            Dataset::new(LabelVocabulary::new(names).unwrap(), examples).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn manifest_round_trip_is_lossless(data in random_dataset()) {
        let mut buf = Vec::new();
        write_manifest(&data, &mut buf).unwrap();
        let back = read_manifest(buf.as_slice(), Path::new(".")).unwrap();
        prop_assert_eq!(back, data);
    }

    #[test]
    fn generation_is_a_pure_function(cfg in config(), seed in any::<u64>()) {
        let a = generate_synthetic_dataset(&cfg, seed).unwrap();
        let b = generate_synthetic_dataset(&cfg, seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.len(), cfg.examples);
    }

    #[test]
    fn class_totals_follow_the_zipf_order(cfg in config(), seed in any::<u64>()) {
        let data = generate_synthetic_dataset(&cfg, seed).unwrap();
        let counts = data.class_counts();
        prop_assert!(counts.windows(2).all(|w| w[0] >= w[1]), "{:?}", counts);
        prop_assert!(counts.iter().all(|&c| c >= 1));
    }

    #[test]
    fn uniform_weights_are_all_ones(data in random_dataset()) {
        let w = compute_class_weights(&data, WeightScheme::Uniform).unwrap();
        prop_assert!(w.as_slice().iter().all(|&v| v == 1.0));
        prop_assert_eq!(w.len(), data.num_classes());
    }

    #[test]
    fn vocabulary_indexing_is_a_bijection(n in 2usize..40) {
        let names: Vec<String> = (0..n).map(|i| format!("label-{i}")).collect();
        let vocab = LabelVocabulary::new(names.clone()).unwrap();
        for (i, name) in names.iter().enumerate() {
            prop_assert_eq!(vocab.index_of(name), Some(i));
            prop_assert_eq!(vocab.name(i), Some(name.as_str()));
        }
        prop_assert_eq!(vocab.name(n), None);
    }
}

#[test]
fn balanced_inverse_frequency_is_one() {
    for classes in [2, 3, 7] {
        let examples = (0..classes * 4)
            .map(|i| MultiLabelExample::new(format!("e{i}"), vec![0.0], [i % classes]))
            .collect();
        let data = Dataset::new(LabelVocabulary::numbered(classes).unwrap(), examples).unwrap();
        let w = compute_class_weights(&data, WeightScheme::InverseFrequency).unwrap();
        assert!(w.as_slice().iter().all(|&v| v == 1.0), "{:?}", w.as_slice());
    }
}

#[test]
fn noiseless_single_label_examples_are_class_directions() {
    let cfg = SyntheticConfig {
        co_label_prob: 0.0,
        noise_std: 0.0,
        ..SyntheticConfig::default()
    };
    let task = SyntheticTask::new(cfg.clone(), 3).unwrap();
    let data = task.sample(cfg.examples, 0).unwrap();
    for ex in data.examples() {
        assert_eq!(ex.labels.len(), 1);
        let c = ex.labels.as_slice()[0];
        assert_eq!(ex.features, task.directions()[c]);
    }
}

#[test]
fn empirical_counts_track_zipf() {
    let cfg = SyntheticConfig::default();
    let data = generate_synthetic_dataset(&cfg, 11).unwrap();
    let counts = data.class_counts();
    assert!(counts[0] > counts[19]);
    let total: usize = counts.iter().sum();
    for (count, p) in counts.iter().zip(cfg.zipf_proportions()) {
        let share = *count as f64 / total as f64;
        assert!((share - p).abs() <= 0.2 * p, "{share} vs {p}");
    }
}

#[test]
fn splits_share_directions_but_not_examples() {
    let task = SyntheticTask::new(SyntheticConfig::default(), 9).unwrap();
    let (a, b) = (task.sample(200, 0).unwrap(), task.sample(200, 1).unwrap());
    assert_eq!(a.vocabulary(), b.vocabulary());
    assert_ne!(a.examples()[0].features, b.examples()[0].features);
}
