use mlkit_core::metrics::{average_precision, macro_map, micro_map, per_class_ap, top_k_accuracy};
use mlkit_core::{Dataset, LabelSet, LabelVocabulary, MultiLabelExample};
use proptest::prelude::*;

/// Position of item `i` when sorting by score descending, ties by index.
fn position(scores: &[f64], i: usize) -> usize {
    1 + (0..scores.len())
        .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
        .count()
}

/// Literal AP: mean over positives of precision at that positive's position.
fn brute_ap(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let positives: Vec<usize> = (0..scores.len()).filter(|&i| positive[i]).collect();
    if positives.is_empty() {
        return None;
    }
    let total: f64 = positives
        .iter()
        .map(|&i| {
            let r = position(scores, i);
            let hits = positives.iter().filter(|&&j| position(scores, j) <= r).count();
            hits as f64 / r as f64
        })
        .sum();
    Some(total / positives.len() as f64)
}

#[derive(Debug, Clone)]
struct Case {
    scores: Vec<Vec<f64>>,
    labels: Vec<Vec<usize>>,
    classes: usize,
}

impl Case {
    fn dataset(&self) -> Dataset {
        let examples = self
            .labels
            .iter()
            .enumerate()
            .map(|(i, l)| MultiLabelExample::new(format!("e{i}"), vec![0.0], LabelSet::new(l.clone())))
            .collect();
        Dataset::new(LabelVocabulary::numbered(self.classes).unwrap(), examples).unwrap()
    }
}

/// N <= 50 examples, C <= 10 classes. Scores are coarse half-integers half
/// of the time so ties are common.
fn case() -> impl Strategy<Value = Case> {
    (2usize..=10, 1usize..=50, any::<bool>())
        .prop_flat_map(|(c, n, coarse)| {
            let score = if coarse {
                (-4i32..4).prop_map(|v| f64::from(v) / 2.0).boxed()
            } else {
                (-5.0..5.0f64).boxed()
            };
            (
                Just(c),
                prop::collection::vec(prop::collection::vec(score, c), n),
                prop::collection::vec(prop::collection::vec(any::<bool>(), c), n),
            )
        })
        .prop_map(|(classes, scores, mask)| {
            let labels = mask
                .iter()
                .enumerate()
                .map(|(i, m)| {
                    let mut l: Vec<usize> = (0..classes).filter(|&c| m[c]).collect();
                    if l.is_empty() {
                        l.push(i % classes);
                    }
                    l
                })
                .collect();
            Case { scores, labels, classes }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(250))]

    #[test]
    fn ap_matches_brute_force(case in case()) {
        for (s, l) in case.scores.iter().zip(&case.labels) {
            let positive: Vec<bool> = (0..case.classes).map(|c| l.contains(&c)).collect();
            let got = average_precision(s, &LabelSet::new(l.clone())).unwrap();
            prop_assert!((got - brute_ap(s, &positive).unwrap()).abs() <= 1e-12);
        }
    }

    #[test]
    fn micro_and_macro_match_brute_force(case in case()) {
        let data = case.dataset();
        let n = case.scores.len();
        let micro: f64 = case
            .scores
            .iter()
            .zip(&case.labels)
            .map(|(s, l)| brute_ap(s, &(0..case.classes).map(|c| l.contains(&c)).collect::<Vec<_>>()).unwrap())
            .sum::<f64>()
            / n as f64;
        prop_assert!((micro_map(&case.scores, &data).unwrap() - micro).abs() <= 1e-12);

        let per_class: Vec<Option<f64>> = (0..case.classes)
            .map(|c| {
                let column: Vec<f64> = case.scores.iter().map(|s| s[c]).collect();
                let positive: Vec<bool> = case.labels.iter().map(|l| l.contains(&c)).collect();
                brute_ap(&column, &positive)
            })
            .collect();
        let got = per_class_ap(&case.scores, &data).unwrap();
        for (g, e) in got.iter().zip(&per_class) {
            match (g, e) {
                (Some(g), Some(e)) => prop_assert!((g - e).abs() <= 1e-12),
                (None, None) => {}
                _ => prop_assert!(false, "defined-ness differs: {g:?} vs {e:?}"),
            }
        }
        let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
        let macro_expected = defined.iter().sum::<f64>() / defined.len() as f64;
        prop_assert!((macro_map(&case.scores, &data).unwrap() - macro_expected).abs() <= 1e-12);
    }

    #[test]
    fn ap_survives_strictly_monotone_maps(case in case()) {
        for (s, l) in case.scores.iter().zip(&case.labels) {
            let labels = LabelSet::new(l.clone());
            let base = average_precision(s, &labels).unwrap();
            let cubed: Vec<f64> = s.iter().map(|x| x * x * x + 2.0 * x - 7.0).collect();
            let squashed: Vec<f64> = s.iter().map(|x| x.atan()).collect();
            prop_assert!((average_precision(&cubed, &labels).unwrap() - base).abs() <= 1e-12);
            prop_assert!((average_precision(&squashed, &labels).unwrap() - base).abs() <= 1e-12);
        }
    }

    #[test]
    fn ap_is_one_exactly_when_positives_lead(case in case()) {
        for (s, l) in case.scores.iter().zip(&case.labels) {
            let ap = average_precision(s, &LabelSet::new(l.clone())).unwrap();
            let leading = (0..case.classes)
                .filter(|c| l.contains(c))
                .all(|i| (0..case.classes).filter(|c| !l.contains(c)).all(|j| position(s, i) < position(s, j)));
            prop_assert_eq!(ap == 1.0, leading);
        }
    }

    #[test]
    fn ap_is_smallest_with_positives_last(c in 2usize..=30, p in 1usize..30) {
        let p = p.min(c);
        // positives at the bottom of the ranking
        let scores: Vec<f64> = (0..c).map(|i| -(i as f64)).collect();
        let labels = LabelSet::new(c - p..c);
        let worst: f64 = (1..=p).map(|k| k as f64 / (c - p + k) as f64).sum::<f64>() / p as f64;
        let ap = average_precision(&scores, &labels).unwrap();
        prop_assert!((ap - worst).abs() <= 1e-12);
        // no other placement of p positives scores lower
        for start in 0..=c - p {
            let other = LabelSet::new(start..start + p);
            prop_assert!(average_precision(&scores, &other).unwrap() >= ap - 1e-15);
        }
    }

    #[test]
    fn top_k_never_decreases(case in case()) {
        let data = case.dataset();
        let mut last = 0.0;
        for k in 1..=case.classes + 1 {
            let acc = top_k_accuracy(&case.scores, &data, k).unwrap();
            prop_assert!(acc >= last);
            last = acc;
        }
        prop_assert_eq!(last, 1.0);
    }
}
