//! Top-k accuracy and average-precision metrics.
//!
//! Micro mAP ranks the classes of each example and averages the per-example
//! AP. Macro mAP ranks the examples for each class and averages the per-class
//! AP over classes that have at least one positive. Score ties are always
//! broken by ascending index, so every report is reproducible bit for bit.

use std::cmp::Ordering;

use serde::Serialize;
use thiserror::Error;

use crate::dataset::{Dataset, LabelSet};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("{predictions} score vectors for {examples} examples")]
    CountMismatch { predictions: usize, examples: usize },
    #[error("score vector {index} has {got} entries, expected {expected}")]
    ScoreLength {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("no class has a positive example")]
    NoPositiveClasses,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// One score vector per dataset example, in dataset order.
pub type PredictionSet = [Vec<f64>];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub top1: f64,
    pub top5: f64,
    pub micro_map: f64,
    pub macro_map: f64,
    /// `None` for classes without positive examples.
    pub per_class_ap: Vec<Option<f64>>,
}

impl MetricsReport {
    /// Rows of `metric,value`; undefined per-class APs are left empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (name, v) in [
            ("top1", self.top1),
            ("top5", self.top5),
            ("micro_map", self.micro_map),
            ("macro_map", self.macro_map),
        ] {
            out.push_str(&format!("{name},{v}\n"));
        }
        for (c, ap) in self.per_class_ap.iter().enumerate() {
            match ap {
                Some(v) => out.push_str(&format!("per_class_ap[{c}],{v}\n")),
                None => out.push_str(&format!("per_class_ap[{c}],\n")),
            }
        }
        out
    }
}

/// Descending by score, ascending by index among ties.
fn ranking_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    order
}

/// AP of a ranking where `relevant[k]` marks the positives. `None` when
/// nothing is relevant.
fn ranked_ap(scores: &[f64], relevant: impl Fn(usize) -> bool) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, idx) in ranking_order(scores).into_iter().enumerate() {
        if relevant(idx) {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Average precision of one score vector against its positive classes, or
/// `None` if `positives` is empty.
pub fn average_precision(scores: &[f64], positives: &LabelSet) -> Option<f64> {
    ranked_ap(scores, |c| positives.contains(c))
}

fn check_predictions(predictions: &PredictionSet, dataset: &Dataset) -> Result<()> {
    if dataset.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    if predictions.len() != dataset.len() {
        return Err(MetricsError::CountMismatch {
            predictions: predictions.len(),
            examples: dataset.len(),
        });
    }
    let classes = dataset.num_classes();
    match predictions.iter().position(|s| s.len() != classes) {
        Some(index) => Err(MetricsError::ScoreLength {
            index,
            expected: classes,
            got: predictions[index].len(),
        }),
        None => Ok(()),
    }
}

/// Fraction of examples with a positive class among the `k` best scores.
pub fn top_k_accuracy(predictions: &PredictionSet, dataset: &Dataset, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(MetricsError::ZeroK);
    }
    check_predictions(predictions, dataset)?;
    let hits = predictions
        .iter()
        .zip(dataset.examples())
        .filter(|(scores, ex)| {
            ranking_order(scores)
                .into_iter()
                .take(k)
                .any(|c| ex.labels.contains(c))
        })
        .count();
    Ok(hits as f64 / dataset.len() as f64)
}

/// Mean over examples of the per-example AP.
pub fn micro_map(predictions: &PredictionSet, dataset: &Dataset) -> Result<f64> {
    check_predictions(predictions, dataset)?;
    let sum: f64 = predictions
        .iter()
        .zip(dataset.examples())
        .map(|(scores, ex)| average_precision(scores, &ex.labels).unwrap_or(0.0))
        .sum();
    Ok(sum / dataset.len() as f64)
}

/// Per-class retrieval AP, ranking the examples by their score for that class.
pub fn per_class_ap(predictions: &PredictionSet, dataset: &Dataset) -> Result<Vec<Option<f64>>> {
    check_predictions(predictions, dataset)?;
    let examples = dataset.examples();
    let mut column = vec![0.0; predictions.len()];
    Ok((0..dataset.num_classes())
        .map(|c| {
            for (slot, scores) in column.iter_mut().zip(predictions) {
                *slot = scores[c];
            }
            ranked_ap(&column, |e| examples[e].labels.contains(c))
        })
        .collect())
}

/// Mean of the defined per-class APs.
pub fn macro_map(predictions: &PredictionSet, dataset: &Dataset) -> Result<f64> {
    mean_defined(&per_class_ap(predictions, dataset)?)
}

fn mean_defined(aps: &[Option<f64>]) -> Result<f64> {
    let defined: Vec<f64> = aps.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(MetricsError::NoPositiveClasses);
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

pub fn metrics_report(predictions: &PredictionSet, dataset: &Dataset) -> Result<MetricsReport> {
    let per_class_ap = per_class_ap(predictions, dataset)?;
    Ok(MetricsReport {
        top1: top_k_accuracy(predictions, dataset, 1)?,
        top5: top_k_accuracy(predictions, dataset, 5)?,
        micro_map: micro_map(predictions, dataset)?,
        macro_map: mean_defined(&per_class_ap)?,
        per_class_ap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{LabelVocabulary, MultiLabelExample};
    use approx::assert_abs_diff_eq;

    fn dataset(classes: usize, labels: &[&[usize]]) -> Dataset {
        let vocab = LabelVocabulary::numbered(classes).unwrap();
        let examples = labels
            .iter()
            .enumerate()
            .map(|(i, l)| MultiLabelExample::new(format!("e{i}"), vec![0.0], l.to_vec()))
            .collect();
        Dataset::new(vocab, examples).unwrap()
    }

    #[test]
    fn ap_reference_values() {
        let perfect = average_precision(&[0.9, 0.8, 0.1], &LabelSet::from([0, 1])).unwrap();
        assert_eq!(perfect, 1.0);
        // positives at sorted ranks 1 and 3
        let ap = average_precision(&[4.0, 3.0, 2.0, 1.0], &LabelSet::from([0, 2])).unwrap();
        assert_abs_diff_eq!(ap, (1.0 + 2.0 / 3.0) / 2.0, epsilon = 1e-15);
        let last = average_precision(&[3.0, 2.0, 1.0], &LabelSet::from([2])).unwrap();
        assert_abs_diff_eq!(last, 1.0 / 3.0, epsilon = 1e-15);
        assert_eq!(average_precision(&[1.0, 2.0], &LabelSet::default()), None);
    }

    #[test]
    fn ties_break_by_class_index() {
        // Class 1 ties with class 0 and loses the tie.
        let ap = average_precision(&[0.0, 0.0], &LabelSet::from([1])).unwrap();
        assert_eq!(ap, 0.5);
        let ap = average_precision(&[0.0, 0.0], &LabelSet::from([0])).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn top_k_reference_values() {
        let d = dataset(6, &[&[2]]);
        let scores = vec![vec![0.9, 0.8, 0.72, 0.7, 0.75, 0.1]]; // class 2 ranked fourth
        assert_eq!(top_k_accuracy(&scores, &d, 5).unwrap(), 1.0);
        assert_eq!(top_k_accuracy(&scores, &d, 1).unwrap(), 0.0);
        let scores = vec![vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0]];
        assert_eq!(top_k_accuracy(&scores, &d, 1).unwrap(), 1.0);

        let d = dataset(3, &[&[0], &[1]]);
        let scores = vec![vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]];
        assert_eq!(top_k_accuracy(&scores, &d, 1).unwrap(), 0.5);
        // k beyond C is clamped by construction
        assert_eq!(top_k_accuracy(&scores, &d, 10).unwrap(), 1.0);
        assert_eq!(top_k_accuracy(&scores, &d, 0), Err(MetricsError::ZeroK));
    }

    #[test]
    fn micro_is_mean_of_example_aps() {
        let d = dataset(2, &[&[0], &[0]]);
        let scores = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(micro_map(&scores, &d).unwrap(), 0.75);
    }

    #[test]
    fn macro_single_class_counted() {
        // class 0 positives at example ranks 1 and 3 of 4; class 1 has none
        let d = dataset(3, &[&[0], &[2], &[0], &[2]]);
        let scores = vec![
            vec![4.0, 0.0, 0.0],
            vec![3.0, 0.0, 1.0],
            vec![2.0, 0.0, 0.0],
            vec![1.0, 0.0, 1.0],
        ];
        let aps = per_class_ap(&scores, &d).unwrap();
        assert_abs_diff_eq!(aps[0].unwrap(), 5.0 / 6.0, epsilon = 1e-15);
        assert_eq!(aps[1], None);
        assert_eq!(aps[2], Some(1.0));
    }

    #[test]
    fn head_class_inflates_micro_over_macro() {
        // Every example is labeled with the head class 0 (ranked first);
        // tail class c is positive only in example c-1, where its score is
        // the lowest of all examples for that class.
        let classes = 10;
        let labels: Vec<Vec<usize>> = (0..10)
            .map(|e| if e < 9 { vec![0, e + 1] } else { vec![0] })
            .collect();
        let refs: Vec<&[usize]> = labels.iter().map(Vec::as_slice).collect();
        let d = dataset(classes, &refs);
        let scores: Vec<Vec<f64>> = (0..10)
            .map(|e| {
                (0..classes)
                    .map(|c| match c {
                        0 => 10.0,
                        c if c == e + 1 => 0.0,
                        _ => 1.0,
                    })
                    .collect()
            })
            .collect();
        let report = metrics_report(&scores, &d).unwrap();
        assert_eq!(report.per_class_ap[0], Some(1.0));
        for c in 1..classes {
            assert_abs_diff_eq!(report.per_class_ap[c].unwrap(), 0.1, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(report.macro_map, 0.19, epsilon = 1e-15);
        assert_abs_diff_eq!(report.micro_map, (9.0 * 0.6 + 1.0) / 10.0, epsilon = 1e-15);
        assert!(report.micro_map > report.macro_map);
    }

    #[test]
    fn errors() {
        let d = dataset(2, &[&[0]]);
        assert_eq!(
            micro_map(&[], &d),
            Err(MetricsError::CountMismatch { predictions: 0, examples: 1 })
        );
        assert!(matches!(
            macro_map(&[vec![1.0]], &d),
            Err(MetricsError::ScoreLength { .. })
        ));
        let empty = Dataset::new(LabelVocabulary::numbered(2).unwrap(), vec![]).unwrap();
        assert_eq!(top_k_accuracy(&[], &empty, 1), Err(MetricsError::EmptyDataset));
    }

    #[test]
    fn csv_marks_undefined_classes() {
        let r = MetricsReport {
            top1: 1.0,
            top5: 1.0,
            micro_map: 0.5,
            macro_map: 0.25,
            per_class_ap: vec![Some(0.25), None],
        };
        assert_eq!(
            r.to_csv(),
            "metric,value\ntop1,1\ntop5,1\nmicro_map,0.5\nmacro_map,0.25\nper_class_ap[0],0.25\nper_class_ap[1],\n"
        );
    }
}
