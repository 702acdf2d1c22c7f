//! Multi-label losses over raw per-class scores, each returning its value
//! together with the analytic gradient with respect to the scores.
//!
//! | loss  | form |
//! |-------|------|
//! | BCE   | mean over classes of `-w_i [y_i log σ(x_i) + (1-y_i) log(1-σ(x_i))]` |
//! | WARP  | `1/|Y| Σ_{i∈Y} w_i H(rank(x_i)) Σ_{j∉Y} max(0, 1 + x_j - x_i)` |
//! | LSEP  | `log(1 + Σ_{i∈Y} Σ_{j∉Y} exp(x_j - x_i))` |
//! | wLSEP | `1/|Y| Σ_{i∈Y} w_i log(1 + Σ_{j∉Y} exp(x_j - x_i))` |
//!
//! `H(r)` is the r-th harmonic number. All pairwise sums are evaluated in
//! full; nothing is sampled.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ClassWeights, LabelSet};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("score vector has {scores} entries but {weights} class weights were given")]
    WeightLength { scores: usize, weights: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("label set is empty")]
    EmptyLabels,
    #[error("no negative classes")]
    NoNegatives,
    #[error("non-finite score at class {0}")]
    NonFiniteScore(usize),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Raw (pre-sigmoid) model outputs, one per class.
pub type ScoreVector = Vec<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    /// Derivative of `value` with respect to each score.
    pub gradient: Vec<f64>,
}

impl LossResult {
    fn zero(classes: usize) -> Self {
        Self {
            value: 0.0,
            gradient: vec![0.0; classes],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Bce,
    Warp,
    Lsep,
    Wlsep,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::Bce, LossKind::Warp, LossKind::Lsep, LossKind::Wlsep];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Bce => "bce",
            LossKind::Warp => "warp",
            LossKind::Lsep => "lsep",
            LossKind::Wlsep => "wlsep",
        }
    }

    /// LSEP has no per-class weighting; `weights` is validated but unused.
    pub fn evaluate(
        self,
        scores: &[f64],
        labels: &LabelSet,
        weights: &ClassWeights,
    ) -> Result<LossResult> {
        match self {
            LossKind::Bce => bce_loss(scores, labels, weights),
            LossKind::Warp => warp_loss(scores, labels, weights),
            LossKind::Lsep => {
                check_weights(scores, weights)?;
                lsep_loss(scores, labels)
            }
            LossKind::Wlsep => wlsep_loss(scores, labels, weights),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown loss {s:?} (expected bce, warp, lsep or wlsep)"))
    }
}

fn check_scores(scores: &[f64], labels: &LabelSet) -> Result<()> {
    if let Some(i) = scores.iter().position(|x| !x.is_finite()) {
        return Err(LossError::NonFiniteScore(i));
    }
    if labels.is_empty() {
        return Err(LossError::EmptyLabels);
    }
    match labels.max() {
        Some(label) if label >= scores.len() => Err(LossError::LabelOutOfRange {
            label,
            classes: scores.len(),
        }),
        _ => Ok(()),
    }
}

fn check_weights(scores: &[f64], weights: &ClassWeights) -> Result<()> {
    if weights.len() != scores.len() {
        return Err(LossError::WeightLength {
            scores: scores.len(),
            weights: weights.len(),
        });
    }
    Ok(())
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross entropy on raw scores, averaged over all classes.
pub fn bce_loss(scores: &[f64], labels: &LabelSet, weights: &ClassWeights) -> Result<LossResult> {
    check_scores(scores, labels)?;
    check_weights(scores, weights)?;
    let classes = scores.len() as f64;
    let positive = labels.dense(scores.len());
    let mut value = 0.0;
    let mut gradient = Vec::with_capacity(scores.len());
    for (i, &x) in scores.iter().enumerate() {
        let w = weights[i];
        if positive[i] {
            // -log σ(x) = softplus(-x); d/dx = σ(x) - 1 = -σ(-x)
            value += w * softplus(-x);
            gradient.push(-w * sigmoid(-x) / classes);
        } else {
            // -log(1 - σ(x)) = softplus(x)
            value += w * softplus(x);
            gradient.push(w * sigmoid(x) / classes);
        }
    }
    Ok(LossResult {
        value: value / classes,
        gradient,
    })
}

/// `1 + |{j : x_j > x_i}|`. Tied classes share the best rank.
pub fn rank_of(scores: &[f64], i: usize) -> usize {
    let xi = scores[i];
    1 + scores.iter().filter(|&&x| x > xi).count()
}

/// Harmonic number `H_r = Σ_{k=1..r} 1/k`.
pub fn rank_weight(r: usize) -> f64 {
    (1..=r).map(|k| 1.0 / k as f64).sum()
}

/// WARP pairwise hinge loss. The rank weight is held constant when
/// differentiating, and a hinge sitting exactly at its kink contributes no
/// subgradient.
pub fn warp_loss(scores: &[f64], labels: &LabelSet, weights: &ClassWeights) -> Result<LossResult> {
    check_scores(scores, labels)?;
    check_weights(scores, weights)?;
    let positive = labels.dense(scores.len());
    if labels.len() == scores.len() {
        return Err(LossError::NoNegatives);
    }
    let norm = labels.len() as f64;
    let mut result = LossResult::zero(scores.len());
    for i in labels.iter() {
        let coef = weights[i] * rank_weight(rank_of(scores, i)) / norm;
        let mut hinge_sum = 0.0;
        for (j, &xj) in scores.iter().enumerate() {
            if positive[j] {
                continue;
            }
            let margin = 1.0 + xj - scores[i];
            if margin > 0.0 {
                hinge_sum += margin;
                result.gradient[j] += coef;
                result.gradient[i] -= coef;
            }
        }
        result.value += coef * hinge_sum;
    }
    Ok(result)
}

/// `log(1 + Σ_k exp(a_k))` for the pair exponents `a_k`, plus the softmax
/// coefficients `exp(a_k) / (1 + Σ exp(a))` that form the gradient.
fn log1p_sum_exp(exponents: &[f64]) -> (f64, Vec<f64>) {
    // The "+1" is a virtual pair with exponent 0.
    let shift = exponents.iter().copied().fold(0.0_f64, f64::max);
    let value = if shift == 0.0 {
        exponents.iter().map(|a| a.exp()).sum::<f64>().ln_1p()
    } else {
        let sum = (-shift).exp() + exponents.iter().map(|a| (a - shift).exp()).sum::<f64>();
        shift + sum.ln()
    };
    let coefs = exponents.iter().map(|a| (a - value).exp()).collect();
    (value, coefs)
}

/// LSEP: a single smooth log-sum-exp over every positive/negative pair.
/// A full label set has no pairs and yields zero.
pub fn lsep_loss(scores: &[f64], labels: &LabelSet) -> Result<LossResult> {
    check_scores(scores, labels)?;
    let positive = labels.dense(scores.len());
    let negatives: Vec<usize> = (0..scores.len()).filter(|&j| !positive[j]).collect();
    let mut pairs = Vec::with_capacity(labels.len() * negatives.len());
    let mut exponents = Vec::with_capacity(pairs.capacity());
    for i in labels.iter() {
        for &j in &negatives {
            pairs.push((i, j));
            exponents.push(scores[j] - scores[i]);
        }
    }
    let mut result = LossResult::zero(scores.len());
    if pairs.is_empty() {
        return Ok(result);
    }
    let (value, coefs) = log1p_sum_exp(&exponents);
    result.value = value;
    for (&(i, j), c) in pairs.iter().zip(coefs) {
        result.gradient[j] += c;
        result.gradient[i] -= c;
    }
    Ok(result)
}

/// wLSEP: one log-sum-exp per positive class, weighted and averaged over
/// the positives.
pub fn wlsep_loss(scores: &[f64], labels: &LabelSet, weights: &ClassWeights) -> Result<LossResult> {
    check_scores(scores, labels)?;
    check_weights(scores, weights)?;
    let positive = labels.dense(scores.len());
    let negatives: Vec<usize> = (0..scores.len()).filter(|&j| !positive[j]).collect();
    let mut result = LossResult::zero(scores.len());
    if negatives.is_empty() {
        return Ok(result);
    }
    let norm = labels.len() as f64;
    let mut exponents = Vec::with_capacity(negatives.len());
    for i in labels.iter() {
        exponents.clear();
        exponents.extend(negatives.iter().map(|&j| scores[j] - scores[i]));
        let (value, coefs) = log1p_sum_exp(&exponents);
        let scale = weights[i] / norm;
        result.value += scale * value;
        for (&j, c) in negatives.iter().zip(coefs) {
            result.gradient[j] += scale * c;
            result.gradient[i] -= scale * c;
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ones(c: usize) -> ClassWeights {
        ClassWeights::uniform(c)
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn bce_reference_values() {
        let r = bce_loss(&[0.0], &LabelSet::from([0]), &ones(1)).unwrap();
        assert_abs_diff_eq!(r.value, std::f64::consts::LN_2, epsilon = 1e-15);

        let r = bce_loss(&[2.0, -1.0], &LabelSet::from([0]), &ones(2)).unwrap();
        let expected = (-(sig(2.0)).ln() - (1.0 - sig(-1.0)).ln()) / 2.0;
        assert_abs_diff_eq!(r.value, expected, epsilon = 1e-15);
        assert_abs_diff_eq!(r.value, 0.220095, epsilon = 1e-6);
        assert_abs_diff_eq!(r.gradient[0], (sig(2.0) - 1.0) / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.gradient[1], sig(-1.0) / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn bce_saturates_without_overflow() {
        let r = bce_loss(&[40.0, -40.0], &LabelSet::from([0]), &ones(2)).unwrap();
        assert!(r.value.is_finite() && r.value < 1e-15);
        let r = bce_loss(&[-500.0, 500.0], &LabelSet::from([0]), &ones(2)).unwrap();
        assert_abs_diff_eq!(r.value, 500.0, epsilon = 1e-9);
        assert!(r.gradient.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn ranks_use_strict_comparison() {
        assert_eq!(rank_of(&[5.0, 1.0, 0.0], 0), 1);
        assert_eq!(rank_of(&[0.0, 0.0, 0.0], 2), 1);
        assert_eq!(rank_of(&[0.0, 2.0, 0.5], 0), 3);
    }

    #[test]
    fn harmonic_rank_weights() {
        assert_eq!(rank_weight(1), 1.0);
        assert_abs_diff_eq!(rank_weight(2), 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(rank_weight(3), 1.0 + 0.5 + 1.0 / 3.0, epsilon = 1e-15);
        for r in 1..50 {
            assert!(rank_weight(r + 1) > rank_weight(r));
        }
    }

    #[test]
    fn warp_reference_values() {
        let y = LabelSet::from([0]);
        assert_eq!(warp_loss(&[5.0, 0.0], &y, &ones(2)).unwrap().value, 0.0);
        assert_eq!(warp_loss(&[0.0, 0.0], &y, &ones(2)).unwrap().value, 1.0);
        let r = warp_loss(&[0.0, 2.0, 0.5], &y, &ones(3)).unwrap();
        assert_abs_diff_eq!(r.value, (11.0 / 6.0) * 4.5, epsilon = 1e-12);
        assert_abs_diff_eq!(r.value, 8.25, epsilon = 1e-12);
        let w = 11.0 / 6.0;
        assert_abs_diff_eq!(r.gradient[0], -2.0 * w, epsilon = 1e-12);
        assert_abs_diff_eq!(r.gradient[1], w, epsilon = 1e-12);
        assert_abs_diff_eq!(r.gradient[2], w, epsilon = 1e-12);
    }

    #[test]
    fn warp_kink_has_zero_subgradient() {
        // 1 + x_1 - x_0 == 0 exactly.
        let r = warp_loss(&[1.0, 0.0], &LabelSet::from([0]), &ones(2)).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.gradient, vec![0.0, 0.0]);
    }

    #[test]
    fn warp_rejects_full_label_set() {
        assert_eq!(
            warp_loss(&[0.0, 1.0], &LabelSet::from([0, 1]), &ones(2)),
            Err(LossError::NoNegatives)
        );
    }

    #[test]
    fn lsep_reference_values() {
        let all = lsep_loss(&[0.3, -2.0], &LabelSet::from([0, 1])).unwrap();
        assert_eq!(all.value, 0.0);
        assert_eq!(all.gradient, vec![0.0, 0.0]);

        let r = lsep_loss(&[0.0, 0.0], &LabelSet::from([0])).unwrap();
        assert_abs_diff_eq!(r.value, std::f64::consts::LN_2, epsilon = 1e-15);

        let r = lsep_loss(&[1.0, 0.0, -1.0], &LabelSet::from([0])).unwrap();
        let expected = (1.0 + (-1.0f64).exp() + (-2.0f64).exp()).ln();
        assert_abs_diff_eq!(r.value, expected, epsilon = 1e-15);
        assert_abs_diff_eq!(r.value, 0.4076060, epsilon = 1e-7);
    }

    #[test]
    fn wlsep_reference_values() {
        let y = LabelSet::from([0, 1]);
        let r = wlsep_loss(&[0.0, 0.0, 0.0], &y, &ones(3)).unwrap();
        assert_abs_diff_eq!(r.value, std::f64::consts::LN_2, epsilon = 1e-15);
        let twos = ClassWeights::new(vec![2.0, 2.0, 1.0]).unwrap();
        let r = wlsep_loss(&[0.0, 0.0, 0.0], &y, &twos).unwrap();
        assert_abs_diff_eq!(r.value, 2.0 * std::f64::consts::LN_2, epsilon = 1e-15);
        let all = wlsep_loss(&[1.0, 2.0], &LabelSet::from([0, 1]), &ones(2)).unwrap();
        assert_eq!(all, LossResult::zero(2));
    }

    #[test]
    fn wlsep_single_positive_matches_lsep_bitwise() {
        let x = [0.7, -1.3, 2.2, 0.0, -4.0];
        let y = LabelSet::from([2]);
        assert_eq!(
            wlsep_loss(&x, &y, &ones(5)).unwrap(),
            lsep_loss(&x, &y).unwrap()
        );
    }

    #[test]
    fn input_validation() {
        let y = LabelSet::from([0]);
        assert_eq!(
            bce_loss(&[0.0, f64::NAN], &y, &ones(2)),
            Err(LossError::NonFiniteScore(1))
        );
        assert_eq!(
            lsep_loss(&[0.0, 1.0], &LabelSet::default()),
            Err(LossError::EmptyLabels)
        );
        assert_eq!(
            wlsep_loss(&[0.0, 1.0], &LabelSet::from([2]), &ones(2)),
            Err(LossError::LabelOutOfRange { label: 2, classes: 2 })
        );
        assert_eq!(
            LossKind::Lsep.evaluate(&[0.0, 1.0], &y, &ones(3)),
            Err(LossError::WeightLength { scores: 2, weights: 3 })
        );
    }

    #[test]
    fn kind_parses_names() {
        for k in LossKind::ALL {
            assert_eq!(k.name().parse::<LossKind>().unwrap(), k);
        }
        assert!("hinge".parse::<LossKind>().is_err());
    }
}
