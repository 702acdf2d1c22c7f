//! Linear (optionally with a logistic hidden branch) multi-label scorer,
//! deterministic mini-batch SGD with momentum, and finite-difference
//! gradient checking.

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{compute_class_weights, ClassWeights, Dataset, DatasetError, LabelSet, WeightScheme};
use crate::losses::{LossError, LossKind, LossResult, ScoreVector};
use crate::metrics::{metrics_report, MetricsError, MetricsReport};
use crate::tensor_file::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("feature vector has {got} entries, model expects {expected}")]
    FeatureLength { expected: usize, got: usize },
    #[error("model scores {model} classes, dataset has {dataset}")]
    ClassCount { model: usize, dataset: usize },
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("invalid model tensors: {0}")]
    ModelFormat(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Logistic hidden branch added to the linear head:
/// `scores += output^T σ(input^T x + bias)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLayer {
    /// F×H
    pub input: Array2<f64>,
    /// H
    pub bias: Array1<f64>,
    /// H×C
    pub output: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    /// F×C
    pub weights: Array2<f64>,
    /// C
    pub bias: Array1<f64>,
    pub hidden: Option<HiddenLayer>,
}

/// Intermediate values from a forward pass, needed for backprop.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub scores: ScoreVector,
    hidden_activations: Option<Array1<f64>>,
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl ModelParameters {
    pub fn zeros(features: usize, classes: usize) -> Self {
        Self {
            weights: Array2::zeros((features, classes)),
            bias: Array1::zeros(classes),
            hidden: None,
        }
    }

    /// Small Gaussian initialisation (std 0.01), a pure function of `seed`.
    pub fn init(features: usize, classes: usize, hidden_units: Option<usize>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.01).expect("valid std");
        let mut draw = |shape: (usize, usize)| {
            Array2::from_shape_simple_fn(shape, || normal.sample(&mut rng))
        };
        let weights = draw((features, classes));
        let hidden = hidden_units.map(|h| HiddenLayer {
            input: draw((features, h)),
            bias: Array1::zeros(h),
            output: draw((h, classes)),
        });
        Self {
            weights,
            bias: Array1::zeros(classes),
            hidden,
        }
    }

    pub fn num_features(&self) -> usize {
        self.weights.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.ncols()
    }

    pub fn forward_pass(&self, features: &[f64]) -> Result<ForwardPass> {
        if features.len() != self.num_features() {
            return Err(TrainError::FeatureLength {
                expected: self.num_features(),
                got: features.len(),
            });
        }
        let x = ArrayView1::from(features);
        let mut scores = self.weights.t().dot(&x) + &self.bias;
        let hidden_activations = self.hidden.as_ref().map(|h| {
            let act = (h.input.t().dot(&x) + &h.bias).mapv(logistic);
            scores += &h.output.t().dot(&act);
            act
        });
        Ok(ForwardPass {
            scores: scores.to_vec(),
            hidden_activations,
        })
    }

    /// Raw class scores for one feature vector.
    pub fn forward(&self, features: &[f64]) -> Result<ScoreVector> {
        Ok(self.forward_pass(features)?.scores)
    }

    /// Parameter gradients given `d loss / d scores`, in the same layout as
    /// the model.
    pub fn backward(&self, features: &[f64], pass: &ForwardPass, score_grad: &[f64]) -> Self {
        let mut grad = self.zeros_like();
        self.backward_into(&mut grad, features, pass, score_grad);
        grad
    }

    /// Adds the gradients that [`backward`](Self::backward) would return to `grad`.
    pub fn backward_into(&self, grad: &mut Self, features: &[f64], pass: &ForwardPass, score_grad: &[f64]) {
        let g = ArrayView1::from(score_grad);
        let add_outer = |acc: &mut Array2<f64>, a: ArrayView1<f64>, b: ArrayView1<f64>| {
            for (mut row, &ai) in acc.rows_mut().into_iter().zip(a) {
                row.scaled_add(ai, &b);
            }
        };
        if let (Some(h), Some(act), Some(gh)) = (&self.hidden, &pass.hidden_activations, &mut grad.hidden) {
            let d_act = h.output.dot(&g);
            let d_pre = &d_act * &act.mapv(|a| a * (1.0 - a));
            add_outer(&mut gh.input, ArrayView1::from(features), d_pre.view());
            gh.bias += &d_pre;
            add_outer(&mut gh.output, act.view(), g);
        }
        add_outer(&mut grad.weights, ArrayView1::from(features), g);
        grad.bias += &g;
    }

    /// Every parameter array as a flat mutable slice, in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![
            self.weights.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ];
        if let Some(h) = &mut self.hidden {
            out.push(h.input.as_slice_mut().expect("standard layout"));
            out.push(h.bias.as_slice_mut().expect("standard layout"));
            out.push(h.output.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = vec![
            self.weights.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ];
        if let Some(h) = &self.hidden {
            out.push(h.input.as_slice().expect("standard layout"));
            out.push(h.bias.as_slice().expect("standard layout"));
            out.push(h.output.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for p in z.params_mut() {
            p.fill(0.0);
        }
        z
    }

    /// The head as `[(F+1) x C]` (weights, then the bias row), followed by
    /// `[(F+1) x H]` and `[H x C]` for the hidden branch when present.
    pub fn to_tensors(&self) -> Vec<Tensor> {
        let with_bias = |w: &Array2<f64>, b: &Array1<f64>| {
            let mut rows = w.clone();
            rows.push_row(b.view()).expect("bias length matches columns");
            Tensor::from_array(&rows)
        };
        let mut out = vec![with_bias(&self.weights, &self.bias)];
        if let Some(h) = &self.hidden {
            out.push(with_bias(&h.input, &h.bias));
            out.push(Tensor::from_array(&h.output));
        }
        out
    }

    pub fn from_tensors(tensors: &[Tensor]) -> Result<Self> {
        let bad = |m: &str| TrainError::ModelFormat(m.to_string());
        let split = |t: &Tensor| -> Result<(Array2<f64>, Array1<f64>)> {
            let &[rows, cols] = t.dims() else {
                return Err(bad("expected a 2-D tensor"));
            };
            if rows < 2 {
                return Err(bad("need at least one weight row and a bias row"));
            }
            let all = Array2::from_shape_vec((rows, cols), t.data().to_vec())
                .map_err(|e| TrainError::ModelFormat(e.to_string()))?;
            Ok((
                all.slice(ndarray::s![..rows - 1, ..]).to_owned(),
                all.row(rows - 1).to_owned(),
            ))
        };
        match tensors {
            [head] => {
                let (weights, bias) = split(head)?;
                Ok(Self { weights, bias, hidden: None })
            }
            [head, input, output] => {
                let (weights, bias) = split(head)?;
                let (w_in, b_in) = split(input)?;
                let &[h, c] = output.dims() else {
                    return Err(bad("hidden output must be 2-D"));
                };
                if w_in.nrows() != weights.nrows() || w_in.ncols() != h || c != weights.ncols() {
                    return Err(bad("hidden layer shapes do not match the head"));
                }
                let output = Array2::from_shape_vec((h, c), output.data().to_vec())
                    .map_err(|e| TrainError::ModelFormat(e.to_string()))?;
                Ok(Self {
                    weights,
                    bias,
                    hidden: Some(HiddenLayer { input: w_in, bias: b_in, output }),
                })
            }
            _ => Err(bad("expected 1 or 3 tensors")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub weight_scheme: WeightScheme,
    /// Width of the optional logistic hidden branch.
    pub hidden_units: Option<usize>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            epochs: 100,
            batch_size: 32,
            seed: 0,
            loss: LossKind::Wlsep,
            weight_scheme: WeightScheme::Uniform,
            hidden_units: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return fail(format!("learning rate must be >= 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.epochs == 0 {
            return fail("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch size must be positive".into());
        }
        if self.hidden_units == Some(0) {
            return fail("hidden layer needs at least one unit".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    /// Mean per-example loss seen during each epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss\n");
        for (e, l) in self.epoch_losses.iter().enumerate() {
            out.push_str(&format!("{},{}\n", e + 1, l));
        }
        out
    }
}

/// Loss of one example and its parameter gradients. Examples without any
/// negative class contribute nothing under WARP.
pub fn example_gradients(
    model: &ModelParameters,
    features: &[f64],
    labels: &LabelSet,
    loss: LossKind,
    weights: &ClassWeights,
) -> Result<(f64, ModelParameters)> {
    let mut grad = model.zeros_like();
    let value = accumulate_example(model, &mut grad, features, labels, loss, weights)?;
    Ok((value, grad))
}

fn accumulate_example(
    model: &ModelParameters,
    grad: &mut ModelParameters,
    features: &[f64],
    labels: &LabelSet,
    loss: LossKind,
    weights: &ClassWeights,
) -> Result<f64> {
    let pass = model.forward_pass(features)?;
    match loss.evaluate(&pass.scores, labels, weights) {
        Err(LossError::NoNegatives) => Ok(0.0),
        other => {
            let LossResult { value, gradient } = other?;
            model.backward_into(grad, features, &pass, &gradient);
            Ok(value)
        }
    }
}

/// Trains from [`ModelParameters::init`] seeded with `config.seed`.
pub fn train(dataset: &Dataset, config: &OptimizerConfig) -> Result<(ModelParameters, TrainingLog)> {
    let model = ModelParameters::init(
        dataset.num_features(),
        dataset.num_classes(),
        config.hidden_units,
        config.seed,
    );
    train_from(model, dataset, config)
}

/// Mini-batch SGD with momentum from the given starting point. The batch
/// gradient is the mean of the per-example gradients, accumulated in batch
/// order.
pub fn train_from(
    mut model: ModelParameters,
    dataset: &Dataset,
    config: &OptimizerConfig,
) -> Result<(ModelParameters, TrainingLog)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    check_shapes(&model, dataset)?;
    let weights = compute_class_weights(dataset, config.weight_scheme)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut velocity = model.zeros_like();
    let mut log = TrainingLog::default();
    let examples = dataset.examples();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        // Indexed by example so the epoch mean does not depend on the shuffle.
        let mut example_losses = vec![0.0; dataset.len()];
        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut grad = model.zeros_like();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let ex = &examples[i];
                let loss =
                    accumulate_example(&model, &mut grad, &ex.features, &ex.labels, config.loss, &weights)?;
                batch_loss += loss;
                example_losses[i] = loss;
            }
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFinite { epoch: epoch + 1, batch: batch + 1 });
            }
            let scale = 1.0 / chunk.len() as f64;
            let params = model.params_mut();
            for ((p, v), g) in params
                .into_iter()
                .zip(velocity.params_mut())
                .zip(grad.params())
            {
                for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                    *vi = config.momentum * *vi + gi * scale;
                    *pi -= config.learning_rate * *vi;
                }
            }
            if !model.is_finite() {
                return Err(TrainError::NonFinite { epoch: epoch + 1, batch: batch + 1 });
            }
        }
        log.epoch_losses.push(example_losses.iter().sum::<f64>() / dataset.len() as f64);
    }
    Ok((model, log))
}

fn check_shapes(model: &ModelParameters, dataset: &Dataset) -> Result<()> {
    if model.num_classes() != dataset.num_classes() {
        return Err(TrainError::ClassCount {
            model: model.num_classes(),
            dataset: dataset.num_classes(),
        });
    }
    if !dataset.is_empty() && model.num_features() != dataset.num_features() {
        return Err(TrainError::FeatureLength {
            expected: model.num_features(),
            got: dataset.num_features(),
        });
    }
    Ok(())
}

/// Score vectors for every example, in dataset order.
pub fn predict(model: &ModelParameters, dataset: &Dataset) -> Result<Vec<ScoreVector>> {
    check_shapes(model, dataset)?;
    dataset
        .examples()
        .iter()
        .map(|ex| model.forward(&ex.features))
        .collect()
}

pub fn evaluate(model: &ModelParameters, dataset: &Dataset) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    Ok(metrics_report(&predict(model, dataset)?, dataset)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    /// Max over non-kink coordinates of
    /// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_relative_error: f64,
    /// Coordinates whose ±ε neighbourhood crosses a non-differentiable point.
    pub kinks: Vec<usize>,
}

/// The discrete state that WARP's piecewise-linear form depends on: the rank
/// of every positive and which hinges are active.
fn warp_regime(scores: &[f64], labels: &LabelSet) -> Vec<usize> {
    use crate::losses::rank_of;
    let mut state = Vec::new();
    for i in labels.iter() {
        state.push(rank_of(scores, i));
        for (j, &xj) in scores.iter().enumerate() {
            if !labels.contains(j) {
                state.push(usize::from(1.0 + xj - scores[i] > 0.0));
            }
        }
    }
    state
}

/// Central-difference check of the analytic score gradient of `loss`.
pub fn gradient_check(
    loss: LossKind,
    scores: &[f64],
    labels: &LabelSet,
    weights: &ClassWeights,
    epsilon: f64,
) -> Result<GradientCheck> {
    if !(epsilon > 0.0 && epsilon <= 1e-3) {
        return Err(TrainError::InvalidConfig(format!(
            "epsilon must be in (0, 1e-3], got {epsilon}"
        )));
    }
    let analytic = loss.evaluate(scores, labels, weights)?.gradient;
    let base_regime = (loss == LossKind::Warp).then(|| warp_regime(scores, labels));
    let mut probe = scores.to_vec();
    let mut max_relative_error = 0.0_f64;
    let mut kinks = Vec::new();
    for k in 0..scores.len() {
        probe[k] = scores[k] + epsilon;
        let plus = loss.evaluate(&probe, labels, weights)?.value;
        let plus_regime = base_regime.as_ref().map(|_| warp_regime(&probe, labels));
        probe[k] = scores[k] - epsilon;
        let minus = loss.evaluate(&probe, labels, weights)?.value;
        let minus_regime = base_regime.as_ref().map(|_| warp_regime(&probe, labels));
        probe[k] = scores[k];
        if let Some(base) = &base_regime {
            if plus_regime.as_ref() != Some(base) || minus_regime.as_ref() != Some(base) {
                kinks.push(k);
                continue;
            }
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let denom = 1.0_f64.max(analytic[k].abs()).max(numeric.abs());
        max_relative_error = max_relative_error.max((analytic[k] - numeric).abs() / denom);
    }
    Ok(GradientCheck {
        max_relative_error,
        kinks,
    })
}
