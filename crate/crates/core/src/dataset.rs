//! Label vocabulary, multi-label examples, class weighting, the synthetic
//! long-tail generator, and the JSON-lines manifest format.
//!
//! A manifest is a header line followed by one line per example:
//!
//! ```text
//! {"classes":["running","jumping","swimming"]}
//! {"id":"ex0","features":[0.5,-1.0,2.0],"labels":[0,2]}
//! {"id":"ex1","features_file":{"path":"feats.mmtt","row":1},"labels":[1]}
//! ```
//!
//! `features_file` paths are resolved relative to the manifest and must point
//! at a 2-D tensor file (one row per example). Saving always writes inline
//! features.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor_file::{Tensor, TensorFileError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("vocabulary needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("duplicate class name {0:?}")]
    DuplicateClass(String),
    #[error("example {id:?}: label {label} out of range for {classes} classes")]
    LabelOutOfRange {
        id: String,
        label: usize,
        classes: usize,
    },
    #[error("example {0:?} has no positive labels")]
    EmptyLabels(String),
    #[error("example {0:?} has non-finite features")]
    NonFiniteFeatures(String),
    #[error("example {id:?} has {got} features, expected {expected}")]
    FeatureLength {
        id: String,
        expected: usize,
        got: usize,
    },
    #[error("inverse-frequency weights undefined: classes {0:?} have no positive examples")]
    EmptyClasses(Vec<usize>),
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error(transparent)]
    Tensor(#[from] TensorFileError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// Ordered class names; a class index is its position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVocabulary {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelVocabulary {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.len() < 2 {
            return Err(DatasetError::TooFewClasses(names.len()));
        }
        let mut index = HashMap::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(DatasetError::DuplicateClass(name.clone()));
            }
        }
        Ok(Self { names, index })
    }

    /// `class_0 .. class_{n-1}`.
    pub fn numbered(classes: usize) -> Result<Self> {
        Self::new((0..classes).map(|i| format!("class_{i}")))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }
}

/// Sorted, duplicate-free set of positive class indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(from = "Vec<usize>", into = "Vec<usize>")]
pub struct LabelSet(Vec<usize>);

impl LabelSet {
    pub fn new(labels: impl IntoIterator<Item = usize>) -> Self {
        let set: BTreeSet<usize> = labels.into_iter().collect();
        Self(set.into_iter().collect())
    }

    pub fn contains(&self, class: usize) -> bool {
        self.0.binary_search(&class).is_ok()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn max(&self) -> Option<usize> {
        self.0.last().copied()
    }

    /// Dense 0/1 membership view over `classes` entries.
    pub fn dense(&self, classes: usize) -> Vec<bool> {
        let mut out = vec![false; classes];
        for &c in &self.0 {
            if c < classes {
                out[c] = true;
            }
        }
        out
    }
}

impl From<Vec<usize>> for LabelSet {
    fn from(v: Vec<usize>) -> Self {
        Self::new(v)
    }
}

impl From<LabelSet> for Vec<usize> {
    fn from(s: LabelSet) -> Self {
        s.0
    }
}

impl<const N: usize> From<[usize; N]> for LabelSet {
    fn from(v: [usize; N]) -> Self {
        Self::new(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiLabelExample {
    pub id: String,
    pub features: Vec<f64>,
    pub labels: LabelSet,
}

impl MultiLabelExample {
    pub fn new(id: impl Into<String>, features: Vec<f64>, labels: impl Into<LabelSet>) -> Self {
        Self {
            id: id.into(),
            features,
            labels: labels.into(),
        }
    }
}

/// A validated collection of examples over one vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    vocabulary: LabelVocabulary,
    examples: Vec<MultiLabelExample>,
    class_counts: Vec<usize>,
}

impl Dataset {
    pub fn new(vocabulary: LabelVocabulary, examples: Vec<MultiLabelExample>) -> Result<Self> {
        let classes = vocabulary.len();
        let feature_len = examples.first().map(|e| e.features.len());
        let mut class_counts = vec![0; classes];
        for ex in &examples {
            if ex.labels.is_empty() {
                return Err(DatasetError::EmptyLabels(ex.id.clone()));
            }
            if let Some(label) = ex.labels.max().filter(|&l| l >= classes) {
                return Err(DatasetError::LabelOutOfRange {
                    id: ex.id.clone(),
                    label,
                    classes,
                });
            }
            if Some(ex.features.len()) != feature_len {
                return Err(DatasetError::FeatureLength {
                    id: ex.id.clone(),
                    expected: feature_len.unwrap_or(0),
                    got: ex.features.len(),
                });
            }
            if ex.features.iter().any(|v| !v.is_finite()) {
                return Err(DatasetError::NonFiniteFeatures(ex.id.clone()));
            }
            for c in ex.labels.iter() {
                class_counts[c] += 1;
            }
        }
        Ok(Self {
            vocabulary,
            examples,
            class_counts,
        })
    }

    pub fn vocabulary(&self) -> &LabelVocabulary {
        &self.vocabulary
    }

    pub fn examples(&self) -> &[MultiLabelExample] {
        &self.examples
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn num_classes(&self) -> usize {
        self.vocabulary.len()
    }

    /// Feature dimension, or 0 for an empty dataset.
    pub fn num_features(&self) -> usize {
        self.examples.first().map_or(0, |e| e.features.len())
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    Uniform,
    InverseFrequency,
}

pub const MIN_CLASS_WEIGHT: f64 = 0.1;
pub const MAX_CLASS_WEIGHT: f64 = 10.0;

/// Per-class balancing terms, all finite and positive.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn uniform(classes: usize) -> Self {
        Self(vec![1.0; classes])
    }

    /// Returns `None` if any weight is non-finite or not strictly positive.
    pub fn new(weights: Vec<f64>) -> Option<Self> {
        weights
            .iter()
            .all(|w| w.is_finite() && *w > 0.0)
            .then_some(Self(weights))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scaled(&self, factor: f64) -> Option<Self> {
        Self::new(self.0.iter().map(|w| w * factor).collect())
    }
}

impl std::ops::Index<usize> for ClassWeights {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// `w_i = N_lab / (C * n_i)` clamped to `[0.1, 10]` for inverse frequency,
/// where `N_lab` is the total number of positive labels.
pub fn compute_class_weights(dataset: &Dataset, scheme: WeightScheme) -> Result<ClassWeights> {
    let counts = dataset.class_counts();
    match scheme {
        WeightScheme::Uniform => Ok(ClassWeights::uniform(counts.len())),
        WeightScheme::InverseFrequency => {
            let empty: Vec<usize> = (0..counts.len()).filter(|&i| counts[i] == 0).collect();
            if !empty.is_empty() {
                return Err(DatasetError::EmptyClasses(empty));
            }
            let total: usize = counts.iter().sum();
            let classes = counts.len() as f64;
            let weights = counts
                .iter()
                .map(|&n| {
                    (total as f64 / (classes * n as f64)).clamp(MIN_CLASS_WEIGHT, MAX_CLASS_WEIGHT)
                })
                .collect();
            Ok(ClassWeights(weights))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub features: usize,
    pub examples: usize,
    pub zipf_exponent: f64,
    pub co_label_prob: f64,
    pub noise_std: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 20,
            features: 32,
            examples: 1000,
            zipf_exponent: 1.2,
            co_label_prob: 0.3,
            noise_std: 0.5,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(DatasetError::InvalidConfig(m));
        if self.classes < 2 {
            return fail(format!("classes must be >= 2, got {}", self.classes));
        }
        if self.features < self.classes {
            return fail(format!(
                "features ({}) must be >= classes ({})",
                self.features, self.classes
            ));
        }
        if self.examples < self.classes {
            return fail(format!(
                "examples ({}) must be >= classes ({})",
                self.examples, self.classes
            ));
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent >= 0.0) {
            return fail(format!("zipf exponent must be >= 0, got {}", self.zipf_exponent));
        }
        if !(0.0..=1.0).contains(&self.co_label_prob) {
            return fail(format!("co-label probability must be in [0, 1], got {}", self.co_label_prob));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return fail(format!("noise std must be >= 0, got {}", self.noise_std));
        }
        Ok(())
    }

    /// Zipf class proportions `p_i ∝ (i + 1)^-s`.
    pub fn zipf_proportions(&self) -> Vec<f64> {
        let raw: Vec<f64> = (0..self.classes)
            .map(|i| ((i + 1) as f64).powf(-self.zipf_exponent))
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|p| p / total).collect()
    }
}

/// A fixed draw of orthonormal class directions from which any number of
/// example sets can be sampled. Train and evaluation splits sampled from the
/// same task share the ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    config: SyntheticConfig,
    directions: Vec<Vec<f64>>,
    vocabulary: LabelVocabulary,
    seed: u64,
}

impl SyntheticTask {
    pub fn new(config: SyntheticConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let directions = orthonormal_directions(config.classes, config.features, &mut rng);
        let vocabulary = LabelVocabulary::numbered(config.classes)?;
        Ok(Self {
            config,
            directions,
            vocabulary,
            seed,
        })
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.config
    }

    pub fn directions(&self) -> &[Vec<f64>] {
        &self.directions
    }

    /// Samples `n` examples. `stream` selects an independent random stream so
    /// that e.g. stream 0 is the training split and stream 1 the evaluation
    /// split.
    pub fn sample(&self, n: usize, stream: u64) -> Result<Dataset> {
        let cfg = &self.config;
        if n < cfg.classes {
            return Err(DatasetError::InvalidConfig(format!(
                "examples ({n}) must be >= classes ({})",
                cfg.classes
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream + 1);
        let proportions = cfg.zipf_proportions();
        let counts = allocate_counts(&proportions, n);

        let mut primaries: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(c, &k)| std::iter::repeat_n(c, k))
            .collect();
        primaries.shuffle(&mut rng);

        // Extra labels keep the long tail: among examples whose primary label
        // differs, a fixed share `co_label_prob · p_c / p_0` receives class c,
        // chosen uniformly. Exact counts keep class totals non-increasing.
        let head = proportions[0];
        let mut extra: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (c, &p) in proportions.iter().enumerate() {
            let eligible: Vec<usize> = (0..n).filter(|&k| primaries[k] != c).collect();
            let take = (eligible.len() as f64 * cfg.co_label_prob * p / head).round() as usize;
            for i in sample(&mut rng, eligible.len(), take.min(eligible.len())) {
                extra[eligible[i]].push(c);
            }
        }

        let noise = Normal::new(0.0, cfg.noise_std)
            .map_err(|e| DatasetError::InvalidConfig(e.to_string()))?;
        let width = n.to_string().len();
        let examples = primaries
            .into_iter()
            .zip(extra)
            .enumerate()
            .map(|(k, (primary, extra))| {
                let mut labels = extra;
                labels.push(primary);
                let labels = LabelSet::new(labels);
                let mut features = vec![0.0; cfg.features];
                for c in labels.iter() {
                    for (f, d) in features.iter_mut().zip(&self.directions[c]) {
                        *f += d;
                    }
                }
                if cfg.noise_std > 0.0 {
                    for f in features.iter_mut() {
                        *f += noise.sample(&mut rng);
                    }
                }
                MultiLabelExample {
                    id: format!("s{stream}_{k:0width$}"),
                    features,
                    labels,
                }
            })
            .collect();
        Dataset::new(self.vocabulary.clone(), examples)
    }
}

/// Builds a dataset of `config.examples` examples; a pure function of
/// `(config, seed)`.
pub fn generate_synthetic_dataset(config: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    SyntheticTask::new(config.clone(), seed)?.sample(config.examples, 0)
}

fn orthonormal_directions(classes: usize, features: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(classes);
    while basis.len() < classes {
        let mut v: Vec<f64> = (0..features).map(|_| normal.sample(rng)).collect();
        // Two Gram-Schmidt passes keep the basis orthogonal to rounding level.
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

/// Largest-remainder allocation of `n` items to the given proportions, with
/// every class receiving at least one item (taken from the largest class).
fn allocate_counts(proportions: &[f64], n: usize) -> Vec<usize> {
    let exact: Vec<f64> = proportions.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let assigned: usize = counts.iter().sum();
    for &i in order.iter().take(n - assigned) {
        counts[i] += 1;
    }
    for i in 0..counts.len() {
        if counts[i] == 0 {
            let largest = (0..counts.len())
                .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
                .unwrap_or(0);
            counts[largest] -= 1;
            counts[i] = 1;
        }
    }
    counts
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    classes: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features_file: Option<FeaturesRef>,
    labels: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeaturesRef {
    path: PathBuf,
    row: usize,
}

/// Writes the manifest to any writer.
pub fn write_manifest<W: Write>(dataset: &Dataset, mut out: W) -> Result<()> {
    let header = ManifestHeader {
        classes: dataset.vocabulary.names.clone(),
    };
    serde_json::to_writer(&mut out, &header).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    for ex in &dataset.examples {
        let line = ManifestLine {
            id: ex.id.clone(),
            features: Some(ex.features.clone()),
            features_file: None,
            labels: ex.labels.as_slice().to_vec(),
        };
        serde_json::to_writer(&mut out, &line).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_manifest(dataset, BufWriter::new(File::create(path)?))
}

/// Reads a manifest. `base_dir` resolves relative `features_file` paths.
pub fn read_manifest<R: BufRead>(reader: R, base_dir: &Path) -> Result<Dataset> {
    let mut vocabulary = None;
    let mut examples = Vec::new();
    let mut feature_tables: HashMap<PathBuf, Tensor> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| DatasetError::Manifest {
            line: line_no,
            message,
        };
        let Some(vocab) = &vocabulary else {
            let header: ManifestHeader =
                serde_json::from_str(&line).map_err(|e| bad(format!("bad header: {e}")))?;
            vocabulary = Some(LabelVocabulary::new(header.classes).map_err(|e| bad(e.to_string()))?);
            continue;
        };
        let entry: ManifestLine = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if entry.labels.is_empty() {
            return Err(bad(format!("example {:?} has no labels", entry.id)));
        }
        if let Some(&label) = entry.labels.iter().find(|&&l| l >= vocab.len()) {
            return Err(bad(format!(
                "label {label} out of range for {} classes",
                vocab.len()
            )));
        }
        let features = match (entry.features, entry.features_file) {
            (Some(f), None) => f,
            (None, Some(r)) => {
                let path = base_dir.join(&r.path);
                if !feature_tables.contains_key(&path) {
                    let t = Tensor::read_file(&path).map_err(|e| bad(e.to_string()))?;
                    feature_tables.insert(path.clone(), t);
                }
                let table = &feature_tables[&path];
                table
                    .row(r.row)
                    .ok_or_else(|| bad(format!("row {} not in {}", r.row, path.display())))?
                    .to_vec()
            }
            _ => return Err(bad("exactly one of features / features_file required".into())),
        };
        examples.push(MultiLabelExample::new(entry.id, features, entry.labels));
    }
    let vocabulary = vocabulary.ok_or(DatasetError::Manifest {
        line: 1,
        message: "missing header line".into(),
    })?;
    Dataset::new(vocabulary, examples)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    read_manifest(BufReader::new(File::open(path)?), base)
}
