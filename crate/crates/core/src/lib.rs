//! Multi-label learning and interpretation toolkit.
//!
//! * [`dataset`]: vocabularies, examples, class weights, synthetic long-tail
//!   data and the JSON-lines manifest format
//! * [`losses`]: BCE, WARP, LSEP and wLSEP with analytic gradients
//! * [`metrics`]: top-k accuracy, micro and macro mAP
//! * [`trainer`]: linear scorer, SGD with momentum, gradient checking
//! * [`mcam`]: multi-label class activation maps with region separation
//! * [`dissect`]: unit/concept IoU interpretation and single-unit probes
//! * [`tensor_file`]: the binary tensor format used for models and activations

pub mod dataset;
pub mod dissect;
pub mod losses;
pub mod mcam;
pub mod metrics;
pub mod tensor_file;
pub mod trainer;

pub use dataset::{
    compute_class_weights, generate_synthetic_dataset, load_dataset, save_dataset, ClassWeights,
    Dataset, LabelSet, LabelVocabulary, MultiLabelExample, SyntheticConfig, SyntheticTask,
    WeightScheme,
};
pub use losses::{LossKind, LossResult};
pub use metrics::MetricsReport;
pub use tensor_file::Tensor;
pub use trainer::{evaluate, train, ModelParameters, OptimizerConfig, TrainingLog};
