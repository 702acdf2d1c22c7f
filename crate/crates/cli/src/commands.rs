use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufReader, Write};
use std::path::Path;

use ndarray::{Array2, Array3};

use mlkit_core::dataset::{self, DatasetError};
use mlkit_core::dissect::{self, DissectError, DissectParams};
use mlkit_core::mcam::{self, CamError, FeatureStack, SeparationParams, SmoothingParams};
use mlkit_core::tensor_file::{read_tensors, write_tensors, TensorFileError};
use mlkit_core::trainer::{self, TrainError};
use mlkit_core::{LossKind, ModelParameters, OptimizerConfig, SyntheticConfig, SyntheticTask, Tensor, WeightScheme};

use crate::{CamArgs, DissectArgs, EvalArgs, GenDataArgs, LossArg, ReportFormat, TrainArgs, WeightsArg};

#[derive(Debug)]
pub enum CliError {
    Io(String),
    Invalid(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Invalid(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Io(m) | CliError::Invalid(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<TensorFileError> for CliError {
    fn from(e: TensorFileError) -> Self {
        match e {
            TensorFileError::Io(io) => io.into(),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io(io) => io.into(),
            DatasetError::Tensor(t) => t.into(),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Dataset(d) => d.into(),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<CamError> for CliError {
    fn from(e: CamError) -> Self {
        match e {
            CamError::Io(io) => io.into(),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<DissectError> for CliError {
    fn from(e: DissectError) -> Self {
        match e {
            DissectError::Io(io) => io.into(),
            DissectError::Tensor(t) => t.into(),
            DissectError::Model(m) => m.into(),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn with_path<T, E: Into<CliError>>(path: &Path, r: std::result::Result<T, E>) -> Result<T> {
    r.map_err(|e| match e.into() {
        CliError::Io(m) => CliError::Io(format!("{}: {m}", path.display())),
        CliError::Invalid(m) => CliError::Invalid(format!("{}: {m}", path.display())),
        CliError::Numeric(m) => CliError::Numeric(format!("{}: {m}", path.display())),
    })
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => with_path(p, fs::write(p, text)),
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            Ok(stdout.flush()?)
        }
    }
}

fn load_model(path: &Path) -> Result<ModelParameters> {
    let tensors = with_path(path, read_tensors(path))?;
    with_path(path, ModelParameters::from_tensors(&tensors))
}

fn save_model(path: &Path, model: &ModelParameters) -> Result<()> {
    with_path(path, write_tensors(path, &model.to_tensors()))
}

pub fn gen_data(args: GenDataArgs) -> Result<()> {
    let config = SyntheticConfig {
        classes: args.classes,
        features: args.features,
        examples: args.examples,
        zipf_exponent: args.zipf,
        co_label_prob: args.co_label_prob,
        noise_std: args.noise,
    };
    let task = SyntheticTask::new(config, args.seed)?;
    let train = task.sample(args.examples, 0)?;
    with_path(&args.out, dataset::save_dataset(&train, &args.out))?;
    if let (Some(n), Some(path)) = (args.eval_examples, args.eval_out.as_deref()) {
        let held_out = task.sample(n, 1)?;
        with_path(path, dataset::save_dataset(&held_out, path))?;
    }
    Ok(())
}

pub fn train(args: TrainArgs) -> Result<()> {
    let data = with_path(&args.data, dataset::load_dataset(&args.data))?;
    let config = OptimizerConfig {
        learning_rate: args.lr,
        momentum: args.momentum,
        epochs: args.epochs,
        batch_size: args.batch,
        seed: args.seed,
        loss: match args.loss {
            LossArg::Bce => LossKind::Bce,
            LossArg::Warp => LossKind::Warp,
            LossArg::Lsep => LossKind::Lsep,
            LossArg::Wlsep => LossKind::Wlsep,
        },
        weight_scheme: match args.weights {
            WeightsArg::Uniform => WeightScheme::Uniform,
            WeightsArg::Invfreq => WeightScheme::InverseFrequency,
        },
        hidden_units: args.hidden,
    };
    config.validate()?;
    let init = match &args.init_model {
        Some(path) => load_model(path)?,
        None => ModelParameters::init(data.num_features(), data.num_classes(), args.hidden, args.seed),
    };
    if let Some(path) = &args.init_out {
        save_model(path, &init)?;
    }
    let (model, log) = trainer::train_from(init, &data, &config)?;
    save_model(&args.out_model, &model)?;
    if let Some(path) = &args.log {
        with_path(path, fs::write(path, log.to_csv()))?;
    }
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let data = with_path(&args.data, dataset::load_dataset(&args.data))?;
    let model = load_model(&args.model)?;
    let report = trainer::evaluate(&model, &data)?;
    let text = match args.report {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(&report).map_err(|e| CliError::Invalid(e.to_string()))?;
            s.push('\n');
            s
        }
        ReportFormat::Csv => report.to_csv(),
    };
    write_output(args.out.as_deref(), &text)
}

fn read_tensor(path: &Path) -> Result<Tensor> {
    with_path(path, Tensor::read_file(path))
}

pub fn cam(args: CamArgs) -> Result<()> {
    let features = read_tensor(&args.features)?;
    let head = read_tensor(&args.head)?;
    let stack = match *features.dims() {
        [d, h, w] => Array3::from_shape_vec((d, h, w), features.into_data()).expect("dims match payload"),
        ref dims => {
            return Err(CliError::Invalid(format!(
                "{}: expected a D×H×W tensor, got shape {dims:?}",
                args.features.display()
            )))
        }
    };
    let head = match *head.dims() {
        [d, c] => Array2::from_shape_vec((d, c), head.into_data()).expect("dims match payload"),
        ref dims => {
            return Err(CliError::Invalid(format!(
                "{}: expected a D×C tensor, got shape {dims:?}",
                args.head.display()
            )))
        }
    };
    let separation = SeparationParams {
        cosine_threshold: args.cosine_threshold,
        similarity_delta: args.delta,
        activation_floor: args.floor,
    };
    let smoothing = SmoothingParams {
        kernel_size: args.kernel_size,
        sigma: args.sigma,
    };
    let region = mcam::multi_label_cam(&FeatureStack::new(stack)?, &head, &args.classes, &separation, smoothing)?;
    with_path(&args.out_dir, region.export(&args.out_dir))
}

pub fn dissect(args: DissectArgs) -> Result<()> {
    let concepts = with_path(&args.concepts, File::open(&args.concepts).map_err(CliError::from))?;
    let concepts = with_path(&args.concepts, dissect::read_concepts(BufReader::new(concepts)))?;
    let base = args.masks.parent().unwrap_or(Path::new("."));
    let masks = with_path(&args.masks, File::open(&args.masks).map_err(CliError::from))?;
    let segmentation = with_path(&args.masks, dissect::read_segmentation(BufReader::new(masks), base, concepts))?;

    let mut tensors = args
        .activations
        .iter()
        .map(|p| read_tensor(p).map(|t| (p, t)))
        .collect::<Result<Vec<_>>>()?;
    let units = if tensors.len() == 1 && tensors[0].1.dims().len() == 4 {
        let (path, tensor) = tensors.remove(0);
        with_path(path, dissect::units_from_tensor(&tensor))?
    } else {
        tensors
            .iter()
            .enumerate()
            .map(|(i, (p, t))| with_path(p, dissect::unit_from_tensor(i, t)))
            .collect::<Result<Vec<_>>>()?
    };
    let params = DissectParams {
        quantile: args.quantile,
        iou_threshold: args.iou_threshold,
    };
    let (_, report) = dissect::dissect(&units, &segmentation, params)?;

    fs::create_dir_all(&args.out)?;
    let mut json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Invalid(e.to_string()))?;
    json.push('\n');
    let report_path = args.out.join("report.json");
    with_path(&report_path, fs::write(&report_path, json))?;
    let units_path = args.out.join("units.csv");
    with_path(&units_path, fs::write(&units_path, report.units_csv()))
}
