//! Unit interpretation by IoU against concept masks.
//!
//! Each unit's activations are thresholded at a high quantile pooled over the
//! whole image set, upsampled to mask resolution and compared with every
//! concept's masks. A unit is labelled with its best-matching concept when
//! that IoU clears a cutoff.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor_file::{Tensor, TensorFileError};
use crate::trainer::{ModelParameters, TrainError};

#[derive(Debug, Error)]
pub enum DissectError {
    #[error("quantile must be in (0, 0.5], got {0}")]
    Quantile(f64),
    #[error("unit {0} has no activations")]
    EmptyActivations(usize),
    #[error("unit {unit}: image {image} grid is {got:?}, expected {expected:?}")]
    GridShape {
        unit: usize,
        image: usize,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("unit {unit} covers {got} images, expected {expected}")]
    ImageCount { unit: usize, expected: usize, got: usize },
    #[error("mask sets differ: {0}")]
    MaskMismatch(String),
    #[error("unknown category '{0}'")]
    UnknownCategory(String),
    #[error("unknown image '{0}'")]
    UnknownImage(String),
    #[error("unknown concept {0}")]
    UnknownConcept(usize),
    #[error("duplicate {0}")]
    Duplicate(String),
    #[error("rectangle [{x0},{y0},{x1},{y1}) does not fit image '{image}'")]
    Rectangle {
        image: String,
        x0: usize,
        y0: usize,
        x1: usize,
        y1: usize,
    },
    #[error("unit {unit} out of range for {features} features")]
    UnitOutOfRange { unit: usize, features: usize },
    #[error("activation tensor has shape {0:?}")]
    ActivationShape(Vec<usize>),
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error(transparent)]
    Model(#[from] TrainError),
    #[error(transparent)]
    Tensor(#[from] TensorFileError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DissectError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Object,
    Scene,
    Part,
    Material,
    Texture,
    Color,
    Action,
}

impl Category {
    pub const ALL: [Category; 7] = [
        Category::Object,
        Category::Scene,
        Category::Part,
        Category::Material,
        Category::Texture,
        Category::Color,
        Category::Action,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Object => "object",
            Category::Scene => "scene",
            Category::Part => "part",
            Category::Material => "material",
            Category::Texture => "texture",
            Category::Color => "color",
            Category::Action => "action",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = DissectError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Category::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| DissectError::UnknownCategory(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub concept_id: usize,
    pub name: String,
    pub category: Category,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: String,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptMask {
    pub image_id: String,
    pub concept_id: usize,
    pub category: Category,
    pub mask: Array2<bool>,
}

/// Images, the concept index and the concept masks over those images.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    images: Vec<ImageInfo>,
    concepts: Vec<Concept>,
    /// concept position → image position → mask (union of all its regions)
    masks: Vec<Vec<Option<Array2<bool>>>>,
}

impl Segmentation {
    /// Concepts are kept sorted by id. Several masks for the same
    /// (image, concept) are merged by union.
    pub fn new(images: Vec<ImageInfo>, mut concepts: Vec<Concept>, masks: Vec<ConceptMask>) -> Result<Self> {
        for (i, img) in images.iter().enumerate() {
            if images[..i].iter().any(|o| o.id == img.id) {
                return Err(DissectError::Duplicate(format!("image '{}'", img.id)));
            }
        }
        concepts.sort_by_key(|c| c.concept_id);
        for pair in concepts.windows(2) {
            if pair[0].concept_id == pair[1].concept_id {
                return Err(DissectError::Duplicate(format!("concept {}", pair[0].concept_id)));
            }
        }
        let mut table = vec![vec![None; images.len()]; concepts.len()];
        for m in masks {
            let ci = concepts
                .binary_search_by_key(&m.concept_id, |c| c.concept_id)
                .map_err(|_| DissectError::UnknownConcept(m.concept_id))?;
            let ii = images
                .iter()
                .position(|img| img.id == m.image_id)
                .ok_or_else(|| DissectError::UnknownImage(m.image_id.clone()))?;
            let info = &images[ii];
            if m.mask.dim() != (info.height, info.width) {
                return Err(DissectError::MaskMismatch(format!(
                    "mask for image '{}' is {:?}, image is {:?}",
                    info.id,
                    m.mask.dim(),
                    (info.height, info.width)
                )));
            }
            let slot: &mut Option<Array2<bool>> = &mut table[ci][ii];
            match slot {
                Some(existing) => existing.zip_mut_with(&m.mask, |a, &b| *a |= b),
                None => *slot = Some(m.mask),
            }
        }
        Ok(Self {
            images,
            concepts,
            masks: table,
        })
    }

    pub fn images(&self) -> &[ImageInfo] {
        &self.images
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    /// Mask of concept (by position in [`Self::concepts`]) on one image.
    pub fn mask(&self, concept: usize, image: usize) -> Option<&Array2<bool>> {
        self.masks[concept][image].as_ref()
    }
}

/// One unit's activation grids, one per image, all the same size.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitActivations {
    pub unit_id: usize,
    grids: Vec<Array2<f64>>,
}

impl UnitActivations {
    pub fn new(unit_id: usize, grids: Vec<Array2<f64>>) -> Result<Self> {
        let expected = grids
            .first()
            .map(|g| g.dim())
            .ok_or(DissectError::EmptyActivations(unit_id))?;
        if expected.0 == 0 || expected.1 == 0 {
            return Err(DissectError::EmptyActivations(unit_id));
        }
        for (image, g) in grids.iter().enumerate() {
            if g.dim() != expected {
                return Err(DissectError::GridShape {
                    unit: unit_id,
                    image,
                    expected,
                    got: g.dim(),
                });
            }
        }
        Ok(Self { unit_id, grids })
    }

    pub fn grids(&self) -> &[Array2<f64>] {
        &self.grids
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            unit_id: self.unit_id,
            grids: self.grids.iter().map(|g| g * factor).collect(),
        }
    }
}

/// Splits a units×images×h×w tensor.
pub fn units_from_tensor(tensor: &Tensor) -> Result<Vec<UnitActivations>> {
    let dims = tensor.dims();
    if dims.len() != 4 || dims.contains(&0) {
        return Err(DissectError::ActivationShape(dims.to_vec()));
    }
    let (images, h, w) = (dims[1], dims[2], dims[3]);
    tensor
        .data()
        .chunks_exact(images * h * w)
        .enumerate()
        .map(|(unit, chunk)| {
            let grids = chunk
                .chunks_exact(h * w)
                .map(|g| Array2::from_shape_vec((h, w), g.to_vec()).expect("chunk size"))
                .collect();
            UnitActivations::new(unit, grids)
        })
        .collect()
}

/// One unit from an images×h×w tensor.
pub fn unit_from_tensor(unit_id: usize, tensor: &Tensor) -> Result<UnitActivations> {
    let dims = tensor.dims();
    if dims.len() != 3 || dims.contains(&0) {
        return Err(DissectError::ActivationShape(dims.to_vec()));
    }
    let wrapped = Tensor::new(
        [1].iter().chain(dims).copied().collect(),
        tensor.data().to_vec(),
    )?;
    let mut units = units_from_tensor(&wrapped)?;
    let mut unit = units.remove(0);
    unit.unit_id = unit_id;
    Ok(unit)
}

/// The value exceeded by the top `quantile` fraction of the pooled
/// activations: element `floor(quantile · n)` of the values sorted in
/// descending order.
pub fn unit_threshold(activations: &UnitActivations, quantile: f64) -> Result<f64> {
    if !(quantile > 0.0 && quantile <= 0.5) {
        return Err(DissectError::Quantile(quantile));
    }
    let mut pooled: Vec<f64> = activations.grids.iter().flat_map(|g| g.iter().copied()).collect();
    if pooled.is_empty() {
        return Err(DissectError::EmptyActivations(activations.unit_id));
    }
    // Guard against q·n landing a hair below an integer.
    let k = ((quantile * pooled.len() as f64) + 1e-9).floor() as usize;
    let k = k.min(pooled.len() - 1);
    let (_, t, _) = pooled.select_nth_unstable_by(k, |a, b| b.total_cmp(a));
    Ok(*t)
}

/// Source coordinate and blend for output index `i` under half-pixel
/// alignment, clamped to the grid.
fn sample_pos(i: usize, src: usize, dst: usize) -> (usize, usize, f64) {
    let x = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
    let lo = x.floor() as usize;
    let hi = (lo + 1).min(src - 1);
    (lo, hi, x - lo as f64)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        (1.0 - t) * a + t * b
    }
}

/// Bilinear resize to `target` (half-pixel centres, edge clamped).
pub fn bilinear_upsample(grid: &Array2<f64>, target: (usize, usize)) -> Array2<f64> {
    let (h, w) = grid.dim();
    if h == 0 || w == 0 {
        return Array2::zeros(target);
    }
    if (h, w) == target {
        return grid.clone();
    }
    let rows: Vec<_> = (0..target.0).map(|r| sample_pos(r, h, target.0)).collect();
    let cols: Vec<_> = (0..target.1).map(|c| sample_pos(c, w, target.1)).collect();
    Array2::from_shape_fn(target, |(r, c)| {
        let (r0, r1, fy) = rows[r];
        let (c0, c1, fx) = cols[c];
        let top = lerp(grid[[r0, c0]], grid[[r0, c1]], fx);
        let bottom = lerp(grid[[r1, c0]], grid[[r1, c1]], fx);
        lerp(top, bottom, fy)
    })
}

/// Bilinear upsampling followed by a strict `> threshold`.
pub fn binarize_and_upsample(grid: &Array2<f64>, threshold: f64, target: (usize, usize)) -> Array2<bool> {
    bilinear_upsample(grid, target).mapv(|v| v > threshold)
}

fn count(mask: &Array2<bool>) -> usize {
    mask.iter().filter(|&&b| b).count()
}

fn intersection(a: &Array2<bool>, b: &Array2<bool>) -> usize {
    a.iter().zip(b).filter(|(&x, &y)| x && y).count()
}

/// Pooled IoU: total intersection over total union across images; 0 when
/// the union is empty.
pub fn unit_concept_iou(unit_masks: &[Array2<bool>], concept_masks: &[Array2<bool>]) -> Result<f64> {
    if unit_masks.len() != concept_masks.len() {
        return Err(DissectError::MaskMismatch(format!(
            "{} unit masks vs {} concept masks",
            unit_masks.len(),
            concept_masks.len()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (i, (u, c)) in unit_masks.iter().zip(concept_masks).enumerate() {
        if u.dim() != c.dim() {
            return Err(DissectError::MaskMismatch(format!(
                "image {i}: {:?} vs {:?}",
                u.dim(),
                c.dim()
            )));
        }
        let both = intersection(u, c);
        inter += both;
        union += count(u) + count(c) - both;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// units × concepts IoU values; columns follow ascending concept id.
#[derive(Debug, Clone, PartialEq)]
pub struct IouTable {
    pub unit_ids: Vec<usize>,
    pub concept_ids: Vec<usize>,
    pub values: Array2<f64>,
}

/// Binarized, upsampled masks of one unit over every image.
pub fn unit_masks(unit: &UnitActivations, images: &[ImageInfo], quantile: f64) -> Result<Vec<Array2<bool>>> {
    if unit.grids.len() != images.len() {
        return Err(DissectError::ImageCount {
            unit: unit.unit_id,
            expected: images.len(),
            got: unit.grids.len(),
        });
    }
    let t = unit_threshold(unit, quantile)?;
    Ok(unit
        .grids
        .iter()
        .zip(images)
        .map(|(g, img)| binarize_and_upsample(g, t, (img.height, img.width)))
        .collect())
}

pub fn iou_table(units: &[UnitActivations], segmentation: &Segmentation, quantile: f64) -> Result<IouTable> {
    let concepts = &segmentation.concepts;
    let mut values = Array2::zeros((units.len(), concepts.len()));
    for (ui, unit) in units.iter().enumerate() {
        let masks = unit_masks(unit, &segmentation.images, quantile)?;
        let unit_total: usize = masks.iter().map(count).sum();
        for ci in 0..concepts.len() {
            let (mut inter, mut union) = (0, unit_total);
            for (ii, m) in masks.iter().enumerate() {
                if let Some(c) = segmentation.mask(ci, ii) {
                    let both = intersection(m, c);
                    inter += both;
                    union += count(c) - both;
                }
            }
            values[[ui, ci]] = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
        }
    }
    Ok(IouTable {
        unit_ids: units.iter().map(|u| u.unit_id).collect(),
        concept_ids: concepts.iter().map(|c| c.concept_id).collect(),
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnitAssignment {
    pub unit_id: usize,
    pub concept_id: Option<usize>,
    pub concept: Option<String>,
    pub category: Option<Category>,
    pub iou: f64,
    pub interpretable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InterpretationReport {
    pub iou_threshold: f64,
    pub interpretable_units: usize,
    pub total_units: usize,
    /// Distinct concepts among interpretable units, per category.
    pub concepts_per_category: BTreeMap<Category, usize>,
    pub distinct_concepts: usize,
    pub units: Vec<UnitAssignment>,
}

impl InterpretationReport {
    pub fn units_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["unit_id", "concept_id", "concept", "category", "iou", "interpretable"])
            .expect("in-memory write");
        for u in &self.units {
            w.write_record([
                u.unit_id.to_string(),
                u.concept_id.map(|c| c.to_string()).unwrap_or_default(),
                u.concept.clone().unwrap_or_default(),
                u.category.map(|c| c.to_string()).unwrap_or_default(),
                u.iou.to_string(),
                u.interpretable.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }
}

/// Labels each unit with its best concept (lowest id on ties).
pub fn assign_concepts(table: &IouTable, concepts: &[Concept], iou_threshold: f64) -> Result<InterpretationReport> {
    let lookup = |id: usize| {
        concepts
            .iter()
            .find(|c| c.concept_id == id)
            .ok_or(DissectError::UnknownConcept(id))
    };
    // Visit columns by ascending id regardless of table order.
    let mut order: Vec<usize> = (0..table.concept_ids.len()).collect();
    order.sort_by_key(|&i| table.concept_ids[i]);

    let mut units = Vec::with_capacity(table.unit_ids.len());
    let mut assigned: BTreeMap<Category, Vec<usize>> = BTreeMap::new();
    for (row, &unit_id) in table.values.outer_iter().zip(&table.unit_ids) {
        let mut best: Option<(usize, f64)> = None;
        for &col in &order {
            let v = row[col];
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((col, v));
            }
        }
        let assignment = match best {
            None => UnitAssignment {
                unit_id,
                concept_id: None,
                concept: None,
                category: None,
                iou: 0.0,
                interpretable: false,
            },
            Some((col, iou)) => {
                let concept = lookup(table.concept_ids[col])?;
                let interpretable = iou >= iou_threshold;
                if interpretable {
                    let ids = assigned.entry(concept.category).or_default();
                    if !ids.contains(&concept.concept_id) {
                        ids.push(concept.concept_id);
                    }
                }
                UnitAssignment {
                    unit_id,
                    concept_id: Some(concept.concept_id),
                    concept: Some(concept.name.clone()),
                    category: Some(concept.category),
                    iou,
                    interpretable,
                }
            }
        };
        units.push(assignment);
    }
    let concepts_per_category: BTreeMap<Category, usize> =
        assigned.iter().map(|(c, ids)| (*c, ids.len())).collect();
    Ok(InterpretationReport {
        iou_threshold,
        interpretable_units: units.iter().filter(|u| u.interpretable).count(),
        total_units: units.len(),
        distinct_concepts: concepts_per_category.values().sum(),
        concepts_per_category,
        units,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DissectParams {
    pub quantile: f64,
    pub iou_threshold: f64,
}

impl Default for DissectParams {
    fn default() -> Self {
        Self {
            quantile: 0.005,
            iou_threshold: 0.04,
        }
    }
}

pub fn dissect(
    units: &[UnitActivations],
    segmentation: &Segmentation,
    params: DissectParams,
) -> Result<(IouTable, InterpretationReport)> {
    let table = iou_table(units, segmentation, params.quantile)?;
    let report = assign_concepts(&table, &segmentation.concepts, params.iou_threshold)?;
    Ok((table, report))
}

/// Concept and unit counts for one layer or block.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockTally {
    pub block: String,
    pub interpretable_units: usize,
    pub total_units: usize,
    pub concepts_per_category: BTreeMap<Category, usize>,
}

/// Per-block summaries in the given order, every category present.
pub fn block_tally(blocks: &[(String, InterpretationReport)]) -> Vec<BlockTally> {
    blocks
        .iter()
        .map(|(name, report)| BlockTally {
            block: name.clone(),
            interpretable_units: report.interpretable_units,
            total_units: report.total_units,
            concepts_per_category: Category::ALL
                .into_iter()
                .map(|c| (c, report.concepts_per_category.get(&c).copied().unwrap_or(0)))
                .collect(),
        })
        .collect()
}

/// Classes ranked by the model's response to `value` at feature `unit`
/// (zero elsewhere) with every bias zeroed. Ties go to the lower class.
pub fn probe_unit_with_value(model: &ModelParameters, unit: usize, value: f64) -> Result<Vec<usize>> {
    let features = model.num_features();
    if unit >= features {
        return Err(DissectError::UnitOutOfRange { unit, features });
    }
    let mut probe = model.clone();
    probe.bias.fill(0.0);
    if let Some(hidden) = probe.hidden.as_mut() {
        hidden.bias.fill(0.0);
    }
    let mut x = vec![0.0; features];
    x[unit] = value;
    let scores = probe.forward(&x)?;
    let mut ranking: Vec<usize> = (0..scores.len()).collect();
    ranking.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(ranking)
}

pub fn probe_unit(model: &ModelParameters, unit: usize) -> Result<Vec<usize>> {
    probe_unit_with_value(model, unit, 1.0)
}

// ---- input formats ----

/// Reads `concept_id,name,category` rows (header required).
pub fn read_concepts<R: Read>(reader: R) -> Result<Vec<Concept>> {
    let bad = |message: String| DissectError::Format {
        path: "concepts".into(),
        message,
    };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    let cols: Vec<String> = header.iter().map(|s| s.to_ascii_lowercase()).collect();
    if cols != ["concept_id", "name", "category"] {
        return Err(bad(format!("expected header concept_id,name,category, got {cols:?}")));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let concept_id = rec[0]
            .parse()
            .map_err(|_| bad(format!("bad concept_id '{}'", &rec[0])))?;
        out.push(Concept {
            concept_id,
            name: rec[1].to_string(),
            category: rec[2].parse()?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskFile {
    images: Vec<ImageInfo>,
    #[serde(default)]
    rectangles: Vec<RectangleRecord>,
    #[serde(default)]
    pgm_masks: Vec<PgmRecord>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RectangleRecord {
    image_id: String,
    concept_id: usize,
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct PgmRecord {
    image_id: String,
    concept_id: usize,
    path: PathBuf,
}

/// Filled `[x0, x1) × [y0, y1)` rectangle.
pub fn rectangle_mask(
    (height, width): (usize, usize),
    (x0, y0, x1, y1): (usize, usize, usize, usize),
) -> Option<Array2<bool>> {
    if x0 > x1 || y0 > y1 || x1 > width || y1 > height {
        return None;
    }
    Some(Array2::from_shape_fn((height, width), |(r, c)| {
        (y0..y1).contains(&r) && (x0..x1).contains(&c)
    }))
}

/// Nonzero pixels of a PGM image.
pub fn decode_pgm_mask(bytes: &[u8]) -> std::result::Result<Array2<bool>, String> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Pnm)
        .map_err(|e| e.to_string())?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        img.get_pixel(c as u32, r as u32).0[0] > 0
    }))
}

/// Reads the JSON mask file; PGM paths resolve against `base_dir`.
pub fn read_segmentation<R: Read>(reader: R, base_dir: &Path, concepts: Vec<Concept>) -> Result<Segmentation> {
    let file: MaskFile = serde_json::from_reader(reader).map_err(|e| DissectError::Format {
        path: "masks".into(),
        message: e.to_string(),
    })?;
    let category_of = |id: usize| {
        concepts
            .iter()
            .find(|c| c.concept_id == id)
            .map(|c| c.category)
            .ok_or(DissectError::UnknownConcept(id))
    };
    let size_of = |id: &str| {
        file.images
            .iter()
            .find(|i| i.id == id)
            .map(|i| (i.height, i.width))
            .ok_or_else(|| DissectError::UnknownImage(id.to_string()))
    };
    let mut masks = Vec::new();
    for r in &file.rectangles {
        let size = size_of(&r.image_id)?;
        let mask = rectangle_mask(size, (r.x0, r.y0, r.x1, r.y1)).ok_or_else(|| DissectError::Rectangle {
            image: r.image_id.clone(),
            x0: r.x0,
            y0: r.y0,
            x1: r.x1,
            y1: r.y1,
        })?;
        masks.push(ConceptMask {
            image_id: r.image_id.clone(),
            concept_id: r.concept_id,
            category: category_of(r.concept_id)?,
            mask,
        });
    }
    for p in &file.pgm_masks {
        size_of(&p.image_id)?;
        let path = base_dir.join(&p.path);
        let bytes = fs::read(&path)?;
        let mask = decode_pgm_mask(&bytes).map_err(|message| DissectError::Format {
            path: path.display().to_string(),
            message,
        })?;
        masks.push(ConceptMask {
            image_id: p.image_id.clone(),
            concept_id: p.concept_id,
            category: category_of(p.concept_id)?,
            mask,
        });
    }
    Segmentation::new(file.images, concepts, masks)
}

/// Shape of a planted-concept fixture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantedConfig {
    pub units: usize,
    pub planted_units: usize,
    pub images: usize,
    pub size: usize,
    pub square: usize,
    pub images_per_concept: usize,
    /// Fraction of a concept's pixels switched off in its planted unit; the
    /// same number of background pixels is switched on.
    pub flip_fraction: f64,
    pub jitter: f64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            units: 32,
            planted_units: 8,
            images: 20,
            size: 32,
            square: 5,
            images_per_concept: 4,
            flip_fraction: 0.1,
            jitter: 0.01,
        }
    }
}

/// Synthetic images with square concepts, units copying some concepts and
/// units of pure noise.
#[derive(Debug, Clone)]
pub struct PlantedFixture {
    pub segmentation: Segmentation,
    pub units: Vec<UnitActivations>,
    /// (unit_id, concept_id) for every planted unit.
    pub planted: Vec<(usize, usize)>,
}

impl PlantedFixture {
    /// One concept per planted unit.
    pub fn generate(config: &PlantedConfig, seed: u64) -> Self {
        use rand::seq::SliceRandom;
        use rand::{Rng, SeedableRng};

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = config.size;
        let images: Vec<ImageInfo> = (0..config.images)
            .map(|i| ImageInfo {
                id: format!("img{i:03}"),
                height: n,
                width: n,
            })
            .collect();
        let concepts: Vec<Concept> = (0..config.planted_units)
            .map(|c| Concept {
                concept_id: c,
                name: format!("concept{c}"),
                category: Category::ALL[c % Category::ALL.len()],
            })
            .collect();

        let mut masks = Vec::new();
        let mut concept_pixels: Vec<Vec<Array2<bool>>> = Vec::new();
        for concept in &concepts {
            let mut chosen: Vec<usize> = (0..config.images).collect();
            chosen.shuffle(&mut rng);
            chosen.truncate(config.images_per_concept);
            chosen.sort_unstable();
            let mut per_image = vec![Array2::from_elem((n, n), false); config.images];
            for &img in &chosen {
                let x0 = rng.random_range(0..=n - config.square);
                let y0 = rng.random_range(0..=n - config.square);
                let mask = rectangle_mask((n, n), (x0, y0, x0 + config.square, y0 + config.square))
                    .expect("square fits");
                per_image[img] = mask.clone();
                masks.push(ConceptMask {
                    image_id: images[img].id.clone(),
                    concept_id: concept.concept_id,
                    category: concept.category,
                    mask,
                });
            }
            concept_pixels.push(per_image);
        }

        let mut unit_order: Vec<usize> = (0..config.units).collect();
        unit_order.shuffle(&mut rng);
        let mut planted: Vec<(usize, usize)> = unit_order[..config.planted_units]
            .iter()
            .enumerate()
            .map(|(c, &u)| (u, c))
            .collect();
        planted.sort_unstable();

        let units = (0..config.units)
            .map(|unit_id| {
                let grids = match planted.iter().find(|(u, _)| *u == unit_id) {
                    Some(&(_, c)) => planted_grids(&concept_pixels[c], config, &mut rng),
                    None => (0..config.images)
                        .map(|_| Array2::from_shape_simple_fn((n, n), || rng.random::<f64>()))
                        .collect(),
                };
                UnitActivations::new(unit_id, grids).expect("non-empty grids")
            })
            .collect();

        let segmentation = Segmentation::new(images, concepts, masks).expect("consistent fixture");
        Self {
            segmentation,
            units,
            planted,
        }
    }

    /// Writes `activations.mmt` (units×images×h×w), `masks.json` and
    /// `concepts.csv` into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let first = &self.units[0].grids;
        let (h, w) = first[0].dim();
        let data: Vec<f64> = self
            .units
            .iter()
            .flat_map(|u| u.grids.iter().flat_map(|g| g.iter().copied()))
            .collect();
        Tensor::new(vec![self.units.len(), first.len(), h, w], data)?.write_file(dir.join("activations.mmt"))?;

        let mut csv = csv::Writer::from_path(dir.join("concepts.csv")).map_err(std::io::Error::other)?;
        csv.write_record(["concept_id", "name", "category"]).map_err(std::io::Error::other)?;
        for c in &self.segmentation.concepts {
            csv.write_record([c.concept_id.to_string(), c.name.clone(), c.category.to_string()])
                .map_err(std::io::Error::other)?;
        }
        csv.flush()?;

        let mut rectangles = Vec::new();
        for (ci, c) in self.segmentation.concepts.iter().enumerate() {
            for (ii, img) in self.segmentation.images.iter().enumerate() {
                if let Some(m) = self.segmentation.mask(ci, ii) {
                    let (x0, y0, x1, y1) = bounding_box(m).expect("planted masks are non-empty");
                    rectangles.push(serde_json::json!({
                        "image_id": img.id, "concept_id": c.concept_id,
                        "x0": x0, "y0": y0, "x1": x1, "y1": y1,
                    }));
                }
            }
        }
        let doc = serde_json::json!({ "images": self.segmentation.images, "rectangles": rectangles });
        fs::write(dir.join("masks.json"), serde_json::to_string_pretty(&doc).map_err(std::io::Error::from)?)?;
        Ok(())
    }
}

fn bounding_box(mask: &Array2<bool>) -> Option<(usize, usize, usize, usize)> {
    let on: Vec<(usize, usize)> = mask.indexed_iter().filter(|(_, &b)| b).map(|(p, _)| p).collect();
    let (r0, r1) = (on.iter().map(|p| p.0).min()?, on.iter().map(|p| p.0).max()?);
    let (c0, c1) = (on.iter().map(|p| p.1).min()?, on.iter().map(|p| p.1).max()?);
    Some((c0, r0, c1 + 1, r1 + 1))
}

/// Concept mask as activations with pixels flipped both ways, plus jitter.
fn planted_grids(concept: &[Array2<bool>], config: &PlantedConfig, rng: &mut impl rand::Rng) -> Vec<Array2<f64>> {
    use rand::seq::index::sample;

    let (h, w) = concept[0].dim();
    let per_image = h * w;
    let mut on: Vec<usize> = Vec::new();
    let mut off: Vec<usize> = Vec::new();
    for (i, m) in concept.iter().enumerate() {
        for (p, &b) in m.iter().enumerate() {
            if b { on.push(i * per_image + p) } else { off.push(i * per_image + p) }
        }
    }
    let flips = (config.flip_fraction * on.len() as f64).round() as usize;
    let mut active = vec![false; concept.len() * per_image];
    for &p in &on {
        active[p] = true;
    }
    for k in sample(rng, on.len(), flips) {
        active[on[k]] = false;
    }
    for k in sample(rng, off.len(), flips.min(off.len())) {
        active[off[k]] = true;
    }
    (0..concept.len())
        .map(|i| {
            Array2::from_shape_fn((h, w), |(r, c)| {
                let base = if active[i * per_image + r * w + c] { 1.0 } else { 0.0 };
                base + config.jitter * rng.random::<f64>()
            })
        })
        .collect()
}
