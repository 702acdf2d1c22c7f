//! Multi-label class activation mapping.
//!
//! Per-class CAMs are compared pairwise. When two CAMs differ enough overall
//! (cosine distance above a threshold) but agree at a pixel where both are
//! active, that pixel is erased from both. The altered CAMs are then
//! max-pooled into a composite, split into disjoint per-class masks, and the
//! composite is smoothed with a small Gaussian.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use ndarray::{Array1, Array2, Array3, Axis, Zip};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CamError {
    #[error("feature stack has {maps} maps but head has {rows} weight rows")]
    HeadRows { maps: usize, rows: usize },
    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("map {index} is {got:?}, expected {expected:?}")]
    Shape {
        index: usize,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("at least one map is required")]
    NoMaps,
    #[error("grids must be at least 1x1")]
    EmptyGrid,
    #[error("kernel size must be odd, got {0}")]
    EvenKernel(usize),
    #[error("sigma must be positive, got {0}")]
    BadSigma(f64),
    #[error("image encoding failed: {0}")]
    Encode(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CamError>;

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    /// H×W
    pub grid: Array2<f64>,
    pub class_id: Option<usize>,
}

impl ActivationMap {
    pub fn new(grid: Array2<f64>, class_id: Option<usize>) -> Self {
        Self { grid, class_id }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.grid.dim()
    }
}

/// D feature maps of identical H×W size.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack(Array3<f64>);

impl FeatureStack {
    pub fn new(maps: Array3<f64>) -> Result<Self> {
        let (d, h, w) = maps.dim();
        if d == 0 || h == 0 || w == 0 {
            return Err(CamError::EmptyGrid);
        }
        Ok(Self(maps))
    }

    pub fn depth(&self) -> usize {
        self.0.dim().0
    }

    pub fn maps(&self) -> &Array3<f64> {
        &self.0
    }
}

/// `Σ_d head[d][class] · features[d]`. `head_weights` is D×C.
pub fn compute_cam(
    features: &FeatureStack,
    head_weights: &Array2<f64>,
    class: usize,
) -> Result<ActivationMap> {
    let (rows, classes) = head_weights.dim();
    if rows != features.depth() {
        return Err(CamError::HeadRows {
            maps: features.depth(),
            rows,
        });
    }
    if class >= classes {
        return Err(CamError::ClassOutOfRange { class, classes });
    }
    let (_, h, w) = features.0.dim();
    let mut grid = Array2::zeros((h, w));
    for (map, &weight) in features.0.axis_iter(Axis(0)).zip(head_weights.column(class)) {
        grid.scaled_add(weight, &map);
    }
    Ok(ActivationMap::new(grid, Some(class)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeparationParams {
    pub cosine_threshold: f64,
    pub similarity_delta: f64,
    pub activation_floor: f64,
}

impl Default for SeparationParams {
    fn default() -> Self {
        Self {
            cosine_threshold: 1e-4,
            similarity_delta: 0.1,
            activation_floor: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparatedCams {
    /// Input CAMs with overlapping pixels set to zero, same order.
    pub maps: Vec<ActivationMap>,
    /// Pixels erased from at least one pair.
    pub erased: Array2<bool>,
}

fn check_shapes<'a>(grids: impl IntoIterator<Item = &'a Array2<f64>>) -> Result<(usize, usize)> {
    let mut expected = None;
    for (index, g) in grids.into_iter().enumerate() {
        let got = g.dim();
        if got.0 == 0 || got.1 == 0 {
            return Err(CamError::EmptyGrid);
        }
        match expected {
            None => expected = Some(got),
            Some(e) if e != got => {
                return Err(CamError::Shape {
                    index,
                    expected: e,
                    got,
                })
            }
            _ => {}
        }
    }
    expected.ok_or(CamError::NoMaps)
}

/// Min-max scaling to `[0, 1]`; constant maps become all zero.
pub fn min_max_normalize(grid: &Array2<f64>) -> Array2<f64> {
    let min = grid.fold(f64::INFINITY, |m, &v| m.min(v));
    let max = grid.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let range = max - min;
    // also catches NaN ranges
    if range.is_nan() || range <= 0.0 {
        return Array2::zeros(grid.dim());
    }
    grid.mapv(|v| (v - min) / range)
}

/// `1 - cos(a, b)` over the flattened grids; 0 when either is all zero.
pub fn cosine_distance(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let dot: f64 = Zip::from(a).and(b).fold(0.0, |acc, x, y| acc + x * y);
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    1.0 - dot / (na * nb)
}

/// One comparison pass: the union over pairs of pixels to erase, per map.
fn erase_sets(grids: &[Array2<f64>], params: &SeparationParams) -> Vec<Array2<bool>> {
    let normalized: Vec<Array2<f64>> = grids.iter().map(min_max_normalize).collect();
    let mut erase: Vec<Array2<bool>> = grids.iter().map(|g| Array2::from_elem(g.dim(), false)).collect();
    for a in 0..grids.len() {
        for b in a + 1..grids.len() {
            if cosine_distance(&normalized[a], &normalized[b]) <= params.cosine_threshold {
                continue;
            }
            let (left, right) = erase.split_at_mut(b);
            Zip::from(&mut left[a])
                .and(&mut right[0])
                .and(&normalized[a])
                .and(&normalized[b])
                .for_each(|ea, eb, &va, &vb| {
                    if (va - vb).abs() <= params.similarity_delta
                        && va.min(vb) >= params.activation_floor
                    {
                        *ea = true;
                        *eb = true;
                    }
                });
        }
    }
    erase
}

/// Erases pixels where two sufficiently different CAMs agree.
///
/// Comparison happens on min-max normalised copies; erasure is applied to the
/// original values, so untouched maps come back bit-identical. Erasing can
/// move a map's extremes and with them its normalisation, so passes repeat
/// until nothing changes, which makes the operation idempotent.
pub fn separate_regions(cams: &[ActivationMap], params: &SeparationParams) -> Result<SeparatedCams> {
    let shape = check_shapes(cams.iter().map(|c| &c.grid))?;
    let mut grids: Vec<Array2<f64>> = cams.iter().map(|c| c.grid.clone()).collect();
    let mut erased = Array2::from_elem(shape, false);
    let max_passes = shape.0 * shape.1 * grids.len() + 1;
    for _ in 0..max_passes {
        let sets = erase_sets(&grids, params);
        let mut changed = false;
        for (grid, set) in grids.iter_mut().zip(&sets) {
            Zip::from(grid).and(set).and(&mut erased).for_each(|v, &e, any| {
                if e {
                    *any = true;
                    if *v != 0.0 {
                        *v = 0.0;
                        changed = true;
                    }
                }
            });
        }
        if !changed {
            break;
        }
    }
    let maps = grids
        .into_iter()
        .zip(cams)
        .map(|(grid, cam)| ActivationMap::new(grid, cam.class_id))
        .collect();
    Ok(SeparatedCams { maps, erased })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingParams {
    pub kernel_size: usize,
    pub sigma: f64,
}

impl Default for SmoothingParams {
    fn default() -> Self {
        Self {
            kernel_size: 5,
            sigma: 1.0,
        }
    }
}

/// Normalised 1-D Gaussian taps; the 2-D kernel is their outer product.
pub fn gaussian_kernel_1d(kernel_size: usize, sigma: f64) -> Result<Array1<f64>> {
    if kernel_size.is_multiple_of(2) {
        return Err(CamError::EvenKernel(kernel_size));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(CamError::BadSigma(sigma));
    }
    let radius = (kernel_size / 2) as f64;
    let taps = Array1::from_shape_fn(kernel_size, |i| {
        let x = i as f64 - radius;
        (-x * x / (2.0 * sigma * sigma)).exp()
    });
    let total = taps.sum();
    Ok(taps / total)
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

fn convolve_axis(grid: &Array2<f64>, taps: &Array1<f64>, axis: Axis) -> Array2<f64> {
    let radius = (taps.len() / 2) as isize;
    let n = grid.len_of(axis);
    Array2::from_shape_fn(grid.dim(), |(r, c)| {
        let center = if axis == Axis(0) { r } else { c } as isize;
        taps.iter()
            .enumerate()
            .map(|(k, &t)| {
                let i = reflect(center + k as isize - radius, n);
                let v = if axis == Axis(0) { grid[[i, c]] } else { grid[[r, i]] };
                t * v
            })
            .sum()
    })
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_smooth_grid(grid: &Array2<f64>, params: SmoothingParams) -> Result<Array2<f64>> {
    let taps = gaussian_kernel_1d(params.kernel_size, params.sigma)?;
    if grid.is_empty() {
        return Err(CamError::EmptyGrid);
    }
    Ok(convolve_axis(&convolve_axis(grid, &taps, Axis(1)), &taps, Axis(0)))
}

pub fn gaussian_smooth(map: &ActivationMap, params: SmoothingParams) -> Result<ActivationMap> {
    Ok(ActivationMap::new(gaussian_smooth_grid(&map.grid, params)?, map.class_id))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionMap {
    /// Smoothed max-pooled composite.
    pub composite: Array2<f64>,
    /// Max-pooled composite before smoothing.
    pub raw_composite: Array2<f64>,
    /// Pairwise disjoint.
    pub per_class_masks: BTreeMap<usize, Array2<bool>>,
    pub boundaries: Array2<bool>,
}

/// Pixelwise maximum over the maps.
pub fn max_composite(maps: &[ActivationMap]) -> Result<Array2<f64>> {
    let shape = check_shapes(maps.iter().map(|m| &m.grid))?;
    let mut out = Array2::from_elem(shape, f64::NEG_INFINITY);
    for m in maps {
        Zip::from(&mut out).and(&m.grid).for_each(|o, &v| *o = o.max(v));
    }
    Ok(out)
}

const NEIGHBOURS: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Max-pools separated CAMs into a composite, assigns each pixel with a
/// strictly positive maximum to the class attaining it (lowest class id on
/// ties), and marks as boundary every erased, unassigned pixel whose
/// 8-connected erased region touches at least two class masks.
pub fn compose_multi_cam(separated: &SeparatedCams, smoothing: SmoothingParams) -> Result<RegionMap> {
    let maps = &separated.maps;
    let raw_composite = max_composite(maps)?;
    let (h, w) = raw_composite.dim();
    if separated.erased.dim() != (h, w) {
        return Err(CamError::Shape {
            index: maps.len(),
            expected: (h, w),
            got: separated.erased.dim(),
        });
    }

    let mut keyed: Vec<(usize, &ActivationMap)> = maps
        .iter()
        .enumerate()
        .map(|(i, m)| (m.class_id.unwrap_or(i), m))
        .collect();
    keyed.sort_by_key(|(k, _)| *k);

    // owner[p] = position in `keyed` of the class that owns pixel p
    let mut owner: Array2<Option<usize>> = Array2::from_elem((h, w), None);
    for ((r, c), slot) in owner.indexed_iter_mut() {
        let peak = raw_composite[[r, c]];
        if peak > 0.0 {
            *slot = keyed.iter().position(|(_, m)| m.grid[[r, c]] == peak);
        }
    }
    let mut per_class_masks = BTreeMap::new();
    for (pos, (key, _)) in keyed.iter().enumerate() {
        per_class_masks.insert(*key, owner.mapv(|o| o == Some(pos)));
    }

    let candidate = Zip::from(&separated.erased)
        .and(&owner)
        .map_collect(|&e, o| e && o.is_none());
    let mut boundaries = Array2::from_elem((h, w), false);
    let mut seen = Array2::from_elem((h, w), false);
    let in_bounds = |r: isize, c: isize| r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w;
    for start in candidate.indexed_iter().filter(|(_, &v)| v).map(|(p, _)| p) {
        if seen[start] {
            continue;
        }
        let mut component = Vec::new();
        let mut touched = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some((r, c)) = queue.pop_front() {
            component.push((r, c));
            for (dr, dc) in NEIGHBOURS {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if !in_bounds(nr, nc) {
                    continue;
                }
                let n = (nr as usize, nc as usize);
                if let Some(o) = owner[n] {
                    if !touched.contains(&o) {
                        touched.push(o);
                    }
                } else if candidate[n] && !seen[n] {
                    seen[n] = true;
                    queue.push_back(n);
                }
            }
        }
        if touched.len() >= 2 {
            for p in component {
                boundaries[p] = true;
            }
        }
    }

    Ok(RegionMap {
        composite: gaussian_smooth_grid(&raw_composite, smoothing)?,
        raw_composite,
        per_class_masks,
        boundaries,
    })
}

/// Full pipeline: CAM per class, separation, composition and smoothing.
pub fn multi_label_cam(
    features: &FeatureStack,
    head_weights: &Array2<f64>,
    classes: &[usize],
    separation: &SeparationParams,
    smoothing: SmoothingParams,
) -> Result<RegionMap> {
    let cams = classes
        .iter()
        .map(|&c| compute_cam(features, head_weights, c))
        .collect::<Result<Vec<_>>>()?;
    compose_multi_cam(&separate_regions(&cams, separation)?, smoothing)
}

/// 8-bit grayscale binary PGM of a grid, min-max scaled to 0..=255.
pub fn encode_pgm(grid: &Array2<f64>) -> Result<Vec<u8>> {
    let scaled = min_max_normalize(grid);
    let pixels: Vec<u8> = scaled.iter().map(|v| (v * 255.0).round() as u8).collect();
    encode_gray(&pixels, grid.dim())
}

/// Binary mask as a PGM with 0 / 255 pixels.
pub fn encode_mask_pgm(mask: &Array2<bool>) -> Result<Vec<u8>> {
    let pixels: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    encode_gray(&pixels, mask.dim())
}

fn encode_gray(pixels: &[u8], (h, w): (usize, usize)) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(pixels, w as u32, h as u32, ExtendedColorType::L8)
        .map_err(|e| CamError::Encode(e.to_string()))?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionSummary {
    pub pixel_count: usize,
    /// `[x0, y0, x1, y1]`, half-open; `None` for an empty mask.
    pub bbox: Option<[usize; 4]>,
}

pub fn mask_summary(mask: &Array2<bool>) -> RegionSummary {
    let mut bbox: Option<[usize; 4]> = None;
    let mut pixel_count = 0;
    for ((r, c), _) in mask.indexed_iter().filter(|(_, &m)| m) {
        pixel_count += 1;
        bbox = Some(match bbox {
            None => [c, r, c + 1, r + 1],
            Some([x0, y0, x1, y1]) => [x0.min(c), y0.min(r), x1.max(c + 1), y1.max(r + 1)],
        });
    }
    RegionSummary { pixel_count, bbox }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionSidecar {
    pub height: usize,
    pub width: usize,
    pub classes: BTreeMap<String, RegionSummary>,
    pub boundary_pixels: usize,
}

impl RegionMap {
    pub fn sidecar(&self) -> RegionSidecar {
        let (height, width) = self.composite.dim();
        RegionSidecar {
            height,
            width,
            classes: self
                .per_class_masks
                .iter()
                .map(|(k, m)| (k.to_string(), mask_summary(m)))
                .collect(),
            boundary_pixels: self.boundaries.iter().filter(|&&b| b).count(),
        }
    }

    /// Writes `composite.pgm`, `mask_<class>.pgm`, `boundaries.pgm` and
    /// `regions.json` into `dir`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("composite.pgm"), encode_pgm(&self.composite)?)?;
        for (class, mask) in &self.per_class_masks {
            fs::write(dir.join(format!("mask_{class}.pgm")), encode_mask_pgm(mask)?)?;
        }
        fs::write(dir.join("boundaries.pgm"), encode_mask_pgm(&self.boundaries)?)?;
        let mut json = serde_json::to_string_pretty(&self.sidecar()).map_err(std::io::Error::from)?;
        json.push('\n');
        fs::write(dir.join("regions.json"), json)?;
        Ok(())
    }
}
