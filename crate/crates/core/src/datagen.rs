//! Synthetic brain phantoms, 2.5D slice stacking and the on-disk sample format.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motionsim::MotionTrajectory;

/// Tissue labels.
pub const BACKGROUND: u8 = 0;
pub const CSF: u8 = 1;
pub const GM: u8 = 2;
pub const WM: u8 = 3;
pub const NUM_CLASSES: usize = 4;

pub const MIN_PHANTOM_SIZE: usize = 32;

/// Intensity bands and noise model of the phantom generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub csf_band: (f64, f64),
    pub gm_band: (f64, f64),
    pub wm_band: (f64, f64),
    pub background: f64,
    pub noise_sigma: f64,
    /// Peak relative amplitude of the smooth multiplicative bias field.
    pub inhomogeneity: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            csf_band: (0.15, 0.30),
            gm_band: (0.45, 0.60),
            wm_band: (0.75, 0.90),
            background: 0.0,
            noise_sigma: 0.01,
            inhomogeneity: 0.05,
        }
    }
}

impl PhantomConfig {
    pub fn band(&self, label: u8) -> (f64, f64) {
        match label {
            CSF => self.csf_band,
            GM => self.gm_band,
            WM => self.wm_band,
            _ => (self.background, self.background),
        }
    }
}

/// A single 2D phantom slice with its exact tissue mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub image: Array2<f32>,
    pub mask: Array2<u8>,
    pub seed: u64,
    pub size: usize,
}

/// Three adjacent slices stacked as channels; channel 1 is slice `center_index`.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice25D {
    pub data: Array3<f32>,
    pub center_index: usize,
}

impl Slice25D {
    pub fn new(data: Array3<f32>, center_index: usize) -> Result<Self> {
        let s = Slice25D { data, center_index };
        s.validate()?;
        Ok(s)
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn center(&self) -> ArrayView2<'_, f32> {
        self.data.index_axis(Axis(0), 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.dim().0 != 3 {
            return Err(Error::invalid(format!(
                "2.5D stack needs 3 channels, got {}",
                self.data.dim().0
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericInput("stack contains non-finite values".into()));
        }
        if self.data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid("stack values must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Paired clean / motion-corrupted training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub clean: Slice25D,
    pub corrupted: Slice25D,
    pub mask: Array2<u8>,
    pub trajectory: MotionTrajectory,
}

impl SamplePair {
    pub fn validate(&self) -> Result<()> {
        self.clean.validate()?;
        self.corrupted.validate()?;
        if self.clean.data.dim() != self.corrupted.data.dim() {
            return Err(Error::invalid("clean and corrupted stacks differ in shape"));
        }
        if self.clean.center_index != self.corrupted.center_index {
            return Err(Error::invalid("clean and corrupted stacks differ in center_index"));
        }
        if self.mask.dim() != (self.clean.height(), self.clean.width()) {
            return Err(Error::invalid("mask shape does not match stacks"));
        }
        if self.mask.iter().any(|&l| l as usize >= NUM_CLASSES) {
            return Err(Error::invalid("mask labels must be in {0,1,2,3}"));
        }
        Ok(())
    }
}

/// Random anatomy shared by every slice of one phantom volume. Coordinates are
/// normalized by the image size and centered.
struct Anatomy {
    center: (f64, f64),
    axes: (f64, f64, f64),
    angle: f64,
    gm_inner: f64,
    wm_inner: f64,
    folds: Vec<(f64, f64, f64)>,
    ventricles: Vec<Ellipse>,
    nuclei: Vec<Ellipse>,
    z0: f64,
    base: [f64; 4],
    bias: (f64, f64, f64),
}

struct Ellipse {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
    az: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64, z: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.ax).powi(2) + (v / self.ay).powi(2) + (z / self.az).powi(2) <= 1.0
    }
}

impl Anatomy {
    fn sample(rng: &mut ChaCha8Rng, cfg: &PhantomConfig) -> Self {
        let center = (rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03));
        let axes = (
            rng.random_range(0.30..0.37),
            rng.random_range(0.37..0.44),
            rng.random_range(0.30..0.40),
        );
        let angle = rng.random_range(-0.15..0.15);
        let gm_inner = rng.random_range(0.86..0.91);
        let wm_inner = rng.random_range(0.62..0.72);
        let folds = (3..=7)
            .map(|k| {
                (
                    k as f64,
                    rng.random_range(0.02..0.05),
                    rng.random_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        let vent_dx = rng.random_range(0.04..0.07);
        let vent_ax = rng.random_range(0.025..0.04);
        let vent_ay = rng.random_range(0.08..0.13);
        let ventricles = [-1.0, 1.0]
            .iter()
            .map(|&side| Ellipse {
                cx: center.0 + side * vent_dx,
                cy: center.1 + rng.random_range(-0.02..0.02),
                ax: vent_ax,
                ay: vent_ay,
                az: 0.15,
                angle: side * rng.random_range(0.0..0.3),
            })
            .collect();
        let nuclei = [-1.0, 1.0]
            .iter()
            .map(|&side| Ellipse {
                cx: center.0 + side * rng.random_range(0.12..0.16),
                cy: center.1 + rng.random_range(0.0..0.06),
                ax: rng.random_range(0.03..0.05),
                ay: rng.random_range(0.04..0.07),
                az: 0.12,
                angle: rng.random_range(-0.3..0.3),
            })
            .collect();
        let z0 = rng.random_range(-0.04..0.04);
        let mut base = [cfg.background; 4];
        for label in [CSF, GM, WM] {
            let (lo, hi) = cfg.band(label);
            let mid = 0.5 * (lo + hi);
            base[label as usize] = mid + rng.random_range(-0.2..0.2) * (hi - lo);
        }
        let bias = (
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        Anatomy {
            center,
            axes,
            angle,
            gm_inner,
            wm_inner,
            folds,
            ventricles,
            nuclei,
            z0,
            base,
            bias,
        }
    }

    fn label(&self, x: f64, y: f64, z: f64) -> u8 {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let r = ((u / self.axes.0).powi(2) + (v / self.axes.1).powi(2) + (z / self.axes.2).powi(2)).sqrt();
        if r > 1.0 {
            return BACKGROUND;
        }
        if r > self.gm_inner {
            return CSF;
        }
        let phi = v.atan2(u);
        let fold: f64 = self.folds.iter().map(|(k, a, p)| a * (k * phi + p).cos()).sum();
        if r > self.wm_inner * (1.0 + fold) {
            return GM;
        }
        if self.ventricles.iter().any(|e| e.contains(x, y, z)) {
            return CSF;
        }
        if self.nuclei.iter().any(|e| e.contains(x, y, z)) {
            return GM;
        }
        WM
    }

    fn bias_field(&self, x: f64, y: f64, amplitude: f64) -> f64 {
        let (a, b, c) = self.bias;
        let raw = (a * x + b * y) / 0.5 + c * (x * x + y * y) / 0.25;
        1.0 + amplitude * (raw / 3.0).clamp(-1.0, 1.0)
    }
}

fn check_size(size: usize) -> Result<()> {
    if size < MIN_PHANTOM_SIZE || !size.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "phantom size must be even and at least {MIN_PHANTOM_SIZE}, got {size}"
        )));
    }
    Ok(())
}

/// Axial spacing between adjacent phantom slices, in normalized units.
const SLICE_SPACING: f64 = 0.025;

/// Phantom volume `depth × size × size` with its label volume.
pub fn generate_volume(seed: u64, size: usize, depth: usize) -> Result<(Array3<f32>, Array3<u8>)> {
    generate_volume_with(seed, size, depth, &PhantomConfig::default())
}

pub fn generate_volume_with(
    seed: u64,
    size: usize,
    depth: usize,
    cfg: &PhantomConfig,
) -> Result<(Array3<f32>, Array3<u8>)> {
    check_size(size)?;
    if depth == 0 {
        return Err(Error::invalid("depth must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anatomy = Anatomy::sample(&mut rng, cfg);
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let mut image = Array3::<f32>::zeros((depth, size, size));
    let mut mask = Array3::<u8>::zeros((depth, size, size));
    let n = size as f64;
    for k in 0..depth {
        let z = anatomy.z0 + (k as f64 - (depth as f64 - 1.0) / 2.0) * SLICE_SPACING;
        for i in 0..size {
            for j in 0..size {
                let x = (j as f64 + 0.5) / n - 0.5;
                let y = (i as f64 + 0.5) / n - 0.5;
                let label = anatomy.label(x, y, z);
                let eps = noise.sample(&mut rng);
                mask[[k, i, j]] = label;
                if label == BACKGROUND {
                    image[[k, i, j]] = cfg.background.clamp(0.0, 1.0) as f32;
                    continue;
                }
                let (lo, hi) = cfg.band(label);
                let v = anatomy.base[label as usize] * anatomy.bias_field(x, y, cfg.inhomogeneity) + eps;
                image[[k, i, j]] = v.clamp(lo, hi).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok((image, mask))
}

/// Single phantom slice; a pure function of `(seed, size)`.
pub fn generate_phantom(seed: u64, size: usize) -> Result<Phantom> {
    let (image, mask) = generate_volume(seed, size, 1)?;
    Ok(Phantom {
        image: image.index_axis(Axis(0), 0).to_owned(),
        mask: mask.index_axis(Axis(0), 0).to_owned(),
        seed,
        size,
    })
}

/// Stacks every three adjacent slices; returns `depth - 2` stacks.
pub fn slice_to_25d(volume: &Array3<f32>) -> Result<Vec<Slice25D>> {
    let depth = volume.dim().0;
    if depth < 3 {
        return Err(Error::invalid(format!("need at least 3 slices, got {depth}")));
    }
    Ok((0..depth - 2)
        .map(|i| Slice25D {
            data: volume.slice(s![i..i + 3, .., ..]).to_owned(),
            center_index: i + 1,
        })
        .collect())
}

/// Min-max rescale to `[0, 1]`. A constant image maps to all zeros.
pub fn normalize_intensity<F: Float>(image: ArrayView2<F>) -> Result<Array2<F>> {
    if image.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericInput("image contains non-finite values".into()));
    }
    let (lo, hi) = image.iter().fold((F::infinity(), F::neg_infinity()), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    if image.is_empty() || hi <= lo {
        return Ok(Array2::zeros(image.dim()));
    }
    let range = hi - lo;
    Ok(image.mapv(|v| (v - lo) / range))
}

/// Clean sample (corrupted = clean, still trajectory) for the center stack of
/// a 3-slice phantom volume.
pub fn phantom_sample(seed: u64, size: usize) -> Result<SamplePair> {
    let (volume, labels) = generate_volume(seed, size, 3)?;
    let stack = slice_to_25d(&volume)?.remove(0);
    Ok(SamplePair {
        mask: labels.index_axis(Axis(0), stack.center_index).to_owned(),
        corrupted: stack.clone(),
        clean: stack,
        trajectory: MotionTrajectory::still(size),
    })
}

// ---------------------------------------------------------------------------
// On-disk format

pub const CLEAN_FILE: &str = "clean.f32";
pub const CORRUPTED_FILE: &str = "corrupted.f32";
pub const MASK_FILE: &str = "mask.u8";
pub const META_FILE: &str = "meta.json";

#[derive(Debug, Serialize, Deserialize)]
struct SampleMeta {
    shape: Vec<usize>,
    dtype: String,
    mask_dtype: String,
    center_index: usize,
    trajectory: MotionTrajectory,
}

pub(crate) fn write_f32(path: &Path, values: impl Iterator<Item = f32>) -> Result<()> {
    let bytes: Vec<u8> = values.flat_map(f32::to_le_bytes).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_f32(path: &Path, expected: usize, field: &str) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::format(path, field, format!("cannot read: {e}")))?;
    if bytes.len() != expected * 4 {
        return Err(Error::format(
            path,
            field,
            format!("payload has {} bytes, shape requires {}", bytes.len(), expected * 4),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub(crate) fn read_u8(path: &Path, expected: usize, field: &str) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::format(path, field, format!("cannot read: {e}")))?;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            field,
            format!("payload has {} bytes, shape requires {expected}", bytes.len()),
        ));
    }
    Ok(bytes)
}

/// Writes `clean.f32`, `corrupted.f32`, `mask.u8` and `meta.json` into `dir`.
pub fn write_sample(pair: &SamplePair, dir: &Path) -> Result<()> {
    pair.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_f32(&dir.join(CLEAN_FILE), pair.clean.data.iter().copied())?;
    write_f32(&dir.join(CORRUPTED_FILE), pair.corrupted.data.iter().copied())?;
    let mask_path = dir.join(MASK_FILE);
    fs::write(&mask_path, pair.mask.iter().copied().collect::<Vec<u8>>()).map_err(|e| Error::io(&mask_path, e))?;
    let (c, h, w) = pair.clean.data.dim();
    let meta = SampleMeta {
        shape: vec![c, h, w],
        dtype: "float32".into(),
        mask_dtype: "uint8".into(),
        center_index: pair.clean.center_index,
        trajectory: pair.trajectory.clone(),
    };
    let meta_path = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(&meta).expect("sample metadata serializes");
    fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))
}

/// Reads a sample written by [`write_sample`].
pub fn read_sample(dir: &Path) -> Result<SamplePair> {
    let meta_path = dir.join(META_FILE);
    let text =
        fs::read_to_string(&meta_path).map_err(|e| Error::format(&meta_path, "meta", format!("cannot read: {e}")))?;
    let meta: SampleMeta = serde_json::from_str(&text).map_err(|e| Error::format(&meta_path, "meta", e.to_string()))?;
    if meta.dtype != "float32" {
        return Err(Error::format(
            &meta_path,
            "dtype",
            format!("unsupported dtype {}", meta.dtype),
        ));
    }
    if meta.mask_dtype != "uint8" {
        return Err(Error::format(
            &meta_path,
            "mask_dtype",
            format!("unsupported dtype {}", meta.mask_dtype),
        ));
    }
    let [c, h, w] = meta.shape[..] else {
        return Err(Error::format(
            &meta_path,
            "shape",
            format!("expected 3 dims, got {:?}", meta.shape),
        ));
    };
    if c != 3 {
        return Err(Error::format(
            &meta_path,
            "shape",
            format!("expected 3 channels, got {c}"),
        ));
    }
    if meta.trajectory.validate().is_err() || meta.trajectory.len() != h {
        return Err(Error::format(
            &meta_path,
            "trajectory",
            format!("expected {h} lines of finite values, got {}", meta.trajectory.len()),
        ));
    }
    let stack = |file: &str, field: &str| -> Result<Slice25D> {
        let path = dir.join(file);
        let data = read_f32(&path, c * h * w, field)?;
        let data = Array3::from_shape_vec((c, h, w), data).expect("length checked");
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::format(&path, field, "values must be finite and within [0, 1]"));
        }
        Ok(Slice25D {
            data,
            center_index: meta.center_index,
        })
    };
    let clean = stack(CLEAN_FILE, "clean")?;
    let corrupted = stack(CORRUPTED_FILE, "corrupted")?;
    let mask_path = dir.join(MASK_FILE);
    let mask = read_u8(&mask_path, h * w, "mask")?;
    if mask.iter().any(|&l| l as usize >= NUM_CLASSES) {
        return Err(Error::format(&mask_path, "mask", "labels must be in {0,1,2,3}"));
    }
    Ok(SamplePair {
        clean,
        corrupted,
        mask: Array2::from_shape_vec((h, w), mask).expect("length checked"),
        trajectory: meta.trajectory,
    })
}

/// Sample subdirectories of `dir` (those holding a `meta.json`), sorted by name.
pub fn list_samples(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() && path.join(META_FILE).is_file() {
            out.push((entry.file_name().to_string_lossy().into_owned(), path));
        }
    }
    out.sort();
    Ok(out)
}

pub fn sample_id(index: usize) -> String {
    format!("sample_{index:04}")
}

/// Writes `count` clean phantom samples (`corrupted == clean`) to `out`.
/// Sample `i` uses seed `seed + i`.
pub fn write_phantom_dataset(out: &Path, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    (0..count)
        .map(|i| {
            let pair = phantom_sample(seed.wrapping_add(i as u64), size)?;
            let dir = out.join(sample_id(i));
            write_sample(&pair, &dir)?;
            Ok(dir)
        })
        .collect()
}
