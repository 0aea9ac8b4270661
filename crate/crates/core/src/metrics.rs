//! Evaluation metrics (per-class Dice, MS-SSIM, PSNR, MSE), JSON reports over
//! sample directories, and PNG result panels.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use ndarray::{Array2, ArrayView2};
use serde::{Serialize, Serializer};

use crate::datagen::{list_samples, read_f32, read_sample, read_u8, CSF, GM, WM};
use crate::error::{Error, Result};

pub use crate::losses::ms_ssim_value as ms_ssim;

/// Prediction files consumed by [`evaluate`] and written by inference.
pub const CORRECTED_FILE: &str = "corrected.f32";
pub const SEGMASK_FILE: &str = "segmask.u8";
pub const DVF_FILE: &str = "dvf.f32";
pub const DEFMAP_FILE: &str = "defmap.f32";
pub const PANEL_FILE: &str = "panel.png";

fn same_dims<A, B>(a: &ArrayView2<A>, b: &ArrayView2<B>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!("{what}: dims {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Dice overlap of the binary masks of `class_id`; 1.0 when both are empty.
pub fn dsc(pred: ArrayView2<u8>, gt: ArrayView2<u8>, class_id: u8) -> Result<f64> {
    same_dims(&pred, &gt, "dsc")?;
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt.iter()) {
        let (ia, ib) = (a == class_id, b == class_id);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

pub fn mse(x: ArrayView2<f32>, y: ArrayView2<f32>) -> Result<f64> {
    same_dims(&x, &y, "mse")?;
    let n = x.len().max(1) as f64;
    Ok(x.iter()
        .zip(y.iter())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / n)
}

/// Peak signal-to-noise ratio in dB for dynamic range 1; `+inf` for identical images.
pub fn psnr(x: ArrayView2<f32>, y: ArrayView2<f32>) -> Result<f64> {
    let m = mse(x, y)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / m).log10())
}

/// Pearson correlation of two equally long samples; 0 if either is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid(format!("pearson: lengths {} and {}", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(0.0);
    }
    Ok(sab / (saa * sbb).sqrt())
}

fn serialize_f64<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_str("nan")
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

/// Mean and population standard deviation over samples.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Stat {
    #[serde(serialize_with = "serialize_f64")]
    pub mean: f64,
    #[serde(serialize_with = "serialize_f64")]
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len();
        if n == 0 {
            return Stat {
                mean: f64::NAN,
                std: f64::NAN,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if values.iter().all(|v| *v == values[0]) {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
        };
        Stat { mean, std, n }
    }
}

/// Metrics of one sample, computed on the center slice.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleMetrics {
    pub id: String,
    pub dsc_csf: f64,
    pub dsc_gm: f64,
    pub dsc_wm: f64,
    pub ms_ssim: f64,
    #[serde(serialize_with = "serialize_f64")]
    pub psnr: f64,
    pub mse: f64,
}

impl SampleMetrics {
    pub fn compute(
        id: impl Into<String>,
        corrected: ArrayView2<f32>,
        clean: ArrayView2<f32>,
        pred_mask: ArrayView2<u8>,
        gt_mask: ArrayView2<u8>,
    ) -> Result<Self> {
        Ok(SampleMetrics {
            id: id.into(),
            dsc_csf: dsc(pred_mask, gt_mask, CSF)?,
            dsc_gm: dsc(pred_mask, gt_mask, GM)?,
            dsc_wm: dsc(pred_mask, gt_mask, WM)?,
            ms_ssim: ms_ssim(&corrected, &clean)?,
            psnr: psnr(corrected, clean)?,
            mse: mse(corrected, clean)?,
        })
    }

    pub fn foreground_dsc(&self) -> f64 {
        (self.dsc_csf + self.dsc_gm + self.dsc_wm) / 3.0
    }
}

/// Aggregate report: `{metric: {mean, std, n}}` plus per-sample rows.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub dsc_csf: Stat,
    pub dsc_gm: Stat,
    pub dsc_wm: Stat,
    pub ms_ssim: Stat,
    pub psnr: Stat,
    pub mse: Stat,
    pub n: usize,
    /// Population standard deviation across samples.
    pub std_convention: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_fingerprint: Option<String>,
    pub samples: Vec<SampleMetrics>,
}

impl EvalReport {
    pub fn from_samples(samples: Vec<SampleMetrics>, config_fingerprint: Option<String>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("no samples to report"));
        }
        let col = |f: fn(&SampleMetrics) -> f64| Stat::of(&samples.iter().map(f).collect::<Vec<_>>());
        Ok(EvalReport {
            dsc_csf: col(|s| s.dsc_csf),
            dsc_gm: col(|s| s.dsc_gm),
            dsc_wm: col(|s| s.dsc_wm),
            ms_ssim: col(|s| s.ms_ssim),
            psnr: col(|s| s.psnr),
            mse: col(|s| s.mse),
            n: samples.len(),
            std_convention: "population",
            config_fingerprint,
            samples,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

fn prediction_dirs(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() && (path.join(CORRECTED_FILE).is_file() || path.join(SEGMASK_FILE).is_file()) {
            out.insert(entry.file_name().to_string_lossy().into_owned(), path);
        }
    }
    Ok(out)
}

/// Center slice of a predicted image stored either as a full `3×H×W` stack
/// or as a single `H×W` slice.
fn read_center(path: &Path, h: usize, w: usize, field: &str) -> Result<Array2<f32>> {
    let len = fs::metadata(path).map(|m| m.len() as usize).unwrap_or(0);
    let plane = h * w;
    let (data, offset) = if len == 4 * plane {
        (read_f32(path, plane, field)?, 0)
    } else {
        (read_f32(path, 3 * plane, field)?, plane)
    };
    Ok(Array2::from_shape_vec((h, w), data[offset..offset + plane].to_vec()).expect("length checked"))
}

/// Scores every ground-truth sample in `gt_dir` against the matching
/// prediction subdirectory of `pred_dir`, in sorted ID order.
pub fn evaluate(pred_dir: &Path, gt_dir: &Path) -> Result<EvalReport> {
    let gt = list_samples(gt_dir)?;
    if gt.is_empty() {
        return Err(Error::invalid(format!("no samples in {}", gt_dir.display())));
    }
    let preds = prediction_dirs(pred_dir)?;
    let mut missing: Vec<String> = gt
        .iter()
        .filter(|(id, _)| !preds.contains_key(id))
        .map(|(id, _)| format!("{id} (no prediction)"))
        .collect();
    missing.extend(
        preds
            .keys()
            .filter(|id| !gt.iter().any(|(g, _)| g == *id))
            .map(|id| format!("{id} (no ground truth)")),
    );
    if !missing.is_empty() {
        return Err(Error::MissingSamples(missing));
    }
    let mut rows = Vec::with_capacity(gt.len());
    for (id, dir) in &gt {
        let pair = read_sample(dir)?;
        let (h, w) = pair.mask.dim();
        let pdir = &preds[id];
        let corrected = read_center(&pdir.join(CORRECTED_FILE), h, w, "corrected")?;
        let mask_path = pdir.join(SEGMASK_FILE);
        let seg = read_u8(&mask_path, h * w, "segmask")?;
        let seg = Array2::from_shape_vec((h, w), seg).expect("length checked");
        rows.push(SampleMetrics::compute(
            id.clone(),
            corrected.view(),
            pair.clean.center(),
            seg.view(),
            pair.mask.view(),
        )?);
    }
    EvalReport::from_samples(rows, None)
}

fn to_gray(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Side-by-side panel: input | corrected | deformation map | mask.
/// The signed deformation map is shown as `0.5 + d / 2`; labels as `85·l`.
pub fn render_panel(
    input: ArrayView2<f32>,
    corrected: ArrayView2<f32>,
    defmap: ArrayView2<f32>,
    mask: ArrayView2<u8>,
) -> Result<GrayImage> {
    same_dims(&input, &corrected, "panel")?;
    same_dims(&input, &defmap, "panel")?;
    same_dims(&input, &mask, "panel")?;
    let (h, w) = input.dim();
    let mut img = GrayImage::new((4 * w) as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let px = [
                to_gray(input[[i, j]]),
                to_gray(corrected[[i, j]]),
                to_gray(0.5 + 0.5 * defmap[[i, j]]),
                mask[[i, j]].saturating_mul(85),
            ];
            for (k, v) in px.into_iter().enumerate() {
                img.put_pixel((k * w + j) as u32, i as u32, Luma([v]));
            }
        }
    }
    Ok(img)
}

pub fn save_panel(img: &GrayImage, path: &Path) -> Result<()> {
    img.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

/// Renders one panel per sample from inputs in `input_dir` (datagen format)
/// and predictions in `pred_dir`, writing `<id>.png` files into `out_dir`.
pub fn plot_panels(input_dir: &Path, pred_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let inputs = list_samples(input_dir)?;
    let preds = prediction_dirs(pred_dir)?;
    let missing: Vec<String> = inputs
        .iter()
        .filter(|(id, _)| !preds.contains_key(id))
        .map(|(id, _)| format!("{id} (no prediction)"))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingSamples(missing));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for (id, dir) in &inputs {
        let pair = read_sample(dir)?;
        let (h, w) = pair.mask.dim();
        let pdir = &preds[id];
        let corrected = read_center(&pdir.join(CORRECTED_FILE), h, w, "corrected")?;
        let defmap = read_center(&pdir.join(DEFMAP_FILE), h, w, "defmap")?;
        let seg = read_u8(&pdir.join(SEGMASK_FILE), h * w, "segmask")?;
        let seg = Array2::from_shape_vec((h, w), seg).expect("length checked");
        let img = render_panel(pair.corrupted.center(), corrected.view(), defmap.view(), seg.view())?;
        let path = out_dir.join(format!("{id}.png"));
        save_panel(&img, &path)?;
        written.push(path);
    }
    Ok(written)
}
