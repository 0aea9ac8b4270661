use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::model::Model;
use super::train::Dataset;
use crate::datagen::{list_samples, read_sample, write_f32, Slice25D};
use crate::error::{Error, Result};
use crate::metrics::{
    render_panel, save_panel, SampleMetrics, CORRECTED_FILE, DEFMAP_FILE, DVF_FILE, PANEL_FILE, SEGMASK_FILE,
};
use crate::nn::{Graph, Tensor};
use crate::regseg::argmax_labels;

/// The three test-time products plus the displacement field.
#[derive(Clone, Debug, PartialEq)]
pub struct InferOutput {
    /// `3×H×W`, clipped to `[0, 1]`.
    pub corrected: Array3<f32>,
    /// `3×H×W` signed deformation map.
    pub defmap: Array3<f32>,
    /// `H×W` labels of the center slice.
    pub seg_mask: Array2<u8>,
    /// `2×H×W` displacement in pixels (x then y).
    pub flow: Array3<f32>,
}

/// A loaded model ready for test-time use. Only the corrupted-domain
/// encoder, the clean decoder and the registration / segmentation networks run.
pub struct Predictor {
    pub config: TrainConfig,
    pub model: Model<f32>,
}

fn to_array3(t: &Tensor<f32>) -> Array3<f32> {
    let [_, c, h, w] = t.dims4();
    Array3::from_shape_vec((c, h, w), t.data().to_vec()).expect("single-sample tensor")
}

impl Predictor {
    pub fn new(config: TrainConfig, model: Model<f32>) -> Self {
        Predictor { config, model }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Ok(Predictor {
            config: ckpt.config.clone(),
            model: ckpt.model()?,
        })
    }

    pub fn predict(&self, x_a: &Slice25D) -> Result<InferOutput> {
        x_a.validate()?;
        let (c, h, w) = x_a.data.dim();
        let size = self.config.image_size;
        if h != size || w != size {
            return Err(Error::invalid(format!(
                "input is {h}x{w}, checkpoint expects {size}x{size}"
            )));
        }
        let g = Graph::with_frozen(self.model.all_params());
        let ps = &self.model.store;
        let input = g.constant(Tensor::from_vec(&[1, c, h, w], x_a.data.iter().copied().collect()));
        let raw = self.model.gen.correct(&g, ps, &input)?;
        let corrected = g.constant(raw.value().map(|v| v.clamp(0.0, 1.0)));
        let joint = self.model.regseg.joint_forward(&g, ps, &input, &corrected)?;
        let labels = argmax_labels(&joint.logits.value());
        Ok(InferOutput {
            corrected: to_array3(&corrected.value()),
            defmap: to_array3(&joint.x_def.value()),
            seg_mask: Array2::from_shape_vec((h, w), labels).expect("one label per pixel"),
            flow: to_array3(&joint.flow.value()),
        })
    }
}

/// Metrics of every sample in `data`, predicting from the corrupted stacks.
pub fn score_dataset(predictor: &Predictor, data: &Dataset) -> Result<Vec<SampleMetrics>> {
    data.ids
        .iter()
        .zip(&data.pairs)
        .map(|(id, pair)| {
            let out = predictor.predict(&pair.corrupted)?;
            let mid = out.corrected.dim().0 / 2;
            SampleMetrics::compute(
                id.clone(),
                out.corrected.index_axis(ndarray::Axis(0), mid),
                pair.clean.center(),
                out.seg_mask.view(),
                pair.mask.view(),
            )
        })
        .collect()
}

/// Runs the checkpoint on a single corrupted stack.
pub fn infer(ckpt: &Checkpoint, x_a: &Slice25D) -> Result<InferOutput> {
    Predictor::from_checkpoint(ckpt)?.predict(x_a)
}

/// Writes `corrected.f32`, `dvf.f32`, `defmap.f32`, `segmask.u8` (and
/// optionally `panel.png`) into `dir`.
pub fn write_outputs(out: &InferOutput, input: &Slice25D, dir: &Path, panel: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_f32(&dir.join(CORRECTED_FILE), out.corrected.iter().copied())?;
    write_f32(&dir.join(DVF_FILE), out.flow.iter().copied())?;
    write_f32(&dir.join(DEFMAP_FILE), out.defmap.iter().copied())?;
    let seg_path = dir.join(SEGMASK_FILE);
    fs::write(&seg_path, out.seg_mask.iter().copied().collect::<Vec<u8>>()).map_err(|e| Error::io(&seg_path, e))?;
    if panel {
        let mid = out.corrected.dim().0 / 2;
        let img = render_panel(
            input.center(),
            out.corrected.index_axis(ndarray::Axis(0), mid),
            out.defmap.index_axis(ndarray::Axis(0), mid),
            out.seg_mask.view(),
        )?;
        save_panel(&img, &dir.join(PANEL_FILE))?;
    }
    Ok(())
}

/// Runs inference on the corrupted stack of every sample in `in_dir`,
/// writing one output directory per sample ID under `out_dir`.
pub fn infer_dir(ckpt: &Checkpoint, in_dir: &Path, out_dir: &Path, panels: bool) -> Result<Vec<PathBuf>> {
    let predictor = Predictor::from_checkpoint(ckpt)?;
    let samples = list_samples(in_dir)?;
    if samples.is_empty() {
        return Err(Error::invalid(format!("no samples in {}", in_dir.display())));
    }
    let mut written = Vec::with_capacity(samples.len());
    for (id, dir) in samples {
        let pair = read_sample(&dir)?;
        let out = predictor.predict(&pair.corrupted)?;
        let target = out_dir.join(&id);
        write_outputs(&out, &pair.corrupted, &target, panels)?;
        written.push(target);
    }
    Ok(written)
}
