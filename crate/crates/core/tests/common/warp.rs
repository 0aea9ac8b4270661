//! Reference evaluations for the bilinear warp.

use deformseg::nn::{Graph, Tensor};
use deformseg::regseg::stn_warp;

pub fn warp(source: &Tensor<f64>, flow: &Tensor<f64>) -> Tensor<f64> {
    let g = Graph::new();
    let out = stn_warp(&g.constant(source.clone()), &g.constant(flow.clone())).unwrap();
    (*out.value()).clone()
}

pub fn constant_flow(h: usize, w: usize, dx: f64, dy: f64) -> Tensor<f64> {
    let mut data = vec![dx; h * w];
    data.extend(std::iter::repeat_n(dy, h * w));
    Tensor::from_vec(&[1, 2, h, w], data)
}

/// Explicit bilinear sampling of channel `c` at `(y, x)` with both
/// coordinates first clamped into the image.
pub fn clamped_sample(source: &Tensor<f64>, c: usize, y: f64, x: f64) -> f64 {
    let [_, _, h, w] = source.dims4();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |i: usize, j: usize| source.data()[(c * h + i) * w + j];
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}
