//! Helpers shared by the integration tests and the acceptance suite.

#![allow(dead_code)]

pub mod gradients;
pub mod simulator;
pub mod warp;

use deformseg::nn::{Graph, Tensor, Var};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(lo..hi)).collect())
}

pub fn uniform_image(h: usize, w: usize, seed: u64) -> Array2<f32> {
    let mut r = rng(seed);
    Array2::from_shape_fn((h, w), |_| r.random::<f32>())
}

pub fn scalar(g: &Graph<f64>, v: f64) -> Var<'_, f64> {
    g.constant(Tensor::from_vec(&[1], vec![v]))
}

pub fn full<'g>(g: &'g Graph<f64>, shape: &[usize], v: f64) -> Var<'g, f64> {
    g.constant(Tensor::full(shape, v))
}

/// Reference MS-SSIM written directly from the textbook definition with plain
/// loops: a full 2D Gaussian window, valid filtering, 2×2 average pooling
/// between scales and the standard weights renormalized over the scales used.
pub fn reference_ms_ssim(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    const WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
    let c1 = 0.01f64.powi(2);
    let c2 = 0.03f64.powi(2);
    let (h, w) = x.dim();
    let mut scales = 1;
    while scales < 5 && h.min(w) / (1 << scales) >= 16 {
        scales += 1;
    }
    let total: f64 = WEIGHTS[..scales].iter().sum();

    let mut win = [[0.0f64; 11]; 11];
    let mut wsum = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            wsum += *v;
        }
    }

    let (mut a, mut b) = (x.clone(), y.clone());
    let mut result = 1.0;
    for (s, &weight) in WEIGHTS[..scales].iter().enumerate() {
        let (h, w) = a.dim();
        let (mut cs_sum, mut ssim_sum, mut count) = (0.0, 0.0, 0.0);
        for i in 0..=h - 11 {
            for j in 0..=w - 11 {
                let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (di, row) in win.iter().enumerate() {
                    for (dj, &k) in row.iter().enumerate() {
                        let k = k / wsum;
                        let (p, q) = (a[[i + di, j + dj]], b[[i + di, j + dj]]);
                        mx += k * p;
                        my += k * q;
                        mxx += k * p * p;
                        myy += k * q * q;
                        mxy += k * p * q;
                    }
                }
                let vx = mxx - mx * mx;
                let vy = myy - my * my;
                let cov = mxy - mx * my;
                let cs = (2.0 * cov + c2) / (vx + vy + c2);
                let l = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
                cs_sum += cs;
                ssim_sum += l * cs;
                count += 1.0;
            }
        }
        let factor = if s + 1 < scales {
            cs_sum / count
        } else {
            ssim_sum / count
        };
        result *= factor.max(0.0).powf(weight / total);
        if s + 1 < scales {
            a = pool(&a);
            b = pool(&b);
        }
    }
    result
}

fn pool(a: &Array2<f64>) -> Array2<f64> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((h / 2, w / 2), |(i, j)| {
        0.25 * (a[[2 * i, 2 * j]] + a[[2 * i + 1, 2 * j]] + a[[2 * i, 2 * j + 1]] + a[[2 * i + 1, 2 * j + 1]])
    })
}

/// Smallest sensible model for fast end-to-end tests on 32×32 phantoms.
pub fn tiny_config() -> deformseg::TrainConfig {
    deformseg::TrainConfig {
        image_size: 32,
        batch_size: 2,
        steps: 3,
        seed: 5,
        gen_width: 4,
        gen_max_width: 16,
        structure_channels: 8,
        artifact_channels: 4,
        dis_width: 4,
        dis_layers: 2,
        regseg_width: 4,
        regseg_levels: 3,
        ..deformseg::TrainConfig::default()
    }
}
