//! Simulator oracles shared with the acceptance suite.

use deformseg::datagen::{generate_phantom, phantom_sample};
use deformseg::metrics::ms_ssim;
use deformseg::motionsim::{apply_motion, corrupt_pair, MotionTrajectory};
use ndarray::Array2;

pub fn max_abs(a: &Array2<f32>, b: &Array2<f32>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max)
}

pub fn circular_shift(image: &Array2<f32>, dx: isize, dy: isize) -> Array2<f32> {
    let (h, w) = image.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let si = (i as isize - dy).rem_euclid(h as isize) as usize;
        let sj = (j as isize - dx).rem_euclid(w as isize) as usize;
        image[[si, sj]]
    })
}

/// Largest error of severity-0 corruption over a few phantoms.
pub fn identity_error() -> f64 {
    (0..5)
        .map(|seed| {
            let p = generate_phantom(seed, 64).unwrap();
            let out = apply_motion(p.image.view(), &MotionTrajectory::still(64)).unwrap();
            max_abs(&out, &p.image)
        })
        .fold(0.0, f64::max)
}

/// Largest error between a whole-acquisition 5 px translation and the
/// circularly shifted image.
pub fn shift_error() -> f64 {
    (0..5)
        .map(|seed| {
            let p = generate_phantom(seed, 64).unwrap();
            let out = apply_motion(p.image.view(), &MotionTrajectory::constant(64, 5.0, 0.0, 0.0)).unwrap();
            max_abs(&out, &circular_shift(&p.image, 5, 0))
        })
        .fold(0.0, f64::max)
}

/// Mean MS-SSIM(clean, corrupted) of the center slices of `count` phantom
/// stacks at each severity level.
pub fn mean_ms_ssim_by_severity(count: u64, size: usize) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (severity, slot) in out.iter_mut().enumerate() {
        let mut total = 0.0;
        for i in 0..count {
            let pair = corrupt_pair(&phantom_sample(i, size).unwrap(), severity as u8, 1000 + i).unwrap();
            total += ms_ssim(&pair.clean.center(), &pair.corrupted.center()).unwrap();
        }
        *slot = total / count as f64;
    }
    out
}
