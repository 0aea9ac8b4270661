//! Retrospective rigid-motion simulation in k-space.
//!
//! The acquisition is modelled as sequential phase-encode lines (image rows in
//! centered k-space order). Between lines the head may jump to a new rigid pose
//! `(tx, ty, theta)`; each line is taken from the k-space of the image in the
//! pose held while that line was acquired.

use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Zip};
use num_complex::Complex64;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::datagen::{list_samples, read_sample, write_sample, SamplePair, Slice25D};
use crate::error::{Error, Result};

/// Maximum |translation| in pixels per severity level.
pub const TRANSLATION_AMPLITUDE: [f64; 3] = [0.0, 2.0, 5.0];
/// Maximum |rotation| in degrees per severity level.
pub const ROTATION_AMPLITUDE: [f64; 3] = [0.0, 2.0, 5.0];
/// Fraction of lines around the k-space center held at the reference pose.
pub const PROTECTED_CENTER_FRACTION: f64 = 0.10;
pub const MIN_LINES: usize = 8;

/// Per-line rigid pose for one acquisition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionTrajectory {
    /// Column shift in pixels, one entry per phase-encode line.
    pub tx: Vec<f64>,
    /// Row shift in pixels.
    pub ty: Vec<f64>,
    /// In-plane rotation in degrees.
    pub theta: Vec<f64>,
    pub severity: u8,
    pub seed: u64,
}

impl MotionTrajectory {
    /// Motion-free trajectory.
    pub fn still(n_lines: usize) -> Self {
        MotionTrajectory {
            tx: vec![0.0; n_lines],
            ty: vec![0.0; n_lines],
            theta: vec![0.0; n_lines],
            severity: 0,
            seed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.tx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tx.is_empty()
    }

    /// Uniform pose over the whole acquisition.
    pub fn constant(n_lines: usize, tx: f64, ty: f64, theta: f64) -> Self {
        MotionTrajectory {
            tx: vec![tx; n_lines],
            ty: vec![ty; n_lines],
            theta: vec![theta; n_lines],
            severity: 0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ty.len() != self.tx.len() || self.theta.len() != self.tx.len() {
            return Err(Error::invalid(format!(
                "trajectory arrays differ in length: tx {}, ty {}, theta {}",
                self.tx.len(),
                self.ty.len(),
                self.theta.len()
            )));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !(finite(&self.tx) && finite(&self.ty) && finite(&self.theta)) {
            return Err(Error::NumericInput("trajectory contains non-finite values".into()));
        }
        Ok(())
    }

    /// Distinct poses, each with the lines acquired in it.
    fn states(&self) -> Vec<((f64, f64, f64), Vec<usize>)> {
        let mut states: Vec<((f64, f64, f64), Vec<usize>)> = Vec::new();
        for l in 0..self.len() {
            let pose = (self.tx[l], self.ty[l], self.theta[l]);
            let same = |p: &(f64, f64, f64)| {
                p.0.to_bits() == pose.0.to_bits()
                    && p.1.to_bits() == pose.1.to_bits()
                    && p.2.to_bits() == pose.2.to_bits()
            };
            match states.iter_mut().find(|(p, _)| same(p)) {
                Some((_, lines)) => lines.push(l),
                None => states.push((pose, vec![l])),
            }
        }
        states
    }
}

/// Index range `[lo, hi)` of the protected central lines.
pub fn protected_band(n_lines: usize) -> (usize, usize) {
    let half = PROTECTED_CENTER_FRACTION * n_lines as f64 / 2.0;
    let mid = n_lines as f64 / 2.0;
    let lo = (mid - half).floor() as usize;
    let hi = ((mid + half).ceil() as usize).min(n_lines);
    (lo, hi.max(lo + 1))
}

/// Piecewise-constant random trajectory: 2 to 5 sudden movements at random
/// lines, uniform poses within the severity bounds, and the segment holding
/// the k-space center pinned to the reference pose.
pub fn make_trajectory(severity: u8, seed: u64, n_lines: usize) -> Result<MotionTrajectory> {
    if severity > 2 {
        return Err(Error::invalid(format!("severity must be 0, 1 or 2, got {severity}")));
    }
    if n_lines < MIN_LINES {
        return Err(Error::invalid(format!(
            "need at least {MIN_LINES} lines, got {n_lines}"
        )));
    }
    let mut traj = MotionTrajectory::still(n_lines);
    traj.severity = severity;
    traj.seed = seed;
    if severity == 0 {
        return Ok(traj);
    }
    let (amp_t, amp_r) = (
        TRANSLATION_AMPLITUDE[severity as usize],
        ROTATION_AMPLITUDE[severity as usize],
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = protected_band(n_lines);
    // An event strictly inside the band would split it across two poses.
    let candidates: Vec<usize> = (1..n_lines).filter(|&l| l <= lo || l >= hi).collect();
    let events = rng.random_range(2..=5usize).min(candidates.len());
    let mut starts: Vec<usize> = sample(&mut rng, candidates.len(), events)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    starts.sort_unstable();
    starts.insert(0, 0);
    for (s, &start) in starts.iter().enumerate() {
        let end = starts.get(s + 1).copied().unwrap_or(n_lines);
        let tx = rng.random_range(-amp_t..=amp_t);
        let ty = rng.random_range(-amp_t..=amp_t);
        let theta = rng.random_range(-amp_r..=amp_r);
        if start <= lo && end >= hi {
            continue;
        }
        for l in start..end {
            traj.tx[l] = tx;
            traj.ty[l] = ty;
            traj.theta[l] = theta;
        }
    }
    Ok(traj)
}

/// Rotates about the image center by `theta_deg` with bilinear interpolation;
/// samples falling outside the image read as zero.
pub fn rotate_bilinear(image: ArrayView2<f64>, theta_deg: f64) -> Array2<f64> {
    let (h, w) = image.dim();
    if theta_deg == 0.0 {
        return image.to_owned();
    }
    let (s, c) = theta_deg.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let fetch = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            image[[y as usize, x as usize]]
        }
    };
    Array2::from_shape_fn((h, w), |(i, j)| {
        let (dy, dx) = (i as f64 - cy, j as f64 - cx);
        let sx = cx + c * dx + s * dy;
        let sy = cy - s * dx + c * dy;
        let (x0, y0) = (sx.floor(), sy.floor());
        let (fx, fy) = (sx - x0, sy - y0);
        let (x0, y0) = (x0 as isize, y0 as isize);
        let top = fetch(y0, x0) * (1.0 - fx) + fetch(y0, x0 + 1) * fx;
        let bot = fetch(y0 + 1, x0) * (1.0 - fx) + fetch(y0 + 1, x0 + 1) * fx;
        top * (1.0 - fy) + bot * fy
    })
}

/// In-place 2D DFT; the inverse is normalized by `1 / (h w)`.
pub fn fft2(data: &mut Array2<Complex64>, inverse: bool) {
    let (h, w) = data.dim();
    let mut planner = FftPlanner::<f64>::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    let mut buf = vec![Complex64::default(); w.max(h)];
    for mut row in data.rows_mut() {
        buf[..w].iter_mut().zip(row.iter()).for_each(|(b, &v)| *b = v);
        row_fft.process(&mut buf[..w]);
        row.iter_mut().zip(&buf[..w]).for_each(|(v, &b)| *v = b);
    }
    for mut col in data.columns_mut() {
        buf[..h].iter_mut().zip(col.iter()).for_each(|(b, &v)| *b = v);
        col_fft.process(&mut buf[..h]);
        col.iter_mut().zip(&buf[..h]).for_each(|(v, &b)| *v = b);
    }
    if inverse {
        let norm = 1.0 / (h * w) as f64;
        data.mapv_inplace(|v| v * norm);
    }
}

/// Signed DFT frequency of bin `k` for length `n`.
fn signed_freq(k: usize, n: usize) -> f64 {
    if k < n.div_ceil(2) {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Row of the unshifted k-space array acquired as line `l` of a centered,
/// sequential acquisition.
pub fn kspace_row_of_line(l: usize, n_lines: usize) -> usize {
    (l + n_lines - n_lines / 2) % n_lines
}

/// Composite k-space (unshifted layout) of `image` acquired under `traj`.
pub fn corrupt_kspace(image: ArrayView2<f64>, traj: &MotionTrajectory) -> Result<Array2<Complex64>> {
    traj.validate()?;
    let (h, w) = image.dim();
    if traj.len() != h {
        return Err(Error::invalid(format!(
            "trajectory has {} lines but image height is {h}",
            traj.len()
        )));
    }
    let mut composite = Array2::<Complex64>::zeros((h, w));
    for ((tx, ty, theta), lines) in traj.states() {
        let rotated = rotate_bilinear(image, theta);
        let mut k = rotated.mapv(|v| Complex64::new(v, 0.0));
        fft2(&mut k, false);
        for &l in &lines {
            let r = kspace_row_of_line(l, h);
            let ky = signed_freq(r, h);
            for c in 0..w {
                let kx = signed_freq(c, w);
                let phase = -2.0 * std::f64::consts::PI * (kx * tx / w as f64 + ky * ty / h as f64);
                composite[[r, c]] = k[[r, c]] * Complex64::from_polar(1.0, phase);
            }
        }
    }
    Ok(composite)
}

/// Corrupts a real image in `[0, 1]`; returns the clipped magnitude image.
pub fn apply_motion(image: ArrayView2<f32>, traj: &MotionTrajectory) -> Result<Array2<f32>> {
    if image.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericInput("image contains non-finite values".into()));
    }
    let image64 = image.mapv(f64::from);
    let mut k = corrupt_kspace(image64.view(), traj)?;
    fft2(&mut k, true);
    Ok(k.mapv(|v| v.norm().clamp(0.0, 1.0) as f32))
}

/// Corrupts every channel of a 2.5D stack with the same trajectory.
pub fn corrupt_stack(stack: &Slice25D, traj: &MotionTrajectory) -> Result<Slice25D> {
    let mut out = stack.data.clone();
    for (c, mut dst) in out.outer_iter_mut().enumerate() {
        let corrupted = apply_motion(stack.data.index_axis(ndarray::Axis(0), c), traj)?;
        Zip::from(&mut dst).and(&corrupted).for_each(|d, &v| *d = v);
    }
    Ok(Slice25D {
        data: out,
        center_index: stack.center_index,
    })
}

/// Replaces the corrupted stack of `pair` by a fresh corruption of its clean
/// stack drawn at `severity` with `seed`.
pub fn corrupt_pair(pair: &SamplePair, severity: u8, seed: u64) -> Result<SamplePair> {
    let traj = make_trajectory(severity, seed, pair.clean.height())?;
    Ok(SamplePair {
        corrupted: corrupt_stack(&pair.clean, &traj)?,
        clean: pair.clean.clone(),
        mask: pair.mask.clone(),
        trajectory: traj,
    })
}

/// Corrupts every sample under `input` and writes the pairs under `out`
/// with the same IDs. Sample `i` (sorted order) uses seed `seed + i`.
pub fn simulate_dir(input: &Path, severity: u8, seed: u64, out: &Path) -> Result<Vec<PathBuf>> {
    let samples = list_samples(input)?;
    if samples.is_empty() {
        return Err(Error::invalid(format!("no samples in {}", input.display())));
    }
    samples
        .iter()
        .enumerate()
        .map(|(i, (id, dir))| {
            let pair = corrupt_pair(&read_sample(dir)?, severity, seed.wrapping_add(i as u64))?;
            let target = out.join(id);
            write_sample(&pair, &target)?;
            Ok(target)
        })
        .collect()
}
