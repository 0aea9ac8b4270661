//! Training objectives: least-squares adversarial losses, cycle, identity,
//! artifact, registration and segmentation losses, and MS-SSIM.
//!
//! Every expectation is realized as a mean over batch and spatial positions.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::datagen::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::nn::{Graph, Scalar, Tensor, Var};

/// Relative weights of the generator objective terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    #[serde(rename = "lambda_adv")]
    pub adv: f64,
    #[serde(rename = "lambda_cyc")]
    pub cyc: f64,
    /// MS-SSIM share inside the cycle loss.
    #[serde(rename = "lambda_ms")]
    pub ms: f64,
    #[serde(rename = "lambda_idt")]
    pub idt: f64,
    #[serde(rename = "lambda_art")]
    pub art: f64,
    #[serde(rename = "lambda_reg")]
    pub reg: f64,
    #[serde(rename = "lambda_seg")]
    pub seg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            adv: 1.0,
            cyc: 10.0,
            ms: 0.5,
            idt: 5.0,
            art: 1.0,
            reg: 1.0,
            seg: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.adv, self.cyc, self.ms, self.idt, self.art, self.reg, self.seg];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid(format!(
                "loss weights must be finite and >= 0: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn scaled(&self, k: f64) -> Self {
        LossWeights {
            adv: self.adv * k,
            cyc: self.cyc * k,
            ms: self.ms,
            idt: self.idt * k,
            art: self.art * k,
            reg: self.reg * k,
            seg: self.seg * k,
        }
    }
}

fn same_shape<T: Scalar>(a: &Var<'_, T>, b: &Var<'_, T>, what: &str) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::invalid(format!("{what}: shape {sa:?} vs {sb:?}")));
    }
    Ok(())
}

fn finite<T: Scalar>(v: &Var<'_, T>, what: &str) -> Result<()> {
    if !v.value().all_finite() {
        return Err(Error::NumericInput(format!("{what} contains non-finite values")));
    }
    Ok(())
}

fn l1<'g, T: Scalar>(a: &Var<'g, T>, b: &Var<'g, T>) -> Var<'g, T> {
    a.sub(b).abs().mean()
}

/// `mean((1 - s)^2)`
fn ls_real<'g, T: Scalar>(s: &Var<'g, T>) -> Var<'g, T> {
    s.add_scalar(-T::one()).square().mean()
}

/// Least-squares discriminator objective over both domains.
pub fn adv_loss_dis<'g, T: Scalar>(
    real_a: &Var<'g, T>,
    fake_a: &Var<'g, T>,
    real_c: &Var<'g, T>,
    fake_c: &Var<'g, T>,
) -> Result<Var<'g, T>> {
    for (v, name) in [
        (real_a, "real_a"),
        (fake_a, "fake_a"),
        (real_c, "real_c"),
        (fake_c, "fake_c"),
    ] {
        finite(v, name)?;
    }
    let half = T::lit(0.5);
    let corrupt = ls_real(real_a).add(&fake_a.square().mean());
    let clean = ls_real(real_c).add(&fake_c.square().mean());
    Ok(corrupt.add(&clean).scale(half))
}

/// Least-squares generator objective: fakes should score 1.
pub fn adv_loss_gen<'g, T: Scalar>(fake_a: &Var<'g, T>, fake_c: &Var<'g, T>) -> Result<Var<'g, T>> {
    finite(fake_a, "fake_a")?;
    finite(fake_c, "fake_c")?;
    Ok(ls_real(fake_a).add(&ls_real(fake_c)).scale(T::lit(0.5)))
}

/// L1 cycle reconstruction plus `lambda_ms * (1 - MS-SSIM)` on the clean direction.
pub fn cycle_loss<'g, T: Scalar>(
    x_c: &Var<'g, T>,
    x_hat_c: &Var<'g, T>,
    corrupt_cycle: Option<(&Var<'g, T>, &Var<'g, T>)>,
    lambda_ms: f64,
) -> Result<Var<'g, T>> {
    same_shape(x_c, x_hat_c, "cycle loss (clean)")?;
    let mut loss = l1(x_c, x_hat_c);
    if let Some((x_a, x_hat_a)) = corrupt_cycle {
        same_shape(x_a, x_hat_a, "cycle loss (corrupted)")?;
        loss = loss.add(&l1(x_a, x_hat_a));
    }
    if lambda_ms != 0.0 {
        let ms = ms_ssim(x_c, x_hat_c)?;
        loss = loss.add(&ms.scale(-T::one()).add_scalar(T::one()).scale(T::lit(lambda_ms)));
    }
    Ok(loss)
}

pub fn identity_loss<'g, T: Scalar>(
    x_a: &Var<'g, T>,
    x_tilde_a: &Var<'g, T>,
    x_c: &Var<'g, T>,
    x_tilde_c: &Var<'g, T>,
) -> Result<Var<'g, T>> {
    same_shape(x_a, x_tilde_a, "identity loss (corrupted)")?;
    same_shape(x_c, x_tilde_c, "identity loss (clean)")?;
    Ok(l1(x_c, x_tilde_c).add(&l1(x_a, x_tilde_a)))
}

/// `mean |(x_a - x_c) - x_def|`
pub fn artifact_loss<'g, T: Scalar>(x_a: &Var<'g, T>, x_c: &Var<'g, T>, x_def: &Var<'g, T>) -> Result<Var<'g, T>> {
    same_shape(x_a, x_c, "artifact loss")?;
    same_shape(x_a, x_def, "artifact loss")?;
    Ok(x_a.sub(x_c).sub(x_def).abs().mean())
}

pub fn registration_loss<'g, T: Scalar>(x_c: &Var<'g, T>, x_warp: &Var<'g, T>) -> Result<Var<'g, T>> {
    same_shape(x_c, x_warp, "registration loss")?;
    Ok(l1(x_c, x_warp))
}

pub const DICE_SMOOTH: f64 = 1e-5;

/// One-hot `[n, classes, h, w]` encoding of a label map laid out `[n, h, w]`.
pub fn one_hot<T: Scalar>(mask: &[u8], n: usize, h: usize, w: usize, classes: usize) -> Result<Tensor<T>> {
    if mask.len() != n * h * w {
        return Err(Error::invalid(format!(
            "mask has {} labels, expected {}",
            mask.len(),
            n * h * w
        )));
    }
    if let Some(&bad) = mask.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::invalid(format!("label {bad} outside 0..{classes}")));
    }
    let plane = h * w;
    let mut t = Tensor::zeros(&[n, classes, h, w]);
    for (i, &l) in mask.iter().enumerate() {
        let (b, q) = (i / plane, i % plane);
        t.data_mut()[(b * classes + l as usize) * plane + q] = T::one();
    }
    Ok(t)
}

/// `1 - mean_c (2 I_c + eps) / (P_c + G_c + eps)` with sums over batch and space.
pub fn soft_dice_loss<'g, T: Scalar>(probs: &Var<'g, T>, target: Rc<Tensor<T>>) -> Var<'g, T> {
    let g = probs.graph();
    let eps = T::lit(DICE_SMOOTH);
    let inter = probs.mul_const(target.clone()).sum_per_channel();
    let psum = probs.sum_per_channel();
    let tsum = g.constant(target_channel_sums(&target));
    let dice = inter
        .scale(T::lit(2.0))
        .add_scalar(eps)
        .div(&psum.add(&tsum).add_scalar(eps));
    dice.mean().scale(-T::one()).add_scalar(T::one())
}

fn target_channel_sums<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = t.dims4();
    let plane = h * w;
    let mut out = vec![T::zero(); c];
    for b in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            let base = (b * c + ch) * plane;
            *o += t.data()[base..base + plane].iter().copied().sum::<T>();
        }
    }
    Tensor::from_vec(&[c], out)
}

/// Mean pixel cross-entropy plus soft Dice over the 4 tissue classes.
/// `mask` is laid out `[n, h, w]` matching `logits` `[n, 4, h, w]`.
pub fn segmentation_loss<'g, T: Scalar>(logits: &Var<'g, T>, mask: &[u8]) -> Result<Var<'g, T>> {
    let [n, c, h, w] = logits.dims4();
    if c != NUM_CLASSES {
        return Err(Error::invalid(format!(
            "expected {NUM_CLASSES} logit channels, got {c}"
        )));
    }
    finite(logits, "logits")?;
    let target = Rc::new(one_hot::<T>(mask, n, h, w, NUM_CLASSES)?);
    Ok(cross_entropy(logits, target.clone()).add(&soft_dice_loss(&logits.softmax_channels(), target)))
}

pub fn cross_entropy<'g, T: Scalar>(logits: &Var<'g, T>, target: Rc<Tensor<T>>) -> Var<'g, T> {
    let [n, _, h, w] = logits.dims4();
    let pixels = T::from_usize(n * h * w).unwrap();
    logits
        .log_softmax_channels()
        .mul_const(target)
        .sum()
        .scale(-T::one() / pixels)
}

/// Mean squared forward difference of a flow field (diffusion regularizer).
pub fn flow_smoothness<'g, T: Scalar>(flow: &Var<'g, T>) -> Var<'g, T> {
    let g = flow.graph();
    let c = flow.dims4()[1];
    // Per channel: horizontal then vertical difference, 2x2 kernels.
    let mut k = Tensor::zeros(&[2 * c, c, 2, 2]);
    for ch in 0..c {
        let base_x = ((2 * ch) * c + ch) * 4;
        let base_y = ((2 * ch + 1) * c + ch) * 4;
        let d = k.data_mut();
        d[base_x] = -T::one();
        d[base_x + 1] = T::one();
        d[base_y] = -T::one();
        d[base_y + 2] = T::one();
    }
    let kernel = g.constant(k);
    flow.conv2d(&kernel, None, 1, 0).square().mean()
}

/// Individual generator-side loss terms.
#[derive(Clone, Copy)]
pub struct GeneratorLossTerms<'g, T: Scalar> {
    pub adv: Var<'g, T>,
    pub cyc: Var<'g, T>,
    pub idt: Var<'g, T>,
    pub art: Var<'g, T>,
    pub reg: Var<'g, T>,
    pub seg: Var<'g, T>,
}

impl<'g, T: Scalar> GeneratorLossTerms<'g, T> {
    pub fn named(&self) -> [(&'static str, Var<'g, T>); 6] {
        [
            ("adv_gen", self.adv),
            ("cyc", self.cyc),
            ("idt", self.idt),
            ("art", self.art),
            ("reg", self.reg),
            ("seg", self.seg),
        ]
    }
}

/// Weighted sum of the generator terms. Zero-weighted terms are left out of the
/// graph entirely, so they contribute no gradient path.
pub fn total_generator_loss<'g, T: Scalar>(
    graph: &'g Graph<T>,
    terms: &GeneratorLossTerms<'g, T>,
    weights: &LossWeights,
) -> Result<Var<'g, T>> {
    weights.validate()?;
    let ws = [
        weights.adv,
        weights.cyc,
        weights.idt,
        weights.art,
        weights.reg,
        weights.seg,
    ];
    let mut total: Option<Var<'g, T>> = None;
    for ((name, term), w) in terms.named().into_iter().zip(ws) {
        if !term.item().is_finite() {
            return Err(Error::NonFiniteLoss {
                component: name.to_string(),
                step: None,
            });
        }
        if w == 0.0 {
            continue;
        }
        let scaled = term.scale(T::lit(w));
        total = Some(match total {
            Some(t) => t.add(&scaled),
            None => scaled,
        });
    }
    Ok(total.unwrap_or_else(|| graph.constant(Tensor::scalar(T::zero()))))
}

// ---------------------------------------------------------------------------
// MS-SSIM

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Smallest side length allowed at the coarsest scale.
pub const MS_SSIM_MIN_SCALE: usize = 16;

/// Number of scales used for an `h×w` image: the largest `M <= 5` with
/// `min(h, w) / 2^(M-1) >= 16`.
pub fn ms_ssim_scales(h: usize, w: usize) -> Result<usize> {
    let m = h.min(w);
    if m < MS_SSIM_MIN_SCALE {
        return Err(Error::invalid(format!(
            "MS-SSIM needs images of at least 16 pixels per side, got {h}x{w}"
        )));
    }
    Ok((1..=5).rev().find(|&s| m >> (s - 1) >= MS_SSIM_MIN_SCALE).unwrap_or(1))
}

/// Normalized 1D Gaussian window.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Per-image MS-SSIM, `[n, c, 1, 1]`, dynamic range 1.
pub fn ms_ssim_per_image<'g, T: Scalar>(x: &Var<'g, T>, y: &Var<'g, T>) -> Result<Var<'g, T>> {
    same_shape(x, y, "ms_ssim")?;
    let [_, _, h, w] = x.dims4();
    let scales = ms_ssim_scales(h, w)?;
    let wsum: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let kernel: Rc<Vec<T>> = Rc::new(
        gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
            .into_iter()
            .map(T::lit)
            .collect(),
    );
    let (c1, c2) = (T::lit(SSIM_K1 * SSIM_K1), T::lit(SSIM_K2 * SSIM_K2));
    let two = T::lit(2.0);
    let (mut x, mut y) = (*x, *y);
    let mut result: Option<Var<'g, T>> = None;
    for (s, &scale_weight) in MS_SSIM_WEIGHTS[..scales].iter().enumerate() {
        let filt = |v: &Var<'g, T>| v.separable_valid(kernel.clone());
        let (mu_x, mu_y) = (filt(&x), filt(&y));
        let mu_xx = mu_x.square();
        let mu_yy = mu_y.square();
        let mu_xy = mu_x.mul(&mu_y);
        let s_xx = filt(&x.square()).sub(&mu_xx);
        let s_yy = filt(&y.square()).sub(&mu_yy);
        let s_xy = filt(&x.mul(&y)).sub(&mu_xy);
        let cs_map = s_xy.scale(two).add_scalar(c2).div(&s_xx.add(&s_yy).add_scalar(c2));
        let weight = T::lit(scale_weight / wsum);
        let factor = if s + 1 < scales {
            cs_map.mean_spatial()
        } else {
            let lum = mu_xy.scale(two).add_scalar(c1).div(&mu_xx.add(&mu_yy).add_scalar(c1));
            lum.mul(&cs_map).mean_spatial()
        };
        let term = factor.relu().pow_scalar(weight);
        result = Some(match result {
            Some(r) => r.mul(&term),
            None => term,
        });
        if s + 1 < scales {
            x = x.avg_pool2();
            y = y.avg_pool2();
        }
    }
    Ok(result.expect("at least one scale"))
}

/// MS-SSIM averaged over batch and channels.
pub fn ms_ssim<'g, T: Scalar>(x: &Var<'g, T>, y: &Var<'g, T>) -> Result<Var<'g, T>> {
    Ok(ms_ssim_per_image(x, y)?.mean())
}

/// MS-SSIM of two single-channel images.
pub fn ms_ssim_value(x: &ndarray::ArrayView2<f32>, y: &ndarray::ArrayView2<f32>) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::invalid(format!("ms_ssim: shape {:?} vs {:?}", x.dim(), y.dim())));
    }
    let (h, w) = x.dim();
    let to = |a: &ndarray::ArrayView2<f32>| Tensor::from_vec(&[1, 1, h, w], a.iter().map(|&v| v as f64).collect());
    let g = Graph::<f64>::new();
    let (vx, vy) = (g.constant(to(x)), g.constant(to(y)));
    Ok(ms_ssim(&vx, &vy)?.item())
}
