//! Raw numeric kernels behind the differentiable ops: im2col convolution,
//! instance normalization, resampling, bilinear warping and separable
//! filtering. All tensors are NCHW, row-major.

use super::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            conv_out_len(self.h, self.k, self.stride, self.pad),
            conv_out_len(self.w, self.k, self.stride, self.pad),
        )
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(len + 2 * pad >= k, "kernel {k} larger than padded input {len}+2*{pad}");
    (len + 2 * pad - k) / stride + 1
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, ho: usize, wo: usize, cols: &mut [T]) {
    let (h, w, k, s, p) = (g.h as isize, g.w as isize, g.k, g.stride as isize, g.pad as isize);
    let plane = ho * wo;
    for c in 0..g.ci {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = oy as isize * s + ky as isize - p;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = ox as isize * s + kx as isize - p;
                        *d = if ix < 0 || ix >= w { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, ho: usize, wo: usize, dx: &mut [T]) {
    let (h, w, k, s, p) = (g.h as isize, g.w as isize, g.k, g.stride as isize, g.pad as isize);
    let plane = ho * wo;
    for c in 0..g.ci {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = oy as isize * s + ky as isize - p;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let drow = &mut dxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = ox as isize * s + kx as isize - p;
                        if ix >= 0 && ix < w {
                            drow[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding. `weight` is `[co, ci, k, k]`.
pub fn conv2d_forward<T: Scalar>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let kk = g.ci * g.k * g.k;
    let mut out = vec![T::zero(); g.n * g.co * plane];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kk * plane]
    };
    for b in 0..g.n {
        let xb = &x[b * g.ci * g.h * g.w..(b + 1) * g.ci * g.h * g.w];
        let colsb: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, ho, wo, &mut cols);
            &cols
        };
        let ob = &mut out[b * g.co * plane..(b + 1) * g.co * plane];
        if let Some(bias) = bias {
            for (o, &bv) in ob.chunks_mut(plane).zip(bias) {
                o.fill(bv);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        unsafe {
            T::gemm(
                g.co,
                kk,
                plane,
                T::one(),
                weight.as_ptr(),
                kk as isize,
                1,
                colsb.as_ptr(),
                plane as isize,
                1,
                beta,
                ob.as_mut_ptr(),
                plane as isize,
                1,
            );
        }
    }
    out
}

/// Gradients of [`conv2d_forward`]. Each output is computed only when requested.
#[allow(clippy::type_complexity)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let kk = g.ci * g.k * g.k;
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); weight.len()]);
    let mut db = need_db.then(|| vec![T::zero(); g.co]);
    let mut cols = vec![T::zero(); kk * plane];
    for b in 0..g.n {
        let gb = &grad_out[b * g.co * plane..(b + 1) * g.co * plane];
        if let Some(db) = db.as_mut() {
            for (d, gp) in db.iter_mut().zip(gb.chunks(plane)) {
                *d += gp.iter().copied().sum();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let xb = &x[b * g.ci * g.h * g.w..(b + 1) * g.ci * g.h * g.w];
            let colsb: &[T] = if g.is_pointwise() {
                xb
            } else {
                im2col(xb, g, ho, wo, &mut cols);
                &cols
            };
            unsafe {
                T::gemm(
                    g.co,
                    plane,
                    kk,
                    T::one(),
                    gb.as_ptr(),
                    plane as isize,
                    1,
                    colsb.as_ptr(),
                    1,
                    plane as isize,
                    T::one(),
                    dw.as_mut_ptr(),
                    kk as isize,
                    1,
                );
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * g.ci * g.h * g.w..(b + 1) * g.ci * g.h * g.w];
            if g.is_pointwise() {
                unsafe {
                    T::gemm(
                        kk,
                        g.co,
                        plane,
                        T::one(),
                        weight.as_ptr(),
                        1,
                        kk as isize,
                        gb.as_ptr(),
                        plane as isize,
                        1,
                        T::one(),
                        dxb.as_mut_ptr(),
                        plane as isize,
                        1,
                    );
                }
            } else {
                unsafe {
                    T::gemm(
                        kk,
                        g.co,
                        plane,
                        T::one(),
                        weight.as_ptr(),
                        1,
                        kk as isize,
                        gb.as_ptr(),
                        plane as isize,
                        1,
                        T::zero(),
                        cols.as_mut_ptr(),
                        plane as isize,
                        1,
                    );
                }
                col2im(&cols, g, ho, wo, dxb);
            }
        }
    }
    (dx, dw, db)
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Per-(sample, channel) normalization without affine parameters.
/// Returns the normalized output and the inverse standard deviation per plane.
pub fn instance_norm_forward<T: Scalar>(x: &[T], planes: usize, plane: usize) -> (Vec<T>, Vec<T>) {
    let mut out = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(planes);
    let eps = T::lit(INSTANCE_NORM_EPS);
    let count = T::from_usize(plane).unwrap();
    for (xp, op) in x.chunks(plane).zip(out.chunks_mut(plane)) {
        let mean = xp.iter().copied().sum::<T>() / count;
        let var = xp.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
        let inv = T::one() / (var + eps).sqrt();
        for (o, &v) in op.iter_mut().zip(xp) {
            *o = (v - mean) * inv;
        }
        inv_std.push(inv);
    }
    (out, inv_std)
}

pub fn instance_norm_backward<T: Scalar>(y: &[T], inv_std: &[T], grad_out: &[T], plane: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    let count = T::from_usize(plane).unwrap();
    for (((yp, gp), dp), &inv) in y
        .chunks(plane)
        .zip(grad_out.chunks(plane))
        .zip(dx.chunks_mut(plane))
        .zip(inv_std)
    {
        let mean_g = gp.iter().copied().sum::<T>() / count;
        let mean_gy = gp.iter().zip(yp).map(|(&g, &y)| g * y).sum::<T>() / count;
        for ((d, &g), &y) in dp.iter_mut().zip(gp).zip(yp) {
            *d = inv * (g - mean_g - y * mean_gy);
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling of `planes` planes of size `h×w`.
pub fn upsample2x_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * h2 * w2];
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        let op = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for i in 0..h2 {
            let src = &xp[(i / 2) * w..(i / 2 + 1) * w];
            for (j, o) in op[i * w2..(i + 1) * w2].iter_mut().enumerate() {
                *o = src[j / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Scalar>(g: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let gp = &g[p * h2 * w2..(p + 1) * h2 * w2];
        let dp = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..h2 {
            for j in 0..w2 {
                dp[(i / 2) * w + j / 2] += gp[i * w2 + j];
            }
        }
    }
    dx
}

/// 2x2 average pooling, stride 2. Odd trailing rows/columns are dropped.
pub fn avg_pool2_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        for i in 0..ho {
            for j in 0..wo {
                let s = xp[2 * i * w + 2 * j]
                    + xp[2 * i * w + 2 * j + 1]
                    + xp[(2 * i + 1) * w + 2 * j]
                    + xp[(2 * i + 1) * w + 2 * j + 1];
                out[p * ho * wo + i * wo + j] = s * quarter;
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Scalar>(g: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let dp = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..ho {
            for j in 0..wo {
                let v = g[p * ho * wo + i * wo + j] * quarter;
                dp[2 * i * w + 2 * j] += v;
                dp[2 * i * w + 2 * j + 1] += v;
                dp[(2 * i + 1) * w + 2 * j] += v;
                dp[(2 * i + 1) * w + 2 * j + 1] += v;
            }
        }
    }
    dx
}

/// Bilinear sample coordinate along one axis with border clamping.
/// Returns (low index, high index, fractional weight, derivative mask).
#[inline]
fn axis_sample<T: Scalar>(pos: T, len: usize) -> (usize, usize, T, T) {
    let max = T::from_usize(len - 1).unwrap();
    if pos <= T::zero() {
        return (0, 0, T::zero(), T::zero());
    }
    if pos >= max {
        return (len - 1, len - 1, T::zero(), T::zero());
    }
    let lo = pos.floor();
    let i0 = lo.to_usize().unwrap();
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, pos - lo, T::one())
}

/// `out(p) = src(p + flow(p))` per channel. `flow` is `[n, 2, h, w]` with channel 0
/// the column (x) displacement and channel 1 the row (y) displacement, in pixels.
pub fn warp_forward<T: Scalar>(src: &[T], flow: &[T], n: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let plane = h * w;
    let mut out = vec![T::zero(); src.len()];
    for b in 0..n {
        let fx = &flow[(2 * b) * plane..(2 * b + 1) * plane];
        let fy = &flow[(2 * b + 1) * plane..(2 * b + 2) * plane];
        for i in 0..h {
            for j in 0..w {
                let q = i * w + j;
                let (x0, x1, wx, _) = axis_sample(T::from_usize(j).unwrap() + fx[q], w);
                let (y0, y1, wy, _) = axis_sample(T::from_usize(i).unwrap() + fy[q], h);
                for ch in 0..c {
                    let s = &src[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                    let top = s[y0 * w + x0] * (T::one() - wx) + s[y0 * w + x1] * wx;
                    let bot = s[y1 * w + x0] * (T::one() - wx) + s[y1 * w + x1] * wx;
                    out[(b * c + ch) * plane + q] = top * (T::one() - wy) + bot * wy;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn warp_backward<T: Scalar>(
    src: &[T],
    flow: &[T],
    grad_out: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    need_src: bool,
    need_flow: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let plane = h * w;
    let mut dsrc = need_src.then(|| vec![T::zero(); src.len()]);
    let mut dflow = need_flow.then(|| vec![T::zero(); flow.len()]);
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let q = i * w + j;
                let fxv = flow[(2 * b) * plane + q];
                let fyv = flow[(2 * b + 1) * plane + q];
                let (x0, x1, wx, mx) = axis_sample(T::from_usize(j).unwrap() + fxv, w);
                let (y0, y1, wy, my) = axis_sample(T::from_usize(i).unwrap() + fyv, h);
                let mut gx = T::zero();
                let mut gy = T::zero();
                for ch in 0..c {
                    let base = (b * c + ch) * plane;
                    let g = grad_out[base + q];
                    if let Some(ds) = dsrc.as_mut() {
                        ds[base + y0 * w + x0] += g * (T::one() - wx) * (T::one() - wy);
                        ds[base + y0 * w + x1] += g * wx * (T::one() - wy);
                        ds[base + y1 * w + x0] += g * (T::one() - wx) * wy;
                        ds[base + y1 * w + x1] += g * wx * wy;
                    }
                    if dflow.is_some() {
                        let s = &src[base..base + plane];
                        let (a, bb, cc, d) = (s[y0 * w + x0], s[y0 * w + x1], s[y1 * w + x0], s[y1 * w + x1]);
                        gx += g * ((bb - a) * (T::one() - wy) + (d - cc) * wy);
                        gy += g * ((cc - a) * (T::one() - wx) + (d - bb) * wx);
                    }
                }
                if let Some(df) = dflow.as_mut() {
                    df[(2 * b) * plane + q] += gx * mx;
                    df[(2 * b + 1) * plane + q] += gy * my;
                }
            }
        }
    }
    (dsrc, dflow)
}

/// Separable "valid" filtering with a 1D kernel applied along rows then columns.
pub fn separable_valid_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, kernel: &[T]) -> Vec<T> {
    let k = kernel.len();
    let (ho, wo) = (h + 1 - k, w + 1 - k);
    let mut out = vec![T::zero(); planes * ho * wo];
    let mut tmp = vec![T::zero(); h * wo];
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            let row = &xp[i * w..(i + 1) * w];
            for j in 0..wo {
                let mut acc = T::zero();
                for (t, &kv) in kernel.iter().enumerate() {
                    acc += kv * row[j + t];
                }
                tmp[i * wo + j] = acc;
            }
        }
        let op = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for i in 0..ho {
            for (t, &kv) in kernel.iter().enumerate() {
                let src = &tmp[(i + t) * wo..(i + t + 1) * wo];
                for (o, &s) in op[i * wo..(i + 1) * wo].iter_mut().zip(src) {
                    *o += kv * s;
                }
            }
        }
    }
    out
}

pub fn separable_valid_backward<T: Scalar>(g: &[T], planes: usize, h: usize, w: usize, kernel: &[T]) -> Vec<T> {
    let k = kernel.len();
    let (ho, wo) = (h + 1 - k, w + 1 - k);
    let mut dx = vec![T::zero(); planes * h * w];
    let mut dtmp = vec![T::zero(); h * wo];
    for p in 0..planes {
        dtmp.fill(T::zero());
        let gp = &g[p * ho * wo..(p + 1) * ho * wo];
        for i in 0..ho {
            for (t, &kv) in kernel.iter().enumerate() {
                let dst = &mut dtmp[(i + t) * wo..(i + t + 1) * wo];
                for (d, &gv) in dst.iter_mut().zip(&gp[i * wo..(i + 1) * wo]) {
                    *d += kv * gv;
                }
            }
        }
        let dp = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for j in 0..wo {
                let v = dtmp[i * wo + j];
                for (t, &kv) in kernel.iter().enumerate() {
                    dp[i * w + j + t] += kv * v;
                }
            }
        }
    }
    dx
}

/// Softmax over the channel axis of an NCHW tensor.
pub fn softmax_channels<T: Scalar>(x: &[T], n: usize, c: usize, plane: usize, log: bool) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for q in 0..plane {
            let idx = |ch: usize| (b * c + ch) * plane + q;
            let mut max = T::neg_infinity();
            for ch in 0..c {
                max = max.max(x[idx(ch)]);
            }
            let mut sum = T::zero();
            for ch in 0..c {
                sum += (x[idx(ch)] - max).exp();
            }
            let lse = max + sum.ln();
            for ch in 0..c {
                let l = x[idx(ch)] - lse;
                out[idx(ch)] = if log { l } else { l.exp() };
            }
        }
    }
    out
}
