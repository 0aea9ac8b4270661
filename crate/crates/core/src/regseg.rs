//! Deformation-aware branch: a registration U-Net predicting a displacement
//! field, spatial-transformer warping, and a 4-class segmentation U-Net whose
//! encoder exchanges features with the registration encoder through
//! cross-stitch units at every resolution level.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBlock, Graph, Init, ParamId, ParamStore, Scalar, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegSegConfig {
    pub in_channels: usize,
    /// Width of the first U-Net level; doubled at every deeper level.
    pub width: usize,
    pub levels: usize,
    pub stitch_self: f64,
    pub stitch_cross: f64,
}

impl Default for RegSegConfig {
    fn default() -> Self {
        RegSegConfig {
            in_channels: 3,
            width: 16,
            levels: 4,
            stitch_self: 0.9,
            stitch_cross: 0.1,
        }
    }
}

impl RegSegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.width == 0 || self.levels == 0 {
            return Err(Error::invalid("regseg in_channels, width and levels must be positive"));
        }
        if !self.stitch_self.is_finite() || !self.stitch_cross.is_finite() {
            return Err(Error::invalid("cross-stitch initial values must be finite"));
        }
        Ok(())
    }

    /// Image sides must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    fn level_width(&self, l: usize) -> usize {
        self.width << l
    }
}

/// Encoder-decoder with skip connections, exposing its encoder level by level
/// so features can be mixed between two networks.
pub struct UNet {
    enc: Vec<[ConvBlock; 2]>,
    dec: Vec<ConvBlock>,
    head: Conv2d,
}

impl UNet {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        cfg: &RegSegConfig,
        in_channels: usize,
        out_channels: usize,
    ) -> Self {
        let mut enc = Vec::with_capacity(cfg.levels);
        for l in 0..cfg.levels {
            let w = cfg.level_width(l);
            let (cin, stride) = if l == 0 {
                (in_channels, 1)
            } else {
                (cfg.level_width(l - 1), 2)
            };
            enc.push([
                ConvBlock::new(store, rng, &format!("{name}.enc{l}a"), cin, w, 3, stride, true),
                ConvBlock::new(store, rng, &format!("{name}.enc{l}b"), w, w, 3, 1, true),
            ]);
        }
        let dec = (0..cfg.levels - 1)
            .map(|l| {
                let cin = cfg.level_width(l + 1) + cfg.level_width(l);
                ConvBlock::new(
                    store,
                    rng,
                    &format!("{name}.dec{l}"),
                    cin,
                    cfg.level_width(l),
                    3,
                    1,
                    true,
                )
            })
            .collect();
        let head = Conv2d::same3(store, rng, &format!("{name}.head"), cfg.width, out_channels);
        UNet { enc, dec, head }
    }

    fn encode_level<'g, T: Scalar>(&self, l: usize, g: &'g Graph<T>, ps: &ParamStore<T>, x: &Var<'g, T>) -> Var<'g, T> {
        let [a, b] = &self.enc[l];
        b.forward(g, ps, &a.forward(g, ps, x))
    }

    fn decode<'g, T: Scalar>(&self, g: &'g Graph<T>, ps: &ParamStore<T>, feats: &[Var<'g, T>]) -> Var<'g, T> {
        let mut h = *feats.last().expect("at least one level");
        for l in (0..self.dec.len()).rev() {
            let up = h.upsample2x();
            h = self.dec[l].forward(g, ps, &g.concat_channels(&[up, feats[l]]));
        }
        self.head.forward(g, ps, &h)
    }

    /// Plain forward pass without any feature exchange.
    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, ps: &ParamStore<T>, x: &Var<'g, T>) -> Var<'g, T> {
        let mut feats: Vec<Var<'g, T>> = Vec::with_capacity(self.enc.len());
        let mut h = *x;
        for l in 0..self.enc.len() {
            h = self.encode_level(l, g, ps, &h);
            feats.push(h);
        }
        self.decode(g, ps, &feats)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out: Vec<ParamId> = self
            .enc
            .iter()
            .flat_map(|[a, b]| a.params().into_iter().chain(b.params()))
            .collect();
        out.extend(self.dec.iter().flat_map(|d| d.params()));
        out.extend(self.head.params());
        out
    }
}

/// Per-channel 2×2 mixing weights `[[aa, ab], [ba, bb]]` of one fusion site.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossStitch {
    pub aa: ParamId,
    pub ab: ParamId,
    pub ba: ParamId,
    pub bb: ParamId,
}

impl CrossStitch {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
        cfg: &RegSegConfig,
    ) -> Self {
        let mut add = |suffix: &str, v: f64| store.add(format!("{name}.{suffix}"), &[channels], Init::Constant(v), rng);
        CrossStitch {
            aa: add("aa", cfg.stitch_self),
            ab: add("ab", cfg.stitch_cross),
            ba: add("ba", cfg.stitch_cross),
            bb: add("bb", cfg.stitch_self),
        }
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.aa, self.ab, self.ba, self.bb]
    }

    pub fn forward<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        ps: &ParamStore<T>,
        feat_a: &Var<'g, T>,
        feat_b: &Var<'g, T>,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let alpha = self.params().map(|id| g.param(ps, id));
        cross_stitch(feat_a, feat_b, &alpha)
    }

    /// Overwrites the site with the given matrix on every channel.
    pub fn set<T: Scalar>(&self, ps: &mut ParamStore<T>, m: [[f64; 2]; 2]) {
        let vals = [m[0][0], m[0][1], m[1][0], m[1][1]];
        for (id, v) in self.params().into_iter().zip(vals) {
            ps.get_mut(id).data_mut().fill(T::lit(v));
        }
    }
}

/// `out_a = aa·a + ab·b`, `out_b = ba·a + bb·b`, channel-wise. `alpha` holds
/// `[aa, ab, ba, bb]`, each of shape `[c]`.
pub fn cross_stitch<'g, T: Scalar>(
    feat_a: &Var<'g, T>,
    feat_b: &Var<'g, T>,
    alpha: &[Var<'g, T>; 4],
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let (sa, sb) = (feat_a.shape(), feat_b.shape());
    if sa != sb || sa.len() != 4 {
        return Err(Error::invalid(format!(
            "cross-stitch features differ: {sa:?} vs {sb:?}"
        )));
    }
    if let Some(bad) = alpha.iter().find(|p| p.shape() != [sa[1]]) {
        return Err(Error::invalid(format!(
            "cross-stitch weights {:?} for {} channels",
            bad.shape(),
            sa[1]
        )));
    }
    let [aa, ab, ba, bb] = alpha;
    let out_a = feat_a.scale_channels(aa).add(&feat_b.scale_channels(ab));
    let out_b = feat_a.scale_channels(ba).add(&feat_b.scale_channels(bb));
    Ok((out_a, out_b))
}

/// Bilinear warp `out(p) = source(p + flow(p))` with border clamping.
pub fn stn_warp<'g, T: Scalar>(source: &Var<'g, T>, flow: &Var<'g, T>) -> Result<Var<'g, T>> {
    let (s, f) = (source.shape(), flow.shape());
    if s.len() != 4 || f.len() != 4 || f[0] != s[0] || f[1] != 2 || f[2..] != s[2..] {
        return Err(Error::invalid(format!("flow {f:?} does not match source {s:?}")));
    }
    Ok(source.warp(flow))
}

#[derive(Clone, Copy)]
pub struct JointOutput<'g, T: Scalar> {
    pub flow: Var<'g, T>,
    pub x_warp: Var<'g, T>,
    pub logits: Var<'g, T>,
    pub x_def: Var<'g, T>,
}

/// Registration and segmentation networks coupled by cross-stitch units.
pub struct RegSegNet {
    pub config: RegSegConfig,
    pub reg: UNet,
    pub seg: UNet,
    pub stitches: Vec<CrossStitch>,
}

impl RegSegNet {
    pub fn new<T: Scalar>(config: &RegSegConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let reg = UNet::new(store, rng, "reg", config, 2 * config.in_channels, 2);
        // Registration starts at the identity transform.
        for id in reg.head.params() {
            store.get_mut(id).data_mut().fill(T::zero());
        }
        let seg = UNet::new(store, rng, "seg", config, config.in_channels, NUM_CLASSES);
        let stitches = (0..config.levels)
            .map(|l| CrossStitch::new(store, rng, &format!("stitch{l}"), config.level_width(l), config))
            .collect();
        Ok(RegSegNet {
            config: config.clone(),
            reg,
            seg,
            stitches,
        })
    }

    /// Network weights, excluding the cross-stitch units.
    pub fn network_params(&self) -> Vec<ParamId> {
        let mut out = self.reg.params();
        out.extend(self.seg.params());
        out
    }

    pub fn stitch_params(&self) -> Vec<ParamId> {
        self.stitches.iter().flat_map(|s| s.params()).collect()
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = self.network_params();
        out.extend(self.stitch_params());
        out
    }

    pub fn set_stitch_identity<T: Scalar>(&self, ps: &mut ParamStore<T>) {
        for s in &self.stitches {
            s.set(ps, [[1.0, 0.0], [0.0, 1.0]]);
        }
    }

    fn check_image<T: Scalar>(&self, x: &Var<'_, T>, what: &str) -> Result<()> {
        let shape = x.shape();
        let m = self.config.size_multiple();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::invalid(format!(
                "{what}: expected [n, {}, h, w], got {shape:?}",
                self.config.in_channels
            )));
        }
        if shape[2] == 0 || shape[3] == 0 || !shape[2].is_multiple_of(m) || !shape[3].is_multiple_of(m) {
            return Err(Error::invalid(format!(
                "{what}: spatial dims {shape:?} must be positive multiples of {m}"
            )));
        }
        if !x.value().all_finite() {
            return Err(Error::NumericInput(format!("{what} contains non-finite values")));
        }
        Ok(())
    }

    fn check_pair<T: Scalar>(&self, a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
        self.check_image(a, "source")?;
        self.check_image(b, "target")?;
        if a.shape() != b.shape() {
            return Err(Error::invalid(format!(
                "pair dims differ: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        Ok(())
    }

    /// Single coupled pass: registration of `(source, target)` and segmentation
    /// of `seg_input`, mixing encoder features at every level.
    fn coupled<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        ps: &ParamStore<T>,
        source: &Var<'g, T>,
        target: &Var<'g, T>,
        seg_input: &Var<'g, T>,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let mut h_reg = g.concat_channels(&[*source, *target]);
        let mut h_seg = *seg_input;
        let mut f_reg = Vec::with_capacity(self.config.levels);
        let mut f_seg = Vec::with_capacity(self.config.levels);
        for (l, stitch) in self.stitches.iter().enumerate() {
            let r = self.reg.encode_level(l, g, ps, &h_reg);
            let s = self.seg.encode_level(l, g, ps, &h_seg);
            (h_reg, h_seg) = stitch.forward(g, ps, &r, &s)?;
            f_reg.push(h_reg);
            f_seg.push(h_seg);
        }
        Ok((self.reg.decode(g, ps, &f_reg), self.seg.decode(g, ps, &f_seg)))
    }

    /// Flow, warped image, segmentation logits and deformation map
    /// `x_def = x_a - x_corrected` from one coupled pass.
    pub fn joint_forward<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        ps: &ParamStore<T>,
        x_a: &Var<'g, T>,
        x_corrected: &Var<'g, T>,
    ) -> Result<JointOutput<'g, T>> {
        self.check_pair(x_a, x_corrected)?;
        let (flow, logits) = self.coupled(g, ps, x_a, x_corrected, x_corrected)?;
        Ok(JointOutput {
            x_warp: stn_warp(x_a, &flow)?,
            x_def: x_a.sub(x_corrected),
            flow,
            logits,
        })
    }

    /// Flow registering `source` onto `target`; the segmentation branch sees `target`.
    pub fn predict_flow<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        ps: &ParamStore<T>,
        source: &Var<'g, T>,
        target: &Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        self.check_pair(source, target)?;
        Ok(self.coupled(g, ps, source, target, target)?.0)
    }

    /// Center-slice logits; the registration branch sees the pair `(image, image)`.
    pub fn segment<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        ps: &ParamStore<T>,
        image: &Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        self.check_image(image, "image")?;
        Ok(self.coupled(g, ps, image, image, image)?.1)
    }

    /// Registration network alone, no feature exchange.
    pub fn uncoupled_flow<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        ps: &ParamStore<T>,
        source: &Var<'g, T>,
        target: &Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        self.check_pair(source, target)?;
        Ok(self.reg.forward(g, ps, &g.concat_channels(&[*source, *target])))
    }

    /// Segmentation network alone, no feature exchange.
    pub fn uncoupled_segment<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        ps: &ParamStore<T>,
        image: &Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        self.check_image(image, "image")?;
        Ok(self.seg.forward(g, ps, image))
    }
}

/// Per-pixel argmax over the class axis of `[n, c, h, w]` logits.
pub fn argmax_labels<T: Scalar>(logits: &crate::nn::Tensor<T>) -> Vec<u8> {
    let [n, c, h, w] = logits.dims4();
    let plane = h * w;
    let d = logits.data();
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        for q in 0..plane {
            let mut best = 0;
            for k in 1..c {
                if d[(b * c + k) * plane + q] > d[(b * c + best) * plane + q] {
                    best = k;
                }
            }
            out.push(best as u8);
        }
    }
    out
}
