//! Disentanglement network: structure and artifact encoders, the clean and
//! corrupted decoders, patch discriminators, and the translational, cycle and
//! identity mappings built from them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBlock, Graph, ParamId, ParamStore, Scalar, Var};

/// Architecture hyperparameters of the generators and discriminators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DisentangleConfig {
    pub in_channels: usize,
    /// Width of the first encoder block; doubled by every downsampling block.
    pub gen_width: usize,
    pub max_width: usize,
    /// Number of stride-2 blocks in every encoder.
    pub downsamplings: usize,
    /// Residual blocks at the code resolution, per encoder and decoder.
    pub res_blocks: usize,
    pub structure_channels: usize,
    pub artifact_channels: usize,
    pub dis_width: usize,
    /// Stride-2 layers in the patch discriminator (3 gives a 70×70 receptive field).
    pub dis_layers: usize,
}

impl Default for DisentangleConfig {
    fn default() -> Self {
        DisentangleConfig {
            in_channels: 3,
            gen_width: 32,
            max_width: 256,
            downsamplings: 2,
            res_blocks: 1,
            structure_channels: 128,
            artifact_channels: 32,
            dis_width: 32,
            dis_layers: 3,
        }
    }
}

impl DisentangleConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("gen_width", self.gen_width),
            ("max_width", self.max_width),
            ("structure_channels", self.structure_channels),
            ("artifact_channels", self.artifact_channels),
            ("dis_width", self.dis_width),
            ("dis_layers", self.dis_layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Spatial reduction between an image and its codes.
    pub fn downsample_factor(&self) -> usize {
        1 << self.downsamplings
    }

    fn widths(&self) -> Vec<usize> {
        (0..=self.downsamplings)
            .map(|i| (self.gen_width << i).min(self.max_width))
            .collect()
    }

    /// Spatial dims of a discriminator score map for an `h×w` input.
    pub fn score_dims(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let step = |n: usize, stride: usize| (n + 2).checked_sub(4).map(|v| v / stride + 1);
        let (mut h, mut w) = (h, w);
        for _ in 0..self.dis_layers {
            h = step(h, 2)?;
            w = step(w, 2)?;
        }
        for _ in 0..2 {
            h = step(h, 1)?;
            w = step(w, 1)?;
        }
        Some((h, w))
    }
}

struct Residual {
    a: ConvBlock,
    b: ConvBlock,
}

fn residuals<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
    name: &str,
    width: usize,
    count: usize,
) -> Vec<Residual> {
    (0..count)
        .map(|i| Residual {
            a: ConvBlock::new(store, rng, &format!("{name}.res{i}a"), width, width, 3, 1, true),
            b: ConvBlock::new(store, rng, &format!("{name}.res{i}b"), width, width, 3, 1, true),
        })
        .collect()
}

fn run_residuals<'g, T: Scalar>(
    blocks: &[Residual],
    g: &'g Graph<T>,
    ps: &ParamStore<T>,
    mut x: Var<'g, T>,
) -> Var<'g, T> {
    for r in blocks {
        let y = r.b.forward(g, ps, &r.a.forward(g, ps, &x));
        x = x.add(&y);
    }
    x
}

fn residual_params(blocks: &[Residual]) -> impl Iterator<Item = ParamId> + '_ {
    blocks.iter().flat_map(|r| r.a.params().into_iter().chain(r.b.params()))
}

/// Convolutional encoder `3×H×W -> C×(H/f)×(W/f)`.
pub struct Encoder {
    stem: ConvBlock,
    downs: Vec<ConvBlock>,
    res: Vec<Residual>,
    head: Conv2d,
}

impl Encoder {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        cfg: &DisentangleConfig,
        out_channels: usize,
    ) -> Self {
        let widths = cfg.widths();
        let stem = ConvBlock::new(
            store,
            rng,
            &format!("{name}.stem"),
            cfg.in_channels,
            widths[0],
            3,
            1,
            true,
        );
        let downs = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| ConvBlock::new(store, rng, &format!("{name}.down{i}"), w[0], w[1], 3, 2, true))
            .collect();
        let top = *widths.last().unwrap();
        let res = residuals(store, rng, name, top, cfg.res_blocks);
        let head = Conv2d::new(store, rng, &format!("{name}.head"), top, out_channels, 1, 1, 0);
        Encoder { stem, downs, res, head }
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, ps: &ParamStore<T>, x: &Var<'g, T>) -> Var<'g, T> {
        let mut h = self.stem.forward(g, ps, x);
        for d in &self.downs {
            h = d.forward(g, ps, &h);
        }
        let h = run_residuals(&self.res, g, ps, h);
        self.head.forward(g, ps, &h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out: Vec<ParamId> = self.stem.params().to_vec();
        out.extend(self.downs.iter().flat_map(|d| d.params()));
        out.extend(residual_params(&self.res));
        out.extend(self.head.params());
        out
    }
}

/// Decoder mirroring [`Encoder`]: nearest upsampling plus convolution, sigmoid output.
pub struct Decoder {
    in_channels: usize,
    stem: ConvBlock,
    res: Vec<Residual>,
    ups: Vec<ConvBlock>,
    out: Conv2d,
}

impl Decoder {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        cfg: &DisentangleConfig,
        in_channels: usize,
    ) -> Self {
        let widths = cfg.widths();
        let top = *widths.last().unwrap();
        let stem = ConvBlock::new(store, rng, &format!("{name}.stem"), in_channels, top, 3, 1, true);
        let res = residuals(store, rng, name, top, cfg.res_blocks);
        let ups = (0..cfg.downsamplings)
            .rev()
            .map(|i| {
                ConvBlock::new(
                    store,
                    rng,
                    &format!("{name}.up{i}"),
                    widths[i + 1],
                    widths[i],
                    3,
                    1,
                    true,
                )
            })
            .collect();
        let out = Conv2d::same3(store, rng, &format!("{name}.out"), widths[0], cfg.in_channels);
        Decoder {
            in_channels,
            stem,
            res,
            ups,
            out,
        }
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, ps: &ParamStore<T>, code: &Var<'g, T>) -> Result<Var<'g, T>> {
        let c = code.dims4()[1];
        if c != self.in_channels {
            return Err(Error::invalid(format!(
                "decoder expects {} code channels, got {c}",
                self.in_channels
            )));
        }
        let h = self.stem.forward(g, ps, code);
        let mut h = run_residuals(&self.res, g, ps, h);
        for u in &self.ups {
            h = u.forward(g, ps, &h.upsample2x());
        }
        Ok(self.out.forward(g, ps, &h).sigmoid())
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out: Vec<ParamId> = self.stem.params().to_vec();
        out.extend(residual_params(&self.res));
        out.extend(self.ups.iter().flat_map(|u| u.params()));
        out.extend(self.out.params());
        out
    }
}

/// Patch classifier emitting an unbounded score map.
pub struct PatchDiscriminator {
    blocks: Vec<ConvBlock>,
    out: Conv2d,
}

impl PatchDiscriminator {
    fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, cfg: &DisentangleConfig) -> Self {
        let mut blocks = Vec::new();
        let mut cin = cfg.in_channels;
        let mut width = cfg.dis_width;
        for i in 0..=cfg.dis_layers {
            let stride = if i < cfg.dis_layers { 2 } else { 1 };
            let conv = Conv2d::new(store, rng, &format!("{name}.conv{i}"), cin, width, 4, stride, 1);
            blocks.push(ConvBlock { conv, norm: i > 0 });
            cin = width;
            width = (width * 2).min(cfg.dis_width * 8);
        }
        let out = Conv2d::new(store, rng, &format!("{name}.out"), cin, 1, 4, 1, 1);
        PatchDiscriminator { blocks, out }
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, ps: &ParamStore<T>, x: &Var<'g, T>) -> Var<'g, T> {
        let mut h = *x;
        for b in &self.blocks {
            h = b.forward(g, ps, &h);
        }
        self.out.forward(g, ps, &h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out: Vec<ParamId> = self.blocks.iter().flat_map(|b| b.params()).collect();
        out.extend(self.out.params());
        out
    }
}

/// Codes extracted from one image.
#[derive(Clone, Copy)]
pub struct LatentPair<'g, T: Scalar> {
    pub structure: Var<'g, T>,
    /// Present only for corrupted-domain inputs.
    pub artifact: Option<Var<'g, T>>,
}

/// Outputs of the translational mapping.
#[derive(Clone, Copy)]
pub struct Translation<'g, T: Scalar> {
    /// Motion-corrected image, decoded from the corrupted image's structure.
    pub x_a_to_c: Var<'g, T>,
    /// Synthesized corrupted image: clean structure plus the corrupted artifact code.
    pub x_c_to_a: Var<'g, T>,
    pub s_a: Var<'g, T>,
    pub a: Var<'g, T>,
    pub s_c: Var<'g, T>,
}

#[derive(Clone, Copy)]
pub struct Cycle<'g, T: Scalar> {
    pub x_hat_c: Var<'g, T>,
    pub x_hat_a: Option<Var<'g, T>>,
}

#[derive(Clone, Copy)]
pub struct Identity<'g, T: Scalar> {
    pub x_tilde_a: Var<'g, T>,
    pub x_tilde_c: Var<'g, T>,
}

/// The three encoders and two decoders.
pub struct GeneratorSet {
    pub config: DisentangleConfig,
    pub enc_struct_corrupt: Encoder,
    pub enc_artifact: Encoder,
    pub enc_struct_clean: Encoder,
    pub dec_clean: Decoder,
    pub dec_corrupt: Decoder,
}

fn check_image<T: Scalar>(cfg: &DisentangleConfig, x: &Var<'_, T>, what: &str) -> Result<()> {
    let shape = x.shape();
    if shape.len() != 4 || shape[1] != cfg.in_channels {
        return Err(Error::invalid(format!(
            "{what}: expected [n, {}, h, w], got {shape:?}",
            cfg.in_channels
        )));
    }
    let f = cfg.downsample_factor();
    if !shape[2].is_multiple_of(f) || !shape[3].is_multiple_of(f) || shape[2] == 0 || shape[3] == 0 {
        return Err(Error::invalid(format!(
            "{what}: spatial dims {shape:?} must be positive multiples of {f}"
        )));
    }
    if !x.value().all_finite() {
        return Err(Error::NumericInput(format!("{what} contains non-finite values")));
    }
    Ok(())
}

impl GeneratorSet {
    pub fn new<T: Scalar>(config: &DisentangleConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (cs, ca) = (config.structure_channels, config.artifact_channels);
        Ok(GeneratorSet {
            enc_struct_corrupt: Encoder::new(store, rng, "gen.enc_struct_corrupt", config, cs),
            enc_artifact: Encoder::new(store, rng, "gen.enc_artifact", config, ca),
            enc_struct_clean: Encoder::new(store, rng, "gen.enc_struct_clean", config, cs),
            dec_clean: Decoder::new(store, rng, "gen.dec_clean", config, cs),
            dec_corrupt: Decoder::new(store, rng, "gen.dec_corrupt", config, cs + ca),
            config: config.clone(),
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = self.enc_struct_corrupt.params();
        out.extend(self.enc_artifact.params());
        out.extend(self.enc_struct_clean.params());
        out.extend(self.dec_clean.params());
        out.extend(self.dec_corrupt.params());
        out
    }

    /// `(E_a^s(x_a), E_a^a(x_a))`.
    pub fn encode_corrupted<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        ps: &ParamStore<T>,
        x_a: &Var<'g, T>,
    ) -> Result<LatentPair<'g, T>> {
        check_image(&self.config, x_a, "x_a")?;
        Ok(LatentPair {
            structure: self.enc_struct_corrupt.forward(g, ps, x_a),
            artifact: Some(self.enc_artifact.forward(g, ps, x_a)),
        })
    }

    /// `E_c^s(x_c)`.
    pub fn encode_clean<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        ps: &ParamStore<T>,
        x_c: &Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        check_image(&self.config, x_c, "x_c")?;
        Ok(self.enc_struct_clean.forward(g, ps, x_c))
    }

    pub fn decode_clean<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        ps: &ParamStore<T>,
        s: &Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        self.dec_clean.forward(g, ps, s)
    }

    pub fn decode_corrupt<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        ps: &ParamStore<T>,
        s: &Var<'g, T>,
        a: &Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        let (ds, da) = (s.dims4(), a.dims4());
        if ds[0] != da[0] || ds[2..] != da[2..] {
            return Err(Error::invalid(format!(
                "structure code {ds:?} and artifact code {da:?} disagree"
            )));
        }
        self.dec_corrupt.forward(g, ps, &g.concat_channels(&[*s, *a]))
    }

    /// Corrected image `G_c(E_a^s(x_a))`, used at test time.
    pub fn correct<'g, T: Scalar>(&self, g: &'g Graph<T>, ps: &ParamStore<T>, x_a: &Var<'g, T>) -> Result<Var<'g, T>> {
        check_image(&self.config, x_a, "x_a")?;
        let s_a = self.enc_struct_corrupt.forward(g, ps, x_a);
        self.decode_clean(g, ps, &s_a)
    }

    pub fn translational_mapping<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        ps: &ParamStore<T>,
        x_a: &Var<'g, T>,
        x_c: &Var<'g, T>,
    ) -> Result<Translation<'g, T>> {
        if x_a.shape() != x_c.shape() {
            return Err(Error::invalid(format!(
                "paired stacks differ: {:?} vs {:?}",
                x_a.shape(),
                x_c.shape()
            )));
        }
        let LatentPair {
            structure: s_a,
            artifact,
        } = self.encode_corrupted(g, ps, x_a)?;
        let a = artifact.expect("corrupted encoding has an artifact code");
        let s_c = self.encode_clean(g, ps, x_c)?;
        Ok(Translation {
            x_a_to_c: self.decode_clean(g, ps, &s_a)?,
            x_c_to_a: self.decode_corrupt(g, ps, &s_c, &a)?,
            s_a,
            a,
            s_c,
        })
    }

    /// Re-disentangles the translated images; the corrupted direction only when `both`.
    pub fn cycle_mapping<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        ps: &ParamStore<T>,
        t: &Translation<'g, T>,
        both: bool,
    ) -> Result<Cycle<'g, T>> {
        let s = self.enc_struct_corrupt.forward(g, ps, &t.x_c_to_a);
        let x_hat_c = self.decode_clean(g, ps, &s)?;
        let x_hat_a = if both {
            let s_c = self.enc_struct_clean.forward(g, ps, &t.x_a_to_c);
            let a_hat = self.enc_artifact.forward(g, ps, &t.x_c_to_a);
            Some(self.decode_corrupt(g, ps, &s_c, &a_hat)?)
        } else {
            None
        };
        Ok(Cycle { x_hat_c, x_hat_a })
    }

    /// Reconstructions without component exchange. Codes from `t` are reused
    /// when given, since they are the same functions of the same inputs.
    pub fn identity_mapping<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        ps: &ParamStore<T>,
        x_a: &Var<'g, T>,
        x_c: &Var<'g, T>,
        t: Option<&Translation<'g, T>>,
    ) -> Result<Identity<'g, T>> {
        let (s_a, a, s_c) = match t {
            Some(t) => (t.s_a, t.a, t.s_c),
            None => {
                let lp = self.encode_corrupted(g, ps, x_a)?;
                (lp.structure, lp.artifact.unwrap(), self.encode_clean(g, ps, x_c)?)
            }
        };
        Ok(Identity {
            x_tilde_a: self.decode_corrupt(g, ps, &s_a, &a)?,
            x_tilde_c: self.decode_clean(g, ps, &s_c)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Clean,
    Corrupt,
}

/// Discriminators for the corrupted (`Dis_a`) and clean (`Dis_c`) domains.
pub struct DiscriminatorSet {
    pub config: DisentangleConfig,
    pub dis_corrupt: PatchDiscriminator,
    pub dis_clean: PatchDiscriminator,
}

impl DiscriminatorSet {
    pub fn new<T: Scalar>(config: &DisentangleConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        Ok(DiscriminatorSet {
            dis_corrupt: PatchDiscriminator::new(store, rng, "dis.corrupt", config),
            dis_clean: PatchDiscriminator::new(store, rng, "dis.clean", config),
            config: config.clone(),
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = self.dis_corrupt.params();
        out.extend(self.dis_clean.params());
        out
    }

    pub fn discriminate<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        ps: &ParamStore<T>,
        domain: Domain,
        x: &Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::invalid(format!("discriminator input {shape:?}")));
        }
        if self.config.score_dims(shape[2], shape[3]).is_none() {
            return Err(Error::invalid(format!(
                "input {}x{} too small for {} discriminator layers",
                shape[2], shape[3], self.config.dis_layers
            )));
        }
        if !x.value().all_finite() {
            return Err(Error::NumericInput(
                "discriminator input contains non-finite values".into(),
            ));
        }
        let net = match domain {
            Domain::Clean => &self.dis_clean,
            Domain::Corrupt => &self.dis_corrupt,
        };
        Ok(net.forward(g, ps, x))
    }
}
