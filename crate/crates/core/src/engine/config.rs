use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::disentangle::DisentangleConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nn::AdamConfig;
use crate::regseg::RegSegConfig;

/// Which image pair defines the deformation map during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefmapSource {
    /// `x_a - x_corrected`, the registration network's input pair.
    #[default]
    Corrected,
    /// `x_a - x_hat_c`, using the cycle reconstruction.
    Cycle,
}

/// Every training hyperparameter, read from a flat TOML key-value file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub image_size: usize,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,

    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,

    pub lambda_adv: f64,
    pub lambda_cyc: f64,
    pub lambda_ms: f64,
    pub lambda_idt: f64,
    pub lambda_art: f64,
    pub lambda_reg: f64,
    pub lambda_seg: f64,
    pub flow_smoothness: f64,

    pub gen_width: usize,
    pub gen_max_width: usize,
    pub downsamplings: usize,
    pub res_blocks: usize,
    pub structure_channels: usize,
    pub artifact_channels: usize,
    pub dis_width: usize,
    pub dis_layers: usize,
    pub regseg_width: usize,
    pub regseg_levels: usize,

    pub cycle_both_directions: bool,
    pub defmap_source: DefmapSource,
    pub detach_corrected_for_regseg: bool,
    /// Pins every cross-stitch unit to the identity and excludes it from training.
    pub freeze_stitch_identity: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let d = DisentangleConfig::default();
        let r = RegSegConfig::default();
        let w = LossWeights::default();
        let a = AdamConfig::default();
        TrainConfig {
            image_size: 64,
            batch_size: 4,
            steps: 2000,
            seed: 0,
            checkpoint_every: 0,
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            lambda_adv: w.adv,
            lambda_cyc: w.cyc,
            lambda_ms: w.ms,
            lambda_idt: w.idt,
            lambda_art: w.art,
            lambda_reg: w.reg,
            lambda_seg: w.seg,
            flow_smoothness: 0.0,
            gen_width: d.gen_width,
            gen_max_width: d.max_width,
            downsamplings: d.downsamplings,
            res_blocks: d.res_blocks,
            structure_channels: d.structure_channels,
            artifact_channels: d.artifact_channels,
            dis_width: d.dis_width,
            dis_layers: d.dis_layers,
            regseg_width: r.width,
            regseg_levels: r.levels,
            cycle_both_directions: false,
            defmap_source: DefmapSource::Corrected,
            detach_corrected_for_regseg: false,
            freeze_stitch_identity: false,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let floats = [
            ("lr", self.lr),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("flow_smoothness", self.flow_smoothness),
        ];
        for (name, v) in floats {
            if !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be finite")));
            }
        }
        if self.lr <= 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("optimizer needs lr > 0 and betas in [0, 1)"));
        }
        if self.flow_smoothness < 0.0 {
            return Err(Error::invalid("flow_smoothness must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        self.loss_weights().validate()?;
        let d = self.disentangle();
        d.validate()?;
        let r = self.regseg();
        r.validate()?;
        let multiple = d.downsample_factor().max(r.size_multiple());
        if self.image_size == 0 || !self.image_size.is_multiple_of(multiple) {
            return Err(Error::invalid(format!(
                "image_size must be a positive multiple of {multiple}"
            )));
        }
        if self.lambda_ms > 0.0 && self.image_size < crate::losses::MS_SSIM_MIN_SCALE {
            return Err(Error::invalid("image_size too small for MS-SSIM"));
        }
        if d.score_dims(self.image_size, self.image_size).is_none() {
            return Err(Error::invalid("image_size too small for the discriminator depth"));
        }
        Ok(())
    }

    pub fn disentangle(&self) -> DisentangleConfig {
        DisentangleConfig {
            in_channels: 3,
            gen_width: self.gen_width,
            max_width: self.gen_max_width,
            downsamplings: self.downsamplings,
            res_blocks: self.res_blocks,
            structure_channels: self.structure_channels,
            artifact_channels: self.artifact_channels,
            dis_width: self.dis_width,
            dis_layers: self.dis_layers,
        }
    }

    pub fn regseg(&self) -> RegSegConfig {
        RegSegConfig {
            width: self.regseg_width,
            levels: self.regseg_levels,
            ..RegSegConfig::default()
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            adv: self.lambda_adv,
            cyc: self.lambda_cyc,
            ms: self.lambda_ms,
            idt: self.lambda_idt,
            art: self.lambda_art,
            reg: self.lambda_reg,
            seg: self.lambda_seg,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    /// SHA-256 over every setting that shapes the model or the optimization.
    /// Run length and checkpoint cadence are excluded so a run can be extended.
    pub fn fingerprint(&self) -> String {
        let mut canonical = self.clone();
        canonical.steps = 0;
        canonical.checkpoint_every = 0;
        let json = serde_json::to_string(&canonical).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
