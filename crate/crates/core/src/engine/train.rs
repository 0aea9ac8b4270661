use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::{DefmapSource, TrainConfig};
use super::model::Model;
use crate::datagen::{list_samples, phantom_sample, read_sample, sample_id, SamplePair};
use crate::disentangle::Domain;
use crate::error::{Error, Result};
use crate::losses::{self, GeneratorLossTerms};
use crate::motionsim::corrupt_pair;
use crate::nn::{Adam, Graph, Scalar, Tensor};

/// Loss components of one training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub adv_dis: f64,
    pub adv_gen: f64,
    pub cyc: f64,
    pub idt: f64,
    pub art: f64,
    pub reg: f64,
    pub seg: f64,
    pub smooth: f64,
    /// Weighted generator objective that was minimized.
    pub total: f64,
}

impl LossRecord {
    pub const COMPONENTS: [&'static str; 7] = ["adv_dis", "adv_gen", "cyc", "idt", "art", "reg", "seg"];

    pub fn component(&self, name: &str) -> Option<f64> {
        Some(match name {
            "adv_dis" => self.adv_dis,
            "adv_gen" => self.adv_gen,
            "cyc" => self.cyc,
            "idt" => self.idt,
            "art" => self.art,
            "reg" => self.reg,
            "seg" => self.seg,
            "smooth" => self.smooth,
            "total" => self.total,
            _ => return None,
        })
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("loss record serializes")
    }
}

/// Paired samples held in memory, in sorted ID order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub pairs: Vec<SamplePair>,
}

impl Dataset {
    pub fn new(ids: Vec<String>, pairs: Vec<SamplePair>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::invalid("dataset is empty"));
        }
        if ids.len() != pairs.len() {
            return Err(Error::invalid("one id per sample required"));
        }
        let dims = pairs[0].clean.data.dim();
        for (id, p) in ids.iter().zip(&pairs) {
            p.validate()?;
            if p.clean.data.dim() != dims {
                return Err(Error::invalid(format!(
                    "sample {id} has dims {:?}, expected {dims:?}",
                    p.clean.data.dim()
                )));
            }
        }
        Ok(Dataset { ids, pairs })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let entries = list_samples(dir)?;
        if entries.is_empty() {
            return Err(Error::invalid(format!("no samples in {}", dir.display())));
        }
        let mut ids = Vec::with_capacity(entries.len());
        let mut pairs = Vec::with_capacity(entries.len());
        for (id, path) in entries {
            pairs.push(read_sample(&path)?);
            ids.push(id);
        }
        Self::new(ids, pairs)
    }

    /// `count` phantom pairs of side `size`; sample `i` uses phantom seed
    /// `seed + i` and is corrupted at `severity` with the same seed.
    pub fn synthetic(count: usize, size: usize, severity: u8, seed: u64) -> Result<Self> {
        let mut ids = Vec::with_capacity(count);
        let mut pairs = Vec::with_capacity(count);
        for i in 0..count {
            let s = seed.wrapping_add(i as u64);
            pairs.push(corrupt_pair(&phantom_sample(s, size)?, severity, s)?);
            ids.push(sample_id(i));
        }
        Self::new(ids, pairs)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Image side length (samples are square or at least uniformly sized).
    pub fn dims(&self) -> (usize, usize) {
        let (_, h, w) = self.pairs[0].clean.data.dim();
        (h, w)
    }

    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Batch<T> {
        let pairs: Vec<&SamplePair> = indices.iter().map(|&i| &self.pairs[i]).collect();
        Batch::from_pairs(&pairs)
    }
}

/// Dataset indices of the batch used at `step`: position `p = step·B + i`
/// reads entry `p mod n` of the permutation drawn for epoch `p / n`.
pub fn batch_indices(seed: u64, step: u64, batch_size: usize, n: usize) -> Vec<usize> {
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..batch_size as u64)
        .map(|i| {
            let p = step * batch_size as u64 + i;
            let epoch = p / n as u64;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                cached = Some((epoch, epoch_permutation(seed, epoch, n)));
            }
            cached.as_ref().unwrap().1[(p % n as u64) as usize]
        })
        .collect()
}

fn epoch_permutation(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_add(1));
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm
}

/// Stacked network inputs: `x_a`, `x_c` as `[b, 3, h, w]`, mask as `[b, h, w]`.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub x_a: Tensor<T>,
    pub x_c: Tensor<T>,
    pub mask: Vec<u8>,
}

impl<T: Scalar> Batch<T> {
    pub fn from_pairs(pairs: &[&SamplePair]) -> Self {
        let (c, h, w) = pairs[0].clean.data.dim();
        let b = pairs.len();
        let conv = |f: fn(&SamplePair) -> &ndarray::Array3<f32>| {
            let data = pairs
                .iter()
                .flat_map(|p| f(p).iter().map(|&v| T::lit(v as f64)))
                .collect();
            Tensor::from_vec(&[b, c, h, w], data)
        };
        Batch {
            x_a: conv(|p| &p.corrupted.data),
            x_c: conv(|p| &p.clean.data),
            mask: pairs.iter().flat_map(|p| p.mask.iter().copied()).collect(),
        }
    }
}

/// Model, optimizer state and step counter of a training run.
pub struct TrainState<T: Scalar> {
    pub config: TrainConfig,
    pub model: Model<T>,
    pub optimizer: Adam<T>,
    pub step: u64,
}

fn named_nonfinite(component: &str, step: u64) -> Error {
    Error::NonFiniteLoss {
        component: component.to_string(),
        step: Some(step),
    }
}

impl<T: Scalar> TrainState<T> {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        let model = Model::new(config)?;
        let optimizer = Adam::new(config.adam(), &model.store);
        Ok(TrainState {
            config: config.clone(),
            model,
            optimizer,
            step: 0,
        })
    }

    /// One discriminator update followed by one generator and registration /
    /// segmentation update, with the discriminators held fixed in the latter.
    pub fn train_step(&mut self, batch: &Batch<T>) -> Result<LossRecord> {
        let step = self.step;
        let cfg = &self.config;
        let weights = cfg.loss_weights();
        let g = Graph::with_frozen(self.model.generator_phase_frozen());
        let x_a = g.constant(batch.x_a.clone());
        let x_c = g.constant(batch.x_c.clone());

        let t = self
            .model
            .gen
            .translational_mapping(&g, &self.model.store, &x_a, &x_c)?;

        // Discriminator phase on detached fakes.
        let adv_dis = {
            let dis_ids = self.model.discriminator_params();
            let gd = Graph::new();
            let (ps, dis) = (&self.model.store, &self.model.dis);
            let real_a = gd.constant(batch.x_a.clone());
            let real_c = gd.constant(batch.x_c.clone());
            let fake_a = gd.constant((*t.x_c_to_a.value()).clone());
            let fake_c = gd.constant((*t.x_a_to_c.value()).clone());
            let loss = losses::adv_loss_dis(
                &dis.discriminate(&gd, ps, Domain::Corrupt, &real_a)?,
                &dis.discriminate(&gd, ps, Domain::Corrupt, &fake_a)?,
                &dis.discriminate(&gd, ps, Domain::Clean, &real_c)?,
                &dis.discriminate(&gd, ps, Domain::Clean, &fake_c)?,
            )?;
            let value = loss.item().to_f64().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(named_nonfinite("adv_dis", step));
            }
            let grads = gd.backward(loss);
            self.optimizer.step(&mut self.model.store, grads.params(), &dis_ids);
            value
        };

        // Generator phase; discriminator weights enter this graph after their update.
        let (ps, gen, dis, regseg) = (&self.model.store, &self.model.gen, &self.model.dis, &self.model.regseg);
        let cycle = gen.cycle_mapping(&g, ps, &t, cfg.cycle_both_directions)?;
        let ident = gen.identity_mapping(&g, ps, &x_a, &x_c, Some(&t))?;
        let adv = losses::adv_loss_gen(
            &dis.discriminate(&g, ps, Domain::Corrupt, &t.x_c_to_a)?,
            &dis.discriminate(&g, ps, Domain::Clean, &t.x_a_to_c)?,
        )?;
        let cyc = losses::cycle_loss(
            &x_c,
            &cycle.x_hat_c,
            cycle.x_hat_a.as_ref().map(|h| (&x_a, h)),
            weights.ms,
        )?;
        let idt = losses::identity_loss(&x_a, &ident.x_tilde_a, &x_c, &ident.x_tilde_c)?;

        let detach = cfg.detach_corrected_for_regseg;
        let x_corrected = if detach { t.x_a_to_c.detach() } else { t.x_a_to_c };
        let joint = regseg.joint_forward(&g, ps, &x_a, &x_corrected)?;
        let x_def = match cfg.defmap_source {
            DefmapSource::Corrected => joint.x_def,
            DefmapSource::Cycle => {
                let rec = if detach { cycle.x_hat_c.detach() } else { cycle.x_hat_c };
                x_a.sub(&rec)
            }
        };
        let art = losses::artifact_loss(&x_a, &x_c, &x_def)?;
        let reg = losses::registration_loss(&x_c, &joint.x_warp)?;
        let seg = losses::segmentation_loss(&joint.logits, &batch.mask)?;
        let smooth = losses::flow_smoothness(&joint.flow);

        let terms = GeneratorLossTerms {
            adv,
            cyc,
            idt,
            art,
            reg,
            seg,
        };
        let mut total = losses::total_generator_loss(&g, &terms, &weights).map_err(|e| match e {
            Error::NonFiniteLoss { component, .. } => named_nonfinite(&component, step),
            other => other,
        })?;
        let f = |v: &crate::nn::Var<'_, T>| v.item().to_f64().unwrap_or(f64::NAN);
        if !f(&smooth).is_finite() {
            return Err(named_nonfinite("smooth", step));
        }
        if cfg.flow_smoothness > 0.0 {
            total = total.add(&smooth.scale(T::lit(cfg.flow_smoothness)));
        }
        let record = LossRecord {
            step,
            adv_dis,
            adv_gen: f(&adv),
            cyc: f(&cyc),
            idt: f(&idt),
            art: f(&art),
            reg: f(&reg),
            seg: f(&seg),
            smooth: f(&smooth),
            total: f(&total),
        };
        if total.requires_grad() {
            let grads = g.backward(total);
            let ids = self.model.generator_phase_params();
            self.optimizer.step(&mut self.model.store, grads.params(), &ids);
        }
        self.step += 1;
        Ok(record)
    }

    /// Trains until `self.step == self.config.steps`, calling `on_step` after every step.
    pub fn run(
        &mut self,
        data: &Dataset,
        mut on_step: impl FnMut(&Self, &LossRecord) -> Result<()>,
    ) -> Result<Vec<LossRecord>> {
        let mut records = Vec::new();
        while self.step < self.config.steps {
            let idx = batch_indices(self.config.seed, self.step, self.config.batch_size, data.len());
            let batch = data.batch(&idx);
            let rec = self.train_step(&batch)?;
            on_step(self, &rec)?;
            records.push(rec);
        }
        Ok(records)
    }
}

/// Files produced by [`fit`].
#[derive(Clone, Debug)]
pub struct FitOutput {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub records: Vec<LossRecord>,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// Trains on the samples in `data_dir`, writing a JSON-lines loss log and
/// checkpoints into `out_dir`. With `resume`, training continues from the
/// checkpoint's step up to `config.steps`.
pub fn fit(config: &TrainConfig, data_dir: &Path, out_dir: &Path, resume: Option<Checkpoint>) -> Result<FitOutput> {
    config.validate()?;
    let data = Dataset::load(data_dir)?;
    fit_dataset(config, &data, out_dir, resume)
}

pub fn fit_dataset(
    config: &TrainConfig,
    data: &Dataset,
    out_dir: &Path,
    resume: Option<Checkpoint>,
) -> Result<FitOutput> {
    let (h, w) = data.dims();
    if h != config.image_size || w != config.image_size {
        return Err(Error::invalid(format!(
            "samples are {h}x{w}, config expects {0}x{0}",
            config.image_size
        )));
    }
    let mut state = match resume {
        Some(ckpt) => {
            if ckpt.fingerprint != config.fingerprint() {
                return Err(Error::invalid("checkpoint was trained with a different configuration"));
            }
            let mut state = ckpt.into_state()?;
            state.config.steps = config.steps;
            state.config.checkpoint_every = config.checkpoint_every;
            state
        }
        None => TrainState::new(config)?,
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);
    let file = OpenOptions::new()
        .create(true)
        .append(state.step > 0)
        .write(true)
        .truncate(state.step == 0)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let every = config.checkpoint_every;
    let records = state.run(data, |st, rec| {
        writeln!(log, "{}", rec.to_json_line()).map_err(|e| Error::io(&log_path, e))?;
        if every > 0 && st.step % every == 0 && st.step < st.config.steps {
            Checkpoint::from_state(st).save(&out_dir.join(format!("checkpoint_{:06}.bin", st.step)))?;
        }
        Ok(())
    })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    Checkpoint::from_state(&state).save(&ckpt_path)?;
    Ok(FitOutput {
        checkpoint: ckpt_path,
        log: log_path,
        records,
    })
}

/// Parses a JSON-lines loss log.
pub fn read_log(path: &Path) -> Result<Vec<LossRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}", i + 1), e.to_string()))
        })
        .collect()
}
