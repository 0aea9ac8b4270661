use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::model::Model;
use super::train::TrainState;
use crate::error::{Error, Result};
use crate::nn::{Adam, ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"DFSGCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    fingerprint: String,
    step: u64,
    config: TrainConfig,
    params: Vec<ParamEntry>,
    adam_steps: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

/// Complete training state: parameters, Adam moments, step counter and the
/// configuration (with its fingerprint) that produced them.
///
/// On disk: 8-byte magic, little-endian `u64` header length, a JSON header,
/// then all parameters, first moments and second moments as little-endian f32.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub fingerprint: String,
    pub step: u64,
    pub params: ParamStore<f32>,
    pub optimizer: Adam<f32>,
}

fn put_tensors(out: &mut Vec<u8>, tensors: &[Tensor<f32>]) {
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

impl Checkpoint {
    pub fn from_state(state: &TrainState<f32>) -> Self {
        Checkpoint {
            config: state.config.clone(),
            fingerprint: state.config.fingerprint(),
            step: state.step,
            params: state.model.store.clone(),
            optimizer: state.optimizer.clone(),
        }
    }

    /// Rebuilds the model from the embedded configuration and loads the stored weights.
    pub fn model(&self) -> Result<Model<f32>> {
        let mut model = Model::new(&self.config)?;
        let fresh = &model.store;
        if fresh.names() != self.params.names()
            || fresh
                .tensors()
                .iter()
                .zip(self.params.tensors())
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::invalid("checkpoint parameters do not match its configuration"));
        }
        model.store = self.params.clone();
        Ok(model)
    }

    pub fn into_state(self) -> Result<TrainState<f32>> {
        let model = self.model()?;
        Ok(TrainState {
            config: self.config,
            model,
            optimizer: self.optimizer,
            step: self.step,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (m, v, steps) = self.optimizer.moments();
        let header = Header {
            version: VERSION,
            fingerprint: self.fingerprint.clone(),
            step: self.step,
            config: self.config.clone(),
            params: self
                .params
                .names()
                .iter()
                .zip(self.params.tensors())
                .map(|(n, t)| ParamEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            adam_steps: steps.to_vec(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 12 * self.params.total_elements());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        put_tensors(&mut out, self.params.tensors());
        put_tensors(&mut out, m);
        put_tensors(&mut out, v);
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |field: &str, msg: &str| Error::format(origin, field, msg);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("magic", "not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| bad("header", "truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad("header", &e.to_string()))?;
        if header.version != VERSION {
            return Err(bad("version", &format!("unsupported version {}", header.version)));
        }
        if header.fingerprint != header.config.fingerprint() {
            return Err(bad("fingerprint", "does not match the embedded configuration"));
        }
        if header.adam_steps.len() != header.params.len() {
            return Err(bad("adam_steps", "one step count per parameter required"));
        }
        let total: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
        let payload = &bytes[16 + hlen..];
        if payload.len() != 12 * total {
            return Err(bad(
                "payload",
                &format!("{} bytes, expected {}", payload.len(), 12 * total),
            ));
        }
        let mut floats = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let mut take = || -> Vec<Tensor<f32>> {
            header
                .params
                .iter()
                .map(|p| {
                    let n = p.shape.iter().product();
                    Tensor::from_vec(&p.shape, floats.by_ref().take(n).collect())
                })
                .collect()
        };
        let tensors = take();
        let m = take();
        let v = take();
        let names = header.params.iter().map(|p| p.name.clone()).collect();
        Ok(Checkpoint {
            optimizer: Adam::from_parts(header.config.adam(), m, v, header.adam_steps),
            params: ParamStore::from_parts(names, tensors),
            config: header.config,
            fingerprint: header.fingerprint,
            step: header.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
