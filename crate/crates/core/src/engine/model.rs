use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use crate::disentangle::{DiscriminatorSet, GeneratorSet};
use crate::error::Result;
use crate::nn::{ParamId, ParamStore, Scalar};
use crate::regseg::RegSegNet;

/// All networks of the system sharing one parameter store.
pub struct Model<T: Scalar> {
    pub store: ParamStore<T>,
    pub gen: GeneratorSet,
    pub dis: DiscriminatorSet,
    pub regseg: RegSegNet,
    freeze_stitch: bool,
}

impl<T: Scalar> Model<T> {
    /// Builds and initializes every network from `config.seed`.
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let gen = GeneratorSet::new(&config.disentangle(), &mut store, &mut rng)?;
        let dis = DiscriminatorSet::new(&config.disentangle(), &mut store, &mut rng)?;
        let regseg = RegSegNet::new(&config.regseg(), &mut store, &mut rng)?;
        if config.freeze_stitch_identity {
            regseg.set_stitch_identity(&mut store);
        }
        Ok(Model {
            store,
            gen,
            dis,
            regseg,
            freeze_stitch: config.freeze_stitch_identity,
        })
    }

    pub fn generator_params(&self) -> Vec<ParamId> {
        self.gen.params()
    }

    pub fn discriminator_params(&self) -> Vec<ParamId> {
        self.dis.params()
    }

    /// Registration and segmentation parameters updated during training.
    pub fn regseg_trainable(&self) -> Vec<ParamId> {
        if self.freeze_stitch {
            self.regseg.network_params()
        } else {
            self.regseg.params()
        }
    }

    /// Parameters updated in the generator phase.
    pub fn generator_phase_params(&self) -> Vec<ParamId> {
        let mut out = self.generator_params();
        out.extend(self.regseg_trainable());
        out
    }

    /// Parameters held constant in the generator phase.
    pub fn generator_phase_frozen(&self) -> Vec<ParamId> {
        let mut out = self.discriminator_params();
        if self.freeze_stitch {
            out.extend(self.regseg.stitch_params());
        }
        out
    }

    pub fn all_params(&self) -> Vec<ParamId> {
        self.store.ids().collect()
    }
}
