//! Motion-artifact-robust brain tissue segmentation.
//!
//! A disentanglement network separates motion artifacts from anatomy, a
//! registration network coupled to a segmentation network by cross-stitch
//! units estimates a deformation field, and the whole system is trained
//! jointly on synthetic phantoms corrupted by a k-space rigid-motion
//! simulator.

pub mod datagen;
pub mod disentangle;
pub mod engine;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod motionsim;
pub mod nn;
pub mod regseg;

pub use datagen::{Phantom, SamplePair, Slice25D};
pub use disentangle::{DiscriminatorSet, DisentangleConfig, GeneratorSet, LatentPair};
pub use engine::{Checkpoint, InferOutput, LossRecord, TrainConfig};
pub use error::{Error, Result};
pub use losses::LossWeights;
pub use motionsim::MotionTrajectory;
pub use regseg::{RegSegConfig, RegSegNet};
