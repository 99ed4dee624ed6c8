//! Keyed block-wise pixel shuffling, per-key classifiers, random ensembles,
//! and an adversarial-robustness evaluation harness.
//!
//! The pieces compose into a defense pipeline: images are encrypted by a
//! secret block-wise permutation ([`transform`]), one classifier is trained
//! per key ([`model`]), and inference averages a randomly selected subset of
//! the key-matched sub-models ([`ensemble`]). The [`attacks`] module provides
//! white-box (FGSM, PGD) and black-box (Square) l-infinity attacks against
//! any prediction pipeline, and [`harness`] wires everything into seeded,
//! reproducible experiments with robust-accuracy reports.
//!
//! All randomness flows through [`rng::RngStream`]; identical configs produce
//! byte-identical reports.

pub mod attacks;
pub mod ensemble;
pub mod error;
pub mod harness;
pub mod image;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod transform;

pub use attacks::{AttackConfig, AttackKind, AttackOutcome};
pub use ensemble::{build_ensemble, Prediction, RandomEnsemble};
pub use error::{Error, Result};
pub use harness::{run_experiment, Dataset, EvalReport, ExperimentConfig};
pub use image::ImageTensor;
pub use model::{train_submodel, SubModel, TrainConfig};
pub use pipeline::{GradientMode, Oracle, Pipeline};
pub use rng::RngStream;
pub use transform::{KeyId, ShuffleKey};
