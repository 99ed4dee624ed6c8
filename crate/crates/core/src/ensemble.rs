//! Random ensembles of key-bound sub-models.
//!
//! An ensemble holds `N >= 4` `(key, sub-model)` pairs. Prediction encrypts
//! the input once per member key, routes each ciphertext to the sub-model
//! bound to that key, and averages softmax probability vectors — either over
//! all members (`predict_simple`) or over a uniformly drawn `S`-subset redrawn
//! per call (`predict_random`). With `S = N` the two are bit-identical.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::model::{argmax, softmax, train_submodel, EpochRecord, SubModel, TrainConfig};
use crate::rng::RngStream;
use crate::transform::{KeyId, ShuffleKey};

const MANIFEST_VERSION: u32 = 1;

/// Minimum ensemble size.
pub const MIN_MEMBERS: usize = 4;
/// Minimum random-selection size.
pub const MIN_SELECTION: usize = 3;

/// An input encrypted under a specific key, tagged for routing checks.
#[derive(Debug, Clone)]
pub struct EncryptedInput {
    pub key_id: KeyId,
    pub tensor: ImageTensor,
}

/// One `(key, sub-model)` pair.
#[derive(Debug, Clone)]
pub struct EnsembleMember {
    key: ShuffleKey,
    model: SubModel,
}

impl EnsembleMember {
    pub fn new(key: ShuffleKey, model: SubModel) -> Result<Self> {
        match model.key_id() {
            Some(id) if id == key.id() => Ok(Self { key, model }),
            Some(id) => Err(Error::KeyMismatch {
                expected: key.id().to_string(),
                actual: id.to_string(),
            }),
            None => Err(Error::KeyMismatch {
                expected: key.id().to_string(),
                actual: "unbound model".into(),
            }),
        }
    }

    pub fn key(&self) -> &ShuffleKey {
        &self.key
    }

    pub fn model(&self) -> &SubModel {
        &self.model
    }

    /// Encrypts a plaintext input under this member's key.
    pub fn encrypt(&self, x: &ImageTensor) -> Result<EncryptedInput> {
        Ok(EncryptedInput {
            key_id: self.key.id(),
            tensor: self.key.encrypt(x)?,
        })
    }

    /// Softmax output for an already-encrypted input.
    ///
    /// Rejects ciphertexts produced under a different key: a member never
    /// sees an input encrypted with a key other than its own.
    pub fn probs_for(&self, enc: &EncryptedInput) -> Result<Vec<f64>> {
        if enc.key_id != self.key.id() {
            return Err(Error::KeyMismatch {
                expected: self.key.id().to_string(),
                actual: enc.key_id.to_string(),
            });
        }
        Ok(softmax(&self.model.forward(enc.tensor.as_slice())?))
    }

    /// Softmax output for a plaintext input (encrypt, then forward).
    pub fn probs(&self, x: &ImageTensor) -> Result<Vec<f64>> {
        let enc = self.encrypt(x)?;
        self.probs_for(&enc)
    }
}

/// Ensemble output: a probability vector plus audit information.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Mean of the selected members' softmax vectors; sums to 1.
    pub probs: Vec<f64>,
    /// Argmax of `probs`, ties broken by lowest class index.
    pub argmax_class: usize,
    /// Which members contributed, ascending.
    pub selected_member_indices: Vec<usize>,
}

impl Prediction {
    fn from_mean(probs: Vec<f64>, selected: Vec<usize>) -> Self {
        let argmax_class = argmax(&probs);
        Self {
            probs,
            argmax_class,
            selected_member_indices: selected,
        }
    }
}

/// `N` key-bound sub-models with a fixed selection size `S`.
#[derive(Debug, Clone)]
pub struct RandomEnsemble {
    members: Vec<EnsembleMember>,
    selection_size: usize,
    selection_seed: u64,
}

impl RandomEnsemble {
    /// Validates and assembles an ensemble from trained members.
    ///
    /// Requires `N >= 4`, `3 <= S <= N`, pairwise-distinct key seeds, and
    /// every model bound to its paired key.
    pub fn from_members(
        members: Vec<EnsembleMember>,
        selection_size: usize,
        selection_seed: u64,
    ) -> Result<Self> {
        let n = members.len();
        if n < MIN_MEMBERS {
            return Err(Error::InvalidEnsembleSize(format!(
                "N = {n}, need at least {MIN_MEMBERS} sub-models"
            )));
        }
        if selection_size < MIN_SELECTION || selection_size > n {
            return Err(Error::InvalidEnsembleSize(format!(
                "S = {selection_size}, need {MIN_SELECTION} <= S <= N = {n}"
            )));
        }
        let mut seeds: Vec<u64> = members.iter().map(|m| m.key.seed()).collect();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::DuplicateSeeds);
        }
        for m in &members {
            if m.model.key_id() != Some(m.key.id()) {
                return Err(Error::KeyMismatch {
                    expected: m.key.id().to_string(),
                    actual: m
                        .model
                        .key_id()
                        .map_or_else(|| "unbound".into(), |id| id.to_string()),
                });
            }
        }
        Ok(Self {
            members,
            selection_size,
            selection_seed,
        })
    }

    pub fn members(&self) -> &[EnsembleMember] {
        &self.members
    }

    pub fn num_members(&self) -> usize {
        self.members.len()
    }

    pub fn selection_size(&self) -> usize {
        self.selection_size
    }

    pub fn selection_seed(&self) -> u64 {
        self.selection_seed
    }

    pub fn num_classes(&self) -> usize {
        self.members[0].model.num_classes()
    }

    /// Softmax vectors of all members on plaintext `x`, in member order.
    fn member_probs(&self, x: &ImageTensor) -> Result<Vec<Vec<f64>>> {
        self.members
            .iter()
            .map(|m| {
                let enc = m.encrypt(x)?;
                m.probs_for(&enc)
            })
            .collect()
    }

    fn mean_over(&self, all: &[Vec<f64>], selected: &[usize]) -> Vec<f64> {
        let k = self.num_classes();
        let mut mean = vec![0.0; k];
        for &idx in selected {
            for (m, p) in mean.iter_mut().zip(&all[idx]) {
                *m += p;
            }
        }
        for m in &mut mean {
            *m /= selected.len() as f64;
        }
        mean
    }

    /// Random-subset prediction: computes all `N` member results, draws a
    /// uniform `S`-subset without replacement from the caller's stream, and
    /// averages the selected softmax vectors. A fresh draw happens on every
    /// call, so repeated queries on the same input may differ.
    pub fn predict_random(&self, x: &ImageTensor, rng: &mut RngStream) -> Result<Prediction> {
        let all = self.member_probs(x)?;
        let selected = rng.uniform_subset(self.members.len(), self.selection_size)?;
        let mean = self.mean_over(&all, &selected);
        Ok(Prediction::from_mean(mean, selected))
    }

    /// Deterministic mean over all `N` members.
    pub fn predict_simple(&self, x: &ImageTensor) -> Result<Prediction> {
        let all = self.member_probs(x)?;
        let selected: Vec<usize> = (0..self.members.len()).collect();
        let mean = self.mean_over(&all, &selected);
        Ok(Prediction::from_mean(mean, selected))
    }

    /// One member's softmax on its key-encrypted input.
    pub fn predict_single(&self, member_index: usize, x: &ImageTensor) -> Result<Prediction> {
        let Some(member) = self.members.get(member_index) else {
            return Err(Error::IndexOutOfRange {
                index: member_index,
                len: self.members.len(),
            });
        };
        let probs = member.probs(x)?;
        Ok(Prediction::from_mean(probs, vec![member_index]))
    }

    /// Writes member checkpoints plus a versioned manifest into `dir`.
    ///
    /// The manifest records key seeds, checkpoint paths, and `(N, S)`; key
    /// permutations regenerate from seeds on load.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for (i, m) in self.members.iter().enumerate() {
            if m.key.is_identity_key() {
                return Err(Error::Config(
                    "ensembles of identity keys cannot be saved".into(),
                ));
            }
            let file = format!("member_{i}.ksmd");
            m.model.save(&dir.join(&file))?;
            entries.push(ManifestMember {
                key_seed: m.key.seed(),
                checkpoint: file,
            });
        }
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            block_size: self.members[0].key.block_size(),
            channels: self.members[0].key.channels(),
            selection_size: self.selection_size,
            selection_seed: self.selection_seed,
            members: entries,
        };
        let path = dir.join("ensemble.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest).map_err(to_config_err)?)?;
        Ok(path)
    }

    /// Loads an ensemble saved with [`RandomEnsemble::save`], revalidating all
    /// invariants.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest_path)?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::MalformedRecord(format!("ensemble manifest: {e}")))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::VersionMismatch {
                expected: MANIFEST_VERSION as u16,
                found: manifest.version as u16,
            });
        }
        let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        let mut members = Vec::with_capacity(manifest.members.len());
        for entry in &manifest.members {
            let key = ShuffleKey::generate(entry.key_seed, manifest.block_size, manifest.channels)?;
            let mut model = SubModel::load(&dir.join(&entry.checkpoint))?;
            model.bind_key(key.id());
            members.push(EnsembleMember::new(key, model)?);
        }
        Self::from_members(members, manifest.selection_size, manifest.selection_seed)
    }
}

fn to_config_err(e: serde_json::Error) -> Error {
    Error::Config(e.to_string())
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    block_size: usize,
    channels: usize,
    selection_size: usize,
    selection_seed: u64,
    members: Vec<ManifestMember>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestMember {
    key_seed: u64,
    checkpoint: String,
}

fn validate_build_args(num_members: usize, selection_size: usize, key_seeds: &[u64]) -> Result<()> {
    if key_seeds.len() != num_members {
        return Err(Error::InvalidEnsembleSize(format!(
            "N = {num_members} but {} key seeds supplied",
            key_seeds.len()
        )));
    }
    if num_members < MIN_MEMBERS {
        return Err(Error::InvalidEnsembleSize(format!(
            "N = {num_members}, need at least {MIN_MEMBERS} sub-models"
        )));
    }
    if selection_size < MIN_SELECTION || selection_size > num_members {
        return Err(Error::InvalidEnsembleSize(format!(
            "S = {selection_size}, need {MIN_SELECTION} <= S <= N = {num_members}"
        )));
    }
    Ok(())
}

/// Trains `N` sub-models, one per key seed, and assembles the ensemble.
///
/// Member `i` trains on the dataset encrypted with the key generated from
/// `key_seeds[i]`; training randomness derives per member from
/// `cfg.rng_seed`, so members differ in initialization and batch order.
/// Members train in parallel; the result is independent of scheduling.
pub fn build_ensemble(
    dataset: &crate::harness::Dataset,
    num_members: usize,
    selection_size: usize,
    key_seeds: &[u64],
    block_size: usize,
    cfg: &TrainConfig,
) -> Result<RandomEnsemble> {
    validate_build_args(num_members, selection_size, key_seeds)?;
    let root = RngStream::new(cfg.rng_seed);
    let (_, _, channels) = dataset.image_shape();

    let members: Vec<EnsembleMember> = {
        use rayon::prelude::*;
        key_seeds
            .par_iter()
            .enumerate()
            .map(|(i, &seed)| {
                let key = ShuffleKey::generate(seed, block_size, channels)?;
                let member_cfg = TrainConfig {
                    rng_seed: root.derive_indexed("member", i).seed(),
                    ..cfg.clone()
                };
                let model = train_submodel(dataset, &key, &member_cfg)?;
                EnsembleMember::new(key, model)
            })
            .collect::<Result<_>>()?
    };
    RandomEnsemble::from_members(members, selection_size, root.derive(b"selection").seed())
}

/// [`build_ensemble`] with a per-epoch training observer
/// `(member_index, record)`. Members train sequentially so observer calls
/// arrive in order; the trained weights are identical to [`build_ensemble`].
pub fn build_ensemble_observed(
    dataset: &crate::harness::Dataset,
    num_members: usize,
    selection_size: usize,
    key_seeds: &[u64],
    block_size: usize,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &EpochRecord),
) -> Result<RandomEnsemble> {
    validate_build_args(num_members, selection_size, key_seeds)?;
    let root = RngStream::new(cfg.rng_seed);
    let (_, _, channels) = dataset.image_shape();
    let mut members = Vec::with_capacity(num_members);
    for (i, &seed) in key_seeds.iter().enumerate() {
        let key = ShuffleKey::generate(seed, block_size, channels)?;
        let member_cfg = TrainConfig {
            rng_seed: root.derive_indexed("member", i).seed(),
            ..cfg.clone()
        };
        let model = crate::model::train_submodel_observed(dataset, &key, &member_cfg, |rec| {
            on_epoch(i, rec)
        })?;
        members.push(EnsembleMember::new(key, model)?);
    }
    RandomEnsemble::from_members(members, selection_size, root.derive(b"selection").seed())
}
