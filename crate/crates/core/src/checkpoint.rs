//! Versioned binary checkpoints: named parameter tensors, optimizer moments,
//! RNG position, counters, and the replay manifest. Round-trips are bit-exact
//! so a resumed run continues the original loss trace.

use crate::error::{Error, Result};
use crate::tensor::{Adam, Tensor};
use ndarray::ArrayD;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: [u8; 4] = *b"FCKP";

/// Complete ChaCha8 position: seed, stream, and word offset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> RngState {
        RngState {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// One Adam instance: its bias-correction step count and per-parameter moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub group: String,
    pub step_count: u64,
    pub entries: Vec<MomentEntry>,
}

impl OptimizerState {
    pub fn capture(group: &str, opt: &Adam) -> OptimizerState {
        OptimizerState {
            group: group.to_string(),
            step_count: opt.step_count(),
            entries: opt
                .moments()
                .into_iter()
                .map(|(name, m, v)| MomentEntry {
                    name,
                    shape: m.shape().to_vec(),
                    m: m.iter().copied().collect(),
                    v: v.iter().copied().collect(),
                })
                .collect(),
        }
    }

    pub fn apply(&self, opt: &mut Adam) -> Result<()> {
        let moments: Vec<(String, ArrayD<f64>, ArrayD<f64>)> = self
            .entries
            .iter()
            .map(|e| {
                let m = ArrayD::from_shape_vec(e.shape.clone(), e.m.clone())
                    .map_err(|err| Error::Load(format!("moment {}: {err}", e.name)))?;
                let v = ArrayD::from_shape_vec(e.shape.clone(), e.v.clone())
                    .map_err(|err| Error::Load(format!("moment {}: {err}", e.name)))?;
                Ok((e.name.clone(), m, v))
            })
            .collect::<Result<_>>()?;
        if moments.len() != opt.params().len() {
            return Err(Error::Load(format!(
                "optimizer group {} has {} entries, model needs {}",
                self.group,
                moments.len(),
                opt.params().len()
            )));
        }
        opt.restore(self.step_count, &moments);
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// Fingerprint of the experiment config that produced this checkpoint.
    pub config_hash: String,
    /// Full config in TOML form, enough to rebuild the model offline.
    pub config_toml: String,
    pub env_steps: u64,
    pub grad_steps: u64,
    pub episodes_done: u64,
    pub rng: RngState,
    /// Intrinsic-reward running moments (count, mean, m2).
    pub reward_moments: [f64; 3],
    /// Per-head update counters driving the target-critic schedule.
    pub head_updates: Vec<(String, u64)>,
    pub tensors: Vec<NamedTensor>,
    pub optimizers: Vec<OptimizerState>,
    /// Episode files, relative to the run directory, that reconstitute the
    /// replay buffer oldest-first.
    pub episode_files: Vec<String>,
}

/// Snapshot named parameters by value.
pub fn pack_tensors(params: &[(String, Tensor)]) -> Vec<NamedTensor> {
    params
        .iter()
        .map(|(name, p)| NamedTensor {
            name: name.clone(),
            shape: p.shape(),
            data: p.data().iter().copied().collect(),
        })
        .collect()
}

impl Checkpoint {
    /// Write `data` back into `params`, matching strictly by name and shape.
    /// Every parameter must be covered.
    pub fn apply_tensors(&self, params: &[(String, Tensor)]) -> Result<()> {
        let by_name: HashMap<&str, &NamedTensor> =
            self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        for (name, p) in params {
            let stored = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Load(format!("checkpoint is missing tensor {name}")))?;
            if stored.shape != p.shape() {
                return Err(Error::Load(format!(
                    "tensor {name}: stored shape {:?} vs model shape {:?}",
                    stored.shape,
                    p.shape()
                )));
            }
            let arr = ArrayD::from_shape_vec(stored.shape.clone(), stored.data.clone())
                .map_err(|e| Error::Load(format!("tensor {name}: {e}")))?;
            p.set_data(arr);
        }
        Ok(())
    }

    pub fn optimizer(&self, group: &str) -> Result<&OptimizerState> {
        self.optimizers
            .iter()
            .find(|o| o.group == group)
            .ok_or_else(|| Error::Load(format!("checkpoint has no optimizer group {group}")))
    }

    pub fn head_update_count(&self, head: &str) -> Result<u64> {
        self.head_updates
            .iter()
            .find(|(n, _)| n == head)
            .map(|(_, c)| *c)
            .ok_or_else(|| Error::Load(format!("checkpoint has no head counter {head}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = bincode::serialize(self).map_err(|e| Error::Serde(e.to_string()))?;
        let mut bytes = Vec::with_capacity(body.len() + 4);
        bytes.extend_from_slice(&MAGIC);
        bytes.extend_from_slice(&body);
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        if bytes.len() < 4 || bytes[..4] != MAGIC {
            return Err(Error::Load(format!(
                "{} is not a checkpoint file",
                path.display()
            )));
        }
        let ckpt: Checkpoint = bincode::deserialize(&bytes[4..])
            .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Load(format!(
                "checkpoint version {} (this build reads {})",
                ckpt.version, CHECKPOINT_VERSION
            )));
        }
        Ok(ckpt)
    }
}
