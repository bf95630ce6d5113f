//! Sequence replay over whole episodes. Frames are kept in the renderer's
//! quantized form and only widened to reals at batch time, so a stored
//! episode replays losslessly. Sampled windows never cross episode
//! boundaries; eviction drops whole episodes FIFO.

use crate::config::PROPRIO_DIM;
use crate::error::{Error, Result};
use crate::sim::Observation;
use crate::wm::SequenceBatch;
use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::path::Path;

/// Bump when the stored episode layout changes.
pub const EPISODE_FORMAT_VERSION: u32 = 1;

/// One environment transition as stored: the observation after acting, the
/// action that produced it, and the reward received with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    /// Quantized (C, H, W) frame, flattened row-major.
    pub image: Vec<u8>,
    /// (H*W,) slot labels; 0 is background.
    pub labels: Vec<u8>,
    /// (PROPRIO_DIM,) proprioception.
    pub proprio: Vec<f64>,
    /// Action that led into this observation; zeros on an episode's first step.
    pub action: Vec<f64>,
    pub reward: f64,
}

impl Step {
    pub fn from_observation(obs: &Observation, action: &[f64], reward: f64) -> Step {
        Step {
            image: obs.image.iter().copied().collect(),
            labels: obs.segmask.iter().copied().collect(),
            proprio: obs.proprio.clone(),
            action: action.to_vec(),
            reward,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub steps: Vec<Step>,
}

impl Episode {
    pub fn new() -> Episode {
        Episode { steps: Vec::new() }
    }

    pub fn push(&mut self, step: Step) {
        self.steps.push(step);
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct EpisodeFile {
    version: u32,
    episode: Episode,
}

/// Persist one episode as a standalone binary file.
pub fn save_episode(path: &Path, episode: &Episode) -> Result<()> {
    let file = EpisodeFile {
        version: EPISODE_FORMAT_VERSION,
        episode: episode.clone(),
    };
    let bytes = bincode::serialize(&file).map_err(|e| Error::Serde(e.to_string()))?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_episode(path: &Path) -> Result<Episode> {
    let bytes = std::fs::read(path)?;
    let file: EpisodeFile =
        bincode::deserialize(&bytes).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    if file.version != EPISODE_FORMAT_VERSION {
        return Err(Error::Load(format!(
            "episode format version {} (expected {})",
            file.version, EPISODE_FORMAT_VERSION
        )));
    }
    Ok(file.episode)
}

/// Widen one whole episode into a single-window batch (B=1, L=len) for
/// offline evaluation and rendering.
pub fn episode_batch(episode: &Episode, scene: &crate::config::SceneConfig) -> Result<SequenceBatch> {
    if episode.is_empty() {
        return Err(Error::contract("cannot batch an empty episode"));
    }
    let (c, s) = (scene.channels(), scene.image_size);
    let hw = s * s;
    let seq_len = episode.len();
    let mut images = Vec::with_capacity(seq_len);
    let mut labels = Vec::with_capacity(seq_len);
    let mut proprios = Vec::with_capacity(seq_len);
    let mut actions = Vec::with_capacity(seq_len);
    let mut rewards = Vec::with_capacity(seq_len);
    for step in &episode.steps {
        if step.image.len() != c * hw || step.labels.len() != hw {
            return Err(Error::contract("episode frames do not match the scene"));
        }
        let mut img = ArrayD::zeros(vec![1, c, s, s]);
        for (i, &v) in step.image.iter().enumerate() {
            let (ci, p) = (i / hw, i % hw);
            img[[0, ci, p / s, p % s]] = v as f64 / 255.0;
        }
        images.push(img);
        labels.push(step.labels.iter().map(|&l| l as usize).collect());
        let mut prop = ArrayD::zeros(vec![1, PROPRIO_DIM]);
        for (j, &v) in step.proprio.iter().enumerate() {
            prop[[0, j]] = v;
        }
        proprios.push(prop);
        let mut act = ArrayD::zeros(vec![1, step.action.len()]);
        for (j, &v) in step.action.iter().enumerate() {
            act[[0, j]] = v;
        }
        actions.push(act);
        let mut rew = ArrayD::zeros(vec![1, 1]);
        rew[[0, 0]] = step.reward;
        rewards.push(rew);
    }
    Ok(SequenceBatch {
        seq_len,
        batch_size: 1,
        images,
        labels,
        proprios,
        actions,
        rewards,
    })
}

/// FIFO episode store with uniform sequence-window sampling.
pub struct ReplayBuffer {
    capacity_steps: usize,
    channels: usize,
    image_size: usize,
    action_dim: usize,
    episodes: VecDeque<Episode>,
    total_steps: usize,
}

impl ReplayBuffer {
    pub fn new(
        capacity_steps: usize,
        channels: usize,
        image_size: usize,
        action_dim: usize,
    ) -> Result<ReplayBuffer> {
        if capacity_steps == 0 {
            return Err(Error::contract("replay capacity must be positive"));
        }
        Ok(ReplayBuffer {
            capacity_steps,
            channels,
            image_size,
            action_dim,
            episodes: VecDeque::new(),
            total_steps: 0,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.total_steps
    }

    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn episodes(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter()
    }

    /// Number of length-`l` windows currently sampleable.
    pub fn num_windows(&self, l: usize) -> usize {
        self.episodes
            .iter()
            .map(|e| e.len().saturating_sub(l - 1))
            .sum()
    }

    fn check_step(&self, step: &Step) -> Result<()> {
        let hw = self.image_size * self.image_size;
        if step.image.len() != self.channels * hw {
            return Err(Error::contract(format!(
                "step image has {} bytes, scene needs {}",
                step.image.len(),
                self.channels * hw
            )));
        }
        if step.labels.len() != hw {
            return Err(Error::contract("step labels do not cover the frame"));
        }
        if step.proprio.len() != PROPRIO_DIM {
            return Err(Error::contract("step proprio width mismatch"));
        }
        if step.action.len() != self.action_dim {
            return Err(Error::contract("step action width mismatch"));
        }
        Ok(())
    }

    /// Append a finished episode, evicting oldest episodes past capacity.
    pub fn append_episode(&mut self, episode: Episode) -> Result<()> {
        if episode.is_empty() {
            return Err(Error::contract("cannot append an empty episode"));
        }
        if episode.len() > self.capacity_steps {
            return Err(Error::contract(format!(
                "episode of {} steps exceeds buffer capacity {}",
                episode.len(),
                self.capacity_steps
            )));
        }
        for step in &episode.steps {
            self.check_step(step)?;
        }
        self.total_steps += episode.len();
        self.episodes.push_back(episode);
        while self.total_steps > self.capacity_steps {
            let evicted = self.episodes.pop_front().expect("accounting broken");
            self.total_steps -= evicted.len();
        }
        Ok(())
    }

    /// Sample `batch` windows of `seq_len` consecutive steps, uniform over
    /// all valid window positions and deterministic under the RNG state.
    pub fn sample_batch(
        &self,
        rng: &mut ChaCha8Rng,
        batch: usize,
        seq_len: usize,
    ) -> Result<SequenceBatch> {
        if batch == 0 || seq_len == 0 {
            return Err(Error::contract("batch and seq_len must be positive"));
        }
        let windows = self.num_windows(seq_len);
        if windows == 0 {
            return Err(Error::NotReady(format!(
                "no episode holds {seq_len} consecutive steps yet"
            )));
        }

        let (c, s) = (self.channels, self.image_size);
        let hw = s * s;
        let mut images = Vec::with_capacity(seq_len);
        let mut labels = Vec::with_capacity(seq_len);
        let mut proprios = Vec::with_capacity(seq_len);
        let mut actions = Vec::with_capacity(seq_len);
        let mut rewards = Vec::with_capacity(seq_len);
        for _ in 0..seq_len {
            images.push(ArrayD::zeros(vec![batch, c, s, s]));
            labels.push(vec![0usize; batch * hw]);
            proprios.push(ArrayD::zeros(vec![batch, PROPRIO_DIM]));
            actions.push(ArrayD::zeros(vec![batch, self.action_dim]));
            rewards.push(ArrayD::zeros(vec![batch, 1]));
        }

        for b in 0..batch {
            // map a uniform window index to (episode, start)
            let mut w = rng.gen_range(0..windows);
            let mut chosen: Option<(&Episode, usize)> = None;
            for ep in &self.episodes {
                let n = ep.len().saturating_sub(seq_len - 1);
                if w < n {
                    chosen = Some((ep, w));
                    break;
                }
                w -= n;
            }
            let (ep, start) = chosen.expect("window index within bounds");
            for t in 0..seq_len {
                let step = &ep.steps[start + t];
                for (i, &v) in step.image.iter().enumerate() {
                    let (ci, p) = (i / hw, i % hw);
                    images[t][[b, ci, p / s, p % s]] = v as f64 / 255.0;
                }
                for (p, &l) in step.labels.iter().enumerate() {
                    labels[t][b * hw + p] = l as usize;
                }
                for (j, &v) in step.proprio.iter().enumerate() {
                    proprios[t][[b, j]] = v;
                }
                for (j, &v) in step.action.iter().enumerate() {
                    actions[t][[b, j]] = v;
                }
                rewards[t][[b, 0]] = step.reward;
            }
        }

        Ok(SequenceBatch {
            seq_len,
            batch_size: batch,
            images,
            labels,
            proprios,
            actions,
            rewards,
        })
    }
}
