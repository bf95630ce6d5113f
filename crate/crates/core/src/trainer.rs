//! Training loop: policy-driven collection into replay, world-model gradient
//! steps, imagination updates for the exploration and task heads, and
//! episode-boundary checkpoints that resume bit-exactly.
//!
//! One ChaCha stream drives everything (init, sampling, collection), so two
//! runs with the same config and seed produce identical loss traces.

use crate::agent::{imagine, BehaviorHead, BehaviorStats};
use crate::checkpoint::{pack_tensors, Checkpoint, OptimizerState, RngState, CHECKPOINT_VERSION};
use crate::config::{ExperimentConfig, Method, Stage, ACTION_DIM, PROPRIO_DIM};
use crate::error::{Error, Result};
use crate::explore::{grouped_entropy_reward_tensor, knn_entropy_reward_tensor, RunningMoments};
use crate::metrics::{EpisodeLog, MetricsRow};
use crate::replay::{load_episode, save_episode, Episode, ReplayBuffer, Step};
use crate::sim::{Env, Observation};
use crate::tensor::{Adam, Tensor};
use crate::wm::{DecoderKind, LatentState, LossBreakdown, SampleMode, WorldModel};
use ndarray::{Array2, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Losses and statistics from one gradient step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecord {
    pub env_steps: u64,
    pub grad_steps: u64,
    pub wm: LossBreakdown,
    /// Pre-clip global gradient norm of the world-model step.
    pub grad_norm: f64,
    pub explore: Option<BehaviorStats>,
    pub task: Option<BehaviorStats>,
    /// Batch mean/std of the raw intrinsic reward (zero when unused).
    pub intrinsic_mean: f64,
    pub intrinsic_std: f64,
}

/// One line of curves.jsonl.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CurveRecord {
    Train(TrainRecord),
    Episode {
        env_steps: u64,
        episode: u64,
        reward: f64,
    },
}

impl CurveRecord {
    pub fn env_steps(&self) -> u64 {
        match self {
            CurveRecord::Train(r) => r.env_steps,
            CurveRecord::Episode { env_steps, .. } => *env_steps,
        }
    }
}

struct HeadSlot {
    head: BehaviorHead,
    opt_actor: Adam,
    opt_critic: Adam,
}

/// Which policy gathers experience for the current method and stage.
#[derive(Clone, Copy, PartialEq, Eq)]
enum CollectSource {
    Uniform,
    ExploreHead,
    TaskHead,
}

fn collect_source(method: Method, stage: Stage) -> CollectSource {
    match (method, stage) {
        (Method::Random, _) => CollectSource::Uniform,
        (Method::Focus | Method::AptBaseline, Stage::Explore) => CollectSource::ExploreHead,
        _ => CollectSource::TaskHead,
    }
}

fn zero_grads(params: &[Tensor]) {
    for p in params {
        p.zero_grad();
    }
}

pub struct Trainer {
    cfg: ExperimentConfig,
    seed: u64,
    env: Env,
    wm: Option<WorldModel>,
    opt_wm: Option<Adam>,
    explore: Option<HeadSlot>,
    task: Option<HeadSlot>,
    /// Every parameter tensor (including frozen target critics); spilled
    /// gradients are cleared here after each optimizer step.
    all_params: Vec<Tensor>,
    replay: ReplayBuffer,
    reward_moments: RunningMoments,
    rng: ChaCha8Rng,
    env_steps: u64,
    grad_steps: u64,
    episodes_done: u64,
    in_episode: bool,
    episode_random: bool,
    latent: Option<LatentState>,
    episode: Episode,
    episode_log: EpisodeLog,
    episode_reward: f64,
    run_dir: Option<PathBuf>,
    metrics_rows: Vec<MetricsRow>,
    curves: Vec<CurveRecord>,
}

impl Trainer {
    pub fn new(cfg: ExperimentConfig, seed: u64, run_dir: Option<PathBuf>) -> Result<Trainer> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let env = Env::new(cfg.scene.clone(), cfg.task.clone(), cfg.areas.clone())?;

        let wm = if cfg.method == Method::Random {
            None
        } else {
            let kind = if cfg.method.uses_object_decoder() {
                DecoderKind::Object
            } else {
                DecoderKind::Monolithic
            };
            Some(WorldModel::new(&mut rng, &cfg.model, &cfg.scene, ACTION_DIM, kind)?)
        };

        let lr = cfg.train.learning_rate;
        let clip = cfg.train.grad_clip;
        let opt_wm = wm
            .as_ref()
            .map(|m| Adam::new(m.params(), lr, clip));

        let state_dim = cfg.model.state_dim();
        let make_slot = |rng: &mut ChaCha8Rng, name: &str| -> Result<HeadSlot> {
            let head = BehaviorHead::new(
                rng,
                name,
                state_dim,
                ACTION_DIM,
                &cfg.behavior.hidden,
                cfg.behavior.min_std,
                cfg.behavior.target_update_every,
            )?;
            let opt_actor = Adam::new(head.actor_params(), lr, clip);
            let opt_critic = Adam::new(head.critic_params(), lr, clip);
            Ok(HeadSlot {
                head,
                opt_actor,
                opt_critic,
            })
        };

        let wants_explore =
            cfg.stage == Stage::Explore && cfg.method.uses_intrinsic_reward();
        let explore = if wants_explore {
            Some(make_slot(&mut rng, "explore")?)
        } else {
            None
        };
        let task = if cfg.method != Method::Random {
            Some(make_slot(&mut rng, "task")?)
        } else {
            None
        };

        if wants_explore {
            let starts = imagine_start_count(&cfg);
            let particles = starts * cfg.behavior.horizon;
            if particles <= cfg.explore.k {
                return Err(Error::config(format!(
                    "{} imagined particles cannot support k = {} neighbors",
                    particles, cfg.explore.k
                )));
            }
        }

        let mut all_params: Vec<Tensor> = Vec::new();
        if let Some(m) = &wm {
            all_params.extend(m.params().into_iter().map(|(_, p)| p));
        }
        for slot in [&explore, &task].into_iter().flatten() {
            all_params.extend(slot.head.params().into_iter().map(|(_, p)| p));
        }

        let replay = ReplayBuffer::new(
            cfg.train.buffer_capacity,
            cfg.scene.channels(),
            cfg.scene.image_size,
            ACTION_DIM,
        )?;

        if let Some(dir) = &run_dir {
            std::fs::create_dir_all(dir.join("episodes"))?;
            std::fs::create_dir_all(dir.join("checkpoints"))?;
        }

        let mut trainer = Trainer {
            cfg,
            seed,
            env,
            wm,
            opt_wm,
            explore,
            task,
            all_params,
            replay,
            reward_moments: RunningMoments::new(),
            rng,
            env_steps: 0,
            grad_steps: 0,
            episodes_done: 0,
            in_episode: false,
            episode_random: false,
            latent: None,
            episode: Episode::new(),
            episode_log: EpisodeLog::new(Vec::new()),
            episode_reward: 0.0,
            run_dir,
            metrics_rows: Vec::new(),
            curves: Vec::new(),
        };

        if trainer.cfg.stage == Stage::Adapt {
            let src = trainer
                .cfg
                .source_checkpoint
                .clone()
                .expect("validated: adapt stage carries a source checkpoint");
            trainer.load_source_params(&src)?;
        }
        Ok(trainer)
    }

    /// Warm-start model and task-head weights from an exploration checkpoint.
    /// Optimizers, RNG, counters, and replay stay fresh.
    fn load_source_params(&mut self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint::load(path)?;
        ckpt.apply_tensors(&self.named_params())
    }

    /// Every named parameter this trainer owns, target critics included.
    fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        if let Some(m) = &self.wm {
            out.extend(m.params());
        }
        for slot in [&self.explore, &self.task].into_iter().flatten() {
            out.extend(slot.head.params());
        }
        out
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn grad_steps(&self) -> u64 {
        self.grad_steps
    }

    pub fn episodes_done(&self) -> u64 {
        self.episodes_done
    }

    pub fn world_model(&self) -> Option<&WorldModel> {
        self.wm.as_ref()
    }

    pub fn metrics(&self) -> &[MetricsRow] {
        &self.metrics_rows
    }

    pub fn curves(&self) -> &[CurveRecord] {
        &self.curves
    }

    pub fn replay(&self) -> &ReplayBuffer {
        &self.replay
    }

    /// Exploration noise for the current step: linear decay across the budget.
    fn collection_noise(&self) -> f64 {
        let b = &self.cfg.behavior;
        if self.cfg.budget_steps == 0 {
            return b.noise_end;
        }
        let frac = (self.env_steps as f64 / self.cfg.budget_steps as f64).min(1.0);
        b.noise_start + (b.noise_end - b.noise_start) * frac
    }

    /// Posterior update from one observation; the returned state is detached
    /// so online filtering never grows a graph.
    fn observe(&mut self, obs: &Observation, action: &[f64]) -> Result<LatentState> {
        let wm = self.wm.as_ref().expect("observe requires a model");
        let img = obs.image_f64().insert_axis(Axis(0)).into_dyn();
        let prop = Array2::from_shape_vec((1, PROPRIO_DIM), obs.proprio.clone())
            .expect("proprio width checked by the simulator")
            .into_dyn();
        let act = Array2::from_shape_vec((1, ACTION_DIM), action.to_vec())
            .expect("action width is fixed")
            .into_dyn();
        let embed = wm.encode(&Tensor::constant(img), &Tensor::constant(prop))?;
        let prev = match &self.latent {
            Some(l) => l.clone(),
            None => wm.initial_state(1),
        };
        let (post, _) = wm.posterior_step(
            &prev,
            &Tensor::constant(act),
            &embed,
            &mut self.rng,
            SampleMode::Sample,
        )?;
        Ok(post.detached())
    }

    fn begin_episode(&mut self) -> Result<()> {
        let obs = self.env.reset(self.episodes_done);
        self.episode_random = match self.cfg.method {
            Method::Random => true,
            _ => {
                self.cfg.stage != Stage::Adapt
                    && self.env_steps < self.cfg.train.prefill_steps as u64
            }
        };
        let zero = [0.0; ACTION_DIM];
        self.episode = Episode::new();
        self.episode.push(Step::from_observation(&obs, &zero, 0.0));
        self.episode_log = EpisodeLog::new(obs.info.poses.clone());
        self.episode_reward = 0.0;
        self.latent = None;
        if self.wm.is_some() {
            let post = self.observe(&obs, &zero)?;
            self.latent = Some(post);
        }
        self.in_episode = true;
        Ok(())
    }

    fn end_episode(&mut self) -> Result<()> {
        let episode = std::mem::take(&mut self.episode);
        if self.cfg.method != Method::Random {
            if let Some(dir) = &self.run_dir {
                let path = dir
                    .join("episodes")
                    .join(format!("ep_{:06}.bin", self.episodes_done));
                save_episode(&path, &episode)?;
            }
            self.replay.append_episode(episode)?;
        }
        let row = MetricsRow::from_log(self.env_steps, &self.episode_log, &self.cfg.areas)?;
        self.metrics_rows.push(row);
        self.curves.push(CurveRecord::Episode {
            env_steps: self.env_steps,
            episode: self.episodes_done,
            reward: self.episode_reward,
        });
        self.episodes_done += 1;
        self.in_episode = false;
        self.latent = None;
        Ok(())
    }

    /// Take one environment step; returns true at an episode boundary.
    pub fn collect_step(&mut self) -> Result<bool> {
        if !self.in_episode {
            self.begin_episode()?;
        }
        let source = collect_source(self.cfg.method, self.cfg.stage);
        let action: [f64; ACTION_DIM] = if self.episode_random || source == CollectSource::Uniform
        {
            let mut a = [0.0; ACTION_DIM];
            for v in &mut a {
                *v = self.rng.gen_range(-1.0..=1.0);
            }
            a
        } else {
            let slot = match source {
                CollectSource::ExploreHead => self.explore.as_ref(),
                CollectSource::TaskHead => self.task.as_ref(),
                CollectSource::Uniform => unreachable!(),
            }
            .expect("collection head exists for this method and stage");
            let feat = self
                .latent
                .as_ref()
                .expect("model methods track an online latent")
                .feature();
            let noise = self.collection_noise();
            let a = slot.head.actor.act(&feat, &mut self.rng, noise);
            [a[[0, 0]], a[[0, 1]], a[[0, 2]]]
        };

        let (obs, reward, done) = self.env.step(action)?;
        self.env_steps += 1;
        self.episode_reward += reward;
        self.episode.push(Step::from_observation(&obs, &action, reward));
        self.episode_log
            .push(obs.info.poses.clone(), obs.info.contacts.clone(), obs.info.grasped);
        if self.wm.is_some() {
            let post = self.observe(&obs, &action)?;
            self.latent = Some(post);
        }
        if done {
            self.end_episode()?;
        }
        Ok(done)
    }

    /// Detached imagination seeds from the posterior trajectory, optionally
    /// subsampled to `imagine_starts` rows.
    fn make_starts(&mut self, posteriors: &[LatentState]) -> LatentState {
        let hs: Vec<Tensor> = posteriors.iter().map(|p| p.h.detach()).collect();
        let zs: Vec<Tensor> = posteriors.iter().map(|p| p.z.detach()).collect();
        let ls: Vec<Tensor> = posteriors.iter().map(|p| p.logits.detach()).collect();
        let h = Tensor::concat_rows(&hs.iter().collect::<Vec<_>>());
        let z = Tensor::concat_rows(&zs.iter().collect::<Vec<_>>());
        let logits = Tensor::concat_rows(&ls.iter().collect::<Vec<_>>());
        let total = h.shape()[0];
        let want = self.cfg.behavior.imagine_starts;
        if want == 0 || want >= total {
            return LatentState { h, z, logits };
        }
        // partial Fisher-Yates: a uniform subset without replacement
        let mut idx: Vec<usize> = (0..total).collect();
        for i in 0..want {
            let j = self.rng.gen_range(i..total);
            idx.swap(i, j);
        }
        idx.truncate(want);
        LatentState {
            h: h.gather_rows(&idx),
            z: z.gather_rows(&idx),
            logits: logits.gather_rows(&idx),
        }
    }

    /// Intrinsic exploration reward over pooled imagined states, one scalar
    /// per (step, trajectory) particle.
    fn intrinsic_reward(&self, f_all: &Tensor) -> Result<Tensor> {
        let e = &self.cfg.explore;
        match self.cfg.method {
            Method::Focus => {
                let wm = self.wm.as_ref().expect("intrinsic reward requires a model");
                let first_slot = if e.include_background { 0 } else { 1 };
                let mut groups = Vec::new();
                for slot in first_slot..wm.num_slots() {
                    groups.push(wm.object_latent(f_all, slot)?);
                }
                grouped_entropy_reward_tensor(&groups, e.k, e.epsilon)
            }
            Method::AptBaseline => knn_entropy_reward_tensor(f_all, e.k, e.epsilon),
            _ => Err(Error::contract("method has no intrinsic reward")),
        }
    }

    /// One gradient step: world model, then each behavior head on a fresh
    /// imagined rollout. Returns None while the replay cannot fill a batch.
    pub fn train_step(&mut self) -> Result<Option<TrainRecord>> {
        if self.wm.is_none() {
            return Ok(None);
        }
        let batch = match self.replay.sample_batch(
            &mut self.rng,
            self.cfg.train.batch_size,
            self.cfg.train.seq_len,
        ) {
            Ok(b) => b,
            Err(Error::NotReady(_)) => return Ok(None),
            Err(e) => return Err(e),
        };

        let wm = self.wm.as_ref().expect("checked above");
        let out = wm.world_model_loss(&batch, &mut self.rng, SampleMode::Sample)?;
        out.objective.backward();
        let grad_norm = self.opt_wm.as_mut().expect("model has an optimizer").step();
        zero_grads(&self.all_params);

        let starts = self.make_starts(&out.posteriors);
        let b_starts = starts.batch_size();
        let horizon = self.cfg.behavior.horizon;
        let bh = &self.cfg.behavior;
        let (gamma, lambda, ent) = (bh.gamma, bh.lambda, bh.entropy_coef);

        let mut explore_stats = None;
        let mut intrinsic_mean = 0.0;
        let mut intrinsic_std = 0.0;
        if self.explore.is_some() {
            let wm = self.wm.as_ref().expect("checked above");
            let slot = self.explore.as_ref().expect("checked above");
            let traj = imagine(
                wm,
                &slot.head.actor,
                &starts,
                horizon,
                &mut self.rng,
                SampleMode::Sample,
            )?;
            let future: Vec<&Tensor> = traj.feats[1..].iter().collect();
            let f_all = Tensor::concat_rows(&future);
            let raw = self.intrinsic_reward(&f_all)?;
            let vals: Vec<f64> = raw.data().iter().copied().collect();
            let n = vals.len() as f64;
            intrinsic_mean = vals.iter().sum::<f64>() / n;
            intrinsic_std =
                (vals.iter().map(|v| (v - intrinsic_mean).powi(2)).sum::<f64>() / n).sqrt();
            self.reward_moments.update_batch(&vals);
            let shaped = if self.cfg.explore.standardize {
                let m = self.reward_moments.mean();
                let s = self.reward_moments.std();
                raw.add_scalar(-m).mul_scalar(1.0 / (s + 1e-8))
            } else {
                raw
            };
            let grid = shaped.reshape(&[horizon, b_starts]);
            let rewards: Vec<Tensor> = (0..horizon)
                .map(|t| grid.slice_rows(t, t + 1).reshape(&[b_starts]))
                .collect();
            let slot = self.explore.as_mut().expect("checked above");
            let upd = slot.head.update(&traj, &rewards, gamma, lambda, ent)?;
            upd.actor_loss.backward();
            slot.opt_actor.step();
            zero_grads(&self.all_params);
            upd.critic_loss.backward();
            slot.opt_critic.step();
            zero_grads(&self.all_params);
            slot.head.after_step();
            explore_stats = Some(upd.stats);
        }

        let mut task_stats = None;
        if self.task.is_some() {
            let wm = self.wm.as_ref().expect("checked above");
            let slot = self.task.as_ref().expect("checked above");
            let traj = imagine(
                wm,
                &slot.head.actor,
                &starts,
                horizon,
                &mut self.rng,
                SampleMode::Sample,
            )?;
            let rewards: Vec<Tensor> = traj.feats[1..]
                .iter()
                .map(|f| wm.predict_reward(f).reshape(&[b_starts]))
                .collect();
            let slot = self.task.as_mut().expect("checked above");
            let upd = slot.head.update(&traj, &rewards, gamma, lambda, ent)?;
            upd.actor_loss.backward();
            slot.opt_actor.step();
            zero_grads(&self.all_params);
            upd.critic_loss.backward();
            slot.opt_critic.step();
            zero_grads(&self.all_params);
            slot.head.after_step();
            task_stats = Some(upd.stats);
        }

        self.grad_steps += 1;
        let record = TrainRecord {
            env_steps: self.env_steps,
            grad_steps: self.grad_steps,
            wm: out.loss,
            grad_norm,
            explore: explore_stats,
            task: task_stats,
            intrinsic_mean,
            intrinsic_std,
        };
        let every = self.cfg.train.log_every.max(1) as u64;
        if self.grad_steps % every == 0 {
            self.curves.push(CurveRecord::Train(record.clone()));
        }
        Ok(Some(record))
    }

    fn should_train(&self) -> bool {
        self.wm.is_some()
            && self.env_steps >= self.cfg.train.prefill_steps as u64
            && self.env_steps % self.cfg.train.train_every as u64 == 0
    }

    /// Run collection and training until the step budget is spent, finishing
    /// the in-flight episode so the final checkpoint lands on a boundary.
    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.cfg.budget_steps as u64)?;
        self.save_checkpoint()?;
        self.write_artifacts()?;
        Ok(())
    }

    /// Advance to `target` environment steps (clamped to the budget) and
    /// finish the in-flight episode. Stopping here and resuming from a saved
    /// checkpoint continues the original trace bit-exactly.
    pub fn run_until(&mut self, target: u64) -> Result<()> {
        let target = target.min(self.cfg.budget_steps as u64);
        let ckpt_every = self.cfg.train.checkpoint_every as u64;
        let mut next_ckpt = if ckpt_every > 0 {
            (self.env_steps / ckpt_every + 1) * ckpt_every
        } else {
            0
        };
        while self.env_steps < target || self.in_episode {
            let done = self.collect_step()?;
            if self.should_train() {
                self.train_step()?;
            }
            if done && ckpt_every > 0 && self.env_steps >= next_ckpt {
                self.save_checkpoint()?;
                next_ckpt = self.env_steps + ckpt_every;
            }
        }
        Ok(())
    }

    /// Snapshot everything needed for a bit-exact resume. Only meaningful at
    /// an episode boundary; no-op without a run directory.
    pub fn save_checkpoint(&self) -> Result<Option<PathBuf>> {
        let Some(dir) = &self.run_dir else {
            return Ok(None);
        };
        if self.in_episode {
            return Err(Error::contract(
                "checkpoints are only taken at episode boundaries",
            ));
        }
        let mut optimizers = Vec::new();
        if let Some(opt) = &self.opt_wm {
            optimizers.push(OptimizerState::capture("wm", opt));
        }
        for (name, slot) in [("explore", &self.explore), ("task", &self.task)] {
            if let Some(s) = slot {
                optimizers.push(OptimizerState::capture(&format!("{name}.actor"), &s.opt_actor));
                optimizers.push(OptimizerState::capture(
                    &format!("{name}.critic"),
                    &s.opt_critic,
                ));
            }
        }
        let mut head_updates = Vec::new();
        for (name, slot) in [("explore", &self.explore), ("task", &self.task)] {
            if let Some(s) = slot {
                head_updates.push((name.to_string(), s.head.update_count() as u64));
            }
        }
        let kept = self.replay.num_episodes() as u64;
        let episode_files = (self.episodes_done - kept..self.episodes_done)
            .map(|i| format!("episodes/ep_{i:06}.bin"))
            .collect();
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash: self.cfg.config_hash(),
            config_toml: self.cfg.to_toml_string()?,
            env_steps: self.env_steps,
            grad_steps: self.grad_steps,
            episodes_done: self.episodes_done,
            rng: RngState::capture(&self.rng),
            reward_moments: self.reward_moments.state(),
            head_updates,
            tensors: pack_tensors(&self.named_params()),
            optimizers,
            episode_files,
        };
        let path = dir
            .join("checkpoints")
            .join(format!("ckpt_{:09}.fckp", self.env_steps));
        ckpt.save(&path)?;
        self.write_artifacts()?;
        Ok(Some(path))
    }

    /// Rebuild a trainer mid-run from its run directory and checkpoint.
    pub fn resume(
        cfg: ExperimentConfig,
        seed: u64,
        run_dir: PathBuf,
        ckpt_path: &Path,
    ) -> Result<Trainer> {
        let ckpt = Checkpoint::load(ckpt_path)?;
        if ckpt.config_hash != cfg.config_hash() {
            return Err(Error::config(
                "checkpoint was produced by a different config",
            ));
        }
        let mut t = Trainer::new(cfg, seed, Some(run_dir.clone()))?;
        ckpt.apply_tensors(&t.named_params())?;
        if let Some(opt) = &mut t.opt_wm {
            ckpt.optimizer("wm")?.apply(opt)?;
        }
        for (name, slot) in [("explore", &mut t.explore), ("task", &mut t.task)] {
            if let Some(s) = slot {
                ckpt.optimizer(&format!("{name}.actor"))?.apply(&mut s.opt_actor)?;
                ckpt.optimizer(&format!("{name}.critic"))?
                    .apply(&mut s.opt_critic)?;
                s.head.set_update_count(ckpt.head_update_count(name)? as usize);
            }
        }
        t.env_steps = ckpt.env_steps;
        t.grad_steps = ckpt.grad_steps;
        t.episodes_done = ckpt.episodes_done;
        t.rng = ckpt.rng.restore();
        t.reward_moments = RunningMoments::restore(ckpt.reward_moments);
        for file in &ckpt.episode_files {
            let ep = load_episode(&run_dir.join(file))?;
            t.replay.append_episode(ep)?;
        }
        t.metrics_rows = read_metrics(&run_dir.join("metrics.csv"))
            .unwrap_or_default()
            .into_iter()
            .filter(|r| r.step <= ckpt.env_steps)
            .collect();
        t.curves = read_curves(&run_dir.join("curves.jsonl"))
            .unwrap_or_default()
            .into_iter()
            .filter(|c| c.env_steps() <= ckpt.env_steps)
            .collect();
        Ok(t)
    }

    /// Rewrite metrics.csv and curves.jsonl from the in-memory history.
    pub fn write_artifacts(&self) -> Result<()> {
        let Some(dir) = &self.run_dir else {
            return Ok(());
        };
        write_metrics(&dir.join("metrics.csv"), &self.metrics_rows)?;
        write_curves(&dir.join("curves.jsonl"), &self.curves)?;
        Ok(())
    }

    /// Average episode reward of the deterministic task policy (mean actions,
    /// expected latents) over `episodes` fresh episodes.
    pub fn evaluate_task(&self, episodes: usize) -> Result<f64> {
        let wm = self
            .wm
            .as_ref()
            .ok_or_else(|| Error::contract("evaluation requires a model"))?;
        let slot = self
            .task
            .as_ref()
            .ok_or_else(|| Error::contract("evaluation requires a task head"))?;
        let mut env = Env::new(
            self.cfg.scene.clone(),
            self.cfg.task.clone(),
            self.cfg.areas.clone(),
        )?;
        // expected-mode latents ignore the stream; any fixed seed works
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut total = 0.0;
        for ep in 0..episodes {
            let obs = env.reset(ep as u64);
            let mut latent = posterior_expected(wm, None, &obs, &[0.0; ACTION_DIM], &mut rng)?;
            loop {
                let a = slot.head.actor.mean_action(&latent.feature());
                let action = {
                    let ad = a.data();
                    [ad[[0, 0]], ad[[0, 1]], ad[[0, 2]]]
                };
                let (obs, reward, done) = env.step(action)?;
                total += reward;
                latent = posterior_expected(wm, Some(&latent), &obs, &action, &mut rng)?;
                if done {
                    break;
                }
            }
        }
        Ok(total / episodes.max(1) as f64)
    }
}

fn posterior_expected(
    wm: &WorldModel,
    prev: Option<&LatentState>,
    obs: &Observation,
    action: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<LatentState> {
    let img = obs.image_f64().insert_axis(Axis(0)).into_dyn();
    let prop = Array2::from_shape_vec((1, PROPRIO_DIM), obs.proprio.clone())
        .expect("proprio width checked by the simulator")
        .into_dyn();
    let act = Array2::from_shape_vec((1, ACTION_DIM), action.to_vec())
        .expect("action width is fixed")
        .into_dyn();
    let embed = wm.encode(&Tensor::constant(img), &Tensor::constant(prop))?;
    let prev = match prev {
        Some(l) => l.clone(),
        None => wm.initial_state(1),
    };
    let (post, _) = wm.posterior_step(
        &prev,
        &Tensor::constant(act),
        &embed,
        rng,
        SampleMode::Expected,
    )?;
    Ok(post.detached())
}

fn imagine_start_count(cfg: &ExperimentConfig) -> usize {
    let total = cfg.train.batch_size * cfg.train.seq_len;
    match cfg.behavior.imagine_starts {
        0 => total,
        n => n.min(total),
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serde(e.to_string()))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::Serde(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Serde(e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Serde(e.to_string())))
        .collect()
}

pub fn write_curves(path: &Path, curves: &[CurveRecord]) -> Result<()> {
    let mut out = String::new();
    for c in curves {
        out.push_str(&serde_json::to_string(c).map_err(|e| Error::Serde(e.to_string()))?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_curves(path: &Path) -> Result<Vec<CurveRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Serde(e.to_string())))
        .collect()
}

/// Latest checkpoint in a run directory, by step count in the file name.
pub fn latest_checkpoint(run_dir: &Path) -> Result<PathBuf> {
    let dir = run_dir.join("checkpoints");
    let mut best: Option<PathBuf> = None;
    for entry in std::fs::read_dir(&dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "fckp")
            && best.as_ref().map_or(true, |b| path > *b)
        {
            best = Some(path);
        }
    }
    best.ok_or_else(|| Error::Load(format!("no checkpoints under {}", dir.display())))
}
