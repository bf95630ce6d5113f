//! Experiment configuration: TOML-backed, fully defaulted, hashable.
//!
//! Every hyperparameter of the model, exploration reward, behavior learning
//! and training loop is surfaced here so that runs are reproducible from the
//! config file alone. `ExperimentConfig::config_hash` fingerprints the
//! canonical JSON serialization; checkpoints store the hash to detect
//! config/checkpoint mismatches.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::PathBuf;

/// World-model flavor and exploration signal used by a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Object-centric world model with object-latent entropy exploration.
    Focus,
    /// Monolithic decoder, task-reward-driven collection (no intrinsic reward).
    DreamerMonolithic,
    /// Monolithic decoder with full-latent entropy exploration.
    AptBaseline,
    /// Uniform random actions, no learning; metrics-only baseline.
    Random,
}

impl Method {
    pub fn uses_object_decoder(&self) -> bool {
        matches!(self, Method::Focus)
    }

    pub fn uses_intrinsic_reward(&self) -> bool {
        matches!(self, Method::Focus | Method::AptBaseline)
    }

    /// Config-file spelling, also used in artifact paths and tables.
    pub fn name(&self) -> &'static str {
        match self {
            Method::Focus => "focus",
            Method::DreamerMonolithic => "dreamer-monolithic",
            Method::AptBaseline => "apt-baseline",
            Method::Random => "random",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    /// Reward-free collection driven by intrinsic (or task-predicted) reward.
    Explore,
    /// Fine-tune task heads on environment reward from a source checkpoint.
    Adapt,
    /// Train on environment reward from scratch.
    DenseTask,
}

impl Stage {
    /// Config-file spelling, also used in artifact paths and tables.
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Explore => "explore",
            Stage::Adapt => "adapt",
            Stage::DenseTask => "dense-task",
        }
    }
}

/// Object geometry and behavior in the scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectKind {
    /// Free square: pushed on contact, carried while grasped.
    Block,
    /// Fixed base, rotates when pushed tangentially at the handle.
    Faucet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectSpec {
    /// 1-based object id; 0 is reserved for the background slot.
    pub id: usize,
    pub kind: ObjectKind,
    /// Rendered fill color.
    pub color: [u8; 3],
    /// Half side length of the square, in workspace units.
    pub half_extent: f64,
    /// Initial pose (x, y, angle).
    pub pose: (f64, f64, f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    /// Rendered image side length (square, power of two >= 8).
    pub image_size: usize,
    /// Append a depth channel (normalized layer index) to the image.
    pub depth_channel: bool,
    /// Steps per episode.
    pub episode_len: usize,
    /// Translation per unit action component.
    pub step_size: f64,
    /// Contact and grasp radius as a multiple of an object's half-extent.
    pub contact_scale: f64,
    /// Gripper spawn position.
    pub gripper_start: (f64, f64),
    pub objects: Vec<ObjectSpec>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_size: 64,
            depth_channel: false,
            episode_len: 200,
            step_size: 0.05,
            contact_scale: 1.5,
            gripper_start: (-0.5, -0.5),
            objects: vec![ObjectSpec {
                id: 1,
                kind: ObjectKind::Block,
                color: [220, 60, 50],
                half_extent: 0.12,
                pose: (0.0, 0.0, 0.0),
            }],
        }
    }
}

/// Proprio layout: gripper (x, y), grip flag, applied pose delta (dx, dy).
pub const PROPRIO_DIM: usize = 5;

/// Action layout: gripper velocity (dx, dy) and a grip toggle channel.
pub const ACTION_DIM: usize = 3;

impl SceneConfig {
    /// Channels in the rendered observation.
    pub fn channels(&self) -> usize {
        if self.depth_channel {
            4
        } else {
            3
        }
    }

    /// Number of scene objects (excluding the background slot).
    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    /// Number of decoder slots: background plus one per object.
    pub fn num_slots(&self) -> usize {
        self.objects.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.image_size >= 8 && self.image_size.is_power_of_two()) {
            return Err(Error::config("image_size must be a power of two >= 8"));
        }
        if self.episode_len == 0 {
            return Err(Error::config("episode_len must be positive"));
        }
        if !(self.step_size > 0.0 && self.step_size <= 1.0) {
            return Err(Error::config("step_size must be in (0, 1]"));
        }
        if self.contact_scale <= 0.0 {
            return Err(Error::config("contact_scale must be positive"));
        }
        for (i, obj) in self.objects.iter().enumerate() {
            if obj.id != i + 1 {
                return Err(Error::config(format!(
                    "object ids must be contiguous starting at 1, got {} at position {}",
                    obj.id, i
                )));
            }
            if obj.half_extent <= 0.0 || obj.half_extent >= 1.0 {
                return Err(Error::config("half_extent must be in (0, 1)"));
            }
            let (x, y, _) = obj.pose;
            if x.abs() > 1.0 || y.abs() > 1.0 {
                return Err(Error::config(format!("object {} spawns outside the workspace", obj.id)));
            }
        }
        // reject overlapping initial object poses
        for a in 0..self.objects.len() {
            for b in (a + 1)..self.objects.len() {
                let oa = &self.objects[a];
                let ob = &self.objects[b];
                let dx = oa.pose.0 - ob.pose.0;
                let dy = oa.pose.1 - ob.pose.1;
                let min_sep = oa.half_extent + ob.half_extent;
                if dx.hypot(dy) < min_sep {
                    return Err(Error::config(format!(
                        "objects {} and {} overlap at their initial poses",
                        oa.id, ob.id
                    )));
                }
            }
        }
        let (gx, gy) = self.gripper_start;
        if gx.abs() > 1.0 || gy.abs() > 1.0 {
            return Err(Error::config("gripper_start outside the workspace"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    PushSparse,
    PushDense,
    LiftSparse,
    LiftDense,
    TurnSparse,
    TurnDense,
}

/// Push direction in the planar workspace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// +x
    Right,
    /// -x
    Left,
    /// +y
    Far,
    /// -y
    Close,
}

impl Direction {
    pub fn unit(&self) -> (f64, f64) {
        match self {
            Direction::Right => (1.0, 0.0),
            Direction::Left => (-1.0, 0.0),
            Direction::Far => (0.0, 1.0),
            Direction::Close => (0.0, -1.0),
        }
    }

    pub const ALL: [Direction; 4] = [
        Direction::Right,
        Direction::Left,
        Direction::Far,
        Direction::Close,
    ];
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Target object id (1-based).
    pub object_id: usize,
    /// Push direction for push tasks.
    pub direction: Direction,
    /// Minimum absolute rotation for turn tasks (radians).
    pub turn_threshold: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            kind: TaskKind::PushSparse,
            object_id: 1,
            direction: Direction::Right,
            turn_threshold: std::f64::consts::FRAC_PI_2,
        }
    }
}

/// Directional placement bands, in displacement-from-spawn units.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AreasConfig {
    /// Lower edge of the right/left/far/close bands.
    pub band_min: f64,
    /// Upper edge of the right/left/far/close bands.
    pub band_max: f64,
    /// Minimum displacement for the grasped "up" placement.
    pub up_min: f64,
}

impl Default for AreasConfig {
    fn default() -> Self {
        AreasConfig {
            band_min: 0.25,
            band_max: 0.4,
            up_min: 0.05,
        }
    }
}

impl AreasConfig {
    /// Wider-band preset mirroring the alternative benchmark geometry.
    pub fn wide() -> Self {
        AreasConfig {
            band_min: 0.4,
            band_max: 0.5,
            up_min: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.band_min && self.band_min < self.band_max) {
            return Err(Error::config("placement band requires 0 < band_min < band_max"));
        }
        if self.up_min <= 0.0 {
            return Err(Error::config("up_min must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Deterministic recurrent state width.
    pub deter: usize,
    /// Number of categorical factors in the stochastic state.
    pub factors: usize,
    /// Classes per categorical factor.
    pub classes: usize,
    /// Object latent width.
    pub object_latent: usize,
    /// Object latent extractor hidden widths.
    pub extractor_hidden: Vec<usize>,
    /// Image embedding width from the CNN encoder.
    pub image_feature: usize,
    /// Proprio embedding width from the MLP encoder.
    pub proprio_feature: usize,
    /// Proprio encoder / decoder / reward head hidden widths.
    pub mlp_hidden: Vec<usize>,
    /// CNN encoder depth factor.
    pub encoder_depth: usize,
    /// Object decoder depth factor.
    pub object_decoder_depth: usize,
    /// Monolithic decoder depth factor (pre capacity matching).
    pub monolithic_decoder_depth: usize,
    /// Match the monolithic decoder's parameter count to the object path
    /// within this relative tolerance by scanning depth factors; 0 disables.
    pub capacity_match_tolerance: f64,
    /// KL balancing weight on the prior-training term.
    pub kl_balance: f64,
    /// Free nats for the dynamics KL.
    pub free_bits: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            deter: 200,
            factors: 32,
            classes: 32,
            object_latent: 128,
            extractor_hidden: vec![512, 512, 512],
            image_feature: 64,
            proprio_feature: 16,
            mlp_hidden: vec![400, 400, 400, 400],
            encoder_depth: 48,
            object_decoder_depth: 72,
            monolithic_decoder_depth: 48,
            capacity_match_tolerance: 0.1,
            kl_balance: 0.8,
            free_bits: 1.0,
        }
    }
}

impl ModelConfig {
    /// Width of the full latent state (h plus flattened categorical sample).
    pub fn state_dim(&self) -> usize {
        self.deter + self.factors * self.classes
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("deter", self.deter),
            ("factors", self.factors),
            ("classes", self.classes),
            ("object_latent", self.object_latent),
            ("image_feature", self.image_feature),
            ("proprio_feature", self.proprio_feature),
            ("encoder_depth", self.encoder_depth),
            ("object_decoder_depth", self.object_decoder_depth),
            ("monolithic_decoder_depth", self.monolithic_decoder_depth),
        ] {
            if v == 0 {
                return Err(Error::config(format!("model.{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.kl_balance) {
            return Err(Error::config("kl_balance must be in [0, 1]"));
        }
        if self.free_bits < 0.0 {
            return Err(Error::config("free_bits must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExploreConfig {
    /// Neighbor count for the particle entropy estimator.
    pub k: usize,
    /// Additive epsilon inside the log distance.
    pub epsilon: f64,
    /// Include the background slot in the object entropy sum.
    pub include_background: bool,
    /// Standardize intrinsic rewards by running mean/std before actor use.
    pub standardize: bool,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        ExploreConfig {
            k: 12,
            epsilon: 1e-3,
            include_background: false,
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BehaviorConfig {
    /// Imagination horizon.
    pub horizon: usize,
    pub gamma: f64,
    pub lambda: f64,
    /// Actor entropy bonus coefficient.
    pub entropy_coef: f64,
    /// Minimum actor standard deviation.
    pub min_std: f64,
    /// Actor and critic hidden widths.
    pub hidden: Vec<usize>,
    /// Hard target-critic update period (in behavior updates).
    pub target_update_every: usize,
    /// Gaussian collection-noise sigma at the start of a stage.
    pub noise_start: f64,
    /// Collection-noise sigma at the end of the stage budget.
    pub noise_end: f64,
    /// Imagination start states per behavior update; 0 uses every posterior
    /// state in the batch.
    pub imagine_starts: usize,
}

impl Default for BehaviorConfig {
    fn default() -> Self {
        BehaviorConfig {
            horizon: 15,
            gamma: 0.99,
            lambda: 0.95,
            entropy_coef: 3e-4,
            min_std: 0.1,
            hidden: vec![400, 400, 400, 400],
            target_update_every: 100,
            noise_start: 0.3,
            noise_end: 0.1,
            imagine_starts: 0,
        }
    }
}

impl BehaviorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::config("behavior.horizon must be positive"));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("gamma and lambda must be in [0, 1]"));
        }
        if self.min_std <= 0.0 {
            return Err(Error::config("behavior.min_std must be positive"));
        }
        if self.target_update_every == 0 {
            return Err(Error::config("behavior.target_update_every must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Sequences per batch.
    pub batch_size: usize,
    /// Steps per sequence window.
    pub seq_len: usize,
    pub learning_rate: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Environment steps per gradient step.
    pub train_every: usize,
    /// Replay capacity in environment steps.
    pub buffer_capacity: usize,
    /// Random-action steps collected before training starts.
    pub prefill_steps: usize,
    /// Checkpoint period in environment steps; 0 saves only at the end.
    pub checkpoint_every: usize,
    /// Emit a curves.jsonl record every this many gradient steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            seq_len: 32,
            learning_rate: 3e-4,
            grad_clip: 100.0,
            train_every: 5,
            buffer_capacity: 100_000,
            prefill_steps: 1000,
            checkpoint_every: 0,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::config("batch_size and seq_len must be positive"));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.train_every == 0 {
            return Err(Error::config("train_every must be positive"));
        }
        if self.buffer_capacity < self.seq_len {
            return Err(Error::config("buffer_capacity must hold at least one window"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub method: Method,
    pub stage: Stage,
    /// Seeds to run; the CLI can override with a single seed.
    pub seeds: Vec<u64>,
    /// Environment-step budget for the stage.
    pub budget_steps: usize,
    /// Exploration-stage checkpoint to fine-tune from (adapt stage only).
    pub source_checkpoint: Option<PathBuf>,
    pub scene: SceneConfig,
    pub task: TaskConfig,
    pub areas: AreasConfig,
    pub model: ModelConfig,
    pub explore: ExploreConfig,
    pub behavior: BehaviorConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: Method::Focus,
            stage: Stage::Explore,
            seeds: vec![0],
            budget_steps: 100_000,
            source_checkpoint: None,
            scene: SceneConfig::default(),
            task: TaskConfig::default(),
            areas: AreasConfig::default(),
            model: ModelConfig::default(),
            explore: ExploreConfig::default(),
            behavior: BehaviorConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Small, fast configuration for tests and smoke runs: 16 x 16 images
    /// and a compact model that trains in seconds per hundred steps.
    pub fn smoke() -> Self {
        let mut cfg = ExperimentConfig::default();
        cfg.budget_steps = 2000;
        cfg.scene.image_size = 16;
        cfg.scene.episode_len = 100;
        cfg.model = ModelConfig {
            deter: 48,
            factors: 6,
            classes: 6,
            object_latent: 24,
            extractor_hidden: vec![48],
            image_feature: 32,
            proprio_feature: 8,
            mlp_hidden: vec![48, 48],
            encoder_depth: 8,
            object_decoder_depth: 10,
            monolithic_decoder_depth: 8,
            capacity_match_tolerance: 0.1,
            kl_balance: 0.8,
            free_bits: 1.0,
        };
        cfg.explore.k = 8;
        cfg.behavior.horizon = 8;
        cfg.behavior.hidden = vec![48, 48];
        cfg.behavior.imagine_starts = 48;
        cfg.train.batch_size = 8;
        cfg.train.seq_len = 12;
        cfg.train.train_every = 25;
        cfg.train.prefill_steps = 200;
        cfg.train.buffer_capacity = 20_000;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.areas.validate()?;
        self.model.validate()?;
        self.behavior.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if self.budget_steps == 0 && self.stage != Stage::Adapt {
            return Err(Error::config("budget_steps must be positive for this stage"));
        }
        if self.stage == Stage::Adapt && self.source_checkpoint.is_none() {
            return Err(Error::config("adapt stage requires source_checkpoint"));
        }
        if self.task.object_id == 0 || self.task.object_id > self.scene.objects.len() {
            return Err(Error::config(format!(
                "task.object_id {} does not name a scene object",
                self.task.object_id
            )));
        }
        let target = &self.scene.objects[self.task.object_id - 1];
        let turn_task = matches!(self.task.kind, TaskKind::TurnSparse | TaskKind::TurnDense);
        if turn_task && target.kind != ObjectKind::Faucet {
            return Err(Error::config("turn tasks require a faucet target"));
        }
        if !turn_task && target.kind == ObjectKind::Faucet {
            return Err(Error::config("push/lift tasks require a block target"));
        }
        if self.explore.k == 0 {
            return Err(Error::config("explore.k must be positive"));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Serde(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(format!("config serialize: {e}")))
    }

    /// Stable fingerprint of the full configuration.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config is always serializable");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Scene with one movable red block.
pub fn one_block_scene(image_size: usize) -> SceneConfig {
    SceneConfig {
        image_size,
        ..SceneConfig::default()
    }
}

/// Scene with a red and a green movable block.
pub fn two_block_scene(image_size: usize) -> SceneConfig {
    let mut scene = SceneConfig {
        image_size,
        ..SceneConfig::default()
    };
    scene.objects = vec![
        ObjectSpec {
            id: 1,
            kind: ObjectKind::Block,
            color: [220, 60, 50],
            half_extent: 0.12,
            pose: (-0.3, 0.1, 0.0),
        },
        ObjectSpec {
            id: 2,
            kind: ObjectKind::Block,
            color: [60, 200, 80],
            half_extent: 0.12,
            pose: (0.35, -0.1, 0.0),
        },
    ];
    scene
}

/// Scene with a single fixed-base faucet.
pub fn faucet_scene(image_size: usize) -> SceneConfig {
    let mut scene = SceneConfig {
        image_size,
        ..SceneConfig::default()
    };
    scene.objects = vec![ObjectSpec {
        id: 1,
        kind: ObjectKind::Faucet,
        color: [80, 120, 230],
        half_extent: 0.15,
        pose: (0.0, 0.2, 0.0),
    }];
    scene
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ExperimentConfig::default().validate().unwrap();
        ExperimentConfig::smoke().validate().unwrap();
    }

    #[test]
    fn toml_round_trip_preserves_hash() {
        let cfg = ExperimentConfig::smoke();
        let text = cfg.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg.config_hash(), back.config_hash());
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
            method = "apt-baseline"
            stage = "explore"
            [train]
            batch_size = 4
            "#,
        )
        .unwrap();
        assert_eq!(cfg.method, Method::AptBaseline);
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.train.seq_len, TrainConfig::default().seq_len);
        assert_eq!(cfg.model.deter, 200);
    }

    #[test]
    fn adapt_requires_source_checkpoint() {
        let mut cfg = ExperimentConfig::smoke();
        cfg.stage = Stage::Adapt;
        cfg.source_checkpoint = None;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.source_checkpoint = Some(PathBuf::from("ckpt.bin"));
        cfg.validate().unwrap();
    }

    #[test]
    fn overlapping_objects_rejected() {
        let mut scene = two_block_scene(16);
        scene.objects[1].pose = (-0.25, 0.1, 0.0); // 0.05 apart, extents sum 0.24
        let err = scene.validate().unwrap_err();
        assert!(matches!(err, Error::Config(_)), "expected config error, got {err:?}");
    }

    #[test]
    fn turn_task_requires_faucet() {
        let mut cfg = ExperimentConfig::smoke();
        cfg.task.kind = TaskKind::TurnSparse;
        assert!(cfg.validate().is_err());
        cfg.scene = faucet_scene(16);
        cfg.validate().unwrap();
    }

    #[test]
    fn hash_changes_with_content() {
        let a = ExperimentConfig::smoke();
        let mut b = a.clone();
        b.train.learning_rate = 1e-3;
        assert_ne!(a.config_hash(), b.config_hash());
    }
}
