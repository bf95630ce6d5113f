//! Deterministic planar manipulation environment.
//!
//! A point gripper with a grip flag moves in the [-1, 1]^2 workspace among
//! square blocks (pushable, graspable) and fixed-base faucets (rotatable by
//! tangential pushes at the handle). Observations are small rendered images
//! with exact per-pixel segmentation masks. All arithmetic is f64 with fixed
//! iteration order, so identical (seed, action) sequences produce bit-exact
//! observation sequences.

mod render;
mod task;

pub use render::{mask_palette, render_scene};
pub use task::task_reward;

use crate::config::{AreasConfig, ObjectKind, SceneConfig, TaskConfig};
use crate::error::{Error, Result};
use ndarray::{Array2, Array3};

/// Length of a faucet handle relative to its half-extent.
pub const HANDLE_SCALE: f64 = 2.2;

/// Rendered half-extent of the gripper marker.
pub const GRIPPER_HALF_EXTENT: f64 = 0.06;

/// Full mutable state of the simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub gripper: (f64, f64),
    pub grip_closed: bool,
    /// Object poses (x, y, theta), indexed by object id - 1.
    pub poses: Vec<(f64, f64, f64)>,
    /// Id of the grasped object, if any.
    pub grasped: Option<usize>,
    pub step: usize,
}

/// Per-step ground-truth info alongside the rendered observation.
#[derive(Debug, Clone)]
pub struct StepInfo {
    /// Contact flag per object (indexed by id - 1).
    pub contacts: Vec<bool>,
    pub poses: Vec<(f64, f64, f64)>,
    pub grasped: Option<usize>,
    pub gripper: (f64, f64),
}

/// Rendered observation. The image is stored channel-first as quantized u8
/// (the renderer emits exactly these values), so replaying stored frames is
/// lossless; [`Observation::image_f64`] converts to reals in [0, 1].
#[derive(Debug, Clone)]
pub struct Observation {
    /// (C, H, W) with C = 3 (RGB) or 4 (RGB + depth layer index).
    pub image: Array3<u8>,
    /// (H, W) labels in 0..=N; 0 is background (including the gripper).
    pub segmask: Array2<u8>,
    /// (x, y, grip flag, applied dx, applied dy).
    pub proprio: Vec<f64>,
    pub info: StepInfo,
}

impl Observation {
    pub fn image_f64(&self) -> Array3<f64> {
        self.image.mapv(|v| v as f64 / 255.0)
    }
}

fn clamp_unit(v: f64) -> f64 {
    v.clamp(-1.0, 1.0)
}

/// The environment. `reset` must be called before `step`; stepping a finished
/// episode is a protocol error.
pub struct Env {
    scene: SceneConfig,
    task: TaskConfig,
    areas: AreasConfig,
    state: SimState,
    spawn_poses: Vec<(f64, f64, f64)>,
    started: bool,
    done: bool,
}

impl Env {
    pub fn new(scene: SceneConfig, task: TaskConfig, areas: AreasConfig) -> Result<Env> {
        scene.validate()?;
        areas.validate()?;
        if task.object_id == 0 || task.object_id > scene.objects.len() {
            return Err(Error::config(format!(
                "task.object_id {} does not name a scene object",
                task.object_id
            )));
        }
        let spawn_poses: Vec<_> = scene.objects.iter().map(|o| o.pose).collect();
        let state = SimState {
            gripper: scene.gripper_start,
            grip_closed: false,
            poses: spawn_poses.clone(),
            grasped: None,
            step: 0,
        };
        Ok(Env {
            scene,
            task,
            areas,
            state,
            spawn_poses,
            started: false,
            done: false,
        })
    }

    pub fn scene(&self) -> &SceneConfig {
        &self.scene
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    /// Initial object poses; the displacement origin for metrics and rewards.
    pub fn spawn_poses(&self) -> &[(f64, f64, f64)] {
        &self.spawn_poses
    }

    pub fn episode_len(&self) -> usize {
        self.scene.episode_len
    }

    /// Reset to the configured initial poses. The scene layout is fixed, so
    /// any seed yields the same state; the argument exists to keep the
    /// interface stable if randomized spawns are ever configured.
    pub fn reset(&mut self, _seed: u64) -> Observation {
        self.state = SimState {
            gripper: self.scene.gripper_start,
            grip_closed: false,
            poses: self.spawn_poses.clone(),
            grasped: None,
            step: 0,
        };
        self.started = true;
        self.done = false;
        self.observe((0.0, 0.0))
    }

    /// Advance one step. Returns (observation, task reward, done, .) with the
    /// contact info embedded in the observation.
    pub fn step(&mut self, action: [f64; 3]) -> Result<(Observation, f64, bool)> {
        if !self.started {
            return Err(Error::protocol("step before reset"));
        }
        if self.done {
            return Err(Error::protocol("step after episode end"));
        }
        let dx = clamp_unit(action[0]) * self.scene.step_size;
        let dy = clamp_unit(action[1]) * self.scene.step_size;
        let grip = clamp_unit(action[2]) > 0.0;

        // Grip transitions happen before motion so a grasp-and-move action
        // sequence carries the object on the move step.
        self.state.grip_closed = grip;
        if !grip {
            self.state.grasped = None;
        } else if self.state.grasped.is_none() {
            self.state.grasped = self.nearest_graspable();
        }

        let applied = self.apply_motion(dx, dy);
        self.state.step += 1;
        self.done = self.state.step >= self.scene.episode_len;

        let reward = task_reward(
            &self.task,
            &self.areas,
            &self.spawn_poses,
            &self.state,
        );
        Ok((self.observe(applied), reward, self.done))
    }

    /// Task reward of the current state; exposed for evaluation.
    pub fn current_task_reward(&self) -> f64 {
        task_reward(&self.task, &self.areas, &self.spawn_poses, &self.state)
    }

    fn contact_radius(&self, obj_idx: usize) -> f64 {
        self.scene.contact_scale * self.scene.objects[obj_idx].half_extent
    }

    /// The point the gripper interacts with: block center, or faucet handle tip.
    fn interaction_point(&self, obj_idx: usize) -> (f64, f64) {
        let (x, y, theta) = self.state.poses[obj_idx];
        match self.scene.objects[obj_idx].kind {
            ObjectKind::Block => (x, y),
            ObjectKind::Faucet => {
                let r = HANDLE_SCALE * self.scene.objects[obj_idx].half_extent;
                (x + r * theta.cos(), y + r * theta.sin())
            }
        }
    }

    fn nearest_graspable(&self) -> Option<usize> {
        let (gx, gy) = self.state.gripper;
        let mut best: Option<(f64, usize)> = None;
        for (i, obj) in self.scene.objects.iter().enumerate() {
            if obj.kind != ObjectKind::Block {
                continue;
            }
            let (px, py) = self.interaction_point(i);
            let d = (gx - px).hypot(gy - py);
            if d <= self.contact_radius(i) {
                let better = match best {
                    None => true,
                    Some((bd, _)) => d < bd,
                };
                if better {
                    best = Some((d, i));
                }
            }
        }
        best.map(|(_, i)| i + 1)
    }

    /// Move the gripper (and whatever it carries or pushes) by the desired
    /// delta, clamped to the workspace. Returns the delta actually applied to
    /// the gripper.
    fn apply_motion(&mut self, dx: f64, dy: f64) -> (f64, f64) {
        let (gx, gy) = self.state.gripper;
        let applied = if let Some(id) = self.state.grasped {
            let idx = id - 1;
            let (ox, oy, _) = self.state.poses[idx];
            // Joint clamp: the same delta must keep both bodies inside, so
            // the grasped object's delta equals the gripper's exactly.
            let ax = clamp_delta(dx, gx.min(ox), gx.max(ox));
            let ay = clamp_delta(dy, gy.min(oy), gy.max(oy));
            self.state.gripper = (gx + ax, gy + ay);
            let p = &mut self.state.poses[idx];
            p.0 += ax;
            p.1 += ay;
            (ax, ay)
        } else {
            let ax = clamp_delta(dx, gx, gx);
            let ay = clamp_delta(dy, gy, gy);
            self.state.gripper = (gx + ax, gy + ay);
            self.resolve_pushes(ax, ay);
            (ax, ay)
        };
        applied
    }

    /// Push non-grasped objects out of the gripper's contact disc; rotate
    /// faucets by the tangential component of the push at the handle.
    fn resolve_pushes(&mut self, ax: f64, ay: f64) {
        let (gx, gy) = self.state.gripper;
        for i in 0..self.scene.objects.len() {
            let radius = self.contact_radius(i);
            match self.scene.objects[i].kind {
                ObjectKind::Block => {
                    let (ox, oy, theta) = self.state.poses[i];
                    let ddx = ox - gx;
                    let ddy = oy - gy;
                    let dist = ddx.hypot(ddy);
                    if dist >= radius {
                        continue;
                    }
                    // Push along gripper->object; if coincident, along the
                    // motion direction, falling back to +x.
                    let (ux, uy) = if dist > 1e-12 {
                        (ddx / dist, ddy / dist)
                    } else {
                        let m = ax.hypot(ay);
                        if m > 1e-12 {
                            (ax / m, ay / m)
                        } else {
                            (1.0, 0.0)
                        }
                    };
                    let nx = (gx + ux * radius).clamp(-1.0, 1.0);
                    let ny = (gy + uy * radius).clamp(-1.0, 1.0);
                    self.state.poses[i] = (nx, ny, theta);
                }
                ObjectKind::Faucet => {
                    let (hx, hy) = self.interaction_point(i);
                    if (gx - hx).hypot(gy - hy) > radius {
                        continue;
                    }
                    let (cx, cy, theta) = self.state.poses[i];
                    let r = HANDLE_SCALE * self.scene.objects[i].half_extent;
                    // Tangent at the handle; project the gripper motion on it.
                    let (tx, ty) = (-theta.sin(), theta.cos());
                    let dtheta = (ax * tx + ay * ty) / r;
                    self.state.poses[i] = (cx, cy, crate::metrics::wrap_angle(theta + dtheta));
                }
            }
        }
    }

    fn observe(&self, applied: (f64, f64)) -> Observation {
        let (gx, gy) = self.state.gripper;
        let contacts: Vec<bool> = (0..self.scene.objects.len())
            .map(|i| {
                let (px, py) = self.interaction_point(i);
                (gx - px).hypot(gy - py) <= self.contact_radius(i)
            })
            .collect();
        let (image, segmask) = render_scene(&self.scene, &self.state);
        Observation {
            image,
            segmask,
            proprio: vec![
                gx,
                gy,
                if self.state.grip_closed { 1.0 } else { 0.0 },
                applied.0,
                applied.1,
            ],
            info: StepInfo {
                contacts,
                poses: self.state.poses.clone(),
                grasped: self.state.grasped,
                gripper: self.state.gripper,
            },
        }
    }
}

/// Largest |delta| <= desired that keeps every coordinate in [lo_ref, hi_ref]
/// inside [-1, 1] after the move. `lo_ref`/`hi_ref` are the extreme
/// coordinates among the moved bodies.
fn clamp_delta(desired: f64, lo_ref: f64, hi_ref: f64) -> f64 {
    desired.clamp(-1.0 - lo_ref, 1.0 - hi_ref)
}

#[cfg(test)]
mod tests;
