//! Exploration metrics over episode logs: contact fraction, cumulative
//! positional/angular displacement, and edge-triggered placement counts in
//! directional workspace bands.

use crate::config::{AreasConfig, Direction};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// One environment step as seen by the metrics: poses after the step,
/// per-object contact flags, and the grasped object id.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub poses: Vec<(f64, f64, f64)>,
    pub contacts: Vec<bool>,
    pub grasped: Option<usize>,
}

/// Trajectory of object poses and interaction flags over one episode.
#[derive(Debug, Clone, Default)]
pub struct EpisodeLog {
    /// Poses at reset; the displacement origin.
    pub initial_poses: Vec<(f64, f64, f64)>,
    pub steps: Vec<StepRecord>,
}

impl EpisodeLog {
    pub fn new(initial_poses: Vec<(f64, f64, f64)>) -> Self {
        EpisodeLog {
            initial_poses,
            steps: Vec::new(),
        }
    }

    pub fn push(&mut self, poses: Vec<(f64, f64, f64)>, contacts: Vec<bool>, grasped: Option<usize>) {
        self.steps.push(StepRecord {
            poses,
            contacts,
            grasped,
        });
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    fn check_nonempty(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::contract("metrics require a non-empty episode log"));
        }
        for (t, s) in self.steps.iter().enumerate() {
            if s.poses.len() != self.initial_poses.len() || s.contacts.len() != self.initial_poses.len() {
                return Err(Error::contract(format!(
                    "episode log step {t} is misaligned with the object count"
                )));
            }
        }
        Ok(())
    }
}

/// Wrap an angle to (-pi, pi].
pub fn wrap_angle(x: f64) -> f64 {
    use std::f64::consts::PI;
    x - 2.0 * PI * ((x - PI) / (2.0 * PI)).ceil()
}

/// Fraction of steps with at least one gripper-object contact.
pub fn contact_fraction(log: &EpisodeLog) -> Result<f64> {
    log.check_nonempty()?;
    let hits = log
        .steps
        .iter()
        .filter(|s| s.contacts.iter().any(|&c| c))
        .count();
    Ok(hits as f64 / log.steps.len() as f64)
}

/// Cumulative (positional, angular) displacement summed over all objects and
/// steps; angle deltas are wrapped to (-pi, pi] before the absolute value.
pub fn displacement(log: &EpisodeLog) -> Result<(f64, f64)> {
    log.check_nonempty()?;
    let mut pos = 0.0;
    let mut ang = 0.0;
    let mut prev: &[(f64, f64, f64)] = &log.initial_poses;
    for step in &log.steps {
        for (p, q) in prev.iter().zip(step.poses.iter()) {
            pos += (q.0 - p.0).hypot(q.1 - p.1);
            ang += wrap_angle(q.2 - p.2).abs();
        }
        prev = &step.poses;
    }
    Ok((pos, ang))
}

/// Placement event counts per direction, summed over objects.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementCounts {
    pub up: usize,
    pub far: usize,
    pub close: usize,
    pub left: usize,
    pub right: usize,
}

impl PlacementCounts {
    pub fn total(&self) -> usize {
        self.up + self.far + self.close + self.left + self.right
    }
}

fn direction_field<'a>(counts: &'a mut PlacementCounts, dir: Direction) -> &'a mut usize {
    match dir {
        Direction::Right => &mut counts.right,
        Direction::Left => &mut counts.left,
        Direction::Far => &mut counts.far,
        Direction::Close => &mut counts.close,
    }
}

/// Count rising edges of "object displacement from its spawn lies in the
/// direction's band". The grasped-only `up` placement triggers on
/// displacement past `up_min` along +y while the object is held.
pub fn placement_counts(log: &EpisodeLog, areas: &AreasConfig) -> Result<PlacementCounts> {
    log.check_nonempty()?;
    areas.validate()?;
    let n = log.initial_poses.len();
    let mut counts = PlacementCounts::default();
    let mut inside = vec![[false; 4]; n];
    let mut inside_up = vec![false; n];
    for step in &log.steps {
        for obj in 0..n {
            let dx = step.poses[obj].0 - log.initial_poses[obj].0;
            let dy = step.poses[obj].1 - log.initial_poses[obj].1;
            for (d, dir) in Direction::ALL.iter().enumerate() {
                let (ux, uy) = dir.unit();
                let proj = dx * ux + dy * uy;
                let now = proj >= areas.band_min && proj <= areas.band_max;
                if now && !inside[obj][d] {
                    *direction_field(&mut counts, *dir) += 1;
                }
                inside[obj][d] = now;
            }
            let held = step.grasped == Some(obj + 1);
            let up_now = held && dy >= areas.up_min;
            if up_now && !inside_up[obj] {
                counts.up += 1;
            }
            inside_up[obj] = up_now;
        }
    }
    Ok(counts)
}

/// One metrics.csv row, emitted per episode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    /// Cumulative environment steps at the end of the episode.
    pub step: u64,
    pub contact_frac: f64,
    pub pos_disp: f64,
    pub ang_disp: f64,
    pub up: usize,
    pub far: usize,
    pub close: usize,
    pub left: usize,
    pub right: usize,
}

impl MetricsRow {
    pub fn from_log(step: u64, log: &EpisodeLog, areas: &AreasConfig) -> Result<MetricsRow> {
        let contact_frac = contact_fraction(log)?;
        let (pos_disp, ang_disp) = displacement(log)?;
        let p = placement_counts(log, areas)?;
        Ok(MetricsRow {
            step,
            contact_frac,
            pos_disp,
            ang_disp,
            up: p.up,
            far: p.far,
            close: p.close,
            left: p.left,
            right: p.right,
        })
    }
}
