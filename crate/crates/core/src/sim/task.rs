//! Task rewards over simulator states.
//!
//! Sparse variants pay 1.0 on every step the placement predicate holds (lift
//! additionally requires the object to be grasped). Dense variants are shaped
//! negative distances to the goal, bounded in [-1, 0].

use super::SimState;
use crate::config::{AreasConfig, TaskConfig, TaskKind};
use crate::metrics::wrap_angle;

pub fn task_reward(
    task: &TaskConfig,
    areas: &AreasConfig,
    spawn: &[(f64, f64, f64)],
    state: &SimState,
) -> f64 {
    let idx = task.object_id - 1;
    let (x, y, theta) = state.poses[idx];
    let (x0, y0, theta0) = spawn[idx];
    let grasped = state.grasped == Some(task.object_id);

    match task.kind {
        TaskKind::PushSparse => {
            let (ux, uy) = task.direction.unit();
            let d = (x - x0) * ux + (y - y0) * uy;
            if d >= areas.band_min && d <= areas.band_max {
                1.0
            } else {
                0.0
            }
        }
        TaskKind::PushDense => {
            let (ux, uy) = task.direction.unit();
            let mid = 0.5 * (areas.band_min + areas.band_max);
            let (goal_x, goal_y) = (x0 + ux * mid, y0 + uy * mid);
            -((x - goal_x).hypot(y - goal_y)).min(1.0)
        }
        TaskKind::LiftSparse => {
            if grasped && (y - y0) >= areas.up_min {
                1.0
            } else {
                0.0
            }
        }
        TaskKind::LiftDense => {
            let (gx, gy) = state.gripper;
            let reach = (gx - x).hypot(gy - y);
            let height_gap = (areas.up_min - (y - y0)).max(0.0);
            -(reach + height_gap).min(1.0)
        }
        TaskKind::TurnSparse => {
            if wrap_angle(theta - theta0).abs() >= task.turn_threshold {
                1.0
            } else {
                0.0
            }
        }
        TaskKind::TurnDense => {
            let gap = (task.turn_threshold - wrap_angle(theta - theta0).abs()).max(0.0);
            -gap.min(1.0)
        }
    }
}
