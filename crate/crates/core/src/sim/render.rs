//! Flat-shaded rasterizer for the planar scene.
//!
//! Pixels are sampled at their centers; objects are painted in id order with
//! the gripper on top. Every pixel gets exactly one mask label: 0 for
//! background (and the gripper, which belongs to the scene slot), i for
//! object i. All arithmetic is integer or f64 with fixed iteration order, so
//! renders are bit-exact across runs.

use super::{SimState, GRIPPER_HALF_EXTENT, HANDLE_SCALE};
use crate::config::{ObjectKind, SceneConfig};
use ndarray::{Array2, Array3};

struct Canvas {
    img: Array3<u8>,
    mask: Array2<u8>,
    /// Draw layer per pixel: 0 background, i object i, N+1 gripper.
    layer: Array2<u8>,
    n: usize,
}

impl Canvas {
    fn world_x(&self, col: usize) -> f64 {
        -1.0 + 2.0 * (col as f64 + 0.5) / self.n as f64
    }

    fn world_y(&self, row: usize) -> f64 {
        1.0 - 2.0 * (row as f64 + 0.5) / self.n as f64
    }

    fn paint(&mut self, row: usize, col: usize, color: [u8; 3], label: u8, layer: u8) {
        for ch in 0..3 {
            self.img[(ch, row, col)] = color[ch];
        }
        self.mask[(row, col)] = label;
        self.layer[(row, col)] = layer;
    }
}

/// Point-in-rotated-rect test in the object frame.
fn in_rect(dx: f64, dy: f64, theta: f64, u_min: f64, u_max: f64, v_half: f64) -> bool {
    let (s, c) = theta.sin_cos();
    let u = dx * c + dy * s;
    let v = -dx * s + dy * c;
    u >= u_min && u <= u_max && v.abs() <= v_half
}

/// Render the scene to an image (C, H, W) and a segmentation mask (H, W).
pub fn render_scene(scene: &SceneConfig, state: &SimState) -> (Array3<u8>, Array2<u8>) {
    let n = scene.image_size;
    let channels = scene.channels();
    let mut canvas = Canvas {
        img: Array3::zeros((channels, n, n)),
        mask: Array2::zeros((n, n)),
        layer: Array2::zeros((n, n)),
        n,
    };

    // Background: vertical gradient with a checker tint, integer math only.
    let tile = (n / 8).max(1);
    for row in 0..n {
        let grad = (40 * row / n) as u8;
        for col in 0..n {
            let check = if ((row / tile) + (col / tile)) % 2 == 0 { 12u8 } else { 0 };
            canvas.img[(0, row, col)] = 30 + grad + check;
            canvas.img[(1, row, col)] = 45 + grad + check;
            canvas.img[(2, row, col)] = 70 + grad / 2 + check;
        }
    }

    // Objects in id order; later ids paint over earlier ones.
    for (i, obj) in scene.objects.iter().enumerate() {
        let (ox, oy, theta) = state.poses[i];
        let he = obj.half_extent;
        let label = (i + 1) as u8;
        for row in 0..n {
            for col in 0..n {
                let dx = canvas.world_x(col) - ox;
                let dy = canvas.world_y(row) - oy;
                let hit = match obj.kind {
                    ObjectKind::Block => in_rect(dx, dy, theta, -he, he, he),
                    ObjectKind::Faucet => {
                        // Fixed base plus a lever handle that shows the angle.
                        in_rect(dx, dy, theta, -0.6 * he, 0.6 * he, 0.6 * he)
                            || in_rect(dx, dy, theta, 0.0, HANDLE_SCALE * he, 0.3 * he)
                    }
                };
                if hit {
                    canvas.paint(row, col, obj.color, label, label);
                }
            }
        }
    }

    // Gripper: a small block snapped to the nearest pixel so it stays visible
    // at low resolutions. Mask label stays 0 (scene slot); the color encodes
    // the grip state.
    let gripper_layer = (scene.objects.len() + 1) as u8;
    let color = if state.grip_closed {
        [250, 120, 40]
    } else {
        [240, 230, 60]
    };
    let (gx, gy) = state.gripper;
    let c0 = (((gx + 1.0) / 2.0 * n as f64 - 0.5).round() as isize).clamp(0, n as isize - 1);
    let r0 = (((1.0 - gy) / 2.0 * n as f64 - 0.5).round() as isize).clamp(0, n as isize - 1);
    let gpx = ((GRIPPER_HALF_EXTENT * n as f64 / 2.0).round() as isize).max(1);
    for row in (r0 - gpx).max(0)..=(r0 + gpx).min(n as isize - 1) {
        for col in (c0 - gpx).max(0)..=(c0 + gpx).min(n as isize - 1) {
            canvas.paint(row as usize, col as usize, color, 0, gripper_layer);
        }
    }

    // Optional depth channel: normalized draw-layer index, topmost = 255.
    if channels == 4 {
        let denom = (scene.objects.len() + 1) as u16;
        for row in 0..n {
            for col in 0..n {
                let l = canvas.layer[(row, col)] as u16;
                canvas.img[(3, row, col)] = (l * 255 / denom) as u8;
            }
        }
    }

    (canvas.img, canvas.mask)
}

/// Color table for mask PNG dumps: entry 0 is the background, entry i the
/// color of object i.
pub fn mask_palette(scene: &SceneConfig) -> Vec<[u8; 3]> {
    let mut palette = vec![[40, 40, 40]];
    palette.extend(scene.objects.iter().map(|o| o.color));
    palette
}
