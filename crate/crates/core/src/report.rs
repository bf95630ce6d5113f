//! Run artifacts beyond raw logs: PNG renders of frames, reconstructions and
//! segmentation masks, per-run summary rows aggregated over the final fifth
//! of episodes, and cross-run summary tables.

use crate::config::{Method, SceneConfig, Stage};
use crate::error::{Error, Result};
use crate::metrics::MetricsRow;
use crate::replay::Episode;
use crate::trainer::{read_curves, read_metrics, CurveRecord};
use crate::wm::eval::ReconReport;
use crate::wm::{SampleMode, WorldModel};
use crate::tensor::Tensor;
use ndarray::ArrayD;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

/// Sidecar describing one run directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub seed: u64,
    pub method: Method,
    pub stage: Stage,
    pub config_hash: String,
}

pub fn write_run_meta(dir: &Path, meta: &RunMeta) -> Result<()> {
    let text = serde_json::to_string_pretty(meta).map_err(|e| Error::Serde(e.to_string()))?;
    std::fs::write(dir.join("run.json"), text)?;
    Ok(())
}

pub fn read_run_meta(dir: &Path) -> Result<RunMeta> {
    let text = std::fs::read_to_string(dir.join("run.json"))?;
    serde_json::from_str(&text).map_err(|e| Error::Serde(e.to_string()))
}

/// The trailing `frac` of a slice, never empty for non-empty input.
pub fn final_window<T>(xs: &[T], frac: f64) -> &[T] {
    if xs.is_empty() {
        return xs;
    }
    let keep = ((xs.len() as f64 * frac).ceil() as usize).clamp(1, xs.len());
    &xs[xs.len() - keep..]
}

/// One summary-table row: exploration and task statistics averaged over the
/// final fifth of a run's episodes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run: String,
    pub method: String,
    pub stage: String,
    pub seed: u64,
    pub env_steps: u64,
    pub episodes: usize,
    pub contact_frac: f64,
    pub pos_disp: f64,
    pub ang_disp: f64,
    /// Mean distinct-placement count per episode.
    pub placements: f64,
    pub episode_reward: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn summarize_run(dir: &Path) -> Result<SummaryRow> {
    let meta = read_run_meta(dir)?;
    let metrics = read_metrics(&dir.join("metrics.csv"))?;
    if metrics.is_empty() {
        return Err(Error::Load(format!(
            "{} has no finished episodes",
            dir.display()
        )));
    }
    let curves = read_curves(&dir.join("curves.jsonl")).unwrap_or_default();
    let rewards: Vec<f64> = curves
        .iter()
        .filter_map(|c| match c {
            CurveRecord::Episode { reward, .. } => Some(*reward),
            _ => None,
        })
        .collect();

    let tail = final_window(&metrics, 0.2);
    let reward_tail = final_window(&rewards, 0.2);
    let placements = |m: &MetricsRow| (m.up + m.far + m.close + m.left + m.right) as f64;
    Ok(SummaryRow {
        run: dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string()),
        method: meta.method.name().to_string(),
        stage: meta.stage.name().to_string(),
        seed: meta.seed,
        env_steps: metrics.last().map(|m| m.step).unwrap_or(0),
        episodes: metrics.len(),
        contact_frac: mean(tail.iter().map(|m| m.contact_frac)),
        pos_disp: mean(tail.iter().map(|m| m.pos_disp)),
        ang_disp: mean(tail.iter().map(|m| m.ang_disp)),
        placements: mean(tail.iter().map(placements)),
        episode_reward: mean(reward_tail.iter().copied()),
    })
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serde(e.to_string()))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::Serde(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Flatten (C, H, W) data in [0, 1] to row-major RGB bytes; extra channels
/// (depth) are dropped, values are clamped.
fn rgb_bytes(img: &ArrayD<f64>) -> Result<Vec<u8>> {
    let shape = img.shape();
    if shape.len() != 3 || shape[0] < 3 {
        return Err(Error::contract(format!(
            "expected (C>=3, H, W) image, got {shape:?}"
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = img[[c, y, x]].clamp(0.0, 1.0);
                data.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok(data)
}

/// Color a segmentation map: slot 0 is dark gray, object slots use their
/// scene colors, out-of-range slots white.
fn mask_bytes(labels: &[usize], scene: &SceneConfig) -> Vec<u8> {
    let mut data = Vec::with_capacity(labels.len() * 3);
    for &l in labels {
        let rgb = if l == 0 {
            [40, 40, 40]
        } else if let Some(obj) = scene.objects.get(l - 1) {
            obj.color
        } else {
            [255, 255, 255]
        };
        data.extend_from_slice(&rgb);
    }
    data
}

/// Write an RGB PNG from (C, H, W) data in [0, 1].
pub fn write_rgb_png(path: &Path, img: &ArrayD<f64>) -> Result<()> {
    let shape = img.shape().to_vec();
    let data = rgb_bytes(img)?;
    encode_png(path, shape[2] as u32, shape[1] as u32, &data)
}

/// Write a segmentation map as an RGB PNG.
pub fn write_mask_png(path: &Path, labels: &[usize], size: usize, scene: &SceneConfig) -> Result<()> {
    if labels.len() != size * size {
        return Err(Error::contract("label buffer does not cover the frame"));
    }
    let data = mask_bytes(labels, scene);
    encode_png(path, size as u32, size as u32, &data)
}

/// Stitch equally sized square RGB tiles into one grid image, one row per
/// outer vector entry.
fn write_tile_grid(path: &Path, rows: &[Vec<Vec<u8>>], size: usize) -> Result<()> {
    let cols = rows.first().map(|r| r.len()).unwrap_or(0);
    if cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(Error::contract("grid rows must be non-empty and equally long"));
    }
    let (w, h) = (cols * size, rows.len() * size);
    let mut data = vec![0u8; w * h * 3];
    for (r, row) in rows.iter().enumerate() {
        for (f, tile) in row.iter().enumerate() {
            for y in 0..size {
                for x in 0..size {
                    let src = (y * size + x) * 3;
                    let dst = ((r * size + y) * w + f * size + x) * 3;
                    data[dst..dst + 3].copy_from_slice(&tile[src..src + 3]);
                }
            }
        }
    }
    encode_png(path, w as u32, h as u32, &data)
}

fn encode_png(path: &Path, width: u32, height: u32, rgb: &[u8]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width, height);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Serde(format!("png: {e}")))?;
    writer
        .write_image_data(rgb)
        .map_err(|e| Error::Serde(format!("png: {e}")))?;
    Ok(())
}

/// Render ground truth, composed reconstruction, and (for the object
/// decoder) predicted against true segmentation for every `stride`-th step
/// of an episode: one PNG per frame plus a stitched `grid.png` with one row
/// per view. Returns the error report over the whole episode.
pub fn render_reconstructions(
    wm: &WorldModel,
    scene: &SceneConfig,
    episode: &Episode,
    out_dir: &Path,
    stride: usize,
) -> Result<ReconReport> {
    let batch = crate::replay::episode_batch(episode, scene)?;
    std::fs::create_dir_all(out_dir)?;
    let stride = stride.max(1);
    let size = wm.image_size();
    let hw = size * size;
    let object_decoder = wm.decoder_kind() == crate::wm::DecoderKind::Object;

    // grid rows: ground truth, reconstruction, predicted mask (object
    // decoder only), ground-truth mask
    let mut rows: Vec<Vec<Vec<u8>>> = vec![Vec::new(); if object_decoder { 4 } else { 3 }];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut state = wm.initial_state(1);
    for t in 0..batch.seq_len {
        let img = Tensor::constant(batch.images[t].clone());
        let prop = Tensor::constant(batch.proprios[t].clone());
        let act = Tensor::constant(batch.actions[t].clone());
        let embed = wm.encode(&img, &prop)?;
        let (post, _) = wm.posterior_step(&state, &act, &embed, &mut rng, SampleMode::Expected)?;
        state = post.detached();
        if t % stride != 0 {
            continue;
        }
        let feat = state.feature();
        let recon = wm.predict_image(&feat)?;
        let gt = batch.images[t]
            .index_axis(ndarray::Axis(0), 0)
            .to_owned()
            .into_dyn();
        let pred = recon.index_axis(ndarray::Axis(0), 0).to_owned().into_dyn();
        let gt_rgb = rgb_bytes(&gt)?;
        let pred_rgb = rgb_bytes(&pred)?;
        let labels_rgb = mask_bytes(&batch.labels[t][..hw], scene);
        write_rgb_png(&out_dir.join(format!("gt_{t:03}.png")), &gt)?;
        write_rgb_png(&out_dir.join(format!("recon_{t:03}.png")), &pred)?;
        write_mask_png(
            &out_dir.join(format!("labels_{t:03}.png")),
            &batch.labels[t][..hw],
            size,
            scene,
        )?;
        rows[0].push(gt_rgb);
        rows[1].push(pred_rgb);
        if object_decoder {
            let seg = wm.predict_segmentation(&feat)?;
            let seg_row: Vec<usize> = (0..hw).map(|p| seg[[0, p]]).collect();
            write_mask_png(&out_dir.join(format!("seg_{t:03}.png")), &seg_row, size, scene)?;
            rows[2].push(mask_bytes(&seg_row, scene));
        }
        let last = rows.len() - 1;
        rows[last].push(labels_rgb);
    }
    write_tile_grid(&out_dir.join("grid.png"), &rows, size)?;

    let report = wm.reconstruction_errors(&batch)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Serde(e.to_string()))?;
    std::fs::write(out_dir.join("recon_report.json"), json)?;
    write_slot_errors(&out_dir.join("recon_errors.csv"), &report)?;
    Ok(report)
}

/// Sidecar table: one row per ground-truth slot with its pixel share and MSE.
fn write_slot_errors(path: &Path, report: &ReconReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serde(e.to_string()))?;
    w.write_record(["slot", "pixels", "mse"])
        .map_err(|e| Error::Serde(e.to_string()))?;
    for (slot, (&mse, &n)) in report.slot_mse.iter().zip(&report.slot_pixels).enumerate() {
        w.write_record([slot.to_string(), n.to_string(), format!("{mse}")])
            .map_err(|e| Error::Serde(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Summarize several run directories into one table, sorted by
/// (stage, method, seed) for stable output.
pub fn summarize_runs(dirs: &[PathBuf]) -> Result<Vec<SummaryRow>> {
    let mut rows = Vec::new();
    for dir in dirs {
        rows.push(summarize_run(dir)?);
    }
    rows.sort_by(|a, b| {
        (a.stage.as_str(), a.method.as_str(), a.seed).cmp(&(
            b.stage.as_str(),
            b.method.as_str(),
            b.seed,
        ))
    });
    Ok(rows)
}

/// Per-method aggregate over seeds: mean and population standard deviation
/// of every summary statistic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub stage: String,
    pub seeds: usize,
    pub contact_frac_mean: f64,
    pub contact_frac_std: f64,
    pub pos_disp_mean: f64,
    pub pos_disp_std: f64,
    pub ang_disp_mean: f64,
    pub ang_disp_std: f64,
    pub placements_mean: f64,
    pub placements_std: f64,
    pub episode_reward_mean: f64,
    pub episode_reward_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
    (m, var.sqrt())
}

/// Collapse per-run rows into per-(stage, method) mean and std rows.
pub fn aggregate_rows(rows: &[SummaryRow]) -> Vec<MethodSummary> {
    let mut keys: Vec<(String, String)> = rows
        .iter()
        .map(|r| (r.stage.clone(), r.method.clone()))
        .collect();
    keys.sort();
    keys.dedup();
    keys.iter()
        .map(|(stage, method)| {
            let group: Vec<&SummaryRow> = rows
                .iter()
                .filter(|r| &r.stage == stage && &r.method == method)
                .collect();
            let col = |f: fn(&SummaryRow) -> f64| {
                let xs: Vec<f64> = group.iter().map(|r| f(r)).collect();
                mean_std(&xs)
            };
            let contact = col(|r| r.contact_frac);
            let pos = col(|r| r.pos_disp);
            let ang = col(|r| r.ang_disp);
            let place = col(|r| r.placements);
            let reward = col(|r| r.episode_reward);
            MethodSummary {
                method: method.clone(),
                stage: stage.clone(),
                seeds: group.len(),
                contact_frac_mean: contact.0,
                contact_frac_std: contact.1,
                pos_disp_mean: pos.0,
                pos_disp_std: pos.1,
                ang_disp_mean: ang.0,
                ang_disp_std: ang.1,
                placements_mean: place.0,
                placements_std: place.1,
                episode_reward_mean: reward.0,
                episode_reward_std: reward.1,
            }
        })
        .collect()
}

/// Write the per-(stage, method) mean and std table built from per-run rows.
pub fn write_report(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let aggregates = aggregate_rows(rows);
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serde(e.to_string()))?;
    for a in &aggregates {
        w.serialize(a).map_err(|e| Error::Serde(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{one_block_scene, AreasConfig, TaskConfig};
    use crate::replay::Step;
    use crate::sim::Env;
    use crate::wm::DecoderKind;
    use tempfile::tempdir;

    #[test]
    fn final_window_keeps_the_right_tail() {
        let xs: Vec<i32> = (0..10).collect();
        assert_eq!(final_window(&xs, 0.2), &[8, 9]);
        assert_eq!(final_window(&xs, 1.0).len(), 10);
        let one = [5];
        assert_eq!(final_window(&one, 0.2), &[5]);
        let empty: [i32; 0] = [];
        assert!(final_window(&empty, 0.2).is_empty());
        // 20% of 3 rounds up so the window is never empty
        let xs3 = [1, 2, 3];
        assert_eq!(final_window(&xs3, 0.2), &[3]);
    }

    #[test]
    fn run_meta_round_trips() {
        let dir = tempdir().unwrap();
        let meta = RunMeta {
            seed: 42,
            method: Method::Focus,
            stage: Stage::Explore,
            config_hash: "deadbeef".into(),
        };
        write_run_meta(dir.path(), &meta).unwrap();
        let back = read_run_meta(dir.path()).unwrap();
        assert_eq!(back.seed, 42);
        assert_eq!(back.config_hash, "deadbeef");
    }

    #[test]
    fn pngs_encode_without_error() {
        let dir = tempdir().unwrap();
        let img = ArrayD::from_shape_fn(vec![3, 8, 8], |ix| {
            (ix[1] as f64 + ix[2] as f64) / 14.0
        });
        write_rgb_png(&dir.path().join("img.png"), &img).unwrap();

        let scene = one_block_scene(8);
        let labels: Vec<usize> = (0..64).map(|i| i % 2).collect();
        write_mask_png(&dir.path().join("mask.png"), &labels, 8, &scene).unwrap();

        assert!(dir.path().join("img.png").metadata().unwrap().len() > 0);
        assert!(dir.path().join("mask.png").metadata().unwrap().len() > 0);

        // wrong shapes are contract errors
        let bad = ArrayD::zeros(vec![8, 8]);
        assert!(write_rgb_png(&dir.path().join("bad.png"), &bad).is_err());
        assert!(write_mask_png(&dir.path().join("bad2.png"), &labels[..10], 8, &scene).is_err());
    }

    #[test]
    fn rendering_writes_frames_and_a_report() {
        let scene = one_block_scene(8);
        let mut env = Env::new(scene.clone(), TaskConfig::default(), AreasConfig::default()).unwrap();
        let mut episode = Episode::new();
        let obs = env.reset(0);
        episode.push(Step::from_observation(&obs, &[0.0; 3], 0.0));
        for i in 0..5 {
            let a = [0.4, -0.2, if i % 2 == 0 { 1.0 } else { -1.0 }];
            let (obs, r, _) = env.step(a).unwrap();
            episode.push(Step::from_observation(&obs, &a, r));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let wm = WorldModel::new(
            &mut rng,
            &crate::wm::tests::tiny_cfg(),
            &scene,
            3,
            DecoderKind::Object,
        )
        .unwrap();

        let dir = tempdir().unwrap();
        let out = dir.path().join("recon");
        let report = render_reconstructions(&wm, &scene, &episode, &out, 3).unwrap();
        // strided frames 0 and 3 only
        for t in [0usize, 3] {
            assert!(out.join(format!("gt_{t:03}.png")).exists());
            assert!(out.join(format!("recon_{t:03}.png")).exists());
            assert!(out.join(format!("labels_{t:03}.png")).exists());
            assert!(out.join(format!("seg_{t:03}.png")).exists());
        }
        assert!(!out.join("gt_001.png").exists());
        assert!(out.join("recon_report.json").exists());
        assert!(out.join("grid.png").exists());
        assert!(report.full_mse.is_finite());
        assert!(report.segmentation_accuracy.is_some());
        let sidecar = std::fs::read_to_string(out.join("recon_errors.csv")).unwrap();
        assert!(sidecar.starts_with("slot,pixels,mse"));
        assert_eq!(sidecar.lines().count(), 1 + scene.num_slots());

        // the report matches a direct evaluation of the same episode
        let batch = crate::replay::episode_batch(&episode, &scene).unwrap();
        let direct = wm.reconstruction_errors(&batch).unwrap();
        assert_eq!(report.full_mse, direct.full_mse);
        assert_eq!(report.object_mse, direct.object_mse);
    }

    #[test]
    fn aggregation_reports_mean_and_population_std() {
        let base = SummaryRow {
            run: "a".into(),
            method: "focus".into(),
            stage: "explore".into(),
            seed: 0,
            env_steps: 100,
            episodes: 4,
            contact_frac: 0.2,
            pos_disp: 1.0,
            ang_disp: 0.0,
            placements: 1.0,
            episode_reward: 0.0,
        };
        let mut b = base.clone();
        b.seed = 1;
        b.contact_frac = 0.4;
        b.pos_disp = 3.0;
        let mut other = base.clone();
        other.method = "random".into();
        other.contact_frac = 0.1;

        let aggs = aggregate_rows(&[base, b, other]);
        assert_eq!(aggs.len(), 2);
        let focus = aggs.iter().find(|a| a.method == "focus").unwrap();
        assert_eq!(focus.seeds, 2);
        assert!((focus.contact_frac_mean - 0.3).abs() < 1e-12);
        assert!((focus.contact_frac_std - 0.1).abs() < 1e-12);
        assert!((focus.pos_disp_mean - 2.0).abs() < 1e-12);
        assert!((focus.pos_disp_std - 1.0).abs() < 1e-12);
        let random = aggs.iter().find(|a| a.method == "random").unwrap();
        assert_eq!(random.seeds, 1);
        assert_eq!(random.contact_frac_std, 0.0);

        let dir = tempdir().unwrap();
        let path = dir.path().join("table.csv");
        write_report(&path, &aggs_input()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("method,stage,seeds,contact_frac_mean"));
    }

    fn aggs_input() -> Vec<SummaryRow> {
        vec![SummaryRow {
            run: "r".into(),
            method: "focus".into(),
            stage: "explore".into(),
            seed: 0,
            env_steps: 10,
            episodes: 1,
            contact_frac: 0.0,
            pos_disp: 0.0,
            ang_disp: 0.0,
            placements: 0.0,
            episode_reward: 0.0,
        }]
    }

    #[test]
    fn summary_aggregates_the_final_fifth() {
        let dir = tempdir().unwrap();
        let meta = RunMeta {
            seed: 1,
            method: Method::Focus,
            stage: Stage::Explore,
            config_hash: "h".into(),
        };
        write_run_meta(dir.path(), &meta).unwrap();
        // ten episodes; only the last two should shape the summary
        let rows: Vec<MetricsRow> = (0..10)
            .map(|i| MetricsRow {
                step: (i + 1) * 25,
                contact_frac: if i >= 8 { 0.5 } else { 0.0 },
                pos_disp: i as f64,
                ang_disp: 0.0,
                up: 0,
                far: if i >= 8 { 1 } else { 0 },
                close: 0,
                left: 0,
                right: 1,
            })
            .collect();
        crate::trainer::write_metrics(&dir.path().join("metrics.csv"), &rows).unwrap();
        let curves: Vec<CurveRecord> = (0..10)
            .map(|i| CurveRecord::Episode {
                env_steps: (i + 1) * 25,
                episode: i,
                reward: if i >= 8 { 2.0 } else { 0.0 },
            })
            .collect();
        crate::trainer::write_curves(&dir.path().join("curves.jsonl"), &curves).unwrap();

        let row = summarize_run(dir.path()).unwrap();
        assert_eq!(row.episodes, 10);
        assert_eq!(row.env_steps, 250);
        assert!((row.contact_frac - 0.5).abs() < 1e-12);
        assert!((row.pos_disp - 8.5).abs() < 1e-12);
        assert!((row.placements - 2.0).abs() < 1e-12);
        assert!((row.episode_reward - 2.0).abs() < 1e-12);

        let out = dir.path().join("table.csv");
        write_summary(&out, &[row]).unwrap();
        let text = std::fs::read_to_string(&out).unwrap();
        assert!(text.starts_with("run,method,stage,seed"));
        assert_eq!(text.lines().count(), 2);
    }
}
