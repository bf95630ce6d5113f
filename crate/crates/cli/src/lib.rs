//! Command implementations behind the `focus` binary. Everything here is
//! callable in-process so the smoke tests drive the real code paths without
//! spawning subprocesses.

use focus_core::checkpoint::Checkpoint;
use focus_core::config::{ExperimentConfig, ACTION_DIM};
use focus_core::replay::load_episode;
use focus_core::report::{
    read_run_meta, render_reconstructions, summarize_runs, write_report, write_run_meta,
    write_summary, RunMeta, SummaryRow,
};
use focus_core::trainer::{latest_checkpoint, CurveRecord, Trainer};
use focus_core::wm::eval::ReconReport;
use focus_core::wm::{DecoderKind, WorldModel};
use focus_core::{Error, Result};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

/// Overrides the default `runs/` artifact directory.
pub const ARTIFACT_ROOT_ENV: &str = "FOCUS_ARTIFACT_ROOT";

pub fn artifact_root() -> PathBuf {
    std::env::var_os(ARTIFACT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Run directories produced by one `run` invocation, plus the summary table
/// aggregating them.
pub struct RunOutcome {
    pub dirs: Vec<PathBuf>,
    pub summary: PathBuf,
}

/// Execute the experiment in `config_path`: one sub-run per seed (or the
/// single `--seed` override), each in its own self-contained directory under
/// `<root>/<config stem>/s<seed>`. With `resume`, continue that directory
/// from its latest checkpoint instead.
pub fn run_experiment(
    config_path: &Path,
    seed_override: Option<u64>,
    resume: Option<&Path>,
    root: &Path,
) -> Result<RunOutcome> {
    let text = std::fs::read_to_string(config_path)?;
    let cfg = ExperimentConfig::from_toml_str(&text)?;

    if let Some(dir) = resume {
        let meta = read_run_meta(dir)?;
        if let Some(seed) = seed_override {
            if seed != meta.seed {
                return Err(Error::config(format!(
                    "--seed {seed} conflicts with the stored seed {}",
                    meta.seed
                )));
            }
        }
        let ckpt = latest_checkpoint(dir)?;
        eprintln!("resuming {} from {}", dir.display(), ckpt.display());
        let mut trainer = Trainer::resume(cfg.clone(), meta.seed, dir.to_path_buf(), &ckpt)?;
        drive(&mut trainer, meta.seed)?;
        finish_run(&trainer, &cfg, dir)?;
        let parent = dir.parent().unwrap_or(Path::new(".")).to_path_buf();
        let summary = write_batch_summary(&parent)?;
        return Ok(RunOutcome {
            dirs: vec![dir.to_path_buf()],
            summary,
        });
    }

    let seeds = match seed_override {
        Some(s) => vec![s],
        None => cfg.seeds.clone(),
    };
    if seeds.is_empty() {
        return Err(Error::config("config lists no seeds and no --seed given"));
    }
    let stem = config_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".to_string());
    let batch_dir = root.join(&stem);

    let mut dirs = Vec::new();
    for &seed in &seeds {
        let run_dir = batch_dir.join(format!("s{seed}"));
        if run_dir.exists() {
            return Err(Error::config(format!(
                "{} already exists; pass --resume {0} or remove it",
                run_dir.display()
            )));
        }
        std::fs::create_dir_all(&run_dir)?;
        std::fs::write(run_dir.join("config.toml"), cfg.to_toml_string()?)?;
        write_run_meta(
            &run_dir,
            &RunMeta {
                seed,
                method: cfg.method,
                stage: cfg.stage,
                config_hash: cfg.config_hash(),
            },
        )?;
        eprintln!(
            "run {} ({} / {}, seed {seed}, budget {})",
            run_dir.display(),
            cfg.method.name(),
            cfg.stage.name(),
            cfg.budget_steps
        );
        let mut trainer = Trainer::new(cfg.clone(), seed, Some(run_dir.clone()))?;
        drive(&mut trainer, seed)?;
        finish_run(&trainer, &cfg, &run_dir)?;
        dirs.push(run_dir);
    }

    let summary = write_batch_summary(&batch_dir)?;
    Ok(RunOutcome { dirs, summary })
}

/// Advance a trainer to its budget in ten visible chunks.
fn drive(trainer: &mut Trainer, seed: u64) -> Result<()> {
    let budget = trainer.config().budget_steps as u64;
    let chunk = (budget / 10).max(1);
    while trainer.env_steps() < budget {
        trainer.run_until(trainer.env_steps() + chunk)?;
        let loss = trainer.curves().iter().rev().find_map(|c| match c {
            CurveRecord::Train(r) => Some(r.wm.wm_total()),
            _ => None,
        });
        match loss {
            Some(l) => eprintln!(
                "  [s{seed}] {}/{budget} steps, {} episodes, wm loss {l:.4}",
                trainer.env_steps(),
                trainer.episodes_done()
            ),
            None => eprintln!(
                "  [s{seed}] {}/{budget} steps, {} episodes",
                trainer.env_steps(),
                trainer.episodes_done()
            ),
        }
    }
    trainer.save_checkpoint()?;
    Ok(())
}

/// Post-run artifacts: a reconstruction grid over the last stored episode
/// for any method that learns a world model.
fn finish_run(trainer: &Trainer, cfg: &ExperimentConfig, run_dir: &Path) -> Result<()> {
    let Some(wm) = trainer.world_model() else {
        return Ok(());
    };
    let Some(episode_path) = last_episode_file(run_dir)? else {
        return Ok(());
    };
    let episode = load_episode(&episode_path)?;
    let stride = (episode.len() / 8).max(1);
    render_reconstructions(wm, &cfg.scene, &episode, &run_dir.join("recon"), stride)?;
    Ok(())
}

fn last_episode_file(run_dir: &Path) -> Result<Option<PathBuf>> {
    let dir = run_dir.join("episodes");
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    files.sort();
    Ok(files.pop())
}

/// Summarize every finished sub-run under `batch_dir` into `summary.csv`.
fn write_batch_summary(batch_dir: &Path) -> Result<PathBuf> {
    let dirs = run_dirs_under(batch_dir)?;
    let rows = summarize_runs(&dirs)?;
    let path = batch_dir.join("summary.csv");
    write_summary(&path, &rows)?;
    Ok(path)
}

/// Run directories in or under `dir`: itself if it holds a `run.json`,
/// otherwise its immediate children that do.
fn run_dirs_under(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join("run.json").is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join("run.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::config(format!(
            "{} contains no run directories (no run.json found)",
            dir.display()
        )));
    }
    Ok(dirs)
}

/// Rebuild the world model stored in a checkpoint and render its
/// reconstructions over a stored episode.
pub fn dump_reconstructions(
    ckpt_path: &Path,
    episode_path: &Path,
    out_dir: &Path,
    stride: usize,
) -> Result<ReconReport> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    if !ckpt.tensors.iter().any(|t| t.name.starts_with("wm.")) {
        return Err(Error::contract(
            "checkpoint holds no world model; nothing to reconstruct",
        ));
    }
    let cfg = ExperimentConfig::from_toml_str(&ckpt.config_toml)?;
    let kind = if cfg.method.uses_object_decoder() {
        DecoderKind::Object
    } else {
        DecoderKind::Monolithic
    };
    // parameters come from the checkpoint; the init rng is throwaway
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let wm = WorldModel::new(&mut rng, &cfg.model, &cfg.scene, ACTION_DIM, kind)?;
    ckpt.apply_tensors(&wm.params())?;
    let episode = load_episode(episode_path)?;
    render_reconstructions(&wm, &cfg.scene, &episode, out_dir, stride)
}

/// Aggregate finished runs into a per-method mean and std table.
pub fn write_table(runs: &[PathBuf], out: &Path) -> Result<Vec<SummaryRow>> {
    let mut dirs = Vec::new();
    for r in runs {
        dirs.extend(run_dirs_under(r)?);
    }
    let rows = summarize_runs(&dirs)?;
    write_report(out, &rows)?;
    Ok(rows)
}
