use clap::{Parser, Subcommand};
use focus_cli::{artifact_root, dump_reconstructions, run_experiment, write_table};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "focus",
    version,
    about = "Train and evaluate object-centric world models on a 2D manipulation desk"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment in a config, one sub-run per seed
    Run {
        /// Experiment config (TOML)
        #[arg(long)]
        config: PathBuf,
        /// Run only this seed instead of the config's seed list
        #[arg(long)]
        seed: Option<u64>,
        /// Continue an existing run directory from its latest checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Render reconstructions from a checkpoint over a stored episode
    Recon {
        #[arg(long)]
        ckpt: PathBuf,
        /// Episode file (episodes/ep_*.bin inside a run directory)
        #[arg(long)]
        episode: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Render every N-th frame
        #[arg(long, default_value_t = 4)]
        stride: usize,
    },
    /// Aggregate finished runs into a per-method mean and std table
    Report {
        /// Run directories, or parents of per-seed run directories
        #[arg(long, required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run {
            config,
            seed,
            resume,
        } => run_experiment(&config, seed, resume.as_deref(), &artifact_root()).map(|out| {
            for dir in &out.dirs {
                println!("{}", dir.display());
            }
            println!("summary: {}", out.summary.display());
        }),
        Command::Recon {
            ckpt,
            episode,
            out,
            stride,
        } => dump_reconstructions(&ckpt, &episode, &out, stride).map(|report| {
            println!("wrote {}", out.display());
            println!(
                "object mse {:.6}, background mse {:.6}, full mse {:.6}",
                report.object_mse, report.background_mse, report.full_mse
            );
            if let Some(acc) = report.segmentation_accuracy {
                println!("segmentation accuracy {acc:.4}");
            }
        }),
        Command::Report { runs, out } => write_table(&runs, &out).map(|rows| {
            println!("{} runs -> {}", rows.len(), out.display());
        }),
    };
    if let Err(e) = outcome {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
