use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use cdiff_cli::visualize::VisualizeOptions;
use cdiff_cli::{checkpoint_config, exit_code, oracle, resolve_config, sweep, train, visualize};
use cdiff_core::oracle::ConsistencyConfig;
use clap::{Parser, Subcommand};

/// Diffusion-decoded semantic communication experiments.
///
/// The dataset root is read from `CDIFF_DATA_ROOT` unless the config sets
/// `data.root`.
#[derive(Parser)]
#[command(name = "cdiff", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write weights, a CSV log and the resolved config.
    Train {
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// smoke, mnist-fixed, mnist-adaptive, mnist-ae or cifar.
        #[arg(long)]
        preset: Option<String>,
        /// Override a config key, e.g. `--set trainer.seed=3`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory; overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint over the SNR x CBR x interference grid.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Defaults to `sweep.csv` inside the checkpoint directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write original/reconstruction pairs and a metric sidecar CSV.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, allow_hyphen_values = true)]
        snr_db: Option<f64>,
        #[arg(long)]
        cbr: Option<f64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Defaults to `visualize/` inside the checkpoint directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the consistency experiment on the linear-Gaussian toy.
    Oracle {
        /// Comma-separated training-set sizes.
        #[arg(long, value_delimiter = ',', default_values_t = ConsistencyConfig::default().n_list)]
        n: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value = "oracle.csv")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train {
            config,
            preset,
            mut overrides,
            out,
        } => {
            if let Some(dir) = out {
                overrides.push(format!("output.dir={:?}", dir.display().to_string()));
            }
            let cfg = resolve_config(config.as_deref(), preset.as_deref(), &overrides)?;
            let summary = train::run(&cfg).context("training failed")?;
            println!(
                "trained {} steps over {} epochs, final loss {}; outputs in {}",
                summary.steps,
                summary.epochs,
                summary.final_loss.map_or("n/a".to_string(), |l| format!("{l:.6}")),
                summary.dir.display()
            );
        }
        Command::Sweep {
            checkpoint,
            overrides,
            out,
        } => {
            let cfg = checkpoint_config(&checkpoint, &overrides)?;
            let out = out.unwrap_or_else(|| checkpoint.join(sweep::SWEEP_CSV));
            let rows = sweep::run(&cfg, &checkpoint, &out)?;
            println!("wrote {} rows to {}", rows.len(), out.display());
        }
        Command::Visualize {
            checkpoint,
            count,
            seed,
            snr_db,
            cbr,
            overrides,
            out,
        } => {
            let cfg = checkpoint_config(&checkpoint, &overrides)?;
            let out = out.unwrap_or_else(|| checkpoint.join("visualize"));
            let opts = VisualizeOptions {
                count,
                seed,
                snr_db,
                cbr,
            };
            let rows = visualize::run(&cfg, &checkpoint, &out, &opts)?;
            println!("wrote {} pairs to {}", rows.len(), out.display());
        }
        Command::Oracle { n, seeds, out } => {
            let cfg = ConsistencyConfig {
                n_list: n,
                seeds: (0..seeds).collect(),
                ..ConsistencyConfig::default()
            };
            for (n, mse) in oracle::run(&cfg, &out)? {
                println!("n = {n:>7}  median mse = {mse:.3e}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
