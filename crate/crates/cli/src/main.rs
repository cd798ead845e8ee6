use std::path::PathBuf;
use std::process::ExitCode;

use anodet3d::commands::{self, Context};
use anodet3d::config::RunConfig;
use anodet3d::training::Stage;
use anodet3d::{Error, ExitStatus};
use clap::{Parser, Subcommand, ValueEnum};

/// Volumetric anomaly detection: train a 3D generator, critic and encoder on
/// normal volumes, then score unseen volumes by reconstruction error.
///
/// Exit status: 0 success, 1 usage or config error, 2 data error, 3 training
/// divergence.
#[derive(Debug, Parser)]
#[command(name = "anodet3d", version)]
struct Cli {
    /// JSON run config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; overrides paths.out_dir, which overrides $ANODET3D_OUT.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StageArg {
    Gan,
    Encoder,
    Refine,
    All,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the config's synthetic phantom dataset to the data directory.
    GenerateSynthetic,
    /// Crop, smooth, resize, window and normalize every volume.
    Preprocess {
        /// Input directory; defaults to paths.data_dir.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Train one stage or all remaining stages.
    Train {
        #[arg(long, value_enum, default_value = "all")]
        stage: StageArg,
    },
    /// Score held-out volumes into scores.csv.
    Score {
        /// Also write predictions.csv; abnormal iff score > threshold.
        #[arg(long)]
        threshold: Option<f64>,
        /// Also write voxel-wise residual maps.
        #[arg(long)]
        residuals: bool,
    },
    /// ROC, Youden point and per-lesion PR curves from scores.csv.
    Evaluate {
        /// Also report metrics at this threshold.
        #[arg(long)]
        threshold: Option<f64>,
        /// Also write per-record log10 scores for plotting.
        #[arg(long)]
        plot_data: bool,
    },
    /// Mean log10 score per category.
    Report,
}

fn load_config(cli: &Cli) -> anodet3d::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.paths.out_dir = Some(o.clone());
    }
    Ok(cfg)
}

fn batch_failed(n: usize, what: &str) -> anodet3d::Result<()> {
    if n > 0 {
        return Err(Error::InvalidVolume(format!("{n} {what} failed; see the log")));
    }
    Ok(())
}

fn run(cli: Cli) -> anodet3d::Result<()> {
    let ctx = Context::new(load_config(&cli)?)?;
    match cli.command {
        Command::GenerateSynthetic => {
            let m = commands::generate_synthetic(&ctx)?;
            println!("{} phantoms, manifest hash {}", m.entries.len(), m.hash);
        }
        Command::Preprocess { input } => {
            let o = commands::preprocess_dir(&ctx, input.as_deref())?;
            println!("{} processed, {} failed", o.done.len(), o.failures.len());
            batch_failed(o.failures.len(), "volumes")?;
        }
        Command::Train { stage } => {
            let stage = match stage {
                StageArg::Gan => Some(Stage::Gan),
                StageArg::Encoder => Some(Stage::Encoder),
                StageArg::Refine => Some(Stage::Refine),
                StageArg::All => None,
            };
            commands::train(&ctx, stage)?;
        }
        Command::Score { threshold, residuals } => {
            let o = commands::score(&ctx, threshold, residuals)?;
            println!("{} scored, {} failed", o.records.len(), o.failures.len());
            batch_failed(o.failures.len(), "volumes")?;
        }
        Command::Evaluate { threshold, plot_data } => {
            let e = commands::evaluate_scores(&ctx, threshold, plot_data)?;
            let y = e.roc.youden;
            println!("auc {:.4}", e.roc.auc);
            println!(
                "youden threshold {} accuracy {:.4} recall {:.4} specificity {:.4}",
                y.threshold, y.accuracy, y.recall, y.specificity
            );
            for pr in &e.pr {
                println!("ap {} {:.4}", pr.lesion_type.name(), pr.average_precision);
            }
        }
        Command::Report => {
            for g in commands::report(&ctx)?.groups {
                println!("{:<18} n={:<4} mean log10 score {:.4}", g.group, g.n, g.mean_log10_score);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(ExitStatus::Usage as u8) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_status() as u8)
        }
    }
}
