//! Command-line front end.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use geogan_pipeline::commands;
use geogan_pipeline::config::ExperimentConfig;
use geogan_pipeline::error::Result;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Scale {
    Toy,
    Paper,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Channel {
    Lnk,
    H,
    F1,
    F2,
}

impl Channel {
    fn index(self) -> usize {
        match self {
            Channel::Lnk => geogan_core::CH_LNK,
            Channel::H => geogan_core::CH_H,
            Channel::F1 => geogan_core::CH_F1,
            Channel::F2 => geogan_core::CH_F2,
        }
    }
}

/// Physics-informed WGAN-GP toolkit for groundwater fields: generate
/// paired conductivity/head/flux datasets, train, evaluate and
/// reconstruct fields from sparse point measurements.
#[derive(Parser, Debug)]
#[command(name = "geogan", version, about)]
struct Cli {
    /// Configuration file (overrides --scale)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Built-in configuration preset
    #[arg(long, global = true, value_enum, default_value = "toy")]
    scale: Scale,

    /// Override the command-relevant seed from the config
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the paired lnK/h/flux dataset
    GenData,
    /// Train the physics-informed WGAN-GP on a dataset
    Train {
        /// Dataset file produced by gen-data
        #[arg(long)]
        dataset: PathBuf,
        /// Continue from a checkpoint (optimizer state restarts)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Unconditional evaluation: spectra, solver consistency, residuals
    EvalUncond {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Training dataset for reference spectra
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Number of generated samples (defaults to eval.samples)
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Conditional reconstruction over the configured measurement cases
    Inpaint {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Take the ground truth from this dataset instead of a fresh draw
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Sample index within --dataset
        #[arg(long, default_value = "0")]
        truth_index: usize,
        /// Run a single case from a measurement file instead of the config list
        #[arg(long)]
        measurements: Option<PathBuf>,
    },
    /// Train one model per latent dimension and compare reconstructions
    ZdimStudy,
    /// One-shot Darcy solve of a seeded realization (debugging aid)
    Solve,
    /// Eigen-spectrum of a dataset channel
    Spectrum {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "lnk")]
        channel: Channel,
        /// Number of leading eigenvalues
        #[arg(short)]
        k: Option<usize>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_path(path)?,
        None => match cli.scale {
            Scale::Toy => ExperimentConfig::toy(),
            Scale::Paper => ExperimentConfig::paper(),
        },
    };
    if let Some(seed) = cli.seed {
        match cli.command {
            Command::GenData | Command::Solve => cfg.dataset.seed = seed,
            Command::Train { .. } | Command::ZdimStudy => cfg.train.seed = seed,
            Command::EvalUncond { .. } => cfg.eval.seed = seed,
            Command::Inpaint { .. } => cfg.inpaint.seed = seed,
            Command::Spectrum { .. } => {}
        }
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::GenData => {
            let path = commands::cmd_gen_data(&cfg, &cli.out)?;
            println!("dataset written to {}", path.display());
        }
        Command::Train {
            dataset,
            checkpoint,
        } => {
            let path = commands::cmd_train(&cfg, dataset, checkpoint.as_deref(), &cli.out)?;
            println!("checkpoint written to {}", path.display());
        }
        Command::EvalUncond {
            checkpoint,
            dataset,
            samples,
        } => {
            commands::cmd_eval_uncond(&cfg, checkpoint, dataset.as_deref(), *samples, &cli.out)?;
            println!("evaluation reports written to {}", cli.out.display());
        }
        Command::Inpaint {
            checkpoint,
            dataset,
            truth_index,
            measurements,
        } => {
            let truth = dataset.as_ref().map(|p| (p.as_path(), *truth_index));
            let outcomes =
                commands::cmd_inpaint(&cfg, checkpoint, truth, measurements.as_deref(), &cli.out)?;
            for (i, o) in outcomes.iter().enumerate() {
                println!(
                    "case {}: N_K={} N_h={} rmse {:.4} +- {:.4}  r2 {:.4} +- {:.4}",
                    i + 1,
                    o.n_k,
                    o.n_h,
                    o.rmse_mean,
                    o.rmse_std,
                    o.r2_mean,
                    o.r2_std
                );
            }
        }
        Command::ZdimStudy => {
            commands::cmd_zdim_study(&cfg, &cli.out)?;
            println!("study written to {}", cli.out.display());
        }
        Command::Solve => {
            commands::cmd_solve(&cfg, cli.seed, &cli.out)?;
            println!("solve artifacts written to {}", cli.out.display());
        }
        Command::Spectrum {
            dataset,
            channel,
            k,
        } => {
            commands::cmd_spectrum(&cfg, dataset, channel.index(), *k, &cli.out)?;
            println!("spectrum written to {}", cli.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
