use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rhotomo_cli::commands::{self, EvalInputs};
use rhotomo_cli::config::{Algorithm, RunConfig};
use rhotomo_cli::CliError;

#[derive(Parser)]
#[command(name = "rhotomo", version, about = "Cone-beam CT simulation, classical reconstruction and prior-conditioned neural fields")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the simulation and training seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the Shepp–Logan phantom on the configured grid.
    Phantom,
    /// Forward-project a volume, add noise and split train/test views.
    Project {
        #[arg(long)]
        volume: Option<PathBuf>,
    },
    /// Classical reconstruction (FDK or CGLS).
    Recon {
        #[arg(long, default_value = "fdk")]
        algorithm: Algorithm,
        #[arg(long)]
        projections: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Fit a neural field to training projections.
    Train {
        #[arg(long)]
        projections: Option<PathBuf>,
        #[arg(long)]
        prior: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Score a checkpoint on held-out views and against the ground truth.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        projections: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        prior: Option<PathBuf>,
        /// Also write axial slice images.
        #[arg(long)]
        slices: bool,
    },
    /// Train with every prior algorithm and interpolation mode.
    Ablate {
        #[arg(long)]
        projections: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let path = cli
        .config
        .ok_or_else(|| CliError::Validation("--config <path> is required".into()))?;
    let mut cfg = RunConfig::load(&path)?;
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    let out = cli.out.as_path();
    match cli.command {
        Command::Phantom => {
            let p = commands::phantom(&cfg, out)?;
            println!("wrote {}", p.display());
        }
        Command::Project { volume } => {
            let o = commands::project(&cfg, out, volume.as_deref())?;
            println!("wrote {}", o.all.display());
            if let Some((train, test)) = o.split {
                println!("wrote {} and {}", train.display(), test.display());
            }
        }
        Command::Recon {
            algorithm,
            projections,
            truth,
        } => {
            let o = commands::recon(&cfg, out, algorithm, projections.as_deref(), truth.as_deref())?;
            println!("wrote {}", o.volume.display());
            if let Some((psnr, ssim)) = o.scores {
                println!("{}: psnr {psnr:.2} dB, ssim {ssim:.4}", algorithm.name());
            }
        }
        Command::Train { projections, prior, test } => {
            let o = commands::train(&cfg, out, projections.as_deref(), prior.as_deref(), test.as_deref())?;
            let last = o.train_log.steps.last().map_or(f64::NAN, |s| s.loss);
            println!(
                "wrote {} and {} ({} steps, final loss {last:.6}, miss rate {:.3})",
                o.checkpoint.display(),
                o.log.display(),
                o.train_log.steps.len(),
                o.train_log.miss_rate()
            );
        }
        Command::Eval {
            checkpoint,
            projections,
            truth,
            prior,
            slices,
        } => {
            let inputs = EvalInputs {
                checkpoint: checkpoint.as_deref(),
                projections: projections.as_deref(),
                truth: truth.as_deref(),
                prior: prior.as_deref(),
                slices,
            };
            let o = commands::eval(&cfg, out, &inputs)?;
            println!("views: psnr {:.2} dB, ssim {:.4}", o.mean_psnr, o.mean_ssim);
            if let Some((psnr, ssim)) = o.volume_scores {
                println!("volume: psnr {psnr:.2} dB, ssim {ssim:.4}");
            }
        }
        Command::Ablate { projections, truth } => {
            for r in commands::ablate(&cfg, out, projections.as_deref(), truth.as_deref())? {
                println!(
                    "{:>4} {:>9}: psnr {:.2} dB, ssim {:.4}, loss {:.6}",
                    r.prior.name(),
                    r.interpolation.name(),
                    r.psnr,
                    r.ssim,
                    r.final_loss
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
