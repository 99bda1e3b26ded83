//! Command-line front end: training, restoration, evaluation, corruption,
//! process inspection and self-checks.
//!
//! The only environment variable consulted is `DRIFTREC_THREADS`, the worker
//! thread count.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use driftrec::io::{read_image, write_image, Checkpoint};
use driftrec::jpeg::{compress_decompress, double_compress, ChromaSubsampling, DoubleJpegConfig, JpegConfig};
use driftrec::pipeline::{evaluate, train, ExperimentConfig, Restorer};
use driftrec::samplers::SamplerKind;
use driftrec::sde::{SdeKind, SdeSettings};

mod inspect;
mod verify;

#[derive(Parser)]
#[command(name = "driftrec", version, about = "Task-adapted diffusion for blind JPEG restoration")]
struct Cli {
    /// Print progress messages.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a score network (or the regression baseline) from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for the checkpoint, log and summary.
        #[arg(long)]
        out: PathBuf,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the number of epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Restore one image with a trained checkpoint.
    Restore {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Take sampler and restoration defaults from this config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        sampling: SamplingArgs,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on the test split and write a metrics CSV.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Per-image CSV.
        #[arg(long)]
        out: PathBuf,
        /// Optional CSV of means per (method, condition).
        #[arg(long)]
        summary: Option<PathBuf>,
        /// Replace the configured quality factors (comma separated).
        #[arg(long, value_delimiter = ',')]
        qf: Option<Vec<u8>>,
        /// Add a double-compression condition `qf1,qf2,shift_x,shift_y` (repeatable).
        #[arg(long)]
        double: Vec<DoubleJpegConfig>,
        #[command(flatten)]
        sampling: SamplingArgs,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// JPEG-compress an image (single or unaligned double compression).
    Corrupt {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, conflicts_with = "double", required_unless_present = "double")]
        qf: Option<u8>,
        /// `qf1,qf2,shift_x,shift_y`
        #[arg(long)]
        double: Option<DoubleJpegConfig>,
        #[arg(long, default_value = "4:2:0")]
        subsampling: ChromaSubsampling,
    },
    /// Tabulate the forward process (mean weight, std, diffusion) and
    /// optionally write snapshots of x_t for an image.
    SdeInspect {
        /// SDE kind; all three when omitted.
        #[arg(long)]
        kind: Option<SdeKind>,
        #[arg(long, default_value_t = 101)]
        points: usize,
        /// CSV output; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Clean image for forward-process snapshots.
        #[arg(long, requires = "frames_dir")]
        image: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        qf: u8,
        #[arg(long)]
        frames_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 6)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run quick numerical self-checks, optionally on a checkpoint too.
    Verify {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Args, Clone, Default)]
struct SamplingArgs {
    /// em, heun or ode.
    #[arg(long)]
    sampler: Option<SamplerKind>,
    /// Steps of the fixed-step samplers.
    #[arg(long)]
    steps: Option<usize>,
    /// ODE tolerance (absolute and relative).
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    n_average: Option<usize>,
    #[arg(long)]
    no_color_correct: bool,
}

impl SamplingArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(kind) = self.sampler {
            cfg.sampler.kind = kind;
        }
        if let Some(n) = self.steps {
            cfg.sampler.n_steps = n;
        }
        if let Some(tol) = self.tol {
            cfg.sampler.atol = tol;
            cfg.sampler.rtol = tol;
        }
        if let Some(n) = self.n_average {
            cfg.restoration.n_average = n;
        }
        if self.no_color_correct {
            cfg.restoration.color_correct = false;
        }
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("DRIFTREC_THREADS") {
        let n: usize = v.parse().with_context(|| format!("DRIFTREC_THREADS={v} is not a number"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            out,
            seed,
            epochs,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(e) = epochs {
                cfg.training.epochs = e;
            }
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            let outcome = train(&cfg, Some(&out))?;
            println!(
                "trained {} steps in {:.0} s; loss {:.5} -> {:.5}; checkpoint {}",
                outcome.summary.steps,
                outcome.summary.wall_seconds,
                outcome.summary.initial_loss,
                outcome.summary.final_loss,
                out.join("checkpoint.ckpt").display()
            );
        }
        Command::Restore {
            checkpoint,
            input,
            output,
            config,
            sampling,
            seed,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let mut cfg = match config {
                Some(path) => ExperimentConfig::load(&path)?,
                None => ExperimentConfig::new(ckpt.meta.seed),
            };
            sampling.apply(&mut cfg);
            let y = read_image(&input)?;
            let restorer = Restorer::from_checkpoint(&ckpt)?;
            let x = restorer.restore(&y, &cfg.sampler, &cfg.restoration, seed.unwrap_or(cfg.seed))?;
            write_image(&output, &x)?;
        }
        Command::Evaluate {
            config,
            checkpoint,
            out,
            summary,
            qf,
            double,
            sampling,
            seed,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(q) = qf {
                cfg.evaluation.qfs = q;
            }
            cfg.evaluation.double.extend(double);
            sampling.apply(&mut cfg);
            cfg.validate()?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let report = evaluate(&cfg, &ckpt)?;
            report.write_csv(&out)?;
            if let Some(path) = summary {
                report.write_summary_csv(&path)?;
            }
            println!("{:<12} {:<10} {:>4} {:>8} {:>8} {:>8} {:>10}", "method", "condition", "n", "SSIM", "PSNR", "PSNR-B", "BEF x1e4");
            for a in report.aggregate() {
                let m = a.metrics;
                println!(
                    "{:<12} {:<10} {:>4} {:>8.4} {:>8.3} {:>8.3} {:>10.3}",
                    a.method,
                    a.condition,
                    a.count,
                    m.ssim,
                    m.psnr,
                    m.psnr_b,
                    m.bef * driftrec::metrics::BEF_REPORT_SCALE
                );
            }
        }
        Command::Corrupt {
            input,
            output,
            qf,
            double,
            subsampling,
        } => {
            let img = read_image(&input)?;
            let y = match (qf, double) {
                (Some(q), None) => compress_decompress(&img, &JpegConfig::new(q).with_subsampling(subsampling))?,
                (None, Some(d)) => double_compress(&img, &DoubleJpegConfig { subsampling, ..d })?,
                _ => bail!("give exactly one of --qf and --double"),
            };
            write_image(&output, &y)?;
        }
        Command::SdeInspect {
            kind,
            points,
            out,
            image,
            qf,
            frames_dir,
            frames,
            seed,
        } => {
            let kinds = kind.map_or_else(|| SdeKind::ALL.to_vec(), |k| vec![k]);
            let settings: Vec<SdeSettings> = kinds.iter().map(|&k| SdeSettings::reference(k)).collect();
            inspect::profile_csv(&settings, points, out.as_deref())?;
            if let (Some(image), Some(dir)) = (image, frames_dir) {
                inspect::write_frames(&settings, &image, qf, &dir, frames, seed)?;
            }
        }
        Command::Verify { checkpoint } => {
            let ckpt = checkpoint.as_deref().map(load_checkpoint).transpose()?;
            if !verify::run(ckpt.as_ref()) {
                bail!("self-checks failed");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn })
        .format_timestamp_secs()
        .init();
    if let Err(e) = configure_threads().and_then(|()| run(cli)) {
        eprintln!("error: {e:#}");
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}
