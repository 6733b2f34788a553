//! `slc`: train, predict, evaluate, generate synthetic data, cut training
//! tiles and run the gradient checks.

pub mod commands;
pub mod config;
pub mod error;
pub mod palette;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use slc_core::data::synth::{SynthSpec, SynthVariant};
use slc_core::data::tiles::Merge;

use crate::commands::{EvalArgs, PredictArgs};
use crate::config::{parse_list, RunConfig};
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "slc", version, about = "Supervised long-range correlation segmentation")]
pub struct Cli {
    /// Run in 64-bit floating point instead of 32-bit.
    #[arg(long, global = true)]
    pub fp64: bool,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags that override the matching run-configuration keys.
#[derive(Debug, Args, Default)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (train) or output path (predict).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Class ids to leave out of scores, comma separated.
    #[arg(long)]
    pub ignore: Option<String>,
    #[arg(long)]
    pub overlap: Option<f64>,
    /// mean | last_write
    #[arg(long)]
    pub merge: Option<Merge>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes train_log.tsv, best.slcw and last.slcw.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Start from this checkpoint's weights.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Predict label maps for an image or a directory of images.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Colour overlay output (file or directory, like --out).
        #[arg(long)]
        overlay: Option<PathBuf>,
        /// `id r g b` lines; defaults to the built-in colours.
        #[arg(long)]
        palette: Option<PathBuf>,
        /// Tile side; whole images when absent.
        #[arg(long)]
        tile: Option<usize>,
        /// Read tile_size, overlap and merge from a run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score predicted label maps against ground truth; writes metrics.txt.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        n_classes: Option<usize>,
        #[arg(long)]
        ignore: Option<String>,
        /// Directory for metrics.txt (default: current directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// shapes | longrange
        #[arg(long, default_value = "shapes")]
        variant: SynthVariant,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        n_classes: usize,
        #[arg(long, default_value_t = 8)]
        n_images: usize,
        #[arg(long, default_value_t = 0.08)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Cut a dataset into non-overlapping tiles with a validation holdout.
    Tiles {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 0.1)]
        holdout: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference checks of every differentiable operation (64-bit).
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn ignore_ids(text: &Option<String>) -> Result<Option<Vec<u8>>> {
    text.as_deref().map(|t| parse_list("--ignore", t)).transpose()
}

impl Overrides {
    fn apply(&self, config: &mut RunConfig) -> Result<()> {
        if let Some(s) = self.seed {
            config.model.seed = s;
        }
        if let Some(o) = &self.out {
            config.out_dir = o.clone();
        }
        if let Some(ids) = ignore_ids(&self.ignore)? {
            config.ignore = ids;
        }
        if let Some(o) = self.overlap {
            config.overlap = o;
        }
        if let Some(m) = self.merge {
            config.merge = m;
        }
        Ok(())
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, resume, overrides } => {
            let mut cfg = RunConfig::load(&config)?;
            overrides.apply(&mut cfg)?;
            if resume.is_some() {
                cfg.resume = resume;
            }
            println!("{}", commands::LOG_HEADER);
            let print = |row: &commands::EpochRow| println!("{}", row.to_line());
            let summary = if cli.fp64 {
                commands::train::<f64>(&cfg, print)?
            } else {
                commands::train::<f32>(&cfg, print)?
            };
            println!(
                "best epoch {} (val mIoU {:.4}) -> {} in {:.1}s",
                summary.best_epoch,
                summary.best_miou,
                summary.best_checkpoint.display(),
                summary.seconds
            );
        }
        Command::Predict {
            checkpoint,
            input,
            overlay,
            palette,
            tile,
            config,
            overrides,
        } => {
            let mut cfg = match &config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            let out = overrides
                .out
                .clone()
                .ok_or_else(|| CliError::Usage("predict needs --out".into()))?;
            overrides.apply(&mut cfg)?;
            let args = PredictArgs {
                checkpoint,
                input,
                out,
                overlay,
                palette,
                tile_size: tile.or(cfg.tile_size),
                overlap: cfg.overlap,
                merge: cfg.merge,
            };
            let n = if cli.fp64 {
                commands::predict::<f64>(&args)?
            } else {
                commands::predict::<f32>(&args)?
            };
            println!("wrote {n} label map(s) to {}", args.out.display());
        }
        Command::Eval {
            pred,
            gt,
            n_classes,
            ignore,
            out,
        } => {
            let args = EvalArgs {
                pred,
                gt,
                n_classes,
                ignore: ignore_ids(&ignore)?.unwrap_or_default(),
                out: out.unwrap_or_else(|| PathBuf::from(".")),
            };
            let report = commands::eval(&args)?;
            print!("{}", report.table);
            println!("{} image(s) scored", report.evaluated);
            if !report.missing.is_empty() {
                return Err(CliError::MissingFiles(report.missing));
            }
        }
        Command::Synth {
            out,
            variant,
            size,
            n_classes,
            n_images,
            noise,
            seed,
        } => {
            let spec = SynthSpec {
                variant,
                image_size: size,
                n_classes,
                n_images,
                noise_sigma: noise,
                seed,
                ..SynthSpec::default()
            };
            let stems = commands::synth(&spec, &out)?;
            println!("wrote {} samples to {}", stems.len(), out.display());
        }
        Command::Tiles {
            src,
            out,
            size,
            holdout,
            seed,
        } => {
            let c = commands::tiles(&src, &out, size, holdout, seed)?;
            println!("wrote {} training and {} validation tiles to {}", c.train, c.val, out.display());
        }
        Command::Gradcheck { instances, seed } => {
            let reports = commands::gradcheck(instances, seed)?;
            print!("{}", commands::format_gradcheck(&reports));
            let failed: Vec<String> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.to_string()).collect();
            if !failed.is_empty() {
                return Err(CliError::GradcheckFailed(failed));
            }
        }
    }
    Ok(())
}

/// Parse `args` (program name first), run, report errors on stderr and
/// return the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
