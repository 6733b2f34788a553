//! The work behind each subcommand, callable without the argument parser.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use slc_core::checkpoint::{load_model, save_model};
use slc_core::data::dataset::{list_stems, load_dataset, make_offline_tiles, read_stems, Sample, TileCounts};
use slc_core::data::image::Image;
use slc_core::data::raster::{load_image, load_labels, save_labels, save_rgb8};
use slc_core::data::synth::{generate_synthetic, SynthSpec};
use slc_core::data::tiles::{Merge, Segmenter};
use slc_core::gradcheck::{run_suite, OpReport};
use slc_core::metrics::{ConfusionMatrix, Scores};
use slc_core::network::{LossBreakdown, Slcnet};
use slc_core::train::{evaluate, predict_labels, run_epoch};
use slc_core::{CoreError, LabelMap};
use slc_tensor::{Adam, AdamConfig, Real};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::palette::{self, Palette};

pub const LOG_FILE: &str = "train_log.tsv";
pub const LOG_HEADER: &str = "epoch\tloss_total\tloss_fcsm\tloss_side\tloss_final\tval_mIoU";
pub const BEST_CHECKPOINT: &str = "best.slcw";
pub const LAST_CHECKPOINT: &str = "last.slcw";
pub const RUN_CONFIG: &str = "run.cfg";
pub const METRICS_FILE: &str = "metrics.txt";

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(CoreError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io(path, e))
}

// ------------------------------------------------------------------- train

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub val_miou: f64,
}

impl EpochRow {
    /// One tab-separated log line. The correlation loss is logged unweighted
    /// even when it does not enter the total.
    pub fn to_line(&self) -> String {
        let l = &self.loss;
        format!(
            "{}\t{:.8}\t{:.8}\t{:.8}\t{:.8}\t{:.6}",
            self.epoch, l.total, l.fcsm, l.side, l.lovasz, self.val_miou
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub rows: Vec<EpochRow>,
    pub best_epoch: usize,
    pub best_miou: f64,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub seconds: f64,
}

fn load_split(dir: &Path, n_classes: usize) -> Result<Vec<Sample>> {
    let samples = load_dataset(dir)?;
    if samples.is_empty() {
        return Err(CliError::Config(format!("{}: no samples", dir.display())));
    }
    for s in &samples {
        s.labels
            .validate(n_classes)
            .map_err(|e| CliError::Config(format!("{}/{}: {e}", dir.display(), s.stem)))?;
    }
    Ok(samples)
}

fn build_model<T: Real>(config: &RunConfig) -> Result<Slcnet<T>> {
    let Some(path) = &config.resume else {
        return Ok(Slcnet::new(config.model.clone())?);
    };
    let model = load_model::<T>(path)?;
    let same = |c: &slc_core::network::ModelConfig| slc_core::network::ModelConfig { seed: 0, ..c.clone() };
    if same(&model.config) != same(&config.model) {
        return Err(CliError::Config(format!(
            "{} was built with a different model configuration",
            path.display()
        )));
    }
    Ok(model)
}

/// Train per `config`, writing the log, the best and last checkpoints and
/// the resolved run configuration under `config.out_dir`. `on_epoch` sees
/// every log row as it is written.
pub fn train<T: Real>(config: &RunConfig, mut on_epoch: impl FnMut(&EpochRow)) -> Result<TrainSummary> {
    config.validate()?;
    let started = Instant::now();
    let train_dir = config
        .train_dir
        .as_ref()
        .ok_or_else(|| CliError::Config("train_dir is not set".into()))?;
    let n = config.model.n_classes;
    let train_set = load_split(train_dir, n)?;
    let val_set = match &config.val_dir {
        Some(dir) => load_split(dir, n)?,
        None => train_set.clone(),
    };
    let out = &config.out_dir;
    create_dir(out)?;
    let cfg_path = out.join(RUN_CONFIG);
    fs::write(&cfg_path, config.to_text()).map_err(|e| io(&cfg_path, e))?;

    let mut model = build_model::<T>(config)?;
    let mut optimizer = Adam::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    });
    let options = config.train_options();
    let log_path = out.join(LOG_FILE);
    let mut log = format!("{LOG_HEADER}\n");
    let (best_path, last_path) = (out.join(BEST_CHECKPOINT), out.join(LAST_CHECKPOINT));
    let mut rows = Vec::with_capacity(config.epochs);
    let (mut best_epoch, mut best_miou) = (0, f64::NEG_INFINITY);
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let loss = run_epoch(&mut model, &mut optimizer, &train_set, &options, epoch, &mut step)?;
        let cm = evaluate(&mut model, &val_set, config.tile_size, config.overlap, config.merge, &config.ignore)?;
        let row = EpochRow {
            epoch,
            loss,
            val_miou: cm.scores().miou,
        };
        log.push_str(&row.to_line());
        log.push('\n');
        fs::write(&log_path, &log).map_err(|e| io(&log_path, e))?;
        if row.val_miou > best_miou {
            best_miou = row.val_miou;
            best_epoch = epoch;
            save_model(&best_path, &mut model)?;
        }
        save_model(&last_path, &mut model)?;
        on_epoch(&row);
        rows.push(row);
    }
    Ok(TrainSummary {
        rows,
        best_epoch,
        best_miou,
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        seconds: started.elapsed().as_secs_f64(),
    })
}

// ----------------------------------------------------------------- predict

#[derive(Clone, Debug)]
pub struct PredictArgs {
    pub checkpoint: PathBuf,
    /// An image file, or a directory of images (a dataset directory's
    /// `images/` is used when present).
    pub input: PathBuf,
    /// Label PNG for a single image, or a directory for many.
    pub out: PathBuf,
    /// Also write colour overlays: a file for a single image, a directory
    /// for many.
    pub overlay: Option<PathBuf>,
    pub palette: Option<PathBuf>,
    pub tile_size: Option<usize>,
    pub overlap: f64,
    pub merge: Merge,
}

/// Whole-image prediction for any size: the image is zero-padded to even
/// sides of at least 32 and the labels cropped back.
pub fn predict_image<T: Real>(model: &mut dyn Segmenter<T>, image: &Image, tile: Option<usize>, overlap: f64, merge: Merge) -> Result<LabelMap> {
    if tile.is_some() {
        return Ok(predict_labels(model, image, tile, overlap, merge)?);
    }
    let (h, w) = (image.height(), image.width());
    let fit = |v: usize| v.max(32).next_multiple_of(2);
    let (ph, pw) = (fit(h), fit(w));
    if (ph, pw) == (h, w) {
        return Ok(predict_labels(model, image, None, overlap, merge)?);
    }
    let labels = predict_labels(model, &image.pad_to(ph, pw, 0.0), None, overlap, merge)?;
    Ok(labels.crop(0, 0, h, w))
}

fn image_inputs(input: &Path) -> Result<Vec<(String, PathBuf)>> {
    let dir = if input.join("images").is_dir() { input.join("images") } else { input.to_path_buf() };
    let stems = if input.join("images").is_dir() { read_stems(input)? } else { list_stems(&dir)? };
    Ok(stems.into_iter().map(|s| (s.clone(), dir.join(format!("{s}.png")))).collect())
}

/// Returns the number of images written.
pub fn predict<T: Real>(args: &PredictArgs) -> Result<usize> {
    let mut model = load_model::<T>(&args.checkpoint)?;
    let n = model.config.n_classes;
    let palette = match &args.palette {
        Some(p) => Palette::load(p)?,
        None => Palette::default_for(n),
    };
    if palette.len() != n {
        return Err(CliError::Config(format!("palette has {} colours for {n} classes", palette.len())));
    }
    let batch = args.input.is_dir();
    let inputs = if batch {
        image_inputs(&args.input)?
    } else {
        let stem = args.input.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
        vec![(stem, args.input.clone())]
    };
    let out_for = |base: &Path, stem: &str| if batch { base.join(format!("{stem}.png")) } else { base.to_path_buf() };
    for dir in [Some(&args.out), args.overlay.as_ref()].into_iter().flatten() {
        let parent = if batch { Some(dir.as_path()) } else { dir.parent() };
        if let Some(p) = parent.filter(|p| !p.as_os_str().is_empty()) {
            create_dir(p)?;
        }
    }
    for (stem, path) in &inputs {
        let image = load_image(path)?;
        let labels = predict_image(&mut model, &image, args.tile_size, args.overlap, args.merge)?;
        save_labels(out_for(&args.out, stem), &labels)?;
        if let Some(o) = &args.overlay {
            save_rgb8(out_for(o, stem), image.height(), image.width(), &palette.overlay(&image, &labels))?;
        }
    }
    // Keep the colours next to the rendered overlays.
    if let Some(o) = &args.overlay {
        let dir = if batch { o.clone() } else { o.parent().map(Path::to_path_buf).unwrap_or_default() };
        let p = dir.join(palette::FILE_NAME);
        fs::write(&p, palette.to_text()).map_err(|e| io(&p, e))?;
    }
    Ok(inputs.len())
}

// -------------------------------------------------------------------- eval

#[derive(Clone, Debug)]
pub struct EvalArgs {
    pub pred: PathBuf,
    pub gt: PathBuf,
    /// Inferred from the largest id present when absent.
    pub n_classes: Option<usize>,
    pub ignore: Vec<u8>,
    /// Directory for `metrics.txt`.
    pub out: PathBuf,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub matrix: ConfusionMatrix,
    pub scores: Scores,
    pub evaluated: usize,
    /// Stems present on only one side.
    pub missing: Vec<String>,
    pub table: String,
}

fn label_dir(dir: &Path) -> PathBuf {
    if dir.join("labels").is_dir() {
        dir.join("labels")
    } else {
        dir.to_path_buf()
    }
}

/// Tab-separated table with four decimals: one row per evaluated class,
/// then the means.
pub fn format_scores(scores: &Scores) -> String {
    let mut out = String::from("class\tIoU\tF1\tprecision\trecall\n");
    for (c, s) in scores.per_class.iter().enumerate() {
        if let Some(s) = s {
            let _ = writeln!(out, "{c}\t{:.4}\t{:.4}\t{:.4}\t{:.4}", s.iou, s.f1, s.precision, s.recall);
        }
    }
    let _ = writeln!(out, "mIoU\t{:.4}", scores.miou);
    let _ = writeln!(out, "ave_F1\t{:.4}", scores.ave_f1);
    out
}

/// Scores every stem present in both directories and writes `metrics.txt`.
/// Stems found on one side only are listed in the report, not scored.
pub fn eval(args: &EvalArgs) -> Result<EvalReport> {
    let (pd, gd) = (label_dir(&args.pred), label_dir(&args.gt));
    let (ps, gs) = (list_stems(&pd)?, list_stems(&gd)?);
    let missing: Vec<String> = ps
        .iter()
        .filter(|s| !gs.contains(s))
        .chain(gs.iter().filter(|s| !ps.contains(s)))
        .cloned()
        .collect();
    let mut pairs = Vec::new();
    for stem in gs.iter().filter(|s| ps.contains(s)) {
        let pred = load_labels(pd.join(format!("{stem}.png")))?;
        let gt = load_labels(gd.join(format!("{stem}.png")))?;
        pairs.push((pred, gt));
    }
    let n = match args.n_classes {
        Some(n) => n,
        None => pairs
            .iter()
            .flat_map(|(p, g)| p.ids().iter().chain(g.ids()))
            .filter(|&&id| id != slc_core::DEFAULT_IGNORE)
            .map(|&id| id as usize + 1)
            .max()
            .unwrap_or(1),
    };
    let mut matrix = ConfusionMatrix::with_ignore(n, &args.ignore);
    for (pred, gt) in &pairs {
        matrix.accumulate(pred, gt)?;
    }
    let scores = matrix.scores();
    let table = format_scores(&scores);
    create_dir(&args.out)?;
    let path = args.out.join(METRICS_FILE);
    fs::write(&path, &table).map_err(|e| io(&path, e))?;
    Ok(EvalReport {
        matrix,
        scores,
        evaluated: pairs.len(),
        missing,
        table,
    })
}

// ---------------------------------------------------------- synth / tiles

pub fn synth(spec: &SynthSpec, out: &Path) -> Result<Vec<String>> {
    Ok(generate_synthetic(spec, out)?)
}

pub fn tiles(src: &Path, out: &Path, size: usize, holdout: f64, seed: u64) -> Result<TileCounts> {
    Ok(make_offline_tiles(src, out, size, holdout, seed)?)
}

// --------------------------------------------------------------- gradcheck

pub fn format_gradcheck(reports: &[OpReport]) -> String {
    let mut out = String::from("op\tinstances\tmax_rel_error\ttolerance\tresult\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{}\t{}\t{:.3e}\t{:.0e}\t{}",
            r.name,
            r.instances,
            r.worst,
            r.tolerance,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    out
}

pub fn gradcheck(instances: usize, seed: u64) -> Result<Vec<OpReport>> {
    Ok(run_suite(instances, seed)?)
}
