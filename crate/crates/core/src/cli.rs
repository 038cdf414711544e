//! Command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
//! Failures also print one JSON line to standard error:
//! `{"error":{"exit_code":2,"kind":"data","message":"..."}}`.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::{border_effect_curve, detect_plateau, rf_histogram, rf_rows};
use crate::dataset::Split;
use crate::error::{Error, Result};
use crate::infer::{
    accuracy_vs_uncertainty, mc_sample_predict, predict, preprocess, samples_vs_dcs, PaddingPolicy,
};
use crate::io::{
    generate_synthetic, load_dataset, read_image, write_csv, write_volume, RunConfig, ShapeKind, SyntheticSpec,
    Volume,
};
use crate::loss::{mean_dcs, LabelVolume};
use crate::network::{build, checkpoint, count_conv_parameters, count_parameters, ArchConfig, Variant};
use crate::rng::Rng;
use crate::train::{train, LossKind, TrainOutputs};

#[derive(Debug, Parser)]
#[command(name = "highres3d", version, about = "Compact high-resolution 3D segmentation networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset and its manifest.
    Generate(GenerateArgs),
    /// Train a network on a dataset manifest.
    Train(TrainArgs),
    /// Segment one image volume.
    Predict(PredictArgs),
    /// Monte Carlo dropout: majority labels and disagreement map.
    Sample(SampleArgs),
    /// Receptive-field and evaluation analyses.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Count trainable parameters of an architecture.
    CountParams(CountArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, value_enum, default_value_t = ShapeKind::Ellipsoids)]
    pub shapes: ShapeKind,
    #[arg(long, default_value_t = 1.0)]
    pub contrast: f64,
    #[arg(long, default_value_t = 0.25)]
    pub noise_std: f64,
    #[arg(long, default_value_t = 1)]
    pub train: usize,
    #[arg(long, default_value_t = 0)]
    pub validation: usize,
    #[arg(long, default_value_t = 1)]
    pub test: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for config.toml, metrics.csv, best.ckpt and final.ckpt.
    #[arg(long)]
    pub out: PathBuf,
    /// Run configuration; flags below override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub arch: Option<Variant>,
    #[arg(long, value_enum)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub subvolume: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub val_every: Option<usize>,
    #[arg(long)]
    pub stop_at_dcs: Option<f64>,
    /// Feature widths of the three stages, e.g. `16,32,64`.
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output label volume.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub pad: usize,
    /// Process the padded volume in tiles of this side.
    #[arg(long)]
    pub tile: Option<usize>,
    /// Also write the softmax scores.
    #[arg(long)]
    pub scores: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub pad: usize,
    #[arg(long)]
    pub out_labels: PathBuf,
    #[arg(long)]
    pub out_uncertainty: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Receptive-field histogram over all residual paths (CSV extent,count).
    Rf(RfArgs),
    /// Mean DCS against discarded border width.
    Border(BorderArgs),
    /// Samples-vs-DCS and accuracy-vs-uncertainty curves.
    Curve(CurveArgs),
}

#[derive(Debug, Args)]
pub struct RfArgs {
    #[arg(long, value_enum, default_value_t = Variant::Default)]
    pub arch: Variant,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BorderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long, value_delimiter = ',', default_value = "0,2,4,6,8,10")]
    pub borders: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    pub pad: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CurveArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,10")]
    pub samples: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.2,0.3,0.4,0.5,1.0")]
    pub thresholds: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub pad: usize,
    #[arg(long)]
    pub out_samples: Option<PathBuf>,
    #[arg(long)]
    pub out_accuracy: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    #[arg(long, value_enum, default_value_t = Variant::Default)]
    pub arch: Variant,
    #[arg(long, default_value_t = 160)]
    pub classes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Validation,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Validation => Split::Validation,
            SplitArg::Test => Split::Test,
        }
    }
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) => 1,
        Error::NonFinite(_) => 3,
        _ => 2,
    }
}

fn kind(code: i32) -> &'static str {
    match code {
        1 => "usage",
        3 => "numeric",
        _ => "data",
    }
}

pub fn error_line(code: i32, message: &str) -> String {
    serde_json::json!({ "error": { "exit_code": code, "kind": kind(code), "message": message } }).to_string()
}

/// Parses `args` (including the program name), runs the command and
/// returns the exit code. Normal output goes to `out`, error lines to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let _ = write!(err, "{e}");
            let _ = writeln!(err, "{}", error_line(1, &e.kind().to_string()));
            return 1;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let code = exit_code(&e);
            let _ = writeln!(err, "{}", error_line(code, &e.to_string()));
            code
        }
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

pub fn execute(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Generate(a) => {
            let spec = SyntheticSpec {
                size: a.size,
                classes: a.classes,
                shapes: a.shapes,
                contrast: a.contrast,
                noise_std: a.noise_std,
                train: a.train,
                validation: a.validation,
                test: a.test,
                seed: a.seed,
            };
            let manifest = generate_synthetic(&spec, &a.out)?;
            writeln!(out, "manifest: {}", manifest.display()).map_err(io_err)
        }
        Command::Train(a) => cmd_train(a, out),
        Command::Predict(a) => {
            let (spec, store) = checkpoint::load::<f32>(&a.checkpoint)?;
            let image = preprocess(&read_image(&a.input)?)?;
            let mut policy = PaddingPolicy::new(a.pad);
            policy.tile = a.tile;
            let (labels, scores) = predict(&spec, &store, &image, &policy)?;
            write_volume(&a.out, &Volume::labels(&labels))?;
            if let Some(p) = &a.scores {
                write_volume(p, &Volume::image(scores)?)?;
            }
            writeln!(out, "labels: {}", a.out.display()).map_err(io_err)
        }
        Command::Sample(a) => {
            let (spec, store) = checkpoint::load::<f32>(&a.checkpoint)?;
            let image = preprocess(&read_image(&a.input)?)?;
            let map = mc_sample_predict(&spec, &store, &image, &PaddingPolicy::new(a.pad), a.samples, a.seed)?;
            write_volume(&a.out_labels, &Volume::labels(&map.labels))?;
            write_volume(&a.out_uncertainty, &Volume::image(map.disagreement)?)?;
            writeln!(out, "samples: {}", map.samples).map_err(io_err)
        }
        Command::Analyze(AnalyzeCommand::Rf(a)) => {
            let spec = crate::network::ArchitectureSpec::highres3dnet(&ArchConfig::new(a.arch, 2))?;
            let rows = rf_rows(&rf_histogram(&spec)?);
            match &a.out {
                Some(p) => write_csv(p, &rows),
                None => {
                    let mut w = csv::Writer::from_writer(out);
                    for r in &rows {
                        w.serialize(r)?;
                    }
                    w.flush().map_err(io_err)
                }
            }
        }
        Command::Analyze(AnalyzeCommand::Border(a)) => {
            let (spec, store) = checkpoint::load::<f32>(&a.checkpoint)?;
            let ds = load_dataset(&a.data)?;
            let mut borders = a.borders.clone();
            borders.sort_unstable();
            let curve = border_effect_curve(&spec, &store, ds.split(a.split.into()), &borders, &PaddingPolicy::new(a.pad))?;
            write_rows(a.out.as_deref(), &curve, out)?;
            if let Some(b) = detect_plateau(&curve, 0.01) {
                writeln!(out, "# plateau from border {b}").map_err(io_err)?;
            }
            Ok(())
        }
        Command::Analyze(AnalyzeCommand::Curve(a)) => cmd_curve(a, out),
        Command::CountParams(a) => {
            let (_, store) = build::<f32>(&ArchConfig::new(a.arch, a.classes), &mut Rng::new(0))?;
            let total = count_parameters(&store);
            let conv = count_conv_parameters(&store);
            let millions = total as f64 / 1e6;
            writeln!(out, "arch: {:?}", a.arch).map_err(io_err)?;
            writeln!(out, "classes: {}", a.classes).map_err(io_err)?;
            writeln!(out, "parameters: {total}").map_err(io_err)?;
            writeln!(out, "conv_weights: {conv}").map_err(io_err)?;
            writeln!(out, "batchnorm_affine: {}", total - conv).map_err(io_err)?;
            writeln!(out, "approx: {millions:.2}M").map_err(io_err)
        }
    }
}

fn write_rows<T: serde::Serialize>(path: Option<&Path>, rows: &[T], out: &mut dyn Write) -> Result<()> {
    match path {
        Some(p) => write_csv(p, rows),
        None => {
            let mut w = csv::Writer::from_writer(out);
            for r in rows {
                w.serialize(r)?;
            }
            w.flush().map_err(io_err)
        }
    }
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = a.arch {
        cfg.arch = v;
    }
    if let Some(v) = a.loss {
        cfg.loss = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.subvolume {
        cfg.subvolume = v;
    }
    if let Some(v) = a.iters {
        cfg.iterations = v;
    }
    if let Some(v) = a.workers {
        cfg.workers = v;
    }
    if let Some(v) = a.val_every {
        cfg.val_every = v;
    }
    if let Some(v) = a.stop_at_dcs {
        cfg.stop_at_dcs = Some(v);
    }
    if let Some(w) = &a.widths {
        cfg.widths = w
            .as_slice()
            .try_into()
            .map_err(|_| Error::invalid(format!("--widths takes three values, got {}", w.len())))?;
    }
    let ds = load_dataset(&a.data)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let resolved = cfg.to_canonical_toml()?;
    let config_path = a.out.join("config.toml");
    std::fs::write(&config_path, &resolved).map_err(|e| Error::io(&config_path, e))?;
    write!(out, "{resolved}").map_err(io_err)?;
    let (spec, store) = build::<f32>(&cfg.arch_config(ds.num_classes), &mut Rng::new(cfg.seed))?;
    let outputs = TrainOutputs {
        metrics_csv: Some(a.out.join("metrics.csv")),
        best_checkpoint: Some(a.out.join("best.ckpt")),
    };
    let outcome = train(&spec, store, &ds, &cfg.train_config(), &outputs)?;
    checkpoint::save(a.out.join("final.ckpt"), &spec, &outcome.store)?;
    writeln!(out, "steps: {}", outcome.steps).map_err(io_err)?;
    writeln!(out, "stop: {:?}", outcome.stop).map_err(io_err)?;
    if let Some((step, dcs, _)) = &outcome.best {
        writeln!(out, "best_val_mean_dcs: {dcs:.4} (step {step})").map_err(io_err)?;
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct SamplesRow {
    samples: usize,
    mean_dcs: f64,
}

#[derive(serde::Serialize)]
struct AccuracyRow {
    threshold: f64,
    accuracy: Option<f64>,
    retained_fraction: f64,
}

fn cmd_curve(a: CurveArgs, out: &mut dyn Write) -> Result<()> {
    let (spec, store) = checkpoint::load::<f32>(&a.checkpoint)?;
    let ds = load_dataset(&a.data)?;
    let subjects = ds.split(a.split.into());
    let policy = PaddingPolicy::new(a.pad);
    let table: Vec<SamplesRow> = samples_vs_dcs(&spec, &store, subjects, &a.samples, &policy, a.seed)?
        .into_iter()
        .map(|(samples, mean_dcs)| SamplesRow { samples, mean_dcs })
        .collect();
    write_rows(a.out_samples.as_deref(), &table, out)?;
    // Accuracy against uncertainty pools voxels over all subjects.
    let m = a.samples.iter().copied().max().unwrap_or(1);
    let mut kept = vec![(0usize, 0usize); a.thresholds.len()];
    let mut total = 0usize;
    for s in subjects {
        let map = mc_sample_predict(&spec, &store, &preprocess(&s.image)?, &policy, m, a.seed)?;
        total += s.labels.len();
        for (k, p) in kept.iter_mut().zip(accuracy_vs_uncertainty(&map, &s.labels, &a.thresholds)?) {
            let n = (p.retained_fraction * s.labels.len() as f64).round() as usize;
            k.0 += n;
            k.1 += p.accuracy.map_or(0, |acc| (acc * n as f64).round() as usize);
        }
    }
    let rows: Vec<AccuracyRow> = a
        .thresholds
        .iter()
        .zip(kept)
        .map(|(&threshold, (n, correct))| AccuracyRow {
            threshold,
            accuracy: (n > 0).then(|| correct as f64 / n as f64),
            retained_fraction: n as f64 / total.max(1) as f64,
        })
        .collect();
    write_rows(a.out_accuracy.as_deref(), &rows, out)
}

/// Mean DCS of a label volume against a reference; used by examples.
pub fn score(pred: &LabelVolume, truth: &LabelVolume) -> Result<f64> {
    mean_dcs(pred, truth)
}
