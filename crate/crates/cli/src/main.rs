//! `epcl`: synthesize data, train, evaluate, predict and report uncertainty.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use epcl_core::grid::{ScalarMap, Shape3};
use epcl_core::metrics::{evaluate_labels, write_metrics_csv, MetricReport};
use epcl_core::model::{ParamSet, VNet};
use epcl_core::trainer::{
    evaluate_cases, image_path, label_path, load_case, load_checkpoint, predict_volume, run_training, write_dataset, RunOptions,
    Splits, TrainConfig, TrainError, TrainingData,
};
use epcl_core::uncertainty::{
    entropy_map, entropy_norm, export_reliability_slices, juq, reliability_map, reliability_registry,
};
use epcl_core::volume_io::{
    load_labels, load_volume, save_labels_nifti, save_labels_raw, save_volume_nifti, save_volume_raw, synth_dataset,
    LabelVolume, Volume, VolumeFormat,
};

#[derive(Parser)]
#[command(name = "epcl", version, about = "Semi-supervised 3D segmentation with prototype consistency")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Weights {
    Student,
    Teacher,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic ellipsoid dataset with splits.json.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        n: usize,
        /// Volume shape as H,W,D.
        #[arg(long, default_value = "48,48,48", value_parser = parse_shape)]
        shape: Shape3,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        labeled_frac: f64,
        /// Cases held out as the test split (taken from the end).
        #[arg(long, default_value_t = 0)]
        n_test: usize,
    },
    /// Train from a TOML config; overrides apply last.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// key=value, repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Metrics CSV over the test split.
    Eval {
        #[arg(long, required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Score stored label maps (`<dir>/labels/<name>.json`) instead of running a model.
        #[arg(long, conflicts_with = "checkpoint")]
        predictions: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Weights::Student)]
        weights: Weights,
    },
    /// Label and per-class probability volumes for one input.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Weights::Student)]
        weights: Weights,
    },
    /// Entropy-only and joint-uncertainty reliability slices plus summary.json.
    UqReport {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Slicing axis (0=H, 1=W, 2=D).
        #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(0..3))]
        axis: u8,
        /// Reliability mode; defaults to the checkpoint's.
        #[arg(long)]
        reliability_mode: Option<String>,
        #[arg(long, value_enum, default_value_t = Weights::Teacher)]
        weights: Weights,
    },
}

fn parse_shape(s: &str) -> Result<Shape3, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    parts.try_into().map_err(|_| format!("expected H,W,D, got `{s}`"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Ok(n) = std::env::var("EPCL_NUM_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("cannot size thread pool: {e}");
                }
            }
            _ => {
                eprintln!("error: EPCL_NUM_THREADS must be a positive integer, got `{n}`");
                return ExitCode::from(2);
            }
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

/// Bad arguments detected after parsing; exits with 2.
#[derive(Debug)]
struct Usage(String);

impl std::error::Error for Usage {}

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { out, n, shape, classes, seed, labeled_frac, n_test } => {
            cmd_synth(&out, n, shape, classes, seed, labeled_frac, n_test)
        }
        Command::Train { config, overrides } => cmd_train(config.as_deref(), &overrides),
        Command::Eval { checkpoint, data, out, predictions, weights } => {
            cmd_eval(checkpoint.as_deref(), &data, &out, predictions.as_deref(), weights)
        }
        Command::Predict { checkpoint, input, out, weights } => cmd_predict(&checkpoint, &input, &out, weights),
        Command::UqReport { checkpoint, input, out, axis, reliability_mode, weights } => {
            cmd_uq_report(&checkpoint, &input, &out, axis as usize, reliability_mode.as_deref(), weights)
        }
    }
}

fn cmd_synth(out: &Path, n: usize, shape: Shape3, classes: usize, seed: u64, frac: f64, n_test: usize) -> Result<()> {
    if !(0.0..=1.0).contains(&frac) {
        return Err(usage(format!("--labeled-frac must be in [0, 1], got {frac}")));
    }
    if shape.iter().any(|&s| s < 16) || !(2..=3).contains(&classes) {
        return Err(usage(format!("need every axis >= 16 and 2 or 3 classes, got {shape:?} / {classes}")));
    }
    let labeled = (frac * n as f64 - 1e-9).ceil().max(0.0) as usize;
    if labeled + n_test > n {
        return Err(usage(format!("{labeled} labeled + {n_test} test cases exceed --n {n}")));
    }
    let cases = synth_dataset(n, shape, classes, seed)?;
    let names: Vec<String> = cases.iter().map(|c| c.0.name.clone()).collect();
    let splits = Splits {
        labeled: names[..labeled].to_vec(),
        unlabeled: names[labeled..n - n_test].to_vec(),
        test: names[n - n_test..].to_vec(),
    };
    write_dataset(out, &cases, &splits)?;
    println!(
        "wrote {n} cases to {}: {} labeled, {} unlabeled, {} test",
        out.display(),
        splits.labeled.len(),
        splits.unlabeled.len(),
        splits.test.len()
    );
    Ok(())
}

fn cmd_train(config: Option<&Path>, overrides: &[String]) -> Result<()> {
    let base = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::from_toml_str(&text).map_err(config_error)?
        }
        None => TrainConfig::default(),
    };
    let config = base.with_overrides(overrides).map_err(config_error)?;
    let data_dir = config.data_dir.clone().ok_or_else(|| usage("config has no data_dir"))?;
    let data = TrainingData::load(&data_dir, config.num_classes)?;
    let outcome = run_training(&config, &data, &RunOptions::default())?;
    if let Some(last) = outcome.records.last() {
        let r = &last.report;
        println!(
            "iteration {}: total {:.5} l_seg {:.5} l_lc {:.5} l_uc1 {:.5} l_uc2 {:.5} lambda_con {:.4}",
            last.iteration, r.total, r.l_seg, r.l_lc, r.l_uc1, r.l_uc2, r.lambda_con
        );
    }
    println!("checkpoint {}", outcome.final_checkpoint.display());
    println!("log {}", outcome.log_path.display());
    Ok(())
}

fn config_error(e: TrainError) -> anyhow::Error {
    match e {
        TrainError::Config(_) | TrainError::UnknownKey { .. } | TrainError::Strategy(_) => usage(e.to_string()),
        other => other.into(),
    }
}

fn load_model(checkpoint: &Path, weights: Weights) -> Result<(TrainConfig, VNet, ParamSet)> {
    let (config, state) = load_checkpoint(checkpoint)?;
    let (model, _) = VNet::init(config.backbone(), 0)?;
    let params = match weights {
        Weights::Student => state.pair.student,
        Weights::Teacher => state.pair.teacher,
    };
    Ok((config, model, params))
}

fn cmd_eval(
    checkpoint: Option<&Path>,
    data: &Path,
    out: &Path,
    predictions: Option<&Path>,
    weights: Weights,
) -> Result<()> {
    let splits = Splits::load(data)?;
    if splits.test.is_empty() {
        bail!("{} has an empty test split", data.display());
    }
    let rows: Vec<(String, usize, MetricReport)> = match (checkpoint, predictions) {
        (Some(ckpt), _) => {
            let (config, _, params) = load_model(ckpt, weights)?;
            let per_case = splits
                .test
                .par_iter()
                .map(|name| {
                    let case = load_case(data, name, config.num_classes)?;
                    Ok(evaluate_cases(&config, &params, std::slice::from_ref(&case))?)
                })
                .collect::<Result<Vec<_>>>()?;
            per_case.into_iter().flatten().collect()
        }
        (None, Some(pred_dir)) => {
            let per_case = splits
                .test
                .par_iter()
                .map(|name| {
                    let gt = load_labels(&label_path(data, name), VolumeFormat::RawJson, u8::MAX as usize + 1)?;
                    let pred = load_labels(&label_path(pred_dir, name), VolumeFormat::RawJson, u8::MAX as usize + 1)
                        .with_context(|| format!("prediction for {name}"))?;
                    if gt.shape != pred.shape {
                        bail!("{name}: prediction shape {:?} vs reference {:?}", pred.shape, gt.shape);
                    }
                    let spacing = load_volume(&image_path(data, name), VolumeFormat::RawJson)?.spacing;
                    let classes = (max_label(&gt).max(max_label(&pred)) + 1).max(2);
                    let r = evaluate_labels(&pred.data, &gt.data, gt.shape, spacing, classes)?;
                    Ok(r.into_iter().map(|(c, m)| (name.clone(), c, m)).collect::<Vec<_>>())
                })
                .collect::<Result<Vec<_>>>()?;
            per_case.into_iter().flatten().collect()
        }
        (None, None) => return Err(usage("eval needs --checkpoint or --predictions")),
    };
    write_metrics_csv(out, &rows)?;
    let dice: f64 = rows.iter().map(|r| r.2.dice).sum::<f64>() / rows.len().max(1) as f64;
    println!("{} rows, macro Dice {:.2}; wrote {}", rows.len(), dice * 100.0, out.display());
    Ok(())
}

fn max_label(l: &LabelVolume) -> usize {
    l.data.iter().copied().max().unwrap_or(0) as usize
}

/// Splits `path` into (stem, extension) where the extension may be `nii.gz`.
fn stem_and_ext(path: &Path) -> (PathBuf, &'static str) {
    let s = path.to_string_lossy();
    for ext in ["nii.gz", "nii", "json"] {
        if let Some(stem) = s.strip_suffix(&format!(".{ext}")) {
            return (PathBuf::from(stem), ext);
        }
    }
    (path.to_path_buf(), "json")
}

fn save_volume(path: &Path, v: &Volume) -> Result<()> {
    match VolumeFormat::from_path(path) {
        VolumeFormat::Nifti => save_volume_nifti(path, v)?,
        VolumeFormat::RawJson => save_volume_raw(path, v)?,
    }
    Ok(())
}

fn cmd_predict(checkpoint: &Path, input: &Path, out: &Path, weights: Weights) -> Result<()> {
    let (config, model, params) = load_model(checkpoint, weights)?;
    let vol = load_volume(input, VolumeFormat::from_path(input))?;
    let p = predict_volume(&model, &params, &vol, config.patch(), config.stride())?;
    let (stem, ext) = stem_and_ext(out);
    let labels_path = PathBuf::from(format!("{}.{ext}", stem.display()));
    if let Some(parent) = labels_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    match VolumeFormat::from_path(&labels_path) {
        VolumeFormat::Nifti => save_labels_nifti(&labels_path, vol.spacing, &p.labels)?,
        VolumeFormat::RawJson => save_labels_raw(&labels_path, vol.spacing, &p.labels)?,
    }
    let probs = p.probs();
    for c in 0..probs.channels {
        let data = (0..probs.voxels()).map(|v| probs.voxel(v)[c] as f32).collect();
        let name = format!("{}_prob{c}", stem.file_name().unwrap_or_default().to_string_lossy());
        let prob = Volume::with_spacing(name, vol.shape, vol.spacing, data)?;
        save_volume(&PathBuf::from(format!("{}_prob{c}.{ext}", stem.display())), &prob)?;
    }
    println!("wrote {} and {} probability volumes", labels_path.display(), probs.channels);
    Ok(())
}

#[derive(Serialize)]
struct MapSummary {
    min: f64,
    max: f64,
    mean: f64,
    spatial_variance: f64,
    slices: usize,
}

#[derive(Serialize)]
struct UqSummary {
    input: String,
    reliability_mode: String,
    axis: usize,
    entropy: MapSummary,
    juq: MapSummary,
    juq_lower_variance: bool,
}

fn summarize(m: &ScalarMap, slices: usize) -> MapSummary {
    let (min, max) = m.min_max();
    MapSummary { min, max, mean: m.mean(), spatial_variance: m.variance(), slices }
}

fn cmd_uq_report(
    checkpoint: &Path,
    input: &Path,
    out: &Path,
    axis: usize,
    mode: Option<&str>,
    weights: Weights,
) -> Result<()> {
    let (config, model, params) = load_model(checkpoint, weights)?;
    let mode = mode.unwrap_or(&config.reliability_mode);
    let strategy = reliability_registry().get(mode).map_err(|e| usage(e.to_string()))?;
    let vol = load_volume(input, VolumeFormat::from_path(input))?;
    let p = predict_volume(&model, &params, &vol, config.patch(), config.stride())?;
    let ent = entropy_norm(&entropy_map(p.probs())?);
    let joint = juq(&p.pred, p.probs())?;
    let r_ent = reliability_map(&ent, strategy.as_ref());
    let r_juq = reliability_map(&joint, strategy.as_ref());
    let ent_paths = export_reliability_slices(&r_ent.map, axis, &out.join("entropy"), "entropy")?;
    let juq_paths = export_reliability_slices(&r_juq.map, axis, &out.join("juq"), "juq")?;
    let entropy = summarize(&r_ent.map, ent_paths.len());
    let juq = summarize(&r_juq.map, juq_paths.len());
    let summary = UqSummary {
        input: input.display().to_string(),
        reliability_mode: mode.to_string(),
        axis,
        juq_lower_variance: juq.spatial_variance < entropy.spatial_variance,
        entropy,
        juq,
    };
    let path = out.join("summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary)?).with_context(|| format!("writing {}", path.display()))?;
    println!(
        "{} slices per map; spatial variance entropy {:.3e}, juq {:.3e}; wrote {}",
        ent_paths.len(),
        summary.entropy.spatial_variance,
        summary.juq.spatial_variance,
        path.display()
    );
    Ok(())
}
