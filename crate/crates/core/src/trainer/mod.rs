//! Mean-teacher training loop: batch assembly, teacher uncertainty,
//! prototype consistency, optimization, EMA, checkpoints and inference.

mod checkpoint;
mod combination;
mod config;
mod data;
mod predict;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augmentation::{AugmentError, Sample};
use crate::grid::{softmax_channels, ClassMap};
use crate::losses::{consistency_losses, head_losses, ramp_lambda, supervised_loss, total_loss, LossError, LossReport, SegLoss};
use crate::metrics::MetricError;
use crate::model::{Adam, ModelError, ParamGrads, Tape, TeacherStudentPair, Tensor, VNet};
use crate::prototypes::PrototypeError;
use crate::registry::UnknownStrategy;
use crate::uncertainty::{juq, refine_pseudo_labels, reliability_map, ReliabilityStrategy, UncertaintyError};
use crate::volume_io::VolumeError;

pub use checkpoint::{load_checkpoint, save_checkpoint, MAGIC};
pub use combination::{
    combination_registry, AugMapOnOrig, CombinationStrategy, Concat, OrigMapOnAug, PlanContext, SeparateMultiProto,
    SupervisedOnly, TeacherStream,
};
pub use config::{Preset, TrainConfig};
pub use data::{
    image_path, label_path, load_case, sample_labeled, sample_unlabeled, write_dataset, Batch, Splits, TrainingData,
};
pub use predict::{evaluate_cases, predict_volume, Prediction};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("unknown config key `{key}`; valid keys: {valid}")]
    UnknownKey { key: String, valid: String },
    #[error(transparent)]
    Strategy(#[from] UnknownStrategy),
    #[error("data: {0}")]
    Data(String),
    #[error("batch: {0}")]
    Batch(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error(transparent)]
    Prototype(#[from] PrototypeError),
    #[error(transparent)]
    Loss(LossError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("non-finite {component} = {value} at iteration {iteration}{}", diagnostics.as_ref().map(|p| format!("; diagnostics in {}", p.display())).unwrap_or_default())]
    NonFiniteLoss {
        iteration: usize,
        component: String,
        value: f64,
        stats: Box<Diagnostics>,
        diagnostics: Option<PathBuf>,
    },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl From<LossError> for TrainError {
    fn from(e: LossError) -> Self {
        match e {
            LossError::Prototype(p) => TrainError::Prototype(p),
            other => TrainError::Loss(other),
        }
    }
}

/// Summary of one intermediate map, dumped when a loss goes non-finite.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MapStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub non_finite: usize,
}

impl MapStats {
    pub fn of<'a>(values: impl IntoIterator<Item = &'a f64>) -> Self {
        let (mut min, mut max, mut sum, mut n, mut bad) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize, 0usize);
        for &x in values {
            if !x.is_finite() {
                bad += 1;
                continue;
            }
            min = min.min(x);
            max = max.max(x);
            sum += x;
            n += 1;
        }
        Self { min, max, mean: if n > 0 { sum / n as f64 } else { f64::NAN }, non_finite: bad }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub iteration: usize,
    pub report: LossReport,
    pub maps: BTreeMap<String, MapStats>,
}

/// Everything that changes from one iteration to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Number of completed optimizer steps.
    pub iteration: usize,
    pub pair: TeacherStudentPair,
    pub adam: Adam,
}

/// One line of the JSONL training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    /// 1-based index of the step that produced `report`.
    pub iteration: usize,
    #[serde(flatten)]
    pub report: LossReport,
}

/// Mean-teacher trainer bound to one configuration.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: VNet,
    pub state: TrainState,
    combination: Arc<dyn CombinationStrategy>,
    reliability: Arc<dyn ReliabilityStrategy>,
    losses: Vec<Arc<dyn SegLoss>>,
}

/// Per-iteration generator; `stream` separates the labeled and unlabeled
/// draws so either path is reproducible on its own.
fn iteration_rng(seed: u64, iteration: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * iteration as u64 + stream);
    rng
}

fn images_tensor(patch: [usize; 3], samples: &[&Sample]) -> Tensor {
    let images: Vec<&[f32]> = samples.iter().map(|s| s.image.as_slice()).collect();
    Tensor::from_images(patch, &images)
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let (model, params) = VNet::init(config.backbone(), config.seed)?;
        let adam = Adam::new(&params, config.lr);
        let state = TrainState { iteration: 0, pair: TeacherStudentPair::new(params, config.ema_decay), adam };
        Self::with_state(config, model, state)
    }

    /// Rebuilds the model for `config` around a saved state.
    pub fn from_state(config: TrainConfig, state: TrainState) -> Result<Self, TrainError> {
        config.validate()?;
        let (model, fresh) = VNet::init(config.backbone(), config.seed)?;
        if !fresh.same_layout(&state.pair.student) || !fresh.same_layout(&state.pair.teacher) {
            return Err(TrainError::BadCheckpoint("parameter layout does not match the configured backbone".into()));
        }
        Self::with_state(config, model, state)
    }

    fn with_state(config: TrainConfig, model: VNet, state: TrainState) -> Result<Self, TrainError> {
        let combination = combination_registry().get(&config.combination_mode)?;
        let reliability = crate::uncertainty::reliability_registry().get(&config.reliability_mode)?;
        let losses = head_losses(&config.head_losses, config.focal_gamma)?;
        Ok(Self { config, model, state, combination, reliability, losses })
    }

    pub fn combination(&self) -> &dyn CombinationStrategy {
        self.combination.as_ref()
    }

    /// Draws the batch of the next iteration.
    pub fn next_batch(&self, data: &TrainingData) -> Result<Batch, TrainError> {
        let c = &self.config;
        let k = self.state.iteration;
        let labeled = sample_labeled(data, c.labeled_batch, c.patch(), c.flip_rotate, &mut iteration_rng(c.seed, k, 0))?;
        let (u1, u2) = if self.combination.uses_unlabeled() {
            sample_unlabeled(data, c.unlabeled_batch, c.patch(), c.flip_rotate, &mut iteration_rng(c.seed, k, 1))?
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(Batch { labeled, u1, u2 })
    }

    /// Samples a batch and runs one [`Trainer::train_step`].
    pub fn step(&mut self, data: &TrainingData) -> Result<LossReport, TrainError> {
        let batch = self.next_batch(data)?;
        self.train_step(&batch)
    }

    fn teacher_streams(&self, batch: &Batch) -> Result<(Vec<TeacherStream>, Vec<TeacherStream>), TrainError> {
        if batch.u1.is_empty() {
            return Ok((Vec::new(), Vec::new()));
        }
        let patch = self.config.patch();
        let inputs: Vec<&Sample> = batch.u1.iter().chain(&batch.u2).collect();
        let preds = self.model.predict(&self.state.pair.teacher, images_tensor(patch, &inputs))?;
        if let Some((i, p)) = preds.iter().enumerate().find(|(_, p)| p.mean_probs.data.iter().any(|x| !x.is_finite())) {
            // A diverged teacher would otherwise surface as an invalid-distribution error.
            let iteration = self.state.iteration + 1;
            let mut maps = BTreeMap::new();
            maps.insert(format!("teacher.unlabeled[{i}].mean_probs"), MapStats::of(&p.mean_probs.data));
            return Err(TrainError::NonFiniteLoss {
                iteration,
                component: "teacher.mean_probs".into(),
                value: p.mean_probs.data.iter().copied().find(|x| !x.is_finite()).unwrap_or(f64::NAN),
                stats: Box::new(Diagnostics { iteration, report: LossReport::default(), maps }),
                diagnostics: None,
            });
        }
        let mut streams = preds
            .into_iter()
            .map(|pred| {
                let j = juq(&pred, &pred.mean_probs)?;
                let r = reliability_map(&j, self.reliability.as_ref());
                let pseudo = refine_pseudo_labels(&pred.mean_probs, &r)?;
                Ok(TeacherStream { pred, juq: j, reliability: r, pseudo })
            })
            .collect::<Result<Vec<_>, TrainError>>()?;
        let u2 = streams.split_off(batch.u1.len());
        Ok((streams, u2))
    }

    /// Full pipeline for one prepared batch: teacher uncertainty, student
    /// forward, supervised and consistency losses, one optimizer step on the
    /// student and the EMA update of the teacher.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossReport, TrainError> {
        let cfg = &self.config;
        let c = cfg.num_classes;
        let patch = cfg.patch();
        let iteration = self.state.iteration + 1;
        let lambda_con = ramp_lambda(iteration, cfg.total_iters, 1.0);
        let labels: Vec<Vec<u8>> = batch
            .labeled
            .iter()
            .map(|s| s.label.clone().ok_or_else(|| TrainError::Batch(format!("labeled sample `{}` has no label", s.id))))
            .collect::<Result<_, _>>()?;
        if batch.u1.len() != batch.u2.len() {
            return Err(TrainError::Batch("unlabeled streams differ in length".into()));
        }

        let (u1, u2) = self.teacher_streams(batch)?;
        let ctx = PlanContext {
            num_classes: c,
            patch,
            labels: &labels,
            u1: &u1,
            u2: &u2,
            lambda1: cfg.lambda1,
            lambda2: cfg.lambda2,
            lambda_con,
            tau: cfg.temperature,
        };
        let plan = self.combination.plan(&ctx)?;

        let inputs: Vec<&Sample> = batch.labeled.iter().chain(&batch.u1).chain(&batch.u2).collect();
        let n_total = inputs.len();
        let n_lab = batch.labeled.len();
        let (report, grads, maps) = {
            let mut tape = Tape::new(&self.state.pair.student);
            let x = tape.input(images_tensor(patch, &inputs));
            let nodes = self.model.forward(&mut tape, x, true)?;
            let head_probs: Vec<Vec<ClassMap>> = nodes
                .head_logits
                .iter()
                .map(|&id| (0..n_lab).map(|i| softmax_channels(&tape.value(id).to_class_map(i))).collect())
                .collect();
            let targets: Vec<ClassMap> = labels.iter().map(|l| ClassMap::one_hot(l, patch, c)).collect();
            let sup = supervised_loss(&head_probs, &targets, &self.losses)?;
            let proto_node = nodes.prototypes.expect("prototype features requested");
            let features: Vec<ClassMap> = (0..n_total).map(|i| tape.value(proto_node).to_class_map(i)).collect();
            let cons = consistency_losses(&features, &plan)?;

            let mut report = sup.report;
            report.l_lc = cons.l_lc;
            report.l_uc1 = cons.l_uc1;
            report.l_uc2 = cons.l_uc2;
            report.lambda_con = lambda_con;
            report.total =
                total_loss(report.l_seg, report.l_lc, report.l_uc1, report.l_uc2, lambda_con).unwrap_or(f64::NAN);

            let mut maps = BTreeMap::new();
            let mut note = |name: String, values: &[f64]| {
                maps.insert(name, MapStats::of(values));
            };
            for (k, head) in head_probs.iter().enumerate() {
                note(format!("student.head{k}.probs"), &head.iter().flat_map(|m| m.data.iter().copied()).collect::<Vec<_>>());
            }
            note("student.features".into(), &features.iter().flat_map(|m| m.data.iter().copied()).collect::<Vec<_>>());
            for (name, streams) in [("u1", &u1), ("u2", &u2)] {
                for (i, s) in streams.iter().enumerate() {
                    note(format!("teacher.{name}[{i}].mean_probs"), &s.pred.mean_probs.data);
                    note(format!("teacher.{name}[{i}].juq"), &s.juq.map.data);
                    note(format!("teacher.{name}[{i}].reliability"), &s.reliability.map.data);
                }
            }
            for (c, v) in cons.fused.global.vectors.iter().enumerate() {
                note(format!("prototype.global[{c}]"), v);
            }

            let grads = if report.check_finite().is_ok() {
                let mut seeds = Vec::with_capacity(nodes.head_logits.len() + 1);
                for (k, &id) in nodes.head_logits.iter().enumerate() {
                    let mut maps_k: Vec<ClassMap> = sup.logit_grads[k].clone();
                    maps_k.extend((n_lab..n_total).map(|_| ClassMap::zeros(patch, c)));
                    seeds.push((id, Tensor::from_class_maps(&maps_k)));
                }
                seeds.push((proto_node, Tensor::from_class_maps(&cons.feature_grads)));
                Some(tape.backward(seeds)?)
            } else {
                None
            };
            (report, grads, maps)
        };

        let fail = |component: String, value: f64| TrainError::NonFiniteLoss {
            iteration,
            component,
            value,
            stats: Box::new(Diagnostics { iteration, report, maps: maps.clone() }),
            diagnostics: None,
        };
        if let Err(LossError::NonFiniteLoss { component, value }) = report.check_finite() {
            return Err(fail(component.to_string(), value));
        }
        let grads: ParamGrads = grads.expect("finite report has gradients");
        if !grads.is_finite() {
            return Err(fail("gradient".into(), grads.l2_norm()));
        }
        self.state.adam.update(&mut self.state.pair.student, &grads)?;
        self.state.pair.ema_update()?;
        self.state.iteration = iteration;
        Ok(report)
    }
}

/// Options of [`run_training`] beyond the config.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue from this checkpoint instead of a fresh initialization.
    pub resume: Option<PathBuf>,
    /// Stop once this many iterations are complete (for interrupted runs).
    pub stop_at: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub iterations: usize,
    /// Records produced by this invocation.
    pub records: Vec<LogRecord>,
}

pub fn checkpoint_path(out_dir: &Path, iteration: usize) -> PathBuf {
    out_dir.join(format!("ckpt_{iteration:06}.epcl"))
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>, TrainError> {
    let f = File::open(path).map_err(|source| TrainError::Io { path: path.to_path_buf(), source })?;
    BufReader::new(f)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| {
            let l = l.map_err(|source| TrainError::Io { path: path.to_path_buf(), source })?;
            serde_json::from_str(&l).map_err(|e| TrainError::Data(format!("{}: {e}", path.display())))
        })
        .collect()
}

/// Trains for `config.total_iters`, writing `train_log.jsonl`, periodic
/// checkpoints and `final.epcl` under `config.out_dir`.
pub fn run_training(config: &TrainConfig, data: &TrainingData, opts: &RunOptions) -> Result<TrainOutcome, TrainError> {
    let out = &config.out_dir;
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| TrainError::Io { path, source }
    };
    std::fs::create_dir_all(out).map_err(io(out))?;
    let config_path = out.join("config.toml");
    std::fs::write(&config_path, config.to_toml_string()).map_err(io(&config_path))?;

    let mut trainer = match &opts.resume {
        Some(path) => {
            let (_, state) = load_checkpoint(path)?;
            Trainer::from_state(config.clone(), state)?
        }
        None => Trainer::new(config.clone())?,
    };
    let start = trainer.state.iteration;
    let log_path = out.join("train_log.jsonl");
    let kept: Vec<LogRecord> = if start > 0 && log_path.exists() {
        read_log(&log_path)?.into_iter().filter(|r| r.iteration <= start).collect()
    } else {
        Vec::new()
    };
    let mut log = BufWriter::new(File::create(&log_path).map_err(io(&log_path))?);
    for r in &kept {
        writeln!(log, "{}", serde_json::to_string(r).expect("record serializes")).map_err(io(&log_path))?;
    }

    let end = opts.stop_at.map_or(config.total_iters, |s| s.min(config.total_iters));
    let mut records = Vec::new();
    while trainer.state.iteration < end {
        let report = match trainer.step(data) {
            Ok(r) => r,
            Err(TrainError::NonFiniteLoss { iteration, component, value, stats, .. }) => {
                log.flush().map_err(io(&log_path))?;
                let path = out.join(format!("diagnostics_{iteration:06}.json"));
                std::fs::write(&path, serde_json::to_string_pretty(&stats).expect("diagnostics serialize"))
                    .map_err(io(&path))?;
                return Err(TrainError::NonFiniteLoss { iteration, component, value, stats, diagnostics: Some(path) });
            }
            Err(e) => return Err(e),
        };
        let record = LogRecord { iteration: trainer.state.iteration, report };
        writeln!(log, "{}", serde_json::to_string(&record).expect("record serializes")).map_err(io(&log_path))?;
        records.push(record);
        let k = trainer.state.iteration;
        if k % config.checkpoint_every == 0 {
            log.flush().map_err(io(&log_path))?;
            save_checkpoint(&checkpoint_path(out, k), config, &trainer.state)?;
        }
        if k % 100 == 0 {
            log::info!("iteration {k}: total {:.4} l_seg {:.4}", report.total, report.l_seg);
        }
    }
    log.flush().map_err(io(&log_path))?;
    let final_checkpoint = out.join("final.epcl");
    save_checkpoint(&final_checkpoint, config, &trainer.state)?;
    Ok(TrainOutcome { final_checkpoint, log_path, iterations: trainer.state.iteration, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume_io::synth_dataset;

    fn tiny_data() -> TrainingData {
        let cases = synth_dataset(4, [16, 16, 16], 2, 5).unwrap();
        let splits = Splits {
            labeled: vec!["case_000".into(), "case_001".into()],
            unlabeled: vec!["case_002".into(), "case_003".into()],
            test: vec![],
        };
        TrainingData::from_cases(&cases, &splits).unwrap()
    }

    fn tiny_config(mode: &str) -> TrainConfig {
        TrainConfig {
            total_iters: 4,
            patch_size: Some([8, 8, 8]),
            combination_mode: mode.into(),
            checkpoint_every: 2,
            ..TrainConfig::tiny()
        }
    }

    #[test]
    fn every_mode_steps_with_finite_losses() {
        let data = tiny_data();
        for mode in combination_registry().names() {
            let mut t = Trainer::new(tiny_config(&mode)).unwrap();
            let r = t.step(&data).unwrap();
            r.check_finite().unwrap();
            assert_eq!(t.state.iteration, 1);
            if mode == "supervised_only" {
                assert_eq!((r.l_uc1, r.l_uc2), (0.0, 0.0));
            }
            if mode == "concat" {
                assert_eq!(r.l_uc2, 0.0);
            }
        }
    }

    #[test]
    fn teacher_tracks_student_by_ema() {
        let data = tiny_data();
        let mut t = Trainer::new(tiny_config("separate_multi_proto")).unwrap();
        let before_teacher = t.state.pair.teacher.clone();
        t.step(&data).unwrap();
        let d = t.config.ema_decay as f32;
        let rest = (1.0 - t.config.ema_decay) as f32;
        let (s, te) = (&t.state.pair.student.entries[0].data, &t.state.pair.teacher.entries[0].data);
        for i in 0..s.len() {
            let expected = d * before_teacher.entries[0].data[i] + rest * s[i];
            assert_eq!(te[i], expected);
        }
    }

    #[test]
    fn run_resume_matches_uninterrupted() {
        let data = tiny_data();
        let dir = tempfile::tempdir().unwrap();
        let full_cfg = TrainConfig { out_dir: dir.path().join("full"), ..tiny_config("separate_multi_proto") };
        let full = run_training(&full_cfg, &data, &RunOptions::default()).unwrap();
        assert_eq!(full.records.len(), 4);
        assert!(checkpoint_path(&full_cfg.out_dir, 2).exists());

        let part_cfg = TrainConfig { out_dir: dir.path().join("part"), ..full_cfg.clone() };
        run_training(&part_cfg, &data, &RunOptions { stop_at: Some(2), ..Default::default() }).unwrap();
        let resumed = run_training(
            &part_cfg,
            &data,
            &RunOptions { resume: Some(checkpoint_path(&part_cfg.out_dir, 2)), ..Default::default() },
        )
        .unwrap();
        assert_eq!(resumed.records, full.records[2..].to_vec());
        assert_eq!(read_log(&resumed.log_path).unwrap(), read_log(&full.log_path).unwrap());
        let (_, a) = load_checkpoint(&full.final_checkpoint).unwrap();
        let (_, b) = load_checkpoint(&resumed.final_checkpoint).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn labeled_losses_independent_of_unlabeled_modes() {
        let data = tiny_data();
        let first = |mode: &str, reliability: &str| {
            let cfg = TrainConfig { reliability_mode: reliability.into(), ..tiny_config(mode) };
            Trainer::new(cfg).unwrap().step(&data).unwrap()
        };
        let base = first("separate_multi_proto", "verbatim");
        for (mode, rel) in [("concat", "verbatim"), ("aug_map_on_orig", "minmax"), ("supervised_only", "verbatim")] {
            let r = first(mode, rel);
            assert_eq!(
                [r.l_ce, r.l_dice, r.l_focal, r.l_iou, r.l_fused, r.l_seg],
                [base.l_ce, base.l_dice, base.l_focal, base.l_iou, base.l_fused, base.l_seg],
                "{mode}/{rel}"
            );
        }
    }
}
