use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::record::{EpochRecord, RunRecord};
use super::sgd::Sgd;
use super::TrainConfig;
use crate::amd::{AmdConfig, LayerPairing};
use crate::data::{mixup_batch, one_hot, pad_crop, Batches, Dataset, MixupConfig};
use crate::error::{Error, Result};
use crate::kd::{total_loss, LossBreakdown, LossWeights, Targets, TeacherSignal};
use crate::metrics::{argmax, evaluate, DEFAULT_BINS};
use crate::nn::{FeatureMap, Mode, Model, ModelSpec};
use crate::tensor::{Tape, Tensor};

const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
const STREAM_MIXUP: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Cross-entropy only; the teacher is not consulted.
    Scratch,
    /// Cross-entropy plus softened-logit matching.
    Kd,
    /// KD plus global angular-margin feature matching.
    AmdG,
    /// Global and quadrant-local matching.
    AmdGl,
    /// Global and local with masked negative maps.
    AmdGlMasked,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Scratch, Method::Kd, Method::AmdG, Method::AmdGl, Method::AmdGlMasked];

    pub fn name(self) -> &'static str {
        match self {
            Method::Scratch => "scratch",
            Method::Kd => "kd",
            Method::AmdG => "amd-g",
            Method::AmdGl => "amd-gl",
            Method::AmdGlMasked => "amd-gl-masked",
        }
    }

    pub fn uses_teacher(self) -> bool {
        self != Method::Scratch
    }

    /// Effective feature-loss settings for this method.
    pub fn amd_config(self, base: &AmdConfig) -> AmdConfig {
        let mut cfg = base.clone();
        match self {
            Method::Scratch | Method::Kd => {
                cfg.gamma = 0.0;
                cfg.use_local = false;
                cfg.use_mask = false;
            }
            Method::AmdG => {
                cfg.use_local = false;
                cfg.use_mask = false;
            }
            Method::AmdGl => {
                cfg.use_local = true;
                cfg.use_mask = false;
            }
            Method::AmdGlMasked => {
                cfg.use_local = true;
                cfg.use_mask = true;
            }
        }
        cfg
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`; expected one of scratch, kd, amd-g, amd-gl, amd-gl-masked")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub method: Method,
    pub weights: LossWeights,
    pub amd: AmdConfig,
    pub mixup: MixupConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            method: Method::AmdG,
            weights: LossWeights::default(),
            amd: AmdConfig::default(),
            mixup: MixupConfig::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.amd.validate()?;
        if self.mixup.enabled {
            self.mixup.validate()?;
        }
        Ok(())
    }
}

/// Per-batch objective settings resolved from the method.
struct Objective<'a> {
    teacher: Option<&'a Model<f32>>,
    pairing: LayerPairing,
    weights: LossWeights,
    amd: AmdConfig,
    mixup: MixupConfig,
}

struct TeacherValues {
    logits: Tensor<f32>,
    taps: Vec<(&'static str, Tensor<f32>)>,
}

fn teacher_values(teacher: &Model<f32>, x: &Tensor<f32>) -> Result<TeacherValues> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = teacher.forward_frozen(&mut tape, xv)?;
    Ok(TeacherValues {
        logits: tape.value(out.logits)?.clone(),
        taps: out
            .taps
            .iter()
            .map(|t| Ok((t.layer, tape.value(t.activation)?.clone())))
            .collect::<Result<_>>()?,
    })
}

/// Evaluates the objective for one batch on `tape`; returns the loss var,
/// its breakdown and the student forward output.
fn objective_on(
    tape: &mut Tape<f32>,
    student_logits: crate::tensor::Var,
    student_taps: &[FeatureMap],
    targets: &Targets<f32>,
    teacher: Option<&TeacherValues>,
    obj: &Objective<'_>,
) -> Result<(crate::tensor::Var, LossBreakdown)> {
    match teacher {
        None => total_loss(tape, student_logits, targets, student_taps, None, &obj.pairing, &obj.weights, &obj.amd),
        Some(tv) => {
            let logits = tape.constant(tv.logits.clone());
            let taps: Vec<FeatureMap> = tv
                .taps
                .iter()
                .map(|(layer, t)| FeatureMap {
                    layer,
                    activation: tape.constant(t.clone()),
                })
                .collect();
            let signal = TeacherSignal { logits, taps: &taps };
            total_loss(
                tape,
                student_logits,
                targets,
                student_taps,
                Some(signal),
                &obj.pairing,
                &obj.weights,
                &obj.amd,
            )
        }
    }
}

fn accumulate(acc: &mut LossBreakdown, b: &LossBreakdown, w: f64) {
    acc.ce += w * b.ce;
    acc.kd += w * b.kd;
    acc.amd += w * b.amd;
    acc.ce_weighted += w * b.ce_weighted;
    acc.kd_weighted += w * b.kd_weighted;
    acc.amd_weighted += w * b.amd_weighted;
    acc.total += w * b.total;
    acc.amd_a += w * b.amd_a;
    acc.amd_p += w * b.amd_p;
    acc.amd_n += w * b.amd_n;
}

fn scaled(acc: &LossBreakdown, k: f64) -> LossBreakdown {
    let mut out = LossBreakdown::default();
    accumulate(&mut out, acc, k);
    out
}

/// Objective on the first training batch with both networks in eval mode.
fn initial_probe(student: &Model<f32>, train: &Dataset, cfg: &TrainConfig, obj: &Objective<'_>) -> Result<LossBreakdown> {
    let idx: Vec<usize> = (0..cfg.batch_size.min(train.len())).collect();
    let (x, labels) = train.gather(&idx)?;
    let tv = obj.teacher.map(|t| teacher_values(t, &x)).transpose()?;
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let out = student.forward_frozen(&mut tape, xv)?;
    let (_, b) = objective_on(&mut tape, out.logits, &out.taps, &Targets::Labels(labels), tv.as_ref(), obj)?;
    Ok(b)
}

/// Shared loop. `on_epoch` sees the model after each epoch.
fn fit<F>(
    student: &mut Model<f32>,
    obj: &Objective<'_>,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    label: &str,
    mut on_epoch: F,
) -> Result<RunRecord>
where
    F: FnMut(&Model<f32>, &EpochRecord) -> Result<()>,
{
    cfg.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data("training and test splits must be non-empty".into()));
    }
    let mut record = RunRecord::new(label, cfg.seed);
    record.initial = Some(initial_probe(student, train, cfg, obj)?);

    let mut shuffle_rng = stream(cfg.seed, STREAM_SHUFFLE);
    let mut aug_rng = stream(cfg.seed, STREAM_AUGMENT);
    let mut mix_rng = stream(cfg.seed, STREAM_MIXUP);
    let mut sgd = Sgd::new(student.params(), cfg.momentum, cfg.weight_decay);

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = cfg.lr_at(epoch);
        let mut sums = LossBreakdown::default();
        let mut step_losses = Vec::new();
        let mut correct = 0usize;
        let mut seen = 0usize;

        for idx in Batches::shuffled(train.len(), cfg.batch_size, &mut shuffle_rng) {
            let (mut x, labels) = train.gather(&idx)?;
            if cfg.augment {
                x = pad_crop(&x, cfg.pad, &mut aug_rng)?;
            }
            let targets = if obj.mixup.enabled && idx.len() >= 2 {
                let y = one_hot::<f32>(&labels, train.classes)?;
                let mixed = mixup_batch(&x, &y, &obj.mixup, &mut mix_rng)?;
                x = mixed.x;
                Targets::Soft(mixed.y)
            } else {
                Targets::Labels(labels.clone())
            };
            let tv = obj.teacher.map(|t| teacher_values(t, &x)).transpose()?;

            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let out = student.forward(&mut tape, xv, Mode::Train)?;
            let (loss, b) = objective_on(&mut tape, out.logits, &out.taps, &targets, tv.as_ref(), obj)?;
            if !b.total.is_finite() {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    reason: format!("objective became {} ({b:?})", b.total),
                });
            }
            tape.backward(loss)?;
            let grads = out
                .params
                .iter()
                .map(|&p| Ok(tape.grad(p)?.map(<[f32]>::to_vec).unwrap_or_default()))
                .collect::<Result<Vec<_>>>()?;

            let logits = tape.value(out.logits)?;
            let j = logits.shape()[1];
            for (row, &y) in logits.data().chunks(j).zip(&labels) {
                let row: Vec<f64> = row.iter().map(|&v| v as f64).collect();
                correct += usize::from(argmax(&row) == y);
            }
            seen += labels.len();

            sgd.step(student.params_mut(), &grads, lr)?;
            student.update_running_stats(&out.bn_stats)?;
            accumulate(&mut sums, &b, labels.len() as f64);
            step_losses.push(b.total);
        }
        let report = evaluate(student, test, DEFAULT_BINS, cfg.eval_batch_size)?;
        let rec = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_acc: correct as f64 / seen as f64,
            test_acc: report.accuracy,
            losses: scaled(&sums, 1.0 / seen as f64),
            step_losses,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        on_epoch(student, &rec)?;
        record.epochs.push(rec);
    }
    Ok(record)
}

pub struct TeacherRun {
    pub record: RunRecord,
    /// Weights at the best test-accuracy epoch.
    pub best: Model<f32>,
    /// Weights after `eskd_epoch()` completed epochs.
    pub eskd: Model<f32>,
    pub last: Model<f32>,
}

/// Cross-entropy training from scratch. With `out`, writes `best/` and
/// `eskd/` checkpoints and `record.jsonl` there.
pub fn train_teacher(
    spec: &ModelSpec,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TeacherRun> {
    check_data(spec, train)?;
    let mut model = Model::new(spec.clone(), &mut stream(cfg.seed, STREAM_INIT))?;
    let obj = Objective {
        teacher: None,
        pairing: LayerPairing { pairs: Vec::new() },
        weights: LossWeights {
            lambda1: 1.0,
            lambda2: 0.0,
            tau: 1.0,
        },
        amd: AmdConfig::default(),
        mixup: MixupConfig::default(),
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let eskd_at = cfg.eskd_epoch();
    let mut best: Option<(f64, Model<f32>)> = None;
    let mut eskd = None;
    let mut accs: Vec<f64> = Vec::new();
    let record = fit(&mut model, &obj, train, test, cfg, "teacher", |m, e| {
        accs.push(e.test_acc);
        if best.as_ref().is_none_or(|(a, _)| e.test_acc > *a) {
            best = Some((e.test_acc, m.clone()));
            if let Some(dir) = out {
                m.save_checkpoint(dir.join("best"), e.epoch, &accs)?;
            }
        }
        if e.epoch == eskd_at {
            eskd = Some(m.clone());
            if let Some(dir) = out {
                m.save_checkpoint(dir.join("eskd"), e.epoch, &accs)?;
            }
        }
        Ok(())
    })?;
    if let Some(dir) = out {
        record.write_jsonl(dir.join("record.jsonl"))?;
        record.write_summary(dir.join("summary.json"))?;
        model.save_checkpoint(dir.join("last"), record.epochs.len(), &accs)?;
    }
    let best = best.map(|(_, m)| m).unwrap_or_else(|| model.clone());
    Ok(TeacherRun {
        record,
        best,
        eskd: eskd.unwrap_or_else(|| model.clone()),
        last: model,
    })
}

pub struct StudentRun {
    pub record: RunRecord,
    pub best: Model<f32>,
    pub last: Model<f32>,
}

fn check_data(spec: &ModelSpec, data: &Dataset) -> Result<()> {
    if spec.input_shape != data.image_shape {
        return Err(Error::Data(format!(
            "model expects {:?} inputs, dataset has {:?}",
            spec.input_shape, data.image_shape
        )));
    }
    if spec.num_classes != data.classes {
        return Err(Error::Data(format!(
            "model has {} classes, dataset {}",
            spec.num_classes, data.classes
        )));
    }
    Ok(())
}

/// Trains a fresh student against a frozen teacher. The student's
/// initialization depends only on `cfg.seed`, so every method starts from
/// the same weights.
pub fn distill_student(
    teacher: &Model<f32>,
    student_spec: &ModelSpec,
    dcfg: &DistillConfig,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<StudentRun> {
    let student = Model::new(student_spec.clone(), &mut stream(cfg.seed, STREAM_INIT))?;
    distill_from(teacher, student, dcfg, train, test, cfg, out)
}

/// As [`distill_student`] with a caller-supplied initial student.
pub fn distill_from(
    teacher: &Model<f32>,
    mut student: Model<f32>,
    dcfg: &DistillConfig,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<StudentRun> {
    dcfg.validate()?;
    check_data(student.spec(), train)?;
    check_data(teacher.spec(), train)?;
    let pairing = LayerPairing::by_group(teacher.spec(), student.spec())?;
    let method = dcfg.method;
    let weights = if method.uses_teacher() {
        dcfg.weights.clone()
    } else {
        LossWeights {
            lambda1: 1.0,
            lambda2: 0.0,
            tau: dcfg.weights.tau,
        }
    };
    let obj = Objective {
        teacher: method.uses_teacher().then_some(teacher),
        pairing,
        weights,
        amd: method.amd_config(&dcfg.amd),
        mixup: dcfg.mixup.clone(),
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut best: Option<(f64, Model<f32>)> = None;
    let mut accs = Vec::new();
    let record = fit(&mut student, &obj, train, test, cfg, method.name(), |m, e| {
        accs.push(e.test_acc);
        if best.as_ref().is_none_or(|(a, _)| e.test_acc > *a) {
            best = Some((e.test_acc, m.clone()));
            if let Some(dir) = out {
                m.save_checkpoint(dir.join("best"), e.epoch, &accs)?;
            }
        }
        Ok(())
    })?;
    if let Some(dir) = out {
        record.write_jsonl(dir.join("record.jsonl"))?;
        record.write_summary(dir.join("summary.json"))?;
        student.save_checkpoint(dir.join("last"), record.epochs.len(), &accs)?;
    }
    let best = best.map(|(_, m)| m).unwrap_or_else(|| student.clone());
    Ok(StudentRun {
        record,
        best,
        last: student,
    })
}
