//! Supervised teacher training and frozen-teacher student distillation.
//!
//! Both loops share one driver: batches are drawn from per-epoch
//! permutations keyed by the seed, optionally augmented, and the student
//! objective `L_task + λ_SM·L_SM + λ_I2CKD·L_I2CKD` is minimised with
//! momentum SGD under polynomial decay. Terms with a zero weight are never
//! built, so a zero-weight distillation run follows the task-only trajectory
//! bit for bit.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::checkpoint;
use crate::dataset::{self, Sample};
use crate::error::{Error, Result};
use crate::losses::{self, LossParts, LossWeights, PrototypeMatrix};
use crate::metrics::ConfusionMatrix;
use crate::nn::{NetConfig, RecordedOutputs, SegNetwork};
use crate::optim::{poly_lr, OptimConfig, Sgd};
use crate::rng;
use crate::tensor::{LabelMap, Tensor};
use rand::seq::SliceRandom;

/// One line of the JSON-lines metric log. Loss parts are means over the
/// iterations since the previous record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iter: usize,
    pub lr: f64,
    pub l_task: f64,
    pub l_sm: f64,
    pub l_i2ckd: f64,
    pub l_total: f64,
    pub val_miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    #[serde(default)]
    pub weights: LossWeights,
    pub teacher_checkpoint: PathBuf,
    /// Declared teacher architecture; checked against the checkpoint.
    #[serde(default)]
    pub teacher: Option<NetConfig>,
    pub student: NetConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Attach a learned 1×1 projection when student and teacher feature
    /// widths differ.
    #[serde(default = "default_true")]
    pub projection: bool,
}

fn default_eval_every() -> usize {
    500
}

fn default_true() -> bool {
    true
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub net: SegNetwork,
    pub optimizer: Sgd,
    pub log: Vec<MetricRecord>,
}

impl TrainOutcome {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let iter = self.log.last().map_or(0, |r| r.iter);
        checkpoint::save(dir, &self.net, Some(&self.optimizer), iter)
    }
}

pub fn write_metric_log(path: &Path, log: &[MetricRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in log {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::json(path, e))?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_metric_log(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path, e)))
        .collect()
}

/// Stacks sample images into a `[B, 3, H, W]` batch.
pub fn stack_images(samples: &[&Sample]) -> Result<Tensor> {
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    Tensor::stack(&images)
}

/// Confusion matrix of `net` over `samples`.
pub fn evaluate(net: &SegNetwork, samples: &[Sample]) -> Result<ConfusionMatrix> {
    let classes = net.config().num_classes;
    let mut cm = ConfusionMatrix::new(classes);
    for chunk in samples.chunks(16) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let preds = net.predict(&stack_images(&refs)?)?;
        for (p, s) in preds.iter().zip(chunk) {
            cm.update(p, &s.mask)?;
        }
    }
    Ok(cm)
}

pub fn evaluate_miou(net: &SegNetwork, samples: &[Sample]) -> Result<f64> {
    evaluate(net, samples)?.miou()
}

/// Deterministic batch order: per-epoch permutations of the training set.
struct BatchSchedule {
    seed: u64,
    n: usize,
    perms: HashMap<usize, Vec<usize>>,
}

impl BatchSchedule {
    fn new(seed: u64, n: usize) -> Self {
        BatchSchedule {
            seed,
            n,
            perms: HashMap::new(),
        }
    }

    fn indices(&mut self, iter: usize, batch: usize) -> Vec<usize> {
        (0..batch)
            .map(|j| {
                let pos = iter * batch + j;
                let epoch = pos / self.n;
                let (seed, n) = (self.seed, self.n);
                let perm = self.perms.entry(epoch).or_insert_with(|| {
                    let mut p: Vec<usize> = (0..n).collect();
                    p.shuffle(&mut rng::stream(seed, "epoch", epoch as u64));
                    p
                });
                perm[pos % n]
            })
            .collect()
    }
}

/// What the student needs from the frozen teacher for one batch.
pub struct TeacherBatch {
    pub scores: Option<Tensor>,
    pub prototypes: Option<Vec<PrototypeMatrix>>,
}

/// Frozen teacher with an optional per-sample memo for un-augmented
/// training, where a sample always produces the same teacher outputs.
struct TeacherSource<'a> {
    net: &'a SegNetwork,
    need_scores: bool,
    need_protos: bool,
    memo: Option<HashMap<usize, TeacherImage>>,
}

type TeacherImage = (Option<Tensor>, Option<PrototypeMatrix>);

fn teacher_outputs(net: &SegNetwork, scores: bool, protos: bool, samples: &[&Sample]) -> Result<Vec<TeacherImage>> {
    let out = net.forward(&stack_images(samples)?)?;
    let masks: Vec<LabelMap> = samples.iter().map(|s| s.mask.clone()).collect();
    let mut protos = if protos {
        Some(losses::batch_prototypes(&out.features, &masks, net.config().num_classes)?.into_iter())
    } else {
        None
    };
    (0..samples.len())
        .map(|i| {
            let s = if scores { Some(out.scores.index_outer(i)?) } else { None };
            Ok((s, protos.as_mut().and_then(|p| p.next())))
        })
        .collect()
}

impl TeacherSource<'_> {
    fn batch(&mut self, indices: &[usize], samples: &[Sample]) -> Result<TeacherBatch> {
        let (net, want_scores, want_protos) = (self.net, self.need_scores, self.need_protos);
        let per_image: Vec<TeacherImage> = match &mut self.memo {
            None => {
                let refs: Vec<&Sample> = samples.iter().collect();
                teacher_outputs(net, want_scores, want_protos, &refs)?
            }
            Some(memo) => {
                let mut todo: Vec<usize> = Vec::new();
                for (j, idx) in indices.iter().enumerate() {
                    if !memo.contains_key(idx) && !todo.iter().any(|&k| indices[k] == *idx) {
                        todo.push(j);
                    }
                }
                if !todo.is_empty() {
                    let refs: Vec<&Sample> = todo.iter().map(|&j| &samples[j]).collect();
                    let fresh = teacher_outputs(net, want_scores, want_protos, &refs)?;
                    for (&j, o) in todo.iter().zip(fresh) {
                        memo.insert(indices[j], o);
                    }
                }
                indices.iter().map(|i| memo[i].clone()).collect()
            }
        };
        let mut scores = Vec::new();
        let mut prototypes = Vec::new();
        for (s, p) in per_image {
            scores.extend(s);
            prototypes.extend(p);
        }
        Ok(TeacherBatch {
            scores: if want_scores { Some(Tensor::stack(&scores)?) } else { None },
            prototypes: want_protos.then_some(prototypes),
        })
    }
}

/// Loss parts of one batch plus triplet hinge statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub parts: LossParts,
    pub pairs: usize,
    pub active_pairs: usize,
}

/// Adds the weighted student objective to `tape` and returns its root.
pub fn record_objective(
    tape: &mut Tape,
    student: RecordedOutputs,
    teacher: &TeacherBatch,
    masks: &[LabelMap],
    weights: &LossWeights,
    classes: usize,
) -> Result<(NodeId, StepLosses)> {
    let mut stats = StepLosses::default();
    let task = losses::batch_task_loss(tape.value(student.scores), masks)?;
    stats.parts.l_task = task.value;
    let mut root = tape.custom_scalar(task.value, vec![(student.scores, task.grad)])?;

    if weights.lambda_sm > 0.0 {
        let ts = teacher
            .scores
            .as_ref()
            .ok_or_else(|| Error::Config("teacher scores missing".into()))?;
        let kld = losses::batch_channel_kld(ts, tape.value(student.scores), weights.temperature)?;
        stats.parts.l_sm = kld.value;
        let node = tape.custom_scalar(kld.value, vec![(student.scores, kld.grad)])?;
        let scaled = tape.scale(node, weights.lambda_sm)?;
        root = tape.add(root, scaled)?;
    }
    if weights.lambda_i2ckd > 0.0 {
        let tp = teacher
            .prototypes
            .as_ref()
            .ok_or_else(|| Error::Config("teacher prototypes missing".into()))?;
        let trip = losses::batch_triplet_loss(tp, tape.value(student.features), masks, classes, weights.margin)?;
        stats.parts.l_i2ckd = trip.loss.value;
        stats.pairs = trip.pairs;
        stats.active_pairs = trip.active;
        let node = tape.custom_scalar(trip.loss.value, vec![(student.features, trip.loss.grad)])?;
        let scaled = tape.scale(node, weights.lambda_i2ckd)?;
        root = tape.add(root, scaled)?;
    }
    Ok((root, stats))
}

/// Unweighted loss parts of `student` against `teacher` on `samples`,
/// without any parameter update.
pub fn measure_losses(
    teacher: &SegNetwork,
    student: &SegNetwork,
    samples: &[Sample],
    weights: &LossWeights,
) -> Result<StepLosses> {
    let all = LossWeights {
        lambda_sm: 1.0,
        lambda_i2ckd: 1.0,
        ..*weights
    };
    let mut source = TeacherSource {
        net: teacher,
        need_scores: true,
        need_protos: true,
        memo: None,
    };
    let indices: Vec<usize> = (0..samples.len()).collect();
    let tb = source.batch(&indices, samples)?;
    let refs: Vec<&Sample> = samples.iter().collect();
    let mut tape = Tape::new();
    let out = student.record(&mut tape, &stack_images(&refs)?, false)?;
    let masks: Vec<LabelMap> = samples.iter().map(|s| s.mask.clone()).collect();
    let (_, stats) = record_objective(&mut tape, out, &tb, &masks, &all, student.config().num_classes)?;
    Ok(stats)
}

fn diverged(iter: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } | Error::Graph(_) => Error::Diverged {
            iter,
            what: e.to_string(),
        },
        other => other,
    }
}

struct LoopSpec<'a> {
    train: &'a [Sample],
    val: &'a [Sample],
    optim: &'a OptimConfig,
    weights: LossWeights,
    seed: u64,
    eval_every: usize,
}

fn run_loop(
    mut net: SegNetwork,
    teacher: Option<&SegNetwork>,
    spec: LoopSpec<'_>,
    mut progress: impl FnMut(&MetricRecord),
) -> Result<TrainOutcome> {
    let LoopSpec {
        train,
        val,
        optim,
        weights,
        seed,
        eval_every,
    } = spec;
    optim.validate()?;
    weights.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    if eval_every == 0 {
        return Err(Error::Config("eval_every must be >= 1".into()));
    }
    let classes = net.config().num_classes;
    let mut source = match teacher {
        Some(t) if weights.lambda_sm > 0.0 || weights.lambda_i2ckd > 0.0 => Some(TeacherSource {
            net: t,
            need_scores: weights.lambda_sm > 0.0,
            need_protos: weights.lambda_i2ckd > 0.0,
            memo: (!optim.augment).then(HashMap::new),
        }),
        _ => None,
    };
    let empty_teacher = TeacherBatch {
        scores: None,
        prototypes: None,
    };

    let mut opt = Sgd::new(net.params(), optim.momentum);
    let mut schedule = BatchSchedule::new(seed, train.len());
    let mut log = Vec::new();
    let mut window = LossParts::default();
    let mut window_len = 0usize;

    for iter in 0..optim.total_iter {
        let lr = poly_lr(optim, iter)?;
        let indices = schedule.indices(iter, optim.batch_size);
        let batch: Vec<Sample> = indices
            .iter()
            .enumerate()
            .map(|(j, &i)| {
                if optim.augment {
                    let mut r = rng::stream(seed, "augment", (iter * optim.batch_size + j) as u64);
                    dataset::augment(&train[i], &mut r)
                } else {
                    Ok(train[i].clone())
                }
            })
            .collect::<Result<_>>()?;
        let masks: Vec<LabelMap> = batch.iter().map(|s| s.mask.clone()).collect();
        let tb = match source.as_mut() {
            Some(s) => s.batch(&indices, &batch)?,
            None => TeacherBatch {
                scores: None,
                prototypes: None,
            },
        };

        net.zero_grads();
        let mut tape = Tape::new();
        let refs: Vec<&Sample> = batch.iter().collect();
        let out = net.record(&mut tape, &stack_images(&refs)?, true).map_err(diverged(iter))?;
        let tb_ref = if source.is_some() { &tb } else { &empty_teacher };
        let (root, stats) =
            record_objective(&mut tape, out, tb_ref, &masks, &weights, classes).map_err(diverged(iter))?;
        let total = losses::total_loss(&stats.parts, &weights);
        if !total.is_finite() {
            return Err(Error::Diverged {
                iter,
                what: format!("loss {total}"),
            });
        }
        tape.backward(root, net.params_mut()).map_err(diverged(iter))?;
        drop(tape);
        opt.step(net.params_mut(), lr).map_err(diverged(iter))?;

        window.l_task += stats.parts.l_task;
        window.l_sm += stats.parts.l_sm;
        window.l_i2ckd += stats.parts.l_i2ckd;
        window_len += 1;

        let done = iter + 1;
        if done % eval_every == 0 || done == optim.total_iter {
            let n = window_len as f64;
            let parts = LossParts {
                l_task: window.l_task / n,
                l_sm: window.l_sm / n,
                l_i2ckd: window.l_i2ckd / n,
            };
            let record = MetricRecord {
                iter: done,
                lr,
                l_task: parts.l_task,
                l_sm: parts.l_sm,
                l_i2ckd: parts.l_i2ckd,
                l_total: losses::total_loss(&parts, &weights),
                val_miou: evaluate_miou(&net, val)?,
            };
            progress(&record);
            log.push(record);
            window = LossParts::default();
            window_len = 0;
        }
    }
    net.zero_grads();
    Ok(TrainOutcome {
        net,
        optimizer: opt,
        log,
    })
}

/// Trains a network on the task loss alone.
pub fn train_supervised(
    train: &[Sample],
    val: &[Sample],
    config: &NetConfig,
    optim: &OptimConfig,
    seed: u64,
    eval_every: usize,
    progress: impl FnMut(&MetricRecord),
) -> Result<TrainOutcome> {
    let net = SegNetwork::new(config.clone(), seed)?;
    let spec = LoopSpec {
        train,
        val,
        optim,
        weights: LossWeights::task_only(),
        seed,
        eval_every,
    };
    run_loop(net, None, spec, progress)
}

pub fn train_teacher(
    train: &[Sample],
    val: &[Sample],
    config: &NetConfig,
    optim: &OptimConfig,
    seed: u64,
    eval_every: usize,
) -> Result<TrainOutcome> {
    train_supervised(train, val, config, optim, seed, eval_every, |_| {})
}

/// Builds the student for a distillation run, attaching a projection when
/// feature widths differ.
pub fn build_student(teacher: &SegNetwork, cfg: &DistillConfig) -> Result<SegNetwork> {
    cfg.weights.validate()?;
    if teacher.config().num_classes != cfg.student.num_classes {
        return Err(Error::Config(format!(
            "teacher predicts {} classes, student {}",
            teacher.config().num_classes,
            cfg.student.num_classes
        )));
    }
    if let Some(declared) = &cfg.teacher {
        if declared != teacher.config() {
            return Err(Error::Config(format!(
                "teacher checkpoint config {:?} does not match declared {:?}",
                teacher.config(),
                declared
            )));
        }
    }
    let student = SegNetwork::new(cfg.student.clone(), cfg.seed)?;
    let kt = teacher.output_feature_channels();
    let ks = student.config().feature_channels();
    if ks == kt {
        return Ok(student);
    }
    if !cfg.projection {
        return Err(Error::Config(format!(
            "student features have {ks} channels but the teacher has {kt}; enable the projection"
        )));
    }
    student.with_projection(kt, cfg.seed)
}

/// Trains a student against a frozen teacher. The teacher is only read.
pub fn distill_student(
    train: &[Sample],
    val: &[Sample],
    teacher: &SegNetwork,
    cfg: &DistillConfig,
    optim: &OptimConfig,
    progress: impl FnMut(&MetricRecord),
) -> Result<TrainOutcome> {
    let student = build_student(teacher, cfg)?;
    let spec = LoopSpec {
        train,
        val,
        optim,
        weights: cfg.weights,
        seed: cfg.seed,
        eval_every: cfg.eval_every,
    };
    run_loop(student, Some(teacher), spec, progress)
}

/// Loads the teacher named by `cfg` and distills.
pub fn distill_from_checkpoint(
    train: &[Sample],
    val: &[Sample],
    cfg: &DistillConfig,
    optim: &OptimConfig,
    progress: impl FnMut(&MetricRecord),
) -> Result<TrainOutcome> {
    let teacher = checkpoint::load(&cfg.teacher_checkpoint)?.net;
    distill_student(train, val, &teacher, cfg, optim, progress)
}
