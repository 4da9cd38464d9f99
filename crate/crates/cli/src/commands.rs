use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use i2ckd_core::dataset::{self, Sample};
use i2ckd_core::gradcheck::{self, SuiteOptions};
use i2ckd_core::losses::{self, LossParts, PrototypeMatrix};
use i2ckd_core::trainer::{self, DistillConfig};
use i2ckd_core::{ablation, checkpoint, reference, stf};
use i2ckd_core::{DatasetSpec, EvalReport, LabelMap, MetricRecord, Split, Tensor};

use crate::config::RunConfig;
use crate::{Cli, Command, Common, DataArgs, LossArgs};

/// A check ran to completion and found a discrepancy.
#[derive(Debug)]
pub struct VerificationFailed(pub String);

impl fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for VerificationFailed {}

pub const DATASET_SPEC: &str = "dataset.json";
pub const METRICS: &str = "metrics.jsonl";
pub const CHECKPOINT: &str = "checkpoint";

pub fn run(cli: Cli) -> Result<()> {
    let quiet = cli.quiet;
    match cli.command {
        Command::GenData(a) => {
            let mut cfg = RunConfig::load(a.common.config.as_deref())?;
            if let Some(seed) = a.common.seed {
                cfg.dataset.seed = seed;
            }
            if let Some(c) = a.classes {
                cfg.dataset.num_classes = c;
                cfg.teacher = None;
                cfg.student = None;
            }
            let cfg = cfg.resolve()?;
            let out = require_out(&a.common)?;
            gen_data(&cfg, &out, a.force)
        }
        Command::TrainTeacher(a) => {
            let cfg = prepare(&a.common, &a.data)?;
            train_teacher(&cfg, &require_out(&a.common)?, quiet)
        }
        Command::Distill(a) => {
            let mut cfg = load_with_data(&a.common, &a.data)?;
            apply_loss_args(&mut cfg, &a.loss);
            if let Some(t) = a.teacher {
                cfg.teacher_checkpoint = Some(t);
            }
            let cfg = cfg.resolve()?;
            let out = require_out(&a.common)?;
            if a.ablation {
                run_ablation(&cfg, &out, quiet)
            } else {
                distill(&cfg, &out, quiet)
            }
        }
        Command::Eval(a) => {
            let mut cfg = load_with_data(&a.common, &a.data)?;
            if let Some(c) = a.checkpoint {
                cfg.checkpoint = Some(c);
            }
            if let Some(s) = a.split {
                cfg.eval_split = parse_split(&s)?;
            }
            eval(&cfg.resolve()?, a.common.out.as_deref())
        }
        Command::GradCheck(a) => {
            let mut cfg = RunConfig::load(a.common.config.as_deref())?;
            if let Some(seed) = a.common.seed {
                cfg.seed = seed;
            }
            if let Some(p) = a.perturb {
                cfg.perturb = p;
            }
            grad_check(&cfg.resolve()?, a.common.out.as_deref(), a.corrupt)
        }
        Command::LossEval(a) => {
            let mut cfg = RunConfig::load(a.common.config.as_deref())?;
            apply_loss_args(&mut cfg, &a.loss);
            if let Some(d) = a.dumps {
                cfg.dumps = Some(d);
            }
            loss_eval(&cfg.resolve()?, a.common.out.as_deref(), a.reference)
        }
    }
}

fn require_out(common: &Common) -> Result<PathBuf> {
    common.out.clone().context("--out is required")
}

fn parse_split(s: &str) -> Result<Split> {
    Split::ALL
        .into_iter()
        .find(|x| x.name() == s)
        .with_context(|| format!("unknown split {s:?}; expected train, val or test"))
}

fn apply_loss_args(cfg: &mut RunConfig, a: &LossArgs) {
    let w = &mut cfg.weights;
    if let Some(v) = a.lambda_sm {
        w.lambda_sm = v;
    }
    if let Some(v) = a.lambda_i2ckd {
        w.lambda_i2ckd = v;
    }
    if let Some(v) = a.margin {
        w.margin = v;
    }
    if let Some(v) = a.temperature {
        w.temperature = v;
    }
}

/// Loads the config, applies the seed override and, when a dataset
/// directory is in play, adopts the spec it was generated from.
fn load_with_data(common: &Common, data: &DataArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(d) = &data.data {
        cfg.data = Some(d.clone());
    }
    if let Some(dir) = &cfg.data {
        let path = dir.join(DATASET_SPEC);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let spec: DatasetSpec =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if spec.num_classes != cfg.dataset.num_classes {
            cfg.teacher = cfg.teacher.filter(|n| n.num_classes == spec.num_classes);
            cfg.student = cfg.student.filter(|n| n.num_classes == spec.num_classes);
        }
        cfg.dataset = spec;
    }
    Ok(cfg)
}

fn prepare(common: &Common, data: &DataArgs) -> Result<RunConfig> {
    load_with_data(common, data)?.resolve()
}

fn load_split(cfg: &RunConfig, split: Split) -> Result<Vec<Sample>> {
    match &cfg.data {
        Some(dir) => {
            let (manifest, samples) = dataset::read_split(dir, split)?;
            anyhow::ensure!(
                manifest.num_classes == cfg.dataset.num_classes
                    && manifest.height == cfg.dataset.height
                    && manifest.width == cfg.dataset.width,
                "{} manifest in {} disagrees with {}",
                split.name(),
                dir.display(),
                DATASET_SPEC
            );
            Ok(samples)
        }
        None => Ok(dataset::generate(&cfg.dataset, split)?),
    }
}

fn progress(quiet: bool, label: String) -> impl FnMut(&MetricRecord) {
    move |r| {
        if !quiet {
            eprintln!(
                "{label}iter {:>6}  lr {:.5}  loss {:.4} (task {:.4}, sm {:.4}, i2ckd {:.4})  val mIoU {:.4}",
                r.iter, r.lr, r.l_total, r.l_task, r.l_sm, r.l_i2ckd, r.val_miou
            );
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn gen_data(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let non_empty = fs::read_dir(out)
            .with_context(|| format!("reading {}", out.display()))?
            .next()
            .is_some();
        if non_empty && !force {
            bail!("{} is not empty; pass --force to overwrite", out.display());
        }
        for split in Split::ALL {
            let d = out.join(split.name());
            if d.exists() {
                fs::remove_dir_all(&d).with_context(|| format!("removing {}", d.display()))?;
            }
        }
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let spec = &cfg.dataset;
    println!("split  samples  class presence (fraction of images)");
    for split in Split::ALL {
        let samples = dataset::generate(spec, split)?;
        dataset::write_split(out, spec, split, &samples)?;
        let presence = dataset::class_presence(&samples, spec.num_classes);
        let cols: Vec<String> = presence.iter().enumerate().map(|(c, p)| format!("{c}:{p:.3}")).collect();
        println!("{:<6} {:>7}  {}", split.name(), samples.len(), cols.join(" "));
    }
    write_json(&out.join(DATASET_SPEC), spec)?;
    let mut snapshot = cfg.clone();
    snapshot.data = Some(out.to_path_buf());
    snapshot.write_snapshot(out)
}

fn train_teacher(cfg: &RunConfig, out: &Path, quiet: bool) -> Result<()> {
    let train = load_split(cfg, Split::Train)?;
    let val = load_split(cfg, Split::Val)?;
    cfg.write_snapshot(out)?;
    let outcome = trainer::train_supervised(
        &train,
        &val,
        cfg.teacher(),
        &cfg.teacher_optim,
        cfg.seed,
        cfg.eval_every,
        progress(quiet, String::new()),
    )?;
    outcome.save(&out.join(CHECKPOINT))?;
    trainer::write_metric_log(&out.join(METRICS), &outcome.log)?;
    if let Some(last) = outcome.log.last() {
        println!("teacher val mIoU {:.4}", last.val_miou);
    }
    Ok(())
}

fn distill_config(cfg: &RunConfig) -> Result<DistillConfig> {
    let teacher_checkpoint = cfg
        .teacher_checkpoint
        .clone()
        .context("a teacher checkpoint is required (--teacher or teacher_checkpoint)")?;
    Ok(DistillConfig {
        weights: cfg.weights,
        teacher_checkpoint,
        teacher: cfg.teacher.clone(),
        student: cfg.student().clone(),
        seed: cfg.seed,
        eval_every: cfg.eval_every,
        projection: cfg.projection,
    })
}

fn load_teacher(dc: &DistillConfig) -> Result<i2ckd_core::SegNetwork> {
    let path = &dc.teacher_checkpoint;
    Ok(checkpoint::load(path)
        .with_context(|| format!("loading teacher checkpoint {}", path.display()))?
        .net)
}

fn distill(cfg: &RunConfig, out: &Path, quiet: bool) -> Result<()> {
    let dc = distill_config(cfg)?;
    let teacher = load_teacher(&dc)?;
    let train = load_split(cfg, Split::Train)?;
    let val = load_split(cfg, Split::Val)?;
    cfg.write_snapshot(out)?;
    let outcome = trainer::distill_student(&train, &val, &teacher, &dc, &cfg.optim, progress(quiet, String::new()))?;
    outcome.save(&out.join(CHECKPOINT))?;
    trainer::write_metric_log(&out.join(METRICS), &outcome.log)?;
    if let Some(last) = outcome.log.last() {
        println!("student val mIoU {:.4}", last.val_miou);
    }
    Ok(())
}

fn run_ablation(cfg: &RunConfig, out: &Path, quiet: bool) -> Result<()> {
    let dc = distill_config(cfg)?;
    let teacher = load_teacher(&dc)?;
    let train = load_split(cfg, Split::Train)?;
    let val = load_split(cfg, Split::Val)?;
    cfg.write_snapshot(out)?;
    let report = ablation::run(&train, &val, &teacher, &dc, &cfg.optim, &cfg.ablation_seeds, |row, seed, r| {
        progress(quiet, format!("[{row} seed {seed}] "))(r)
    })?;
    write_json(&out.join("ablation.json"), &report)?;
    let md = report.to_markdown();
    fs::write(out.join("ablation.md"), &md).with_context(|| format!("writing {}", out.join("ablation.md").display()))?;
    print!("{md}");
    Ok(())
}

fn eval(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let path = cfg.checkpoint.as_deref().context("a checkpoint is required (--checkpoint)")?;
    let net = checkpoint::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?
        .net;
    anyhow::ensure!(
        net.config().num_classes == cfg.dataset.num_classes,
        "checkpoint predicts {} classes but the dataset has {}",
        net.config().num_classes,
        cfg.dataset.num_classes
    );
    let samples = load_split(cfg, cfg.eval_split)?;
    let report = EvalReport::from_matrix(&trainer::evaluate(&net, &samples)?)?;
    if let Some(out) = out {
        cfg.write_snapshot(out)?;
        write_json(&out.join("eval.json"), &report)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn grad_check(cfg: &RunConfig, out: Option<&Path>, corrupt: Option<String>) -> Result<()> {
    let opts = SuiteOptions {
        perturb: cfg.perturb,
        seed: cfg.seed,
        corrupt,
        ..SuiteOptions::default()
    };
    let reports = gradcheck::run_suite(&opts)?;
    for r in &reports {
        println!(
            "{:<24} {:>6} components  max rel err {:.3e}  {}",
            r.name,
            r.components,
            r.max_rel_err,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    if let Some(out) = out {
        cfg.write_snapshot(out)?;
        write_json(&out.join("grad_check.json"), &reports)?;
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(VerificationFailed(format!("gradient check failed: {}", failed.join(", "))).into());
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct ReferenceReport {
    l_task: f64,
    l_sm: f64,
    l_i2ckd: f64,
    max_abs_diff: f64,
    agreement: bool,
}

#[derive(Debug, Serialize)]
struct LossReport {
    weights: losses::LossWeights,
    l_task: f64,
    l_sm: f64,
    l_i2ckd: f64,
    l_total: f64,
    pairs: usize,
    hinge_active_pairs: usize,
    present_classes: Vec<usize>,
    /// Rows of absent classes are null.
    prototypes_teacher: Vec<Option<Vec<f64>>>,
    prototypes_student: Vec<Option<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    reference: Option<ReferenceReport>,
}

const REFERENCE_TOLERANCE: f64 = 1e-10;

fn prototype_rows(p: &PrototypeMatrix) -> Vec<Option<Vec<f64>>> {
    (0..p.num_classes())
        .map(|c| p.present[c].then(|| p.row(c).to_vec()))
        .collect()
}

/// Single-image tensor: accepts `[K, H, W]` or `[1, K, H, W]`.
fn read_image_tensor(path: &Path) -> Result<Tensor> {
    let t = stf::read_tensor(path)?;
    let dims = t.dims().to_vec();
    match dims.len() {
        3 => Ok(t),
        4 if dims[0] == 1 => Ok(t.reshape(&dims[1..])?),
        _ => bail!("{}: expected a [K, H, W] tensor, got shape {:?}", path.display(), dims),
    }
}

fn loss_eval(cfg: &RunConfig, out: Option<&Path>, with_reference: bool) -> Result<()> {
    let dir = cfg.dumps.as_deref().context("a dump directory is required (--dumps)")?;
    let features_t = read_image_tensor(&dir.join("features_t.stf"))?;
    let features_s = read_image_tensor(&dir.join("features_s.stf"))?;
    let scores_t = read_image_tensor(&dir.join("scores_t.stf"))?;
    let scores_s = read_image_tensor(&dir.join("scores_s.stf"))?;
    let mask: LabelMap = stf::read_labels(dir.join("mask.stf"))?;

    let classes = scores_t.dims()[0];
    anyhow::ensure!(
        scores_s.dims() == scores_t.dims(),
        "scores_s shape {:?} differs from scores_t {:?}",
        scores_s.dims(),
        scores_t.dims()
    );
    anyhow::ensure!(
        features_s.dims() == features_t.dims(),
        "features_s shape {:?} differs from features_t {:?}",
        features_s.dims(),
        features_t.dims()
    );
    mask.validate(classes)?;
    let w = cfg.weights;

    let (l_task, _) = losses::task_cross_entropy(&scores_s, &mask)?;
    let (l_sm, _) = losses::channel_kld_loss(&scores_t, &scores_s, w.temperature)?;
    let (fh, fw) = (features_t.dims()[1], features_t.dims()[2]);
    let fmask = losses::downsample_mask_nearest(&mask, fh, fw)?;
    let pt = losses::compute_prototypes(&features_t, &fmask, classes)?;
    let ps = losses::compute_prototypes(&features_s, &fmask, classes)?;
    let trip = losses::triplet_prototype_loss(&ps, &pt, w.margin)?;
    let parts = LossParts {
        l_task,
        l_sm,
        l_i2ckd: trip.loss,
    };

    let reference = with_reference.then(|| {
        let (rt, present) = reference::prototypes(&features_t, &fmask, classes);
        let (rs, _) = reference::prototypes(&features_s, &fmask, classes);
        let r_task = reference::cross_entropy(&scores_s, &mask);
        let r_sm = reference::channel_kld(&scores_t, &scores_s, w.temperature);
        let r_trip = reference::triplet(&rs, &rt, &present, w.margin);
        let mut diff = [(l_task - r_task).abs(), (l_sm - r_sm).abs(), (trip.loss - r_trip).abs()]
            .into_iter()
            .fold(0.0, f64::max);
        for (fast, slow) in [(&pt, &rt), (&ps, &rs)] {
            for (c, slow_row) in slow.iter().enumerate() {
                for (a, b) in fast.row(c).iter().zip(slow_row) {
                    diff = diff.max((a - b).abs());
                }
            }
        }
        let agreement = diff <= REFERENCE_TOLERANCE && present == pt.present && diff.is_finite();
        ReferenceReport {
            l_task: r_task,
            l_sm: r_sm,
            l_i2ckd: r_trip,
            max_abs_diff: diff,
            agreement,
        }
    });

    let report = LossReport {
        weights: w,
        l_task,
        l_sm,
        l_i2ckd: trip.loss,
        l_total: losses::total_loss(&parts, &w),
        pairs: trip.pairs,
        hinge_active_pairs: trip.active,
        present_classes: pt.present_classes(),
        prototypes_teacher: prototype_rows(&pt),
        prototypes_student: prototype_rows(&ps),
        reference,
    };
    if let Some(out) = out {
        cfg.write_snapshot(out)?;
        write_json(&out.join("loss_eval.json"), &report)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(r) = &report.reference {
        eprintln!("agreement: {}", r.agreement);
        if !r.agreement {
            return Err(VerificationFailed(format!(
                "reference disagreement: max abs diff {:.3e}",
                r.max_abs_diff
            ))
            .into());
        }
    }
    Ok(())
}
