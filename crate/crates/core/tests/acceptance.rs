//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Criterion 5 trains the full toy ablation
//! and dominates the runtime.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use i2ckd_core::ablation::{self, AblationReport};
use i2ckd_core::gradcheck::{self, SuiteOptions};
use i2ckd_core::losses::{self, LossWeights};
use i2ckd_core::trainer::{self, DistillConfig};
use i2ckd_core::{
    checkpoint, dataset, poly_lr, ConfusionMatrix, DatasetSpec, LabelMap, NetConfig, OptimConfig, Split,
};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use tempfile::TempDir;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn within(elapsed: Duration, limit: Duration, what: &str) -> Result<(), String> {
    ensure(elapsed < limit, format!("{what} took {elapsed:.1?}, limit {limit:?}"))
}

fn criterion_1() -> Check {
    let t = Instant::now();
    let reports = gradcheck::run_suite(&SuiteOptions::default()).map_err(err)?;
    let required = [
        "conv2d_3x3",
        "conv2d_1x1",
        "relu",
        "task_cross_entropy",
        "channel_kld_loss",
        "triplet_prototype_loss",
    ];
    for name in required {
        let r = reports
            .iter()
            .find(|r| r.name == name)
            .ok_or(format!("{name} not checked"))?;
        ensure(r.tolerance == 1e-4, format!("{name} tolerance {}", r.tolerance))?;
    }
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    if let Some(bad) = reports.iter().find(|r| !r.passed) {
        return Err(format!("{} max rel err {:.3e}", bad.name, bad.max_rel_err));
    }
    within(t.elapsed(), Duration::from_secs(60), "grad check")?;
    Ok(format!(
        "{} checks at perturbation 1e-5, worst rel err {worst:.2e}, {:.1?}",
        reports.len(),
        t.elapsed()
    ))
}

fn criterion_2() -> Check {
    let t = Instant::now();
    let mut rng = StdRng::seed_from_u64(0xC2);
    let (mut absent, mut ignored) = (0, 0);
    for i in 0..200 {
        let classes = rng.random_range(2..7);
        let (k, h, w) = (rng.random_range(1..9), rng.random_range(2..13), rng.random_range(2..13));
        let f = random_features(&mut rng, k, h, w);
        let m = random_mask(&mut rng, h, w, classes);
        absent += usize::from((0..classes).any(|c| !m.data().contains(&(c as u8))));
        ignored += usize::from(m.data().contains(&255));
        let got = losses::compute_prototypes(&f, &m, classes).map_err(err)?;
        let (want, present) = oracle_prototypes(&f, &m, classes);
        ensure(got.present == present, format!("instance {i}: presence differs"))?;
        for c in (0..classes).filter(|&c| present[c]) {
            let same = got.row(c).iter().zip(&want[c]).all(|(a, b)| a.to_bits() == b.to_bits());
            ensure(same, format!("instance {i}: prototype of class {c} not bit-identical"))?;
        }

        let ft = random_features(&mut rng, k, h, w);
        let pt = losses::compute_prototypes(&ft, &m, classes).map_err(err)?;
        let margin = rng.random_range(0.0..2.0);
        let trip = losses::triplet_prototype_loss(&got, &pt, margin).map_err(err)?.loss;
        let trip_ref = oracle_triplet(&protos_of(&got), &protos_of(&pt), &present, margin);
        ensure((trip - trip_ref).abs() <= 1e-10, format!("instance {i}: triplet {trip} vs {trip_ref}"))?;

        let st = random_features(&mut rng, classes, h, w);
        let ss = random_features(&mut rng, classes, h, w);
        let temp = rng.random_range(0.5..4.0);
        let (kld, _) = losses::channel_kld_loss(&st, &ss, temp).map_err(err)?;
        let kld_ref = oracle_kld(&st, &ss, temp);
        ensure((kld - kld_ref).abs() <= 1e-10, format!("instance {i}: kld {kld} vs {kld_ref}"))?;
    }
    ensure(absent > 0 && ignored > 0, "fixtures lacked absent classes or ignore pixels")?;
    within(t.elapsed(), Duration::from_secs(60), "oracle comparison")?;
    Ok(format!(
        "200 instances ({absent} with absent classes, {ignored} with ignore pixels), {:.1?}",
        t.elapsed()
    ))
}

fn criterion_3() -> Check {
    let mut rng = StdRng::seed_from_u64(0xC3);
    let m = random_mask(&mut rng, 8, 8, 4);
    let f = random_features(&mut rng, 5, 8, 8);
    let s = random_features(&mut rng, 4, 8, 8);
    let (l_sm, _) = losses::channel_kld_loss(&s, &s, 2.0).map_err(err)?;
    ensure(l_sm == 0.0, format!("l_sm = {l_sm} on identical scores"))?;
    let p = losses::compute_prototypes(&f, &m, 4).map_err(err)?;
    let l_i2ckd = losses::triplet_prototype_loss(&p, &p, 0.0).map_err(err)?.loss;
    ensure(l_i2ckd == 0.0, format!("l_i2ckd = {l_i2ckd} on identical features, m = 0"))?;

    let (train, val) = tiny_data();
    let dir = TempDir::new().map_err(err)?;
    trainer::train_teacher(&train, &val, &tiny_teacher(), &tiny_optim(3), 0, 3)
        .and_then(|o| o.save(dir.path()))
        .map_err(err)?;
    let optim = tiny_optim(8);
    let cfg = DistillConfig {
        weights: LossWeights::task_only(),
        teacher_checkpoint: dir.path().to_path_buf(),
        teacher: None,
        student: tiny_student(),
        seed: 21,
        eval_every: 2,
        projection: true,
    };
    let distilled = trainer::distill_from_checkpoint(&train, &val, &cfg, &optim, |_| {}).map_err(err)?;
    let plain = trainer::train_supervised(&train, &val, &tiny_student(), &optim, 21, 2, |_| {}).map_err(err)?;
    ensure(distilled.log == plain.log, "metric logs differ")?;
    for p in plain.net.params() {
        let q = distilled
            .net
            .params()
            .iter()
            .find(|q| q.name == p.name)
            .ok_or(format!("{} missing", p.name))?;
        let same = p.value().data().iter().zip(q.value().data()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, format!("{} differs", p.name))?;
    }
    Ok("l_sm = 0, l_i2ckd = 0 at m = 0; zero-weight distillation bit-identical over 8 iterations".into())
}

fn criterion_4() -> Check {
    let gt = LabelMap::new(2, 2, vec![0, 0, 1, 1]).map_err(err)?;
    let pred = LabelMap::new(2, 2, vec![0, 1, 1, 1]).map_err(err)?;
    let mut cm = ConfusionMatrix::new(2);
    cm.update(&pred, &gt).map_err(err)?;
    ensure(
        cm.iou_per_class() == vec![Some(0.5), Some(2.0 / 3.0)],
        format!("IoU {:?}", cm.iou_per_class()),
    )?;
    let miou = cm.miou().map_err(err)?;
    ensure(miou == 7.0 / 12.0, format!("mIoU {miou}"))?;

    let mut rng = StdRng::seed_from_u64(0xC4);
    for i in 0..100 {
        let classes = rng.random_range(2..8);
        let counts: Vec<u64> = (0..classes * classes)
            .map(|_| if rng.random_bool(0.3) { 0 } else { rng.random_range(0..1000) })
            .collect();
        let mut perm: Vec<usize> = (0..classes).collect();
        perm.shuffle(&mut rng);
        let mut permuted = vec![0; classes * classes];
        for t in 0..classes {
            for p in 0..classes {
                permuted[perm[t] * classes + perm[p]] = counts[t * classes + p];
            }
        }
        let a = ConfusionMatrix::from_counts(classes, counts.clone()).map_err(err)?;
        let b = ConfusionMatrix::from_counts(classes, permuted).map_err(err)?;
        let (ia, ib) = (a.iou_per_class(), b.iou_per_class());
        ensure(ia == iou_oracle(&counts, classes), format!("matrix {i}: IoU differs from oracle"))?;
        ensure((0..classes).all(|c| ia[c] == ib[perm[c]]), format!("matrix {i}: IoU not permuted"))?;
        match (a.miou(), b.miou()) {
            (Ok(x), Ok(y)) => ensure(x == y, format!("matrix {i}: mIoU {x} vs {y}"))?,
            (Err(_), Err(_)) => {}
            _ => return Err(format!("matrix {i}: mIoU defined for only one labelling")),
        }
    }
    Ok("IoU (1/2, 2/3), mIoU 7/12; relabelling invariant on 100 random matrices".into())
}

/// State shared by criteria 5 and 6.
struct ToyRun {
    report: AblationReport,
    teacher_checkpoint_unchanged: bool,
    teacher_val_miou: f64,
    presence: Vec<f64>,
    elapsed: Duration,
}

fn toy_ablation(seeds: &[u64]) -> Result<ToyRun, String> {
    let t = Instant::now();
    let spec = DatasetSpec::default();
    let train = dataset::generate(&spec, Split::Train).map_err(err)?;
    let val = dataset::generate(&spec, Split::Val).map_err(err)?;
    let optim = OptimConfig::default();
    let teacher_cfg = NetConfig::teacher_default(spec.num_classes);
    let teacher = trainer::train_teacher(&train, &val, &teacher_cfg, &optim, 0, 500).map_err(err)?;
    let teacher_val_miou = teacher.log.last().map_or(f64::NAN, |r| r.val_miou);
    let dir = TempDir::new().map_err(err)?;
    checkpoint::save(dir.path(), &teacher.net, None, optim.total_iter).map_err(err)?;
    let before = tree(dir.path());

    let loaded = checkpoint::load(dir.path()).map_err(err)?.net;
    let base = DistillConfig {
        weights: LossWeights::default(),
        teacher_checkpoint: dir.path().to_path_buf(),
        teacher: Some(teacher_cfg),
        student: NetConfig::student_default(spec.num_classes),
        seed: 0,
        eval_every: 500,
        projection: true,
    };
    let report = ablation::run(&train, &val, &loaded, &base, &optim, seeds, |_, _, _| {}).map_err(err)?;
    Ok(ToyRun {
        report,
        teacher_checkpoint_unchanged: tree(dir.path()) == before && checkpoint_matches(dir.path(), &loaded),
        teacher_val_miou,
        presence: dataset::class_presence(&train, spec.num_classes),
        elapsed: t.elapsed(),
    })
}

fn checkpoint_matches(dir: &Path, net: &i2ckd_core::SegNetwork) -> bool {
    checkpoint::load(dir).map(|c| &c.net == net).unwrap_or(false)
}

fn criterion_5(run: &Result<ToyRun, String>) -> Check {
    let run = run.as_ref().map_err(Clone::clone)?;
    let rows = &run.report.rows;
    ensure(rows.len() == 3, "ablation must have three rows")?;
    let (task, sm, full) = (&rows[0], &rows[1], &rows[2]);
    let margin = 100.0 * (full.mean_miou - task.mean_miou);
    let summary = format!(
        "mean val mIoU task {:.2}, task+sm {:.2}, task+sm+i2ckd {:.2} (%); teacher {:.2}%; {:.0?}",
        100.0 * task.mean_miou,
        100.0 * sm.mean_miou,
        100.0 * full.mean_miou,
        100.0 * run.teacher_val_miou,
        run.elapsed
    );
    let ordered = full.mean_miou > sm.mean_miou && sm.mean_miou > task.mean_miou;
    if ordered && margin >= 0.5 {
        return Ok(summary);
    }
    let wins = full
        .miou
        .iter()
        .zip(&task.miou)
        .filter(|(f, t)| 100.0 * (*f - *t) >= 0.5)
        .count();
    if margin >= 0.5 && wins >= 4 {
        return Ok(format!(
            "{summary}; middle row out of order, full method ahead by >= 0.5 points on {wins}/5 seeds"
        ));
    }
    Err(format!("{summary}; full - task = {margin:.2} points, per-seed wins {wins}/5"))
}

fn criterion_6(run: &Result<ToyRun, String>) -> Check {
    ensure(poly_lr(&OptimConfig::default(), 0).map_err(err)? == 0.02, "poly_lr(0) != 0.02")?;
    let cfg = OptimConfig::default();
    ensure(poly_lr(&cfg, cfg.total_iter).map_err(err)? == 0.0, "poly_lr(total) != 0")?;
    let run = run.as_ref().map_err(|e| format!("toy run failed: {e}"))?;
    ensure(
        run.teacher_checkpoint_unchanged,
        "teacher checkpoint changed during distillation",
    )?;
    Ok("teacher checkpoint bytes unchanged after 15 distillation runs; poly_lr 0.02 -> 0".into())
}

fn criterion_7() -> Check {
    let (train, val) = tiny_data();
    let optim = tiny_optim(6);
    let run_once = || -> Result<Vec<_>, String> {
        let dir = TempDir::new().map_err(err)?;
        let teacher = trainer::train_teacher(&train, &val, &tiny_teacher(), &optim, 5, 2).map_err(err)?;
        teacher.save(&dir.path().join("teacher")).map_err(err)?;
        trainer::write_metric_log(&dir.path().join("teacher.jsonl"), &teacher.log).map_err(err)?;
        let cfg = DistillConfig {
            weights: LossWeights::default(),
            teacher_checkpoint: dir.path().join("teacher"),
            teacher: None,
            student: tiny_student(),
            seed: 6,
            eval_every: 2,
            projection: true,
        };
        let student = trainer::distill_from_checkpoint(&train, &val, &cfg, &optim, |_| {}).map_err(err)?;
        student.save(&dir.path().join("student")).map_err(err)?;
        trainer::write_metric_log(&dir.path().join("student.jsonl"), &student.log).map_err(err)?;
        let cm = trainer::evaluate(&student.net, &val).map_err(err)?;
        let eval = serde_json::to_vec(&i2ckd_core::EvalReport::from_matrix(&cm).map_err(err)?).map_err(err)?;
        std::fs::write(dir.path().join("eval.json"), eval).map_err(err)?;
        Ok(tree(dir.path()))
    };
    let a = run_once()?;
    let b = run_once()?;
    ensure(a == b, "reruns produced different bytes")?;
    Ok(format!("{} files (checkpoints, logs, eval) bit-identical across reruns", a.len()))
}

fn guarded(f: impl FnOnce() -> Check) -> Check {
    panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    })
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut emit = |n: usize, name: &str, result: Check| {
        match result {
            Ok(detail) => println!("criterion {n} ({name}): PASS: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL: {detail}");
            }
        }
    };
    emit(1, "gradient correctness", guarded(criterion_1));
    emit(2, "oracle equivalence", guarded(criterion_2));
    emit(3, "equality anchors", guarded(criterion_3));
    emit(4, "metric correctness", guarded(criterion_4));
    let run = panic::catch_unwind(AssertUnwindSafe(|| toy_ablation(&[0, 1, 2, 3, 4])))
        .unwrap_or_else(|_| Err("toy ablation panicked".into()));
    if let Ok(r) = &run {
        println!("\n{}", r.report.to_markdown());
        println!("train class presence: {:?}\n", r.presence);
    }
    emit(5, "toy ablation", guarded(|| criterion_5(&run)));
    emit(6, "protocol fidelity", guarded(|| criterion_6(&run)));
    emit(7, "determinism", guarded(criterion_7));
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
