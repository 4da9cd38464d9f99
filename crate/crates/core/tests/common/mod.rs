#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use i2ckd_core::dataset;
use i2ckd_core::losses::PrototypeMatrix;
use i2ckd_core::{DatasetSpec, LabelMap, NetConfig, OptimConfig, Sample, Shape, Split, Tensor, IGNORE_LABEL};
use rand::rngs::StdRng;
use rand::Rng;

pub fn tiny_spec() -> DatasetSpec {
    DatasetSpec {
        num_classes: 3,
        height: 16,
        width: 16,
        train_samples: 12,
        val_samples: 6,
        test_samples: 2,
        min_radius: 3.0,
        max_radius: 6.0,
        ..DatasetSpec::default()
    }
}

pub fn tiny_data() -> (Vec<Sample>, Vec<Sample>) {
    let spec = tiny_spec();
    (
        dataset::generate(&spec, Split::Train).unwrap(),
        dataset::generate(&spec, Split::Val).unwrap(),
    )
}

pub fn tiny_teacher() -> NetConfig {
    NetConfig::new(vec![6, 8], 3)
}

pub fn tiny_student() -> NetConfig {
    NetConfig::new(vec![4], 3)
}

pub fn tiny_optim(total_iter: usize) -> OptimConfig {
    OptimConfig {
        total_iter,
        batch_size: 4,
        ..OptimConfig::default()
    }
}

/// Every file below `dir` with its bytes, sorted by path.
pub fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

pub fn random_features(rng: &mut StdRng, k: usize, h: usize, w: usize) -> Tensor {
    let data = (0..k * h * w).map(|_| rng.random_range(-5.0..5.0)).collect();
    Tensor::from_vec(Shape::new([k, h, w]).unwrap(), data).unwrap()
}

/// Labels drawn from a random subset of classes, with ignore pixels.
pub fn random_mask(rng: &mut StdRng, h: usize, w: usize, classes: usize) -> LabelMap {
    let allowed: Vec<u8> = (0..classes as u8).filter(|_| rng.random_bool(0.6)).collect();
    let data = (0..h * w)
        .map(|_| {
            if allowed.is_empty() || rng.random_bool(0.15) {
                IGNORE_LABEL
            } else {
                allowed[rng.random_range(0..allowed.len())]
            }
        })
        .collect();
    LabelMap::new(h, w, data).unwrap()
}

/// Per-pixel accumulation in row-major order, then one division per entry.
pub fn oracle_prototypes(f: &Tensor, m: &LabelMap, classes: usize) -> (Vec<Vec<f64>>, Vec<bool>) {
    let d = f.dims();
    let (k, h, w) = (d[0], d[1], d[2]);
    let mut sums = vec![vec![0.0; k]; classes];
    let mut counts = vec![0usize; classes];
    for y in 0..h {
        for x in 0..w {
            let label = m.get(y, x);
            if label == IGNORE_LABEL {
                continue;
            }
            let c = label as usize;
            counts[c] += 1;
            for (ch, s) in sums[c].iter_mut().enumerate() {
                *s += f.data()[(ch * h + y) * w + x];
            }
        }
    }
    let present: Vec<bool> = counts.iter().map(|&n| n > 0).collect();
    for c in 0..classes {
        if counts[c] > 0 {
            for s in &mut sums[c] {
                *s /= counts[c] as f64;
            }
        }
    }
    (sums, present)
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

pub fn oracle_triplet(s: &[Vec<f64>], t: &[Vec<f64>], present: &[bool], margin: f64) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for c in 0..present.len() {
        for j in 0..present.len() {
            if c != j && present[c] && present[j] {
                total += (margin + dist(&s[c], &t[c]) - dist(&s[c], &t[j])).max(0.0);
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

pub fn oracle_kld(t: &Tensor, s: &Tensor, temp: f64) -> f64 {
    let d = t.dims();
    let (c, n) = (d[0], d[1] * d[2]);
    let mut total = 0.0;
    for ch in 0..c {
        let row_t = &t.data()[ch * n..(ch + 1) * n];
        let row_s = &s.data()[ch * n..(ch + 1) * n];
        let zt: f64 = row_t.iter().map(|v| (v / temp).exp()).sum();
        let zs: f64 = row_s.iter().map(|v| (v / temp).exp()).sum();
        for i in 0..n {
            let pt = (row_t[i] / temp).exp() / zt;
            let ps = (row_s[i] / temp).exp() / zs;
            total += pt * (pt / ps).ln();
        }
    }
    temp * temp / c as f64 * total
}

pub fn protos_of(p: &PrototypeMatrix) -> Vec<Vec<f64>> {
    (0..p.num_classes()).map(|c| p.row(c).to_vec()).collect()
}

pub fn iou_oracle(counts: &[u64], classes: usize) -> Vec<Option<f64>> {
    (0..classes)
        .map(|c| {
            let tp = counts[c * classes + c];
            let fn_: u64 = (0..classes).filter(|&p| p != c).map(|p| counts[c * classes + p]).sum();
            let fp: u64 = (0..classes).filter(|&t| t != c).map(|t| counts[t * classes + c]).sum();
            let denom = tp + fp + fn_;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect()
}

