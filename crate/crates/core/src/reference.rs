//! Brute-force scalar evaluations of the losses, written as direct loops
//! over the defining sums. They share no code with [`crate::losses`] and
//! serve as its cross-check.

use crate::tensor::{LabelMap, Tensor, IGNORE_LABEL};

/// Per-class means by visiting pixels one at a time. Returns `(values
/// [C][K], present)`.
pub fn prototypes(features: &Tensor, mask: &LabelMap, classes: usize) -> (Vec<Vec<f64>>, Vec<bool>) {
    let d = features.dims();
    let (k, h, w) = (d[0], d[1], d[2]);
    let mut values = vec![vec![0.0; k]; classes];
    let mut present = vec![false; classes];
    for (c, row) in values.iter_mut().enumerate() {
        for (ch, slot) in row.iter_mut().enumerate() {
            let mut sum = 0.0;
            let mut count = 0usize;
            for y in 0..h {
                for x in 0..w {
                    if mask.get(y, x) as usize == c && mask.get(y, x) != IGNORE_LABEL {
                        sum += features.get(&[ch, y, x]).unwrap();
                        count += 1;
                    }
                }
            }
            if count > 0 {
                *slot = sum / count as f64;
                present[c] = true;
            }
        }
    }
    (values, present)
}

/// Mean hinge over ordered pairs of distinct present classes.
pub fn triplet(student: &[Vec<f64>], teacher: &[Vec<f64>], present: &[bool], margin: f64) -> f64 {
    let l2 = |a: &[f64], b: &[f64]| {
        let mut s = 0.0;
        for i in 0..a.len() {
            s += (a[i] - b[i]).powi(2);
        }
        s.sqrt()
    };
    let mut total = 0.0;
    let mut pairs = 0usize;
    for c in 0..student.len() {
        for j in 0..student.len() {
            if c == j || !present[c] || !present[j] {
                continue;
            }
            pairs += 1;
            let v = margin + l2(&student[c], &teacher[c]) - l2(&student[c], &teacher[j]);
            total += v.max(0.0);
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Channel-wise KL divergence by explicit double summation.
pub fn channel_kld(teacher: &Tensor, student: &Tensor, temperature: f64) -> f64 {
    let d = teacher.dims();
    let (c, n) = (d[0], d[1] * d[2]);
    let yt = teacher.data();
    let ys = student.data();
    let mut loss = 0.0;
    for k in 0..c {
        let mut zt = 0.0;
        let mut zs = 0.0;
        for i in 0..n {
            zt += (yt[k * n + i] / temperature).exp();
            zs += (ys[k * n + i] / temperature).exp();
        }
        for i in 0..n {
            let pt = (yt[k * n + i] / temperature).exp() / zt;
            let ps = (ys[k * n + i] / temperature).exp() / zs;
            loss += pt * (pt / ps).ln();
        }
    }
    temperature * temperature / c as f64 * loss
}

/// Pixel-averaged cross-entropy by explicit softmax.
pub fn cross_entropy(scores: &Tensor, mask: &LabelMap) -> f64 {
    let c = scores.dims()[0];
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            let label = mask.get(y, x);
            if label == IGNORE_LABEL {
                continue;
            }
            let z: f64 = (0..c).map(|ch| scores.get(&[ch, y, x]).unwrap().exp()).sum();
            let p = scores.get(&[label as usize, y, x]).unwrap().exp() / z;
            total -= p.ln();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}
