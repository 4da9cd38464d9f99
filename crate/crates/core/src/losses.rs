//! Distillation and task losses.
//!
//! Each per-image loss returns its value together with the exact gradient
//! with respect to the student-side input; the batch helpers average over
//! images.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Shape, Tensor, IGNORE_LABEL};

/// Weights and hyperparameters of the combined student objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_i2ckd: f64,
    pub lambda_sm: f64,
    pub temperature: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_i2ckd: 0.6,
            lambda_sm: 3.0,
            temperature: 2.0,
            margin: 0.1,
        }
    }
}

impl LossWeights {
    pub fn task_only() -> Self {
        LossWeights {
            lambda_i2ckd: 0.0,
            lambda_sm: 0.0,
            ..LossWeights::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.lambda_i2ckd, self.lambda_sm, self.temperature, self.margin]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("loss weights must be finite".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if self.margin < 0.0 {
            return Err(Error::Config(format!("margin must be >= 0, got {}", self.margin)));
        }
        if self.lambda_i2ckd < 0.0 || self.lambda_sm < 0.0 {
            return Err(Error::Config("lambdas must be >= 0".into()));
        }
        Ok(())
    }
}

/// Unweighted loss parts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l_task: f64,
    pub l_sm: f64,
    pub l_i2ckd: f64,
}

/// `λ_i2ckd·l_i2ckd + λ_sm·l_sm + l_task`.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> f64 {
    w.lambda_i2ckd * parts.l_i2ckd + w.lambda_sm * parts.l_sm + parts.l_task
}

/// Nearest-neighbour label resampling to `(h, w)`; source coordinates are
/// `floor(i · H / h)`.
pub fn downsample_mask_nearest(mask: &LabelMap, h: usize, w: usize) -> Result<LabelMap> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidShape {
            dims: vec![h, w],
            reason: "zero target extent",
        });
    }
    if h > mask.height() || w > mask.width() {
        return Err(Error::Config(format!(
            "target {h}x{w} exceeds source {}x{}",
            mask.height(),
            mask.width()
        )));
    }
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let sy = y * mask.height() / h;
        for x in 0..w {
            out.push(mask.get(sy, x * mask.width() / w));
        }
    }
    LabelMap::new(h, w, out)
}

/// Per-class, per-channel feature centroids.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeMatrix {
    /// `[C, K]`; rows of absent classes are zero.
    pub values: Tensor,
    pub present: Vec<bool>,
    /// Pixel count of each class.
    pub counts: Vec<usize>,
}

impl PrototypeMatrix {
    pub fn num_classes(&self) -> usize {
        self.present.len()
    }

    pub fn channels(&self) -> usize {
        self.values.dims()[1]
    }

    pub fn row(&self, c: usize) -> &[f64] {
        let k = self.channels();
        &self.values.data()[c * k..(c + 1) * k]
    }

    pub fn present_classes(&self) -> Vec<usize> {
        (0..self.num_classes()).filter(|&c| self.present[c]).collect()
    }
}

fn feature_dims(features: &Tensor) -> Result<(usize, usize, usize)> {
    match features.dims() {
        &[k, h, w] => Ok((k, h, w)),
        d => Err(Error::Config(format!("features must be [K,h,w], got {d:?}"))),
    }
}

fn check_mask(mask: &LabelMap, h: usize, w: usize, classes: usize) -> Result<()> {
    if mask.height() != h || mask.width() != w {
        return Err(Error::ShapeMismatch {
            expected: vec![h, w],
            actual: vec![mask.height(), mask.width()],
        });
    }
    mask.validate(classes)
}

/// Class prototypes of one `[K, h, w]` feature map under mask `M`.
///
/// For every class the sum runs over pixels in row-major order, then divides
/// by the pixel count. Ignore pixels belong to no class.
pub fn compute_prototypes(features: &Tensor, mask: &LabelMap, classes: usize) -> Result<PrototypeMatrix> {
    let (k, h, w) = feature_dims(features)?;
    check_mask(mask, h, w, classes)?;
    let hw = h * w;
    let mut counts = vec![0usize; classes];
    for &l in mask.data() {
        if l != IGNORE_LABEL {
            counts[l as usize] += 1;
        }
    }
    let mut sums = vec![0.0f64; classes * k];
    let f = features.data();
    for ch in 0..k {
        let plane = &f[ch * hw..(ch + 1) * hw];
        for (&l, &v) in mask.data().iter().zip(plane) {
            if l != IGNORE_LABEL {
                sums[l as usize * k + ch] += v;
            }
        }
    }
    for c in 0..classes {
        if counts[c] > 0 {
            for v in &mut sums[c * k..(c + 1) * k] {
                *v /= counts[c] as f64;
            }
        }
    }
    Ok(PrototypeMatrix {
        values: Tensor::from_vec(Shape::new([classes, k])?, sums)?,
        present: counts.iter().map(|&n| n > 0).collect(),
        counts,
    })
}

/// Pulls a gradient on the prototype matrix back to the `[K, h, w]` features.
pub fn prototype_backward(grad: &Tensor, protos: &PrototypeMatrix, mask: &LabelMap) -> Result<Tensor> {
    let k = protos.channels();
    let hw = mask.len();
    let g = grad.data();
    let mut out = vec![0.0; k * hw];
    for ch in 0..k {
        let plane = &mut out[ch * hw..(ch + 1) * hw];
        for (dst, &l) in plane.iter_mut().zip(mask.data()) {
            if l != IGNORE_LABEL {
                let c = l as usize;
                *dst = g[c * k + ch] / protos.counts[c] as f64;
            }
        }
    }
    Tensor::from_vec(Shape::new([k, mask.height(), mask.width()])?, out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletOutput {
    pub loss: f64,
    /// Gradient with respect to the student prototypes, `[C, K]`.
    pub grad: Tensor,
    /// Ordered pairs `(c, j)`, `c ≠ j`, with both classes present.
    pub pairs: usize,
    /// Pairs whose hinge is strictly positive.
    pub active: usize,
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Prototype triplet loss: the mean over valid ordered class pairs `(c, j)`
/// of `[m + ‖p_c^s − p_c^t‖ − ‖p_c^s − p_j^t‖]_+`.
///
/// The gradient uses subgradient 0 at the hinge boundary and for any
/// zero-length distance.
pub fn triplet_prototype_loss(
    student: &PrototypeMatrix,
    teacher: &PrototypeMatrix,
    margin: f64,
) -> Result<TripletOutput> {
    if student.values.dims() != teacher.values.dims() {
        return Err(Error::ShapeMismatch {
            expected: teacher.values.dims().to_vec(),
            actual: student.values.dims().to_vec(),
        });
    }
    if student.present != teacher.present {
        return Err(Error::Config("student and teacher prototypes disagree on present classes".into()));
    }
    let (c_n, k) = (student.num_classes(), student.channels());
    let present = student.present_classes();
    let mut grad = vec![0.0; c_n * k];
    let mut total = 0.0;
    let mut pairs = 0;
    let mut active = 0;
    for &c in &present {
        let ps = student.row(c);
        let intra = euclidean(ps, teacher.row(c));
        for &j in &present {
            if j == c {
                continue;
            }
            pairs += 1;
            let inter = euclidean(ps, teacher.row(j));
            let hinge = margin + intra - inter;
            if hinge <= 0.0 {
                continue;
            }
            total += hinge;
            active += 1;
            let g = &mut grad[c * k..(c + 1) * k];
            if intra > 0.0 {
                for (gi, (s, t)) in g.iter_mut().zip(ps.iter().zip(teacher.row(c))) {
                    *gi += (s - t) / intra;
                }
            }
            if inter > 0.0 {
                for (gi, (s, t)) in g.iter_mut().zip(ps.iter().zip(teacher.row(j))) {
                    *gi -= (s - t) / inter;
                }
            }
        }
    }
    let (loss, grad) = if pairs == 0 {
        (0.0, vec![0.0; c_n * k])
    } else {
        let n = pairs as f64;
        (total / n, grad.into_iter().map(|g| g / n).collect())
    };
    Ok(TripletOutput {
        loss,
        grad: Tensor::from_vec(Shape::new([c_n, k])?, grad)?,
        pairs,
        active,
    })
}

/// Log-softmax of each `len`-long row of `x / temperature`.
fn log_softmax_rows(x: &[f64], len: usize, temperature: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(len) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / temperature));
        let mut z = 0.0;
        for &v in row {
            z += (v / temperature - max).exp();
        }
        let lz = z.ln() + max;
        out.extend(row.iter().map(|&v| v / temperature - lz));
    }
    out
}

/// Channel-wise distillation: per channel, KL divergence between the teacher
/// and student softmaxes over spatial positions at temperature `T`, scaled by
/// `T² / C`.
pub fn channel_kld_loss(teacher: &Tensor, student: &Tensor, temperature: f64) -> Result<(f64, Tensor)> {
    if !temperature.is_finite() || temperature <= 0.0 {
        return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
    }
    if teacher.shape() != student.shape() {
        return Err(Error::ShapeMismatch {
            expected: teacher.dims().to_vec(),
            actual: student.dims().to_vec(),
        });
    }
    let (c, h, w) = feature_dims(student)?;
    let n = h * w;
    let lt = log_softmax_rows(teacher.data(), n, temperature);
    let ls = log_softmax_rows(student.data(), n, temperature);
    let scale = temperature * temperature / c as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(lt.len());
    for (&a, &b) in lt.iter().zip(&ls) {
        let pt = a.exp();
        if pt > 0.0 {
            loss += pt * (a - b);
        }
        grad.push(scale / temperature * (b.exp() - pt));
    }
    Ok((scale * loss, Tensor::from_vec(student.shape().clone(), grad)?))
}

/// Mean over annotated pixels of `−log softmax_C(y)[label]`.
pub fn task_cross_entropy(scores: &Tensor, mask: &LabelMap) -> Result<(f64, Tensor)> {
    let (c, h, w) = feature_dims(scores)?;
    check_mask(mask, h, w, c)?;
    let hw = h * w;
    let y = scores.data();
    let labelled = mask.data().iter().filter(|&&l| l != IGNORE_LABEL).count();
    let mut grad = vec![0.0; c * hw];
    if labelled == 0 {
        return Ok((0.0, Tensor::from_vec(scores.shape().clone(), grad)?));
    }
    let inv = 1.0 / labelled as f64;
    let mut loss = 0.0;
    let mut logits = vec![0.0; c];
    for (p, &l) in mask.data().iter().enumerate() {
        if l == IGNORE_LABEL {
            continue;
        }
        for (ch, v) in logits.iter_mut().enumerate() {
            *v = y[ch * hw + p];
        }
        let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let z: f64 = logits.iter().map(|&v| (v - max).exp()).sum();
        let lz = z.ln() + max;
        loss += lz - logits[l as usize];
        for ch in 0..c {
            let prob = (logits[ch] - lz).exp();
            let target = if ch == l as usize { 1.0 } else { 0.0 };
            grad[ch * hw + p] = (prob - target) * inv;
        }
    }
    Ok((loss * inv, Tensor::from_vec(scores.shape().clone(), grad)?))
}

/// Per-pixel argmax over the class axis of `[B, C, H, W]` scores; ties go to
/// the lowest class index.
pub fn argmax_labels(scores: &Tensor) -> Result<Vec<LabelMap>> {
    let (b, c, h, w) = match scores.dims() {
        &[b, c, h, w] => (b, c, h, w),
        d => return Err(Error::Config(format!("scores must be [B,C,H,W], got {d:?}"))),
    };
    if c > IGNORE_LABEL as usize {
        return Err(Error::Config(format!("{c} classes do not fit in u8 labels")));
    }
    let hw = h * w;
    let data = scores.data();
    (0..b)
        .map(|i| {
            let img = &data[i * c * hw..(i + 1) * c * hw];
            let labels = (0..hw)
                .map(|p| {
                    let mut best = 0;
                    for ch in 1..c {
                        if img[ch * hw + p] > img[best * hw + p] {
                            best = ch;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMap::new(h, w, labels)
        })
        .collect()
}

/// Batch-averaged loss value and gradient (`[B, ...]`).
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub value: f64,
    pub grad: Tensor,
}

fn per_image<F>(batch: &Tensor, mut f: F) -> Result<BatchLoss>
where
    F: FnMut(usize, Tensor) -> Result<(f64, Tensor)>,
{
    let b = batch.dims()[0];
    let inv = 1.0 / b as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(batch.numel());
    for i in 0..b {
        let (v, g) = f(i, batch.index_outer(i)?)?;
        value += v;
        grad.extend(g.data().iter().map(|x| x * inv));
    }
    Ok(BatchLoss {
        value: value * inv,
        grad: Tensor::from_vec(batch.shape().clone(), grad)?,
    })
}

fn check_batch(t: &Tensor, masks: &[LabelMap]) -> Result<()> {
    if t.dims().len() != 4 || t.dims()[0] != masks.len() {
        return Err(Error::Config(format!(
            "batch of shape {:?} does not match {} masks",
            t.dims(),
            masks.len()
        )));
    }
    Ok(())
}

pub fn batch_task_loss(scores: &Tensor, masks: &[LabelMap]) -> Result<BatchLoss> {
    check_batch(scores, masks)?;
    per_image(scores, |i, s| task_cross_entropy(&s, &masks[i]))
}

pub fn batch_channel_kld(teacher: &Tensor, student: &Tensor, temperature: f64) -> Result<BatchLoss> {
    if teacher.shape() != student.shape() || teacher.dims().len() != 4 {
        return Err(Error::ShapeMismatch {
            expected: teacher.dims().to_vec(),
            actual: student.dims().to_vec(),
        });
    }
    per_image(student, |i, s| channel_kld_loss(&teacher.index_outer(i)?, &s, temperature))
}

fn aligned_mask(mask: &LabelMap, h: usize, w: usize) -> Result<LabelMap> {
    if mask.height() == h && mask.width() == w {
        Ok(mask.clone())
    } else {
        downsample_mask_nearest(mask, h, w)
    }
}

/// Prototypes of every image of a `[B, K, h, w]` feature batch. Masks are
/// resampled to the feature resolution when needed.
pub fn batch_prototypes(features: &Tensor, masks: &[LabelMap], classes: usize) -> Result<Vec<PrototypeMatrix>> {
    check_batch(features, masks)?;
    let (h, w) = (features.dims()[2], features.dims()[3]);
    masks
        .iter()
        .enumerate()
        .map(|(i, m)| compute_prototypes(&features.index_outer(i)?, &aligned_mask(m, h, w)?, classes))
        .collect()
}

/// Prototype triplet loss per image, averaged over the batch.
#[derive(Clone, Debug)]
pub struct BatchTriplet {
    pub loss: BatchLoss,
    pub pairs: usize,
    pub active: usize,
}

pub fn batch_triplet_loss(
    teacher: &[PrototypeMatrix],
    student_features: &Tensor,
    masks: &[LabelMap],
    classes: usize,
    margin: f64,
) -> Result<BatchTriplet> {
    check_batch(student_features, masks)?;
    if teacher.len() != masks.len() {
        return Err(Error::Config(format!(
            "{} teacher prototype sets for {} images",
            teacher.len(),
            masks.len()
        )));
    }
    if let Some(t) = teacher.first() {
        if t.channels() != student_features.dims()[1] {
            return Err(Error::Config(format!(
                "teacher features have {} channels, student {}; a projection is required",
                t.channels(),
                student_features.dims()[1]
            )));
        }
    }
    let (h, w) = (student_features.dims()[2], student_features.dims()[3]);
    let mut pairs = 0;
    let mut active = 0;
    let loss = per_image(student_features, |i, fs| {
        let mask = aligned_mask(&masks[i], h, w)?;
        let ps = compute_prototypes(&fs, &mask, classes)?;
        let out = triplet_prototype_loss(&ps, &teacher[i], margin)?;
        pairs += out.pairs;
        active += out.active;
        let g = prototype_backward(&out.grad, &ps, &mask)?;
        Ok((out.loss, g))
    })?;
    Ok(BatchTriplet { loss, pairs, active })
}
