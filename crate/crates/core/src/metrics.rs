//! Confusion matrices and intersection-over-union.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, IGNORE_LABEL};

/// `C×C` pixel counts; rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::LengthMismatch {
                dims: vec![classes, classes],
                len: counts.len(),
            });
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one prediction/ground-truth pair; ignore pixels in `gt` are skipped.
    pub fn update(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(Error::ShapeMismatch {
                expected: vec![gt.height(), gt.width()],
                actual: vec![pred.height(), pred.width()],
            });
        }
        gt.validate(self.classes)?;
        if let Some(&label) = pred.data().iter().find(|&&p| p as usize >= self.classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.classes,
            });
        }
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g != IGNORE_LABEL {
                self.counts[g as usize * self.classes + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Config(format!(
                "cannot merge {}-class and {}-class matrices",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `(tp, tp + fp + fn)` per class.
    fn iou_fractions(&self) -> Vec<(u64, u64)> {
        let c = self.classes;
        (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let row: u64 = (0..c).map(|j| self.get(k, j)).sum();
                let col: u64 = (0..c).map(|i| self.get(i, k)).sum();
                (tp, row + col - tp)
            })
            .collect()
    }

    /// `tp / (tp + fp + fn)` per class; `None` where the denominator is zero.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        self.iou_fractions()
            .into_iter()
            .map(|(tp, union)| (union > 0).then(|| tp as f64 / union as f64))
            .collect()
    }

    /// Mean of the defined per-class IoUs. The mean is formed exactly in
    /// rational arithmetic and rounded once whenever it fits, so it does not
    /// depend on class order.
    pub fn miou(&self) -> Result<f64> {
        let defined: Vec<(u64, u64)> = self.iou_fractions().into_iter().filter(|&(_, u)| u > 0).collect();
        if defined.is_empty() {
            return Err(Error::Config("mIoU undefined: no class is present or predicted".into()));
        }
        if let Some(m) = exact_mean(&defined) {
            return Ok(m);
        }
        Ok(defined.iter().map(|&(t, u)| t as f64 / u as f64).sum::<f64>() / defined.len() as f64)
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Correctly rounded mean of `num/den` fractions, or `None` when the exact
/// value does not fit.
fn exact_mean(fracs: &[(u64, u64)]) -> Option<f64> {
    let (mut num, mut den) = (0u128, 1u128);
    for &(a, b) in fracs {
        let (a, b) = (a as u128, b as u128);
        let g = gcd(den, b);
        let lcm = (den / g).checked_mul(b)?;
        num = num.checked_mul(lcm / den)?.checked_add(a.checked_mul(lcm / b)?)?;
        den = lcm;
        let r = gcd(num, den).max(1);
        (num, den) = (num / r, den / r);
    }
    den = den.checked_mul(fracs.len() as u128)?;
    let r = gcd(num, den).max(1);
    (num, den) = (num / r, den / r);
    ratio_to_f64(num, den)
}

/// `num / den` rounded to nearest, ties to even.
fn ratio_to_f64(num: u128, den: u128) -> Option<f64> {
    const TOP: u128 = 1 << 53;
    if num == 0 {
        return Some(0.0);
    }
    if den >= 1 << 127 || num / den >= TOP {
        return None;
    }
    let (mut mant, mut rem, mut exp) = (num / den, num % den, 0i32);
    while mant < TOP {
        rem <<= 1;
        mant <<= 1;
        if rem >= den {
            rem -= den;
            mant |= 1;
        }
        exp -= 1;
    }
    let (mut m, round) = (mant >> 1, mant & 1 == 1);
    if round && (rem != 0 || m & 1 == 1) {
        m += 1;
    }
    Some(m as f64 * 2f64.powi(exp + 1))
}

/// JSON summary written by evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixels_scored: u64,
}

impl EvalReport {
    pub fn from_matrix(cm: &ConfusionMatrix) -> Result<Self> {
        Ok(EvalReport {
            per_class_iou: cm.iou_per_class(),
            miou: cm.miou()?,
            pixels_scored: cm.total(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn ratio_matches_native_division(num in 0u64..1 << 53, den in 1u64..1 << 53) {
            prop_assert_eq!(ratio_to_f64(num as u128, den as u128), Some(num as f64 / den as f64));
        }
    }

    #[test]
    fn miou_ignores_class_order() {
        let counts: Vec<u64> = (0..49).map(|i| (i * 7919 % 997) as u64).collect();
        let a = ConfusionMatrix::from_counts(7, counts.clone()).unwrap();
        let mut rev = vec![0; 49];
        for t in 0..7 {
            for p in 0..7 {
                rev[(6 - t) * 7 + 6 - p] = counts[t * 7 + p];
            }
        }
        let b = ConfusionMatrix::from_counts(7, rev).unwrap();
        assert_eq!(a.miou().unwrap().to_bits(), b.miou().unwrap().to_bits());
    }

    fn lm(h: usize, w: usize, d: &[u8]) -> LabelMap {
        LabelMap::new(h, w, d.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction_fills_diagonal() {
        let gt = lm(2, 2, &[0, 1, 2, 1]);
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&gt, &gt).unwrap();
        assert_eq!(cm.counts(), &[1, 0, 0, 0, 2, 0, 0, 0, 1]);
        assert_eq!(cm.iou_per_class(), vec![Some(1.0); 3]);
        assert_eq!(cm.miou().unwrap(), 1.0);
    }

    #[test]
    fn all_ignore_leaves_matrix_unchanged() {
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&lm(1, 2, &[0, 1]), &lm(1, 2, &[255, 255])).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(cm.miou().is_err());
    }

    #[test]
    fn hand_counted_fixture() {
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&lm(2, 2, &[0, 1, 1, 1]), &lm(2, 2, &[0, 0, 1, 1])).unwrap();
        assert_eq!(cm.counts(), &[1, 1, 0, 2]);
        assert_eq!(cm.iou_per_class(), vec![Some(0.5), Some(2.0 / 3.0)]);
        assert_eq!(cm.miou().unwrap(), 7.0 / 12.0);
    }

    #[test]
    fn absent_class_is_undefined() {
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&lm(1, 2, &[0, 1]), &lm(1, 2, &[0, 1])).unwrap();
        assert_eq!(cm.iou_per_class()[2], None);
        assert_eq!(cm.miou().unwrap(), 1.0);
    }

    #[test]
    fn out_of_range_labels() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.update(&lm(1, 1, &[2]), &lm(1, 1, &[0])).is_err());
        assert!(cm.update(&lm(1, 1, &[0]), &lm(1, 1, &[3])).is_err());
        assert!(cm.update(&lm(1, 1, &[255]), &lm(1, 1, &[0])).is_err());
        assert!(cm.update(&lm(1, 2, &[0, 0]), &lm(2, 1, &[0, 0])).is_err());
    }

    #[test]
    fn shard_merge_is_order_independent() {
        let shards = [
            (lm(1, 3, &[0, 1, 2]), lm(1, 3, &[0, 2, 2])),
            (lm(1, 3, &[1, 1, 0]), lm(1, 3, &[1, 255, 0])),
            (lm(1, 3, &[2, 0, 0]), lm(1, 3, &[2, 1, 0])),
        ];
        let mut forward = ConfusionMatrix::new(3);
        for (p, g) in &shards {
            forward.update(p, g).unwrap();
        }
        let mut merged = ConfusionMatrix::new(3);
        for (p, g) in shards.iter().rev() {
            let mut one = ConfusionMatrix::new(3);
            one.update(p, g).unwrap();
            merged.merge(&one).unwrap();
        }
        assert_eq!(forward, merged);
    }
}
