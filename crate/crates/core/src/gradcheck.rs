//! Central finite-difference gradient checks.
//!
//! Error per component is `|g_ad − g_fd| / max(1, |g_ad|, |g_fd|)`; a check
//! passes when the maximum over components is below the tolerance.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::autodiff::{NodeId, Tape};
use crate::error::Result;
use crate::losses::{self, LossWeights, PrototypeMatrix};
use crate::nn::{NetConfig, SegNetwork};
use crate::rng;
use crate::tensor::{LabelMap, Shape, Tensor, IGNORE_LABEL};
use crate::trainer::{self, TeacherBatch};

pub const DEFAULT_PERTURB: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = f(&probe)?;
        probe[i] = orig - eps;
        let minus = f(&probe)?;
        probe[i] = orig;
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub components: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub perturb: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Name of a check whose analytic gradient is deliberately perturbed
    /// (negative control).
    pub corrupt: Option<String>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            perturb: DEFAULT_PERTURB,
            tolerance: DEFAULT_TOLERANCE,
            seed: 0,
            corrupt: None,
        }
    }
}

fn normal_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

fn tensor(dims: &[usize], data: Vec<f64>) -> Result<Tensor> {
    Tensor::from_dims(dims, data)
}

struct Check<'a> {
    opts: &'a SuiteOptions,
    reports: Vec<CheckReport>,
}

impl Check<'_> {
    fn record(&mut self, name: &str, mut analytic: Vec<f64>, numeric: Vec<f64>) {
        if self.opts.corrupt.as_deref() == Some(name) {
            if let Some(g) = analytic.first_mut() {
                *g += 0.5;
            }
        }
        let err = max_relative_error(&analytic, &numeric);
        self.reports.push(CheckReport {
            name: name.to_string(),
            components: analytic.len(),
            max_rel_err: err,
            tolerance: self.opts.tolerance,
            passed: err < self.opts.tolerance,
        });
    }
}

/// `Σ r ⊙ op(x, w, b)` checked against all three inputs of a convolution.
fn conv_check(check: &mut Check<'_>, name: &str, kernel: usize, seed: u64) -> Result<()> {
    let mut r = rng::stream(seed, name, 0);
    let (b, cin, cout, h, w) = (1, 2, 3, 4, 4);
    let wdims: Vec<usize> = if kernel == 3 { vec![cout, cin, 3, 3] } else { vec![cout, cin] };
    let wn: usize = wdims.iter().product();
    let x = normal_vec(&mut r, b * cin * h * w, 1.0);
    let wt = normal_vec(&mut r, wn, 0.5);
    let bias = normal_vec(&mut r, cout, 0.5);
    let probe = normal_vec(&mut r, b * cout * h * w, 1.0);
    let xdims = [b, cin, h, w];

    let eval = |x: &[f64], wt: &[f64], bias: &[f64]| -> Result<(f64, Tape, [NodeId; 4])> {
        let mut tape = Tape::new();
        let xi = tape.variable(tensor(&xdims, x.to_vec())?);
        let wi = tape.variable(tensor(&wdims, wt.to_vec())?);
        let bi = tape.variable(tensor(&[cout], bias.to_vec())?);
        let y = if kernel == 3 {
            tape.conv2d_3x3(xi, wi, bi)?
        } else {
            tape.conv2d_1x1(xi, wi, bi)?
        };
        let v: f64 = tape.value(y).data().iter().zip(&probe).map(|(a, b)| a * b).sum();
        let root = tape.custom_scalar(v, vec![(y, tensor(&[b, cout, h, w], probe.clone())?)])?;
        Ok((v, tape, [xi, wi, bi, root]))
    };
    let (_, tape, [xi, wi, bi, root]) = eval(&x, &wt, &bias)?;
    let g = tape.backward(root, &mut [])?;
    let eps = check.opts.perturb;
    let nx = numeric_gradient(&x, eps, |p| Ok(eval(p, &wt, &bias)?.0))?;
    let nw = numeric_gradient(&wt, eps, |p| Ok(eval(&x, p, &bias)?.0))?;
    let nb = numeric_gradient(&bias, eps, |p| Ok(eval(&x, &wt, p)?.0))?;
    let mut analytic = g.wrt(xi).unwrap().into_vec();
    analytic.extend(g.wrt(wi).unwrap().into_vec());
    analytic.extend(g.wrt(bi).unwrap().into_vec());
    let mut numeric = nx;
    numeric.extend(nw);
    numeric.extend(nb);
    check.record(name, analytic, numeric);
    Ok(())
}

fn relu_check(check: &mut Check<'_>, seed: u64) -> Result<()> {
    let mut r = rng::stream(seed, "relu", 0);
    // keep every input at least 0.1 away from the kink
    let x: Vec<f64> = (0..24)
        .map(|_| {
            let v: f64 = r.random_range(0.1..2.0);
            if r.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    let probe = normal_vec(&mut r, 24, 1.0);
    let eval = |x: &[f64]| -> Result<(f64, Tape, NodeId, NodeId)> {
        let mut tape = Tape::new();
        let xi = tape.variable(tensor(&[2, 3, 4], x.to_vec())?);
        let y = tape.relu(xi)?;
        let v: f64 = tape.value(y).data().iter().zip(&probe).map(|(a, b)| a * b).sum();
        let root = tape.custom_scalar(v, vec![(y, tensor(&[2, 3, 4], probe.clone())?)])?;
        Ok((v, tape, xi, root))
    };
    let (_, tape, xi, root) = eval(&x)?;
    let analytic = tape.backward(root, &mut [])?.wrt(xi).unwrap().into_vec();
    let numeric = numeric_gradient(&x, check.opts.perturb, |p| Ok(eval(p)?.0))?;
    check.record("relu", analytic, numeric);
    Ok(())
}

fn random_mask(r: &mut impl Rng, h: usize, w: usize, classes: usize, ignore_frac: f64) -> Result<LabelMap> {
    let data = (0..h * w)
        .map(|_| {
            if r.random::<f64>() < ignore_frac {
                IGNORE_LABEL
            } else {
                r.random_range(0..classes) as u8
            }
        })
        .collect();
    LabelMap::new(h, w, data)
}

fn cross_entropy_check(check: &mut Check<'_>, seed: u64) -> Result<()> {
    let mut r = rng::stream(seed, "task_cross_entropy", 0);
    let (c, h, w) = (3, 2, 2);
    let y = normal_vec(&mut r, c * h * w, 1.5);
    let mask = LabelMap::new(h, w, vec![0, 2, IGNORE_LABEL, 1])?;
    let f = |y: &[f64]| Ok(losses::task_cross_entropy(&tensor(&[c, h, w], y.to_vec())?, &mask)?.0);
    let analytic = losses::task_cross_entropy(&tensor(&[c, h, w], y.clone())?, &mask)?.1.into_vec();
    let numeric = numeric_gradient(&y, check.opts.perturb, f)?;
    check.record("task_cross_entropy", analytic, numeric);
    Ok(())
}

fn kld_check(check: &mut Check<'_>, seed: u64) -> Result<()> {
    let mut r = rng::stream(seed, "channel_kld_loss", 0);
    let dims = [3, 3, 4];
    let yt = tensor(&dims, normal_vec(&mut r, 36, 1.5))?;
    let ys = normal_vec(&mut r, 36, 1.5);
    let t = 2.0;
    let f = |y: &[f64]| Ok(losses::channel_kld_loss(&yt, &tensor(&dims, y.to_vec())?, t)?.0);
    let analytic = losses::channel_kld_loss(&yt, &tensor(&dims, ys.clone())?, t)?.1.into_vec();
    let numeric = numeric_gradient(&ys, check.opts.perturb, f)?;
    check.record("channel_kld_loss", analytic, numeric);
    Ok(())
}

fn full_protos(values: Vec<f64>, c: usize, k: usize) -> Result<PrototypeMatrix> {
    Ok(PrototypeMatrix {
        values: tensor(&[c, k], values)?,
        present: vec![true; c],
        counts: vec![1; c],
    })
}

/// Draws prototypes until every hinge and distance is clear of its kink.
fn triplet_check(check: &mut Check<'_>, seed: u64) -> Result<()> {
    let (c, k, m) = (4, 3, 0.5);
    let clearance = 1e-2;
    for attempt in 0.. {
        let mut r = rng::stream(seed, "triplet_prototype_loss", attempt);
        let pt = full_protos(normal_vec(&mut r, c * k, 1.0), c, k)?;
        let ps_vals = normal_vec(&mut r, c * k, 1.0);
        let ps = full_protos(ps_vals.clone(), c, k)?;
        let clear = (0..c).all(|a| {
            let intra = dist(ps.row(a), pt.row(a));
            intra > clearance
                && (0..c).filter(|&j| j != a).all(|j| {
                    let inter = dist(ps.row(a), pt.row(j));
                    inter > clearance && (m + intra - inter).abs() > clearance
                })
        });
        if !clear {
            continue;
        }
        let out = losses::triplet_prototype_loss(&ps, &pt, m)?;
        if out.active == 0 {
            continue;
        }
        let f = |v: &[f64]| Ok(losses::triplet_prototype_loss(&full_protos(v.to_vec(), c, k)?, &pt, m)?.loss);
        let numeric = numeric_gradient(&ps_vals, check.opts.perturb, f)?;
        check.record("triplet_prototype_loss", out.grad.into_vec(), numeric);
        return Ok(());
    }
    unreachable!()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Prototype extraction followed by the triplet loss, differentiated with
/// respect to the student feature map.
fn prototype_triplet_check(check: &mut Check<'_>, seed: u64) -> Result<()> {
    let (c, k, h, w, m) = (3, 2, 4, 4, 0.3);
    let mut r = rng::stream(seed, "prototype_triplet", 0);
    let mask = random_mask(&mut r, h, w, c, 0.15)?;
    let ft = tensor(&[1, k, h, w], normal_vec(&mut r, k * h * w, 1.0))?;
    let fs = normal_vec(&mut r, k * h * w, 1.0);
    let masks = vec![mask];
    let tp = losses::batch_prototypes(&ft, &masks, c)?;
    let f = |v: &[f64]| {
        Ok(losses::batch_triplet_loss(&tp, &tensor(&[1, k, h, w], v.to_vec())?, &masks, c, m)?
            .loss
            .value)
    };
    let out = losses::batch_triplet_loss(&tp, &tensor(&[1, k, h, w], fs.clone())?, &masks, c, m)?;
    let numeric = numeric_gradient(&fs, check.opts.perturb, f)?;
    check.record("prototype_triplet", out.loss.grad.into_vec(), numeric);
    Ok(())
}

/// The full weighted objective back-propagated through a small student with
/// a projection, against every student parameter.
fn composite_check(check: &mut Check<'_>, seed: u64) -> Result<()> {
    let classes = 3;
    let teacher = SegNetwork::new(NetConfig::new(vec![4, 5], classes), seed ^ 1)?;
    let student = SegNetwork::new(NetConfig::new(vec![3], classes), seed ^ 2)?.with_projection(5, seed)?;
    let mut r = rng::stream(seed, "composite", 0);
    let (b, h, w) = (2, 4, 4);
    let images = tensor(&[b, 3, h, w], (0..b * 3 * h * w).map(|_| r.random_range(0.0..1.0)).collect())?;
    let masks = vec![
        random_mask(&mut r, h, w, classes, 0.1)?,
        random_mask(&mut r, h, w, classes, 0.1)?,
    ];
    let tout = teacher.forward(&images)?;
    let tb = TeacherBatch {
        scores: Some(tout.scores.clone()),
        prototypes: Some(losses::batch_prototypes(&tout.features, &masks, classes)?),
    };
    let weights = LossWeights {
        margin: 0.2,
        ..LossWeights::default()
    };
    let objective = |net: &SegNetwork, grads: bool| -> Result<(f64, Vec<f64>)> {
        let mut net = net.clone();
        net.zero_grads();
        let mut tape = Tape::new();
        let out = net.record(&mut tape, &images, true)?;
        let (root, stats) = trainer::record_objective(&mut tape, out, &tb, &masks, &weights, classes)?;
        let mut g = Vec::new();
        if grads {
            tape.backward(root, net.params_mut())?;
            for p in net.params() {
                g.extend_from_slice(p.grad().data());
            }
        }
        Ok((losses::total_loss(&stats.parts, &weights), g))
    };
    let (_, analytic) = objective(&student, true)?;
    let flat: Vec<f64> = student.params().iter().flat_map(|p| p.value().data().to_vec()).collect();
    let numeric = numeric_gradient(&flat, check.opts.perturb, |v| {
        let mut net = student.clone();
        let mut off = 0;
        for p in net.params_mut() {
            let n = p.value().numel();
            let t = Tensor::from_vec(Shape::new(p.value().dims())?, v[off..off + n].to_vec())?;
            p.set_value(t)?;
            off += n;
        }
        Ok(objective(&net, false)?.0)
    })?;
    check.record("total_loss", analytic, numeric);
    Ok(())
}

/// Runs every check; see [`SuiteOptions`].
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<CheckReport>> {
    let mut check = Check {
        opts,
        reports: Vec::new(),
    };
    let seed = opts.seed;
    conv_check(&mut check, "conv2d_3x3", 3, seed)?;
    conv_check(&mut check, "conv2d_1x1", 1, seed)?;
    relu_check(&mut check, seed)?;
    cross_entropy_check(&mut check, seed)?;
    kld_check(&mut check, seed)?;
    triplet_check(&mut check, seed)?;
    prototype_triplet_check(&mut check, seed)?;
    composite_check(&mut check, seed)?;
    Ok(check.reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_gradient_of_a_quadratic() {
        let g = numeric_gradient(&[1.0, -2.0], 1e-5, |x| Ok(x[0] * x[0] + 3.0 * x[1])).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_floor_is_one() {
        assert_eq!(relative_error(1e-9, 0.0), 1e-9);
        assert_eq!(relative_error(10.0, 9.0), 0.1);
    }

    #[test]
    fn corrupting_one_check_fails_only_that_check() {
        let opts = SuiteOptions {
            corrupt: Some("relu".into()),
            ..Default::default()
        };
        let reports = run_suite(&opts).unwrap();
        for r in reports {
            assert_eq!(r.passed, r.name != "relu", "{r:?}");
        }
    }
}
