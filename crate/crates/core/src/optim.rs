//! SGD with classic momentum and polynomial learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::autodiff::Parameter;
use crate::error::{Error, Result};
use crate::tensor::{check_finite, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub total_iter: usize,
    pub poly_power: f64,
    pub batch_size: usize,
    /// Random flip/scale augmentation of training batches.
    pub augment: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr0: 0.02,
            momentum: 0.9,
            total_iter: 2000,
            poly_power: 0.9,
            batch_size: 8,
            augment: false,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        if self.total_iter == 0 || self.batch_size == 0 {
            return Err(Error::Config("total_iter and batch_size must be >= 1".into()));
        }
        if !(self.poly_power >= 0.0 && self.poly_power.is_finite()) {
            return Err(Error::Config("poly_power must be >= 0".into()));
        }
        Ok(())
    }
}

/// `lr0 · (1 − iter/total_iter)^power`.
pub fn poly_lr(cfg: &OptimConfig, iter: usize) -> Result<f64> {
    if iter > cfg.total_iter {
        return Err(Error::Config(format!(
            "iteration {iter} outside 0..={}",
            cfg.total_iter
        )));
    }
    let frac = 1.0 - iter as f64 / cfg.total_iter as f64;
    Ok(cfg.lr0 * frac.powf(cfg.poly_power))
}

/// Momentum buffers, one per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(params: &[Parameter], momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: params
                .iter()
                .map(|p| Tensor::zeros(p.value().shape().clone()))
                .collect(),
        }
    }

    pub fn from_velocity(velocity: Vec<Tensor>, momentum: f64) -> Self {
        Sgd { momentum, velocity }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// `v ← μ·v + g; p ← p − lr·v` for every parameter in `params`, using
    /// their accumulated gradients. Nothing is updated if any gradient is
    /// non-finite.
    pub fn step(&mut self, params: &mut [Parameter], lr: f64) -> Result<()> {
        if params.len() != self.velocity.len() {
            return Err(Error::Config(format!(
                "optimizer holds {} slots for {} parameters",
                self.velocity.len(),
                params.len()
            )));
        }
        for p in params.iter() {
            check_finite(p.grad().data())
                .map_err(|e| Error::Config(format!("gradient of {}: {e}", p.name)))?;
        }
        let mut updated = Vec::with_capacity(params.len());
        for (p, v) in params.iter().zip(&self.velocity) {
            let (nv, np) = sgd_step(p.value().data(), p.grad().data(), v.data(), lr, self.momentum);
            updated.push((
                Tensor::from_vec(p.value().shape().clone(), np)?,
                Tensor::from_vec(p.value().shape().clone(), nv)?,
            ));
        }
        for ((p, v), (np, nv)) in params.iter_mut().zip(&mut self.velocity).zip(updated) {
            p.set_value(np)?;
            *v = nv;
        }
        Ok(())
    }
}

/// Elementwise momentum update; returns `(velocity, params)`.
pub fn sgd_step(params: &[f64], grads: &[f64], velocity: &[f64], lr: f64, momentum: f64) -> (Vec<f64>, Vec<f64>) {
    let v: Vec<f64> = velocity
        .iter()
        .zip(grads)
        .map(|(&v, &g)| momentum * v + g)
        .collect();
    let p = params.iter().zip(&v).map(|(&p, &v)| p - lr * v).collect();
    (v, p)
}
