//! Run configuration files.
//!
//! A config is JSON mirroring the library's typed configs. Every section is
//! optional and unknown keys are rejected. Each run writes the fully
//! resolved config (after command-line overrides) next to its outputs, and
//! that snapshot can be passed back with `--config` to repeat the run.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use i2ckd_core::gradcheck::DEFAULT_PERTURB;
use i2ckd_core::{DatasetSpec, LossWeights, NetConfig, OptimConfig, Split};

pub const SNAPSHOT: &str = "resolved_config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    /// Directory written by `gen-data`; when absent the dataset is generated
    /// in memory from `dataset`.
    pub data: Option<PathBuf>,
    pub teacher: Option<NetConfig>,
    pub student: Option<NetConfig>,
    pub teacher_checkpoint: Option<PathBuf>,
    /// Attach a 1×1 projection when student and teacher feature widths
    /// differ.
    pub projection: bool,
    pub teacher_optim: OptimConfig,
    pub optim: OptimConfig,
    pub weights: LossWeights,
    pub seed: u64,
    pub eval_every: usize,
    pub ablation_seeds: Vec<u64>,
    /// Checkpoint scored by `eval`.
    pub checkpoint: Option<PathBuf>,
    pub eval_split: Split,
    /// Finite-difference step of `grad-check`.
    pub perturb: f64,
    /// Tensor dump directory read by `loss-eval`.
    pub dumps: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetSpec::default(),
            data: None,
            teacher: None,
            student: None,
            teacher_checkpoint: None,
            projection: true,
            teacher_optim: OptimConfig::default(),
            optim: OptimConfig::default(),
            weights: LossWeights::default(),
            seed: 0,
            eval_every: 500,
            ablation_seeds: vec![0, 1, 2, 3, 4],
            checkpoint: None,
            eval_split: Split::Val,
            perturb: DEFAULT_PERTURB,
            dumps: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Fills network configs from the dataset's class count and validates.
    pub fn resolve(mut self) -> Result<Self> {
        let c = self.dataset.num_classes;
        self.teacher.get_or_insert_with(|| NetConfig::teacher_default(c));
        self.student.get_or_insert_with(|| NetConfig::student_default(c));
        self.dataset.validate()?;
        self.teacher_optim.validate()?;
        self.optim.validate()?;
        self.weights.validate()?;
        for net in [self.teacher(), self.student()] {
            net.validate()?;
            anyhow::ensure!(
                net.num_classes == c,
                "network predicts {} classes but the dataset has {c}",
                net.num_classes
            );
        }
        anyhow::ensure!(self.eval_every >= 1, "eval_every must be >= 1");
        anyhow::ensure!(
            self.perturb.is_finite() && self.perturb > 0.0,
            "perturb must be positive, got {}",
            self.perturb
        );
        anyhow::ensure!(!self.ablation_seeds.is_empty(), "ablation_seeds must not be empty");
        Ok(self)
    }

    pub fn teacher(&self) -> &NetConfig {
        self.teacher.as_ref().expect("resolved")
    }

    pub fn student(&self) -> &NetConfig {
        self.student.as_ref().expect("resolved")
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(SNAPSHOT);
        fs::write(&path, serde_json::to_string_pretty(self)?).with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"weights": {"lambda_sn": 3}}"#);
        assert!(err.is_err());
        let err = serde_json::from_str::<RunConfig>(r#"{"optimiser": {}}"#);
        assert!(err.is_err());
    }

    #[test]
    fn partial_sections_take_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"weights": {"margin": 0.5}}"#).unwrap();
        assert_eq!(cfg.weights.margin, 0.5);
        assert_eq!(cfg.weights.lambda_sm, 3.0);
        let cfg = cfg.resolve().unwrap();
        assert_eq!(cfg.teacher().widths, vec![32, 64, 64]);
    }

    #[test]
    fn snapshot_reloads_identically() {
        let cfg = RunConfig::default().resolve().unwrap();
        let dir = tempfile::tempdir().unwrap();
        cfg.write_snapshot(dir.path()).unwrap();
        let back = RunConfig::load(Some(&dir.path().join(SNAPSHOT))).unwrap().resolve().unwrap();
        assert_eq!(back, cfg);
    }
}
