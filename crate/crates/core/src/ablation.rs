//! The three-row loss ablation: task only, task + channel KLD, and the full
//! objective, each trained from the same seeds against one frozen teacher.

use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::Result;
use crate::losses::LossWeights;
use crate::nn::SegNetwork;
use crate::optim::OptimConfig;
use crate::trainer::{self, DistillConfig, MetricRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub weights: LossWeights,
    /// Final validation mIoU per seed, in seed order.
    pub miou: Vec<f64>,
    pub mean_miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub teacher_miou: f64,
    pub rows: Vec<AblationRow>,
}

/// Row weights derived from the full-objective weights by zeroing terms.
pub fn row_weights(full: &LossWeights) -> [(&'static str, LossWeights); 3] {
    [
        (
            "task",
            LossWeights {
                lambda_sm: 0.0,
                lambda_i2ckd: 0.0,
                ..*full
            },
        ),
        (
            "task+sm",
            LossWeights {
                lambda_i2ckd: 0.0,
                ..*full
            },
        ),
        ("task+sm+i2ckd", *full),
    ]
}

pub fn run(
    train: &[Sample],
    val: &[Sample],
    teacher: &SegNetwork,
    base: &DistillConfig,
    optim: &OptimConfig,
    seeds: &[u64],
    mut progress: impl FnMut(&str, u64, &MetricRecord),
) -> Result<AblationReport> {
    let teacher_miou = trainer::evaluate_miou(teacher, val)?;
    let mut rows = Vec::new();
    for (name, weights) in row_weights(&base.weights) {
        let mut miou = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = DistillConfig {
                weights,
                seed,
                ..base.clone()
            };
            let out = trainer::distill_student(train, val, teacher, &cfg, optim, |r| progress(name, seed, r))?;
            miou.push(out.log.last().map_or(f64::NAN, |r| r.val_miou));
        }
        let mean_miou = miou.iter().sum::<f64>() / miou.len().max(1) as f64;
        rows.push(AblationRow {
            name: name.to_string(),
            weights,
            miou,
            mean_miou,
        });
    }
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        teacher_miou,
        rows,
    })
}

impl AblationReport {
    /// Markdown table of per-seed and mean mIoU (in percent).
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        s.push_str("| L_task | L_SM | L_I2CKD |");
        for seed in &self.seeds {
            s.push_str(&format!(" seed {seed} |"));
        }
        s.push_str(" mean val mIoU (%) |\n|---|---|---|");
        for _ in &self.seeds {
            s.push_str("---|");
        }
        s.push_str("---|\n");
        for row in &self.rows {
            let tick = |on: bool| if on { "✓" } else { " " };
            s.push_str(&format!(
                "| {} | {} | {} |",
                tick(true),
                tick(row.weights.lambda_sm > 0.0),
                tick(row.weights.lambda_i2ckd > 0.0)
            ));
            for m in &row.miou {
                s.push_str(&format!(" {:.2} |", 100.0 * m));
            }
            s.push_str(&format!(" {:.2} |\n", 100.0 * row.mean_miou));
        }
        s.push_str(&format!("\nTeacher val mIoU: {:.2}%\n", 100.0 * self.teacher_miou));
        s
    }
}
