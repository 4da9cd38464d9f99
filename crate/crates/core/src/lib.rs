//! Class-prototype triplet distillation and channel-wise KL distillation for
//! semantic segmentation, on a small from-scratch tensor and autodiff stack.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors and label maps; [`stf`] reads and writes
//!   them as STF1 files.
//! - [`autodiff`] and [`nn`]: a reverse-mode tape over convolutions and ReLU,
//!   and tiny stride-1 segmentation networks.
//! - [`losses`]: class prototypes, the prototype triplet loss, channel-wise
//!   KL distillation, cross-entropy and their weighted sum.
//! - [`metrics`]: confusion matrices, IoU and mIoU.
//! - [`dataset`]: deterministic synthetic shape data and augmentation.
//! - [`optim`] and [`trainer`]: momentum SGD, polynomial decay, teacher
//!   training and frozen-teacher distillation; [`checkpoint`] persists
//!   networks and optimizer state, and [`ablation`] runs the three-row loss
//!   ablation.
//! - [`gradcheck`] and [`reference`]: finite-difference checks and
//!   brute-force loss evaluations used for verification.

pub mod ablation;
pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod reference;
mod rng;
pub mod stf;
pub mod tensor;
pub mod trainer;

pub use autodiff::{NodeId, Parameter, Tape};
pub use dataset::{DatasetSpec, Sample, Split};
pub use error::{Error, Result};
pub use losses::{LossParts, LossWeights, PrototypeMatrix};
pub use metrics::{ConfusionMatrix, EvalReport};
pub use nn::{NetConfig, NetOutputs, SegNetwork};
pub use optim::{poly_lr, OptimConfig, Sgd};
pub use rng::derive_seed;
pub use tensor::{LabelMap, Shape, Tensor, IGNORE_LABEL};
pub use trainer::{DistillConfig, MetricRecord, TrainOutcome};
