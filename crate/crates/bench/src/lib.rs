//! Fixtures shared by the criterion benches.

use i2ckd_core::{DatasetSpec, LabelMap, NetConfig, SegNetwork, Split, Tensor};

/// A `[batch, 3, 64, 64]` batch of synthetic images with their masks.
pub fn sample_batch(batch: usize) -> (Tensor, Vec<LabelMap>) {
    let spec = DatasetSpec::default();
    let samples: Vec<_> = (0..batch)
        .map(|i| i2ckd_core::dataset::generate_sample(&spec, Split::Train, i).expect("sample"))
        .collect();
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    (
        Tensor::stack(&images).expect("stack"),
        samples.into_iter().map(|s| s.mask).collect(),
    )
}

pub fn teacher() -> SegNetwork {
    SegNetwork::new(NetConfig::teacher_default(5), 0).expect("teacher")
}

pub fn student() -> SegNetwork {
    SegNetwork::new(NetConfig::student_default(5), 0)
        .and_then(|s| s.with_projection(64, 0))
        .expect("student")
}
