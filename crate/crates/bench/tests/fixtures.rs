use i2ckd_bench::{sample_batch, student, teacher};

#[test]
fn fixtures_fit_together() {
    let (batch, masks) = sample_batch(2);
    assert_eq!(batch.dims(), &[2, 3, 64, 64]);
    assert_eq!(masks.len(), 2);
    let t = teacher().forward(&batch).unwrap();
    let s = student().forward(&batch).unwrap();
    assert_eq!(t.features.dims(), s.features.dims());
    assert_eq!(t.scores.dims(), s.scores.dims());
}
