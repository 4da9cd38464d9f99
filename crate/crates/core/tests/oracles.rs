//! Loss and metric implementations checked against straightforward
//! re-derivations kept with the test helpers.

mod common;

use common::{iou_oracle, oracle_kld, oracle_prototypes, oracle_triplet, protos_of, random_features, random_mask};
use i2ckd_core::losses;
use i2ckd_core::{ConfusionMatrix, LabelMap, Tensor};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

#[test]
fn prototypes_bit_exact_on_200_random_instances() {
    let mut rng = StdRng::seed_from_u64(2024);
    let mut saw_absent = false;
    for _ in 0..200 {
        let classes = rng.random_range(2..7);
        let (k, h, w) = (rng.random_range(1..9), rng.random_range(1..13), rng.random_range(1..13));
        let f = random_features(&mut rng, k, h, w);
        let m = random_mask(&mut rng, h, w, classes);
        let got = losses::compute_prototypes(&f, &m, classes).unwrap();
        let (want, present) = oracle_prototypes(&f, &m, classes);
        assert_eq!(got.present, present);
        saw_absent |= present.iter().any(|p| !p);
        for c in 0..classes {
            let got_row: Vec<u64> = got.row(c).iter().map(|v| v.to_bits()).collect();
            let want_row: Vec<u64> = want[c].iter().map(|v| v.to_bits()).collect();
            if present[c] {
                assert_eq!(got_row, want_row);
            } else {
                assert!(got.row(c).iter().all(|&v| v == 0.0));
            }
        }
    }
    assert!(saw_absent);
}

#[test]
fn kld_and_triplet_match_direct_summation() {
    let mut rng = StdRng::seed_from_u64(77);
    for _ in 0..50 {
        let classes = rng.random_range(2..6);
        let (k, h, w) = (rng.random_range(1..6), rng.random_range(2..9), rng.random_range(2..9));
        let m = random_mask(&mut rng, h, w, classes);
        let ft = random_features(&mut rng, k, h, w);
        let fs = random_features(&mut rng, k, h, w);
        let pt = losses::compute_prototypes(&ft, &m, classes).unwrap();
        let ps = losses::compute_prototypes(&fs, &m, classes).unwrap();
        let margin = rng.random_range(0.0..2.0);
        let got = losses::triplet_prototype_loss(&ps, &pt, margin).unwrap().loss;
        let want = oracle_triplet(&protos_of(&ps), &protos_of(&pt), &pt.present, margin);
        assert!((got - want).abs() <= 1e-10, "{got} vs {want}");

        let st = random_features(&mut rng, classes, h, w);
        let ss = random_features(&mut rng, classes, h, w);
        let temp = rng.random_range(0.5..4.0);
        let (got, _) = losses::channel_kld_loss(&st, &ss, temp).unwrap();
        let want = oracle_kld(&st, &ss, temp);
        assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
    }
}

#[test]
fn spec_prototype_fixture() {
    let f = Tensor::from_dims(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let m = LabelMap::new(2, 2, vec![0, 0, 1, 1]).unwrap();
    let p = losses::compute_prototypes(&f, &m, 2).unwrap();
    assert_eq!(p.row(0), &[1.5]);
    assert_eq!(p.row(1), &[3.5]);
}

#[test]
fn identical_inputs_anchor_losses_at_zero() {
    let mut rng = StdRng::seed_from_u64(5);
    let m = random_mask(&mut rng, 6, 6, 3);
    let f = random_features(&mut rng, 4, 6, 6);
    let p = losses::compute_prototypes(&f, &m, 3).unwrap();
    assert_eq!(losses::triplet_prototype_loss(&p, &p, 0.0).unwrap().loss, 0.0);
    let s = random_features(&mut rng, 3, 6, 6);
    assert_eq!(losses::channel_kld_loss(&s, &s, 2.0).unwrap().0, 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn miou_is_invariant_under_relabeling(
        classes in 2usize..7,
        seed in any::<u64>(),
    ) {
        let mut rng = StdRng::seed_from_u64(seed);
        let counts: Vec<u64> = (0..classes * classes)
            .map(|_| if rng.random_bool(0.3) { 0 } else { rng.random_range(0..50) })
            .collect();
        prop_assume!(counts.iter().any(|&c| c > 0));
        let mut perm: Vec<usize> = (0..classes).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let mut permuted = vec![0u64; classes * classes];
        for t in 0..classes {
            for p in 0..classes {
                permuted[perm[t] * classes + perm[p]] = counts[t * classes + p];
            }
        }
        let a = ConfusionMatrix::from_counts(classes, counts.clone()).unwrap();
        let b = ConfusionMatrix::from_counts(classes, permuted).unwrap();
        let ia = a.iou_per_class();
        let ib = b.iou_per_class();
        for c in 0..classes {
            prop_assert_eq!(ia[c], ib[perm[c]]);
        }
        prop_assert!((a.miou().unwrap() - b.miou().unwrap()).abs() < 1e-12);
        prop_assert_eq!(ia, iou_oracle(&counts, classes));
    }

    #[test]
    fn triplet_loss_is_nonnegative_and_matches_oracle(seed in any::<u64>(), margin in 0.0f64..3.0) {
        let mut rng = StdRng::seed_from_u64(seed);
        let m = random_mask(&mut rng, 5, 5, 4);
        let ft = random_features(&mut rng, 3, 5, 5);
        let fs = random_features(&mut rng, 3, 5, 5);
        let pt = losses::compute_prototypes(&ft, &m, 4).unwrap();
        let ps = losses::compute_prototypes(&fs, &m, 4).unwrap();
        let out = losses::triplet_prototype_loss(&ps, &pt, margin).unwrap();
        prop_assert!(out.loss >= 0.0);
        prop_assert!(out.active <= out.pairs);
        let want = oracle_triplet(&protos_of(&ps), &protos_of(&pt), &pt.present, margin);
        prop_assert!((out.loss - want).abs() <= 1e-10);
    }

    #[test]
    fn kld_is_nonnegative_and_shift_invariant(seed in any::<u64>(), shift in -10.0f64..10.0) {
        let mut rng = StdRng::seed_from_u64(seed);
        let t = random_features(&mut rng, 3, 4, 4);
        let s = random_features(&mut rng, 3, 4, 4);
        let (a, _) = losses::channel_kld_loss(&t, &s, 2.0).unwrap();
        let (b, _) = losses::channel_kld_loss(&t, &s.map(|v| v + shift).unwrap(), 2.0).unwrap();
        prop_assert!(a >= -1e-12);
        prop_assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn hand_counted_iou_fixture() {
    // truth [[0,0],[1,1]], prediction [[0,1],[1,1]]
    let gt = LabelMap::new(2, 2, vec![0, 0, 1, 1]).unwrap();
    let pred = LabelMap::new(2, 2, vec![0, 1, 1, 1]).unwrap();
    let mut cm = ConfusionMatrix::new(2);
    cm.update(&pred, &gt).unwrap();
    assert_eq!(cm.iou_per_class(), vec![Some(0.5), Some(2.0 / 3.0)]);
    assert_eq!(cm.miou().unwrap(), 7.0 / 12.0);
}
