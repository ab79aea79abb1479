use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn params_with(name: &str, shape: &[usize], values: Vec<f32>) -> ModelParams {
    let mut p = ModelParams::new();
    p.insert(name, Tensor::new(shape.to_vec(), values).unwrap()).unwrap();
    p
}

/// Top-k by full sort on (|w| desc, index asc).
fn sort_oracle(values: &[f32], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .abs()
            .partial_cmp(&values[a].abs())
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut keep = vec![false; values.len()];
    for &i in &order[..k] {
        keep[i] = true;
    }
    keep
}

#[test]
fn schedule_endpoints() {
    let s = PruningSchedule::new(100, 300, 20, 0.9).unwrap();
    assert_eq!(s.target_sparsity(0), 0.0);
    assert_eq!(s.target_sparsity(100), 0.0);
    assert_eq!(s.target_sparsity(300), 0.9);
    assert_eq!(s.target_sparsity(10_000), 0.9);
    assert!((s.target_sparsity(200) - 0.7875).abs() < 1e-12);
}

#[test]
fn schedule_events() {
    let s = PruningSchedule::new(2000, 80_000, 2000, 0.9).unwrap();
    assert!(s.is_event(2000));
    assert!(s.is_event(80_000));
    assert!(!s.is_event(3000));
    assert!(!s.is_event(82_000));
    assert_eq!(s.events().count(), 40);
}

#[test]
fn schedule_rejects_bad_fields() {
    assert!(PruningSchedule::new(10, 10, 1, 0.5).is_err());
    assert!(PruningSchedule::new(0, 10, 0, 0.5).is_err());
    assert!(PruningSchedule::new(0, 10, 1, 1.0).is_err());
    assert!(PruningSchedule::new(0, 10, 1, 0.5).unwrap().with_exponent(0.0).is_err());
}

#[test]
fn scaled_default_ends_on_an_event() {
    for total in [30, 100, 999, 3000, 100_000] {
        let s = PruningSchedule::scaled_default(total, 0.5).unwrap();
        assert!(s.is_event(s.end_step), "total {total}: {s:?}");
        assert!(s.end_step <= total, "total {total}: {s:?}");
    }
}

#[test]
fn half_sparsity_keeps_largest() {
    let t = Tensor::new(vec![4], vec![3.0f32, -1.0, 2.0, -4.0]).unwrap();
    let m = magnitude_mask(&t, 0.5);
    assert_eq!(m.keep(), &[true, false, false, true]);
}

#[test]
fn zero_sparsity_keeps_everything() {
    let t = Tensor::new(vec![2, 2], vec![0.0f32, 0.0, 1e-9, -5.0]).unwrap();
    assert_eq!(magnitude_mask(&t, 0.0).kept(), 4);
}

#[test]
fn ties_keep_lower_index() {
    let t = Tensor::new(vec![4], vec![1.0f32, -1.0, 1.0, 1.0]).unwrap();
    assert_eq!(magnitude_mask(&t, 0.5).keep(), &[true, true, false, false]);
}

#[test]
fn random_tensor_matches_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let values: Vec<f32> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
    let t = Tensor::new(vec![8, 8], values.clone()).unwrap();
    let m = magnitude_mask(&t, 0.75);
    assert_eq!(m.kept(), 16);
    assert_eq!(m.keep(), sort_oracle(&values, 16).as_slice());
}

#[test]
fn keep_count_rounding() {
    assert_eq!(keep_count(10, 0.7), 3);
    assert_eq!(keep_count(10, 0.9), 1);
    assert_eq!(keep_count(7, 0.5), 4);
    assert_eq!(keep_count(100, 0.98), 2);
    assert_eq!(keep_count(5, 0.0), 5);
}

#[test]
fn prune_event_requires_scheduled_step() {
    let p = params_with("w", &[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
    let mut m = SparsityMasks::dense(&p);
    let s = PruningSchedule::new(0, 10, 5, 0.5).unwrap();
    assert!(prune_event(&p, &mut m, &s, 3).is_err());
    prune_event(&p, &mut m, &s, 10).unwrap();
    assert_eq!(m.get("w").unwrap().keep(), &[false, false, true, true]);
}

#[test]
fn masked_weight_revives_when_shadow_grows() {
    let mut shadow = params_with("w", &[1, 4], vec![0.1, 0.5, 0.4, 0.3]);
    let schedule = PruningSchedule::new(0, 10, 5, 0.5).unwrap();
    let mut pruner = Pruner::new(schedule, &shadow).unwrap();
    let mut effective = shadow.clone();

    pruner.after_update(5, &shadow, &mut effective).unwrap();
    let s5 = schedule.target_sparsity(5);
    assert_eq!(keep_count(4, s5), 4 - 1);
    assert_eq!(effective.get("w").unwrap().data(), &[0.0, 0.5, 0.4, 0.3]);

    // The pruned weight keeps training in the shadow copy and overtakes.
    shadow.get_mut("w").unwrap().data_mut()[0] = 0.9;
    pruner.after_update(7, &shadow, &mut effective).unwrap();
    assert_eq!(effective.get("w").unwrap().data()[0], 0.0, "no event at step 7");
    pruner.after_update(10, &shadow, &mut effective).unwrap();
    assert_eq!(effective.get("w").unwrap().data(), &[0.9, 0.5, 0.0, 0.0]);
}

#[test]
fn all_ones_hook_is_identity() {
    let shadow = params_with("w", &[2, 3], vec![1.0, -2.0, 3.0, -4.0, 5.0, -6.0]);
    let masks = SparsityMasks::dense(&shadow);
    assert_eq!(apply_masks(&shadow, &masks).unwrap(), shadow);
}

#[test]
fn hook_rejects_shape_mismatch() {
    let shadow = params_with("w", &[2, 3], vec![0.0; 6]);
    let mut masks = SparsityMasks::default();
    masks.insert("w", Mask::ones(&[3, 2]));
    assert!(apply_masks(&shadow, &masks).is_err());
}

#[test]
fn zero_count_after_event() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let values: Vec<f32> = (0..1000).map(|_| rng.random_range(-1.0..1.0)).collect();
    let p = params_with("w", &[25, 40], values);
    for s in [0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.98] {
        let mut m = SparsityMasks::dense(&p);
        prune_to(&p, &mut m, s).unwrap();
        let eff = apply_masks(&p, &m).unwrap();
        let zeros = eff.get("w").unwrap().data().iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, 1000 - keep_count(1000, s));
    }
}

#[test]
fn report_counts() {
    let mut p = params_with("w", &[10, 10], (0..100).map(|v| v as f32 + 1.0).collect());
    p.insert("b", Tensor::zeros(&[10])).unwrap();
    let mut m = SparsityMasks::dense(&p);
    let r = sparsity_report(&p, &m);
    assert_eq!(r.global_sparsity(), 0.0);
    assert_eq!(r.unprunable_size, 10);

    let s = PruningSchedule::new(1, 3, 1, 0.98).unwrap();
    for step in s.events() {
        prune_event(&p, &mut m, &s, step).unwrap();
    }
    let r = sparsity_report(&p, &m);
    assert!((r.global_nonzero_fraction() - 0.02).abs() < 1e-12);
    assert_eq!(r.total_nonzero(), 12);
}

proptest! {
    #[test]
    fn schedule_is_monotone(
        begin in 0u64..1000,
        span in 1u64..5000,
        freq in 1u64..500,
        sf in 0.0f64..0.99,
        exp in 1.0f64..5.0,
        a in 0u64..7000,
        b in 0u64..7000,
    ) {
        let s = PruningSchedule::new(begin, begin + span, freq, sf).unwrap().with_exponent(exp).unwrap();
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(s.target_sparsity(lo) <= s.target_sparsity(hi));
    }

    #[test]
    fn threshold_separates_kept_and_pruned(
        values in prop::collection::vec(-10.0f32..10.0, 1..300),
        s in 0.0f64..0.99,
    ) {
        let n = values.len();
        let t = Tensor::new(vec![n], values.clone()).unwrap();
        let m = magnitude_mask(&t, s);
        prop_assert_eq!(m.kept(), keep_count(n, s));
        let kept_min = values.iter().zip(m.keep()).filter(|(_, &k)| k).map(|(v, _)| v.abs()).fold(f32::INFINITY, f32::min);
        let pruned_max = values.iter().zip(m.keep()).filter(|(_, &k)| !k).map(|(v, _)| v.abs()).fold(0.0, f32::max);
        prop_assert!(kept_min >= pruned_max || m.kept() == 0);
    }
}

#[test]
fn shuffled_input_same_kept_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut values: Vec<f32> = (0..50).map(|i| i as f32 - 25.0).collect();
    values.shuffle(&mut rng);
    let t = Tensor::new(vec![50], values.clone()).unwrap();
    let m = magnitude_mask(&t, 0.8);
    let mut kept: Vec<f32> = values.iter().zip(m.keep()).filter(|(_, &k)| k).map(|(v, _)| v.abs()).collect();
    kept.sort_by(f32::total_cmp);
    assert_eq!(kept, vec![20.0, 21.0, 21.0, 22.0, 22.0, 23.0, 23.0, 24.0, 24.0, 25.0]);
}
