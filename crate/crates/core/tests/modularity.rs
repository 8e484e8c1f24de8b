mod common;

use acseg::assignment::{hard_assign, soft_assign};
use acseg::modularity::{build_affinity, modularity_loss, modularity_weights, pair_agreement, LossOptions};
use acseg::Tensor;
use common::{brute_modularity_loss, cosine, rng, uniform};
use proptest::prelude::*;
use rand::Rng;

fn opts(include_diagonal: bool) -> LossOptions {
    LossOptions {
        include_diagonal,
        ..LossOptions::default()
    }
}

#[test]
fn affinity_matches_pairwise_cosine() {
    let x = uniform(&mut rng(1), 8, 4, -1.0, 1.0);
    let g = build_affinity(&x).unwrap();
    for i in 0..8 {
        for j in 0..8 {
            assert!((g.weights.get(i, j) - cosine(x.row(i), x.row(j)).max(0.0)).abs() < 1e-12);
        }
        assert!((g.degrees[i] - g.weights.row(i).iter().sum::<f64>()).abs() < 1e-12);
    }
    assert!((g.two_m - g.degrees.iter().sum::<f64>()).abs() < 1e-12);
}

#[test]
fn weights_sum_to_zero_on_random_graphs() {
    let mut r = rng(2);
    for _ in 0..100 {
        let n = r.gen_range(2..40);
        let d = r.gen_range(1..10);
        let x = uniform(&mut r, n, d, -1.0, 1.0);
        let w = modularity_weights(&build_affinity(&x).unwrap()).unwrap();
        assert!(w.data().iter().sum::<f64>().abs() < 1e-9);
    }
}

#[test]
fn loss_matches_double_loop() {
    let mut r = rng(3);
    for include in [true, false] {
        let x = uniform(&mut r, 8, 5, -1.0, 1.0);
        let s = uniform(&mut r, 8, 3, -1.0, 1.0);
        let got = modularity_loss(&build_affinity(&x).unwrap(), &s, &opts(include)).unwrap();
        assert!((got - brute_modularity_loss(&x, &s, include)).abs() < 1e-10);
    }
}

#[test]
fn two_block_hard_assignment_is_minus_half() {
    for n in [2, 6, 20] {
        let x = Tensor::from_fn(n, 3, |i, c| if c == usize::from(i >= n / 2) { 1.0 } else { 0.0 });
        let s = Tensor::from_fn(n, 2, |i, c| if c == usize::from(i >= n / 2) { 1.0 } else { 0.0 });
        let l = modularity_loss(&build_affinity(&x).unwrap(), &s, &opts(true)).unwrap();
        assert!((l + 0.5).abs() < 1e-12, "n = {n}: {l}");
    }
}

#[test]
fn agreement_hand_values() {
    let s = Tensor::from_nested(&[&[0.8, 0.3], &[0.5, 0.9]]);
    assert!((pair_agreement(&s).get(0, 1) - 0.40).abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_is_bounded_below(seed in any::<u64>(), n in 2usize..20, k in 1usize..6) {
        let mut r = rng(seed);
        let x = uniform(&mut r, n, 4, -1.0, 1.0);
        let s = uniform(&mut r, n, k, -1.0, 1.0);
        let l = modularity_loss(&build_affinity(&x).unwrap(), &s, &opts(true)).unwrap();
        prop_assert!(l >= -1.0 - 1e-12);
    }

    #[test]
    fn loss_is_permutation_invariant(seed in any::<u64>(), n in 2usize..16) {
        let mut r = rng(seed);
        let x = uniform(&mut r, n, 4, -1.0, 1.0);
        let s = uniform(&mut r, n, 3, -1.0, 1.0);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, r.gen_range(0..=i));
        }
        let xp = Tensor::from_fn(n, 4, |i, c| x.get(perm[i], c));
        let sp = Tensor::from_fn(n, 3, |i, c| s.get(perm[i], c));
        let a = modularity_loss(&build_affinity(&x).unwrap(), &s, &opts(true)).unwrap();
        let b = modularity_loss(&build_affinity(&xp).unwrap(), &sp, &opts(true)).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn cosine_assignment_ignores_scale(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let mut r = rng(seed);
        let x = uniform(&mut r, 10, 6, -1.0, 1.0);
        let c = uniform(&mut r, 4, 6, -1.0, 1.0);
        let a = soft_assign(&x, &c).unwrap().similarities;
        let b = soft_assign(&x.map(|v| v * scale), &c).unwrap().similarities;
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
        prop_assert!(a.data().iter().all(|v| v.abs() <= 1.0 + 1e-12));
        let hard = hard_assign(&a);
        for (i, &l) in hard.labels.iter().enumerate() {
            prop_assert!(a.row(i).iter().all(|&v| v <= a.get(i, l)));
        }
    }
}
