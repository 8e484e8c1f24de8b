mod common;

use std::collections::BTreeSet;

use acseg::eval::{evaluate_clusters, hungarian_match, linear_sum_assignment, matched_scores, miou, ConfusionMatrix, MeanStd};
use acseg::Tensor;
use common::{rng, uniform};
use proptest::prelude::*;
use rand::Rng;

/// Best assignment by enumerating every injection of the smaller side
/// into the larger one.
fn brute_force_min(cost: &Tensor<f64>) -> (f64, BTreeSet<(usize, usize)>) {
    let (rows, cols) = (cost.rows(), cost.cols());
    let transpose = rows > cols;
    let (small, large) = if transpose { (cols, rows) } else { (rows, cols) };
    let at = |s: usize, l: usize| if transpose { cost.get(l, s) } else { cost.get(s, l) };
    let mut best = (f64::INFINITY, Vec::new());
    let mut chosen = Vec::with_capacity(small);
    let mut used = vec![false; large];
    fn go(
        s: usize,
        small: usize,
        large: usize,
        at: &dyn Fn(usize, usize) -> f64,
        chosen: &mut Vec<usize>,
        used: &mut [bool],
        total: f64,
        best: &mut (f64, Vec<usize>),
    ) {
        if s == small {
            if total < best.0 {
                *best = (total, chosen.clone());
            }
            return;
        }
        for l in 0..large {
            if !used[l] {
                used[l] = true;
                chosen.push(l);
                go(s + 1, small, large, at, chosen, used, total + at(s, l), best);
                chosen.pop();
                used[l] = false;
            }
        }
    }
    go(0, small, large, &at, &mut chosen, &mut used, 0.0, &mut best);
    let pairs = best
        .1
        .iter()
        .enumerate()
        .map(|(s, &l)| if transpose { (l, s) } else { (s, l) })
        .collect();
    (best.0, pairs)
}

#[test]
fn agrees_with_brute_force_on_random_matrices() {
    let mut r = rng(1);
    for trial in 0..1000 {
        let rows = r.gen_range(1..=6);
        let cols = r.gen_range(1..=6);
        let cost = uniform(&mut r, rows, cols, -10.0, 10.0);
        let (best, pairs) = brute_force_min(&cost);
        let got = linear_sum_assignment(&cost).unwrap();
        let got_set: BTreeSet<(usize, usize)> = got.iter().copied().collect();
        let total: f64 = got.iter().map(|&(i, j)| cost.get(i, j)).sum();
        assert_eq!(got.len(), rows.min(cols), "trial {trial}");
        assert!((total - best).abs() < 1e-9, "trial {trial}: {total} vs {best}");
        assert_eq!(got_set, pairs, "trial {trial}");
    }
}

#[test]
fn integer_ties_still_reach_the_optimum() {
    let mut r = rng(2);
    for _ in 0..300 {
        let n = r.gen_range(1..=5);
        let m = r.gen_range(1..=5);
        let cost = Tensor::from_fn(n, m, |_, _| r.gen_range(0..3) as f64);
        let total: f64 = linear_sum_assignment(&cost).unwrap().iter().map(|&(i, j)| cost.get(i, j)).sum();
        assert_eq!(total, brute_force_min(&cost).0);
    }
}

#[test]
fn maximizes_overlap() {
    let overlap = Tensor::from_nested(&[&[1.0, 9.0, 0.0], &[8.0, 1.0, 0.0]]);
    let mut pairs = hungarian_match(&overlap).unwrap();
    pairs.sort_unstable();
    assert_eq!(pairs, vec![(0, 1), (1, 0)]);
}

#[test]
fn toy_masks_give_three_sevenths() {
    // prediction marks class 1 on six pixels, truth on four, three shared
    let pred = [1, 1, 1, 1, 1, 1, 0, 0, 0];
    let gt = [1, 1, 1, 0, 0, 0, 1, 0, 0];
    let s = miou(&pred, &gt, None).unwrap();
    assert_eq!(s.per_class_iou[&1], 3.0 / 7.0);
    // class 0: predicted on 3, true on 5, shared 2
    assert_eq!(s.per_class_iou[&0], 2.0 / 6.0);
    assert_eq!(s.pixel_accuracy, 5.0 / 9.0);
}

#[test]
fn ignored_pixels_are_not_counted() {
    let s = miou(&[0, 1, 1], &[0, 1, 255], Some(255)).unwrap();
    assert_eq!(s.pixels, 2);
    assert_eq!(s.miou, 1.0);
}

#[test]
fn dataset_matching_is_global() {
    // image 2 alone would prefer the opposite mapping
    let images = vec![(vec![0, 0, 0, 1], vec![5, 5, 5, 6]), (vec![0, 1], vec![6, 5])];
    let ev = evaluate_clusters(&images, 2, 7, None).unwrap();
    assert_eq!(ev.mapping, vec![Some(5), Some(6)]);
    assert_eq!(ev.scores.pixel_accuracy, 4.0 / 6.0);
}

#[test]
fn unmatched_clusters_count_as_errors() {
    let s = matched_scores(&[0, 1, 2, 2], &[0, 0, 1, 1], None).unwrap();
    assert_eq!(s.pixel_accuracy, 3.0 / 4.0);
}

#[test]
fn confusion_merge_equals_joint_accumulation() {
    let (p1, g1) = (vec![0, 1, 2], vec![1, 1, 0]);
    let (p2, g2) = (vec![2, 2], vec![0, 1]);
    let mut a = ConfusionMatrix::new(3, 2);
    a.add(&p1, &g1, None).unwrap();
    let mut b = ConfusionMatrix::new(3, 2);
    b.add(&p2, &g2, None).unwrap();
    a.merge(&b).unwrap();
    let mut joint = ConfusionMatrix::new(3, 2);
    joint.add(&[p1, p2].concat(), &[g1, g2].concat(), None).unwrap();
    assert_eq!(a, joint);
}

#[test]
fn renaming_clusters_keeps_miou_without_ties() {
    let gt = [0, 0, 0, 1, 1, 2, 2, 2, 2, 1];
    let pred = [3, 3, 0, 1, 1, 2, 2, 2, 0, 1];
    let renamed: Vec<usize> = pred.iter().map(|&p| [2, 0, 3, 1][p]).collect();
    let a = matched_scores(&pred, &gt, None).unwrap();
    let b = matched_scores(&renamed, &gt, None).unwrap();
    assert_eq!(a, b);
    assert!(a.miou < 1.0);
}

#[test]
fn mean_std_is_population() {
    let m = MeanStd::of(&[1.0, 3.0]);
    assert_eq!((m.mean, m.std), (2.0, 1.0));
}

proptest! {
    #[test]
    fn matched_scores_ignore_cluster_names(
        labels in proptest::collection::vec((0usize..4, 0usize..3), 1..60),
        perm_seed in any::<u64>(),
    ) {
        let (pred, gt): (Vec<usize>, Vec<usize>) = labels.into_iter().unzip();
        let mut perm: Vec<usize> = (0..4).collect();
        let mut r = rng(perm_seed);
        for i in (1..4).rev() {
            perm.swap(i, r.gen_range(0..=i));
        }
        let renamed: Vec<usize> = pred.iter().map(|&p| perm[p]).collect();
        let a = matched_scores(&pred, &gt, None).unwrap();
        let b = matched_scores(&renamed, &gt, None).unwrap();
        // equally good matchings can differ in IoU but not in accuracy
        prop_assert!((a.pixel_accuracy - b.pixel_accuracy).abs() < 1e-12);
    }

    #[test]
    fn identical_masks_score_one(gt in proptest::collection::vec(0usize..5, 1..50)) {
        let s = miou(&gt, &gt, None).unwrap();
        prop_assert_eq!(s.miou, 1.0);
        prop_assert_eq!(s.pixel_accuracy, 1.0);
    }
}
