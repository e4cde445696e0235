use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shootseg::metrics::*;
use shootseg::Error;

const EPS: f64 = 1e-12;

#[test]
fn perfect_prediction_scores_one() {
    let gt = vec![0, 1, 1, 0, 1];
    let r = semantic_metrics(&gt, &gt, &[0, 1]).unwrap();
    for m in &r.per_class {
        assert_eq!((m.precision, m.recall, m.f1, m.iou), (1.0, 1.0, 1.0, 1.0));
    }
    assert_eq!(r.miou, 1.0);
    assert_eq!(r.mean_f1, 1.0);
}

#[test]
fn all_stem_example() {
    let r = semantic_metrics(&[0, 0, 0, 0], &[0, 0, 0, 1], &[0, 1]).unwrap();
    let stem = &r.per_class[0];
    assert!((stem.precision - 0.75).abs() < EPS);
    assert!((stem.recall - 1.0).abs() < EPS);
    assert!((stem.f1 - 6.0 / 7.0).abs() < EPS);
    assert!((stem.iou - 0.75).abs() < EPS);
    assert_eq!(r.per_class[1].iou, 0.0);
    assert_eq!((r.per_class[1].tp, r.per_class[1].fp, r.per_class[1].fn_), (0, 0, 1));
    assert!((r.miou - 0.375).abs() < EPS);
}

#[test]
fn swapping_class_names_permutes_rows() {
    let pred = vec![0, 1, 1, 0, 0, 1, 1];
    let gt = vec![0, 1, 0, 0, 1, 1, 1];
    let swap = |v: &[i32]| v.iter().map(|&x| 1 - x).collect::<Vec<_>>();
    let a = semantic_metrics(&pred, &gt, &[0, 1]).unwrap();
    let b = semantic_metrics(&swap(&pred), &swap(&gt), &[0, 1]).unwrap();
    assert_eq!(a.per_class[0].iou, b.per_class[1].iou);
    assert_eq!(a.per_class[1].f1, b.per_class[0].f1);
    assert!((a.miou - b.miou).abs() < EPS);
}

#[test]
fn unlabeled_truth_and_absent_classes() {
    let r = semantic_metrics(&[0, 1, 1], &[0, -1, 0], &[0, 1, 2]).unwrap();
    assert_eq!(r.per_class[0].tp, 1);
    assert_eq!(r.per_class[0].fn_, 1);
    assert_eq!(r.per_class[1].fp, 1);
    assert_eq!(r.excluded, vec![2]);
    assert!((r.miou - 0.25).abs() < EPS);
    assert!(matches!(semantic_metrics(&[0], &[0, 1], &[0, 1]), Err(Error::DimensionMismatch(_))));
}

proptest! {
    #[test]
    fn iou_bounded_by_precision_and_recall(seed in any::<u64>(), n in 1usize..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred: Vec<i32> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let gt: Vec<i32> = (0..n).map(|_| rng.random_range(-1..3)).collect();
        let r = semantic_metrics(&pred, &gt, &[0, 1, 2]).unwrap();
        for m in &r.per_class {
            prop_assert!(m.iou <= m.precision.min(m.recall) + EPS);
            prop_assert!((0.0..=1.0).contains(&m.f1));
        }
    }
}

#[test]
fn regression_anchors() {
    let t = [1.0, 2.0, 3.0];
    assert_eq!(r2(&t, &t).unwrap(), 1.0);
    assert_eq!(rmse(&t, &t).unwrap(), 0.0);
    assert!(r2(&t, &[2.0, 2.0, 2.0]).unwrap().abs() < EPS);
    assert!((rmse(&t, &[1.0, 2.0, 4.0]).unwrap() - (1.0f64 / 3.0).sqrt()).abs() < EPS);
    assert!((r2(&t, &[1.0, 2.0, 4.0]).unwrap() - 0.5).abs() < EPS);
    assert!(matches!(r2(&[2.0, 2.0], &[1.0, 3.0]), Err(Error::Degenerate(_))));
    assert!(rmse(&[1.0], &[1.0]).is_err());
    assert!(rmse(&[1.0, 2.0], &[1.0]).is_err());
}

#[test]
fn percent_rounds_to_one_decimal() {
    assert_eq!(percent(0.94049), 94.0);
    assert_eq!(percent(0.9405), 94.1);
    assert_eq!(percent(1.0), 100.0);
}

#[test]
fn set_iou_cases() {
    assert_eq!(set_iou(&[1, 2, 3], &[2, 3, 4]), 0.5);
    assert_eq!(set_iou(&[], &[]), 0.0);
    assert_eq!(set_iou(&[1], &[1]), 1.0);
}

fn inst(indices: Vec<usize>, score: f64) -> ScoredInstance {
    ScoredInstance { indices, score }
}

#[test]
fn ap_anchors() {
    let gt = vec![vec![0, 1, 2, 3]];
    let exact = instance_ap(&[inst(vec![0, 1, 2, 3], 0.9)], &gt, Interpolation::AllPoint).unwrap();
    assert_eq!((exact.ap, exact.ap50, exact.ap25), (1.0, 1.0, 1.0));

    // IoU exactly 0.5 counts at the 0.50 threshold only.
    let half = instance_ap(&[inst(vec![0, 1], 0.9)], &gt, Interpolation::AllPoint).unwrap();
    assert_eq!((half.ap50, half.ap25), (1.0, 1.0));
    assert!((half.ap - 0.1).abs() < EPS);

    let dup = instance_ap(&[inst(vec![0, 1, 2, 3], 0.9), inst(vec![0, 1, 2, 3], 0.8)], &gt, Interpolation::AllPoint)
        .unwrap();
    for t in &dup.per_threshold {
        assert_eq!(t.precision, vec![1.0, 0.5]);
    }
    assert_eq!(dup.ap50, 1.0);

    // A false positive ranked first halves the precision at the TP.
    let fp_first = instance_ap(&[inst(vec![7, 8], 0.95), inst(vec![0, 1, 2, 3], 0.9)], &gt, Interpolation::AllPoint)
        .unwrap();
    assert!((fp_first.ap50 - 0.5).abs() < EPS);
}

#[test]
fn eleven_point_interpolation() {
    let gt = vec![vec![0], vec![1]];
    let r = instance_ap(&[inst(vec![0], 0.9), inst(vec![5], 0.8)], &gt, Interpolation::ElevenPoint).unwrap();
    // Recall reaches 0.5 with precision 1: six of eleven points.
    assert!((r.ap50 - 6.0 / 11.0).abs() < EPS);
}

#[test]
fn ap_errors() {
    assert!(matches!(instance_ap(&[], &[], Interpolation::AllPoint), Err(Error::EmptyInput(_))));
    let gt = vec![vec![0]];
    assert!(matches!(instance_ap(&[inst(vec![0], f64::NAN)], &gt, Interpolation::AllPoint), Err(Error::NonFinite(_))));
    let none = instance_ap(&[], &gt, Interpolation::AllPoint).unwrap();
    assert_eq!((none.ap, none.ap50, none.ap25), (0.0, 0.0, 0.0));
}

#[test]
fn gt_instance_sets() {
    let sem = [1, 1, 0, 1, -1, 1];
    let ins = [3, 3, 0, 1, 1, -1];
    assert_eq!(gt_instances(&sem, &ins, 1), vec![vec![3], vec![0, 1]]);
}

/// Brute-force AP: set-based IoU, literal greedy matching, suffix-max envelope.
fn ap_oracle(preds: &[ScoredInstance], gt: &[Vec<usize>], t: f64) -> f64 {
    let sets: Vec<BTreeSet<usize>> = gt.iter().map(|g| g.iter().copied().collect()).collect();
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.partial_cmp(&preds[a].score).unwrap());
    let mut used = vec![false; gt.len()];
    let mut flags = Vec::new();
    for &p in &order {
        let ps: BTreeSet<usize> = preds[p].indices.iter().copied().collect();
        let mut best: Option<(usize, f64)> = None;
        for (g, gs) in sets.iter().enumerate() {
            if used[g] {
                continue;
            }
            let inter = ps.intersection(gs).count();
            let uni = ps.union(gs).count();
            let iou = if uni == 0 { 0.0 } else { inter as f64 / uni as f64 };
            if best.map_or(true, |(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        let hit = matches!(best, Some((_, iou)) if iou >= t);
        if let (true, Some((g, _))) = (hit, best) {
            used[g] = true;
        }
        flags.push(hit);
    }
    let precision: Vec<f64> = (0..flags.len())
        .map(|k| flags[..=k].iter().filter(|&&f| f).count() as f64 / (k + 1) as f64)
        .collect();
    let mut total = 0.0;
    for k in 0..flags.len() {
        if flags[k] {
            total += precision[k..].iter().copied().fold(f64::MIN, f64::max);
        }
    }
    total / gt.len() as f64
}

fn random_case(rng: &mut impl Rng) -> (Vec<ScoredInstance>, Vec<Vec<usize>>) {
    let m = rng.random_range(5..=200);
    let k = rng.random_range(1..=5);
    let mut gt = vec![Vec::new(); k];
    for i in 0..m {
        if rng.random_bool(0.8) {
            gt[rng.random_range(0..k)].push(i);
        }
    }
    gt.retain(|g| !g.is_empty());
    if gt.is_empty() {
        gt.push(vec![0]);
    }
    let mut preds = Vec::new();
    for g in &gt {
        for _ in 0..rng.random_range(0..3) {
            let mut s: BTreeSet<usize> = g.iter().copied().filter(|_| rng.random_bool(0.8)).collect();
            for _ in 0..rng.random_range(0..g.len() + 1) {
                s.insert(rng.random_range(0..m));
            }
            if !s.is_empty() {
                preds.push(inst(s.into_iter().collect(), rng.random_range(0..5) as f64 / 4.0));
            }
        }
    }
    for _ in 0..rng.random_range(0..3) {
        let s: BTreeSet<usize> = (0..rng.random_range(1..20)).map(|_| rng.random_range(0..m)).collect();
        preds.push(inst(s.into_iter().collect(), rng.random_range(0..5) as f64 / 4.0));
    }
    (preds, gt)
}

#[test]
fn ap_matches_oracle_on_500_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for case in 0..500 {
        let (preds, gt) = random_case(&mut rng);
        let r = instance_ap(&preds, &gt, Interpolation::AllPoint).unwrap();
        let per: Vec<f64> = ap_thresholds().iter().map(|&t| ap_oracle(&preds, &gt, t)).collect();
        assert_eq!(r.ap50, per[0], "case {case}");
        assert_eq!(r.ap25, ap_oracle(&preds, &gt, 0.25), "case {case}");
        assert!((r.ap - per.iter().sum::<f64>() / per.len() as f64).abs() <= 1e-12, "case {case}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn ap_is_monotone_in_leniency(seed in any::<u64>(), eleven in any::<bool>()) {
        let (preds, gt) = random_case(&mut ChaCha8Rng::seed_from_u64(seed));
        let interp = if eleven { Interpolation::ElevenPoint } else { Interpolation::AllPoint };
        let r = instance_ap(&preds, &gt, interp).unwrap();
        prop_assert!(r.ap25 >= r.ap50 && r.ap50 >= r.ap);
        prop_assert!((0.0..=1.0).contains(&r.ap25));
        for w in r.per_threshold.windows(2) {
            prop_assert!(w[0].ap >= w[1].ap);
        }
    }
}
