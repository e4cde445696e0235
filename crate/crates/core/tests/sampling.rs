use nalgebra::Point3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shootseg::cloud::{PointCloud, LEAF, SOIL, STEM};
use shootseg::sampling::*;
use shootseg::WeakLabels;

fn line(n: usize) -> Vec<Point3<f64>> {
    (0..n).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect()
}

fn labeled(n: usize) -> PointCloud {
    let sem: Vec<i32> = (0..n).map(|i| if i % 3 == 0 { STEM } else { LEAF }).collect();
    let inst: Vec<i32> = (0..n).map(|i| if i % 3 == 0 { -1 } else { (i % 2) as i32 }).collect();
    PointCloud::new(line(n), vec![[0.5; 3]; n], Some(sem), Some(inst), "c").unwrap()
}

/// Greedy FPS recomputing every min-distance from scratch.
fn fps_oracle(pts: &[Point3<f64>], h: usize, start: usize) -> Vec<usize> {
    let mut out = vec![start];
    while out.len() < h.min(pts.len()) {
        let mut best: Option<(f64, usize)> = None;
        for i in 0..pts.len() {
            if out.contains(&i) {
                continue;
            }
            let d = out.iter().map(|&j| (pts[i] - pts[j]).norm_squared()).fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(bd, _)| d > bd) {
                best = Some((d, i));
            }
        }
        out.push(best.unwrap().1);
    }
    out
}

fn min_pairwise(pts: &[Point3<f64>], idx: &[usize]) -> f64 {
    let mut m = f64::INFINITY;
    for a in 0..idx.len() {
        for b in (a + 1)..idx.len() {
            m = m.min((pts[idx[a]] - pts[idx[b]]).norm());
        }
    }
    m
}

fn grid_points(seed: u64, n: usize) -> Vec<Point3<f64>> {
    // Integer coordinates make distance ties common.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Point3::new(rng.random_range(0..6) as f64, rng.random_range(0..6) as f64, rng.random_range(0..3) as f64))
        .collect()
}

#[test]
fn fps_collinear_picks_far_end() {
    assert_eq!(farthest_point_sample(&line(10), 2, 0).unwrap(), vec![0, 9]);
}

#[test]
fn fps_full_count_is_permutation() {
    let mut got = farthest_point_sample(&line(10), 10, 3).unwrap();
    assert_eq!(&got[..2], &[3, 9]);
    got.sort_unstable();
    assert_eq!(got, (0..10).collect::<Vec<_>>());
}

#[test]
fn fps_square_corners_tie_break() {
    let pts = vec![
        Point3::new(0.0, 0.0, 0.0),
        Point3::new(1.0, 0.0, 0.0),
        Point3::new(0.0, 1.0, 0.0),
        Point3::new(1.0, 1.0, 0.0),
        Point3::new(0.5, 0.5, 0.0),
    ];
    let got = farthest_point_sample(&pts, 3, 0).unwrap();
    assert_eq!(got, fps_oracle(&pts, 3, 0));
    assert_eq!(got, vec![0, 3, 1]);
}

#[test]
fn fps_duplicates_never_repeat_indices() {
    let pts = vec![Point3::origin(); 4];
    assert_eq!(farthest_point_sample(&pts, 4, 2).unwrap(), vec![2, 0, 1, 3]);
}

#[test]
fn fps_errors() {
    assert!(farthest_point_sample(&[], 1, 0).is_err());
    assert!(farthest_point_sample(&line(3), 1, 3).is_err());
    assert!(farthest_point_sample(&line(3), 0, 0).is_err());
}

#[test]
fn fps_matches_oracle_on_500_clouds() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..500u64 {
        let m = rng.random_range(1..=200);
        let pts = if case % 2 == 0 {
            grid_points(case, m)
        } else {
            (0..m).map(|_| Point3::new(rng.random(), rng.random(), rng.random())).collect()
        };
        let h = rng.random_range(1..=m.min(40));
        let start = rng.random_range(0..m);
        assert_eq!(farthest_point_sample(&pts, h, start).unwrap(), fps_oracle(&pts, h, start), "case {case}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fps_oracle_all_starts(seed in any::<u64>(), m in 1usize..30, h in 1usize..30) {
        let pts = grid_points(seed, m);
        for start in 0..m {
            prop_assert_eq!(farthest_point_sample(&pts, h, start).unwrap(), fps_oracle(&pts, h, start));
        }
    }

    #[test]
    fn fps_min_distance_non_increasing(seed in any::<u64>(), m in 2usize..120) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Point3<f64>> = (0..m).map(|_| Point3::new(rng.random(), rng.random(), rng.random())).collect();
        let mut prev = f64::INFINITY;
        for h in 2..=m.min(40) {
            let d = min_pairwise(&pts, &farthest_point_sample(&pts, h, 0).unwrap());
            prop_assert!(d <= prev);
            prev = d;
        }
    }

    #[test]
    fn weak_labels_never_invent(seed in any::<u64>(), n in 1usize..300, k in 1usize..400, stratified in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sem: Vec<i32> = (0..n).map(|_| rng.random_range(-1..3)).collect();
        let inst: Vec<i32> = sem.iter().map(|&s| if s < 0 { -1 } else { rng.random_range(-1..4) }).collect();
        let c = PointCloud::new(line(n), vec![[0.5; 3]; n], Some(sem.clone()), Some(inst.clone()), "c").unwrap();
        let w = make_weak_labels(&c, k, seed, stratified).unwrap();
        let available = sem.iter().filter(|&&s| s >= 0).count();
        if !stratified {
            prop_assert_eq!(w.len(), k.min(available));
        }
        prop_assert!(w.len() <= k.min(available));
        for (&i, &(s, t)) in &w.entries {
            prop_assert!(i < n);
            prop_assert!(s != -1);
            prop_assert_eq!((sem[i], inst[i]), (s, t));
        }
        w.validate_against(&c).unwrap();
    }
}

#[test]
fn weak_labels_membership_and_determinism() {
    let c = labeled(10_000);
    let a = make_weak_labels(&c, 50, 7, false).unwrap();
    assert_eq!(a, make_weak_labels(&c, 50, 7, false).unwrap());
    assert_ne!(a, make_weak_labels(&c, 50, 8, false).unwrap());
    assert_eq!(a.len(), 50);
    let sem = c.semantic().unwrap();
    let inst = c.instance().unwrap();
    for (&i, &(s, t)) in &a.entries {
        assert_eq!((sem[i], inst[i]), (s, t));
    }
}

#[test]
fn weak_labels_take_everything_when_k_large() {
    assert_eq!(make_weak_labels(&labeled(30), 100, 1, false).unwrap().len(), 30);
}

#[test]
fn weak_labels_skip_unlabeled_points() {
    let c = PointCloud::new(line(5), vec![[0.5; 3]; 5], Some(vec![-1, 0, -1, 1, -1]), None, "c").unwrap();
    let w = make_weak_labels(&c, 5, 0, false).unwrap();
    assert_eq!(w.entries.keys().copied().collect::<Vec<_>>(), vec![1, 3]);
}

#[test]
fn weak_labels_reject_zero_k_and_unlabeled_clouds() {
    assert!(make_weak_labels(&labeled(5), 0, 0, false).is_err());
    let bare = PointCloud::from_coords(line(5), "b").unwrap();
    assert!(make_weak_labels(&bare, 3, 0, false).is_err());
}

#[test]
fn stratified_balances_classes() {
    let w = make_weak_labels(&labeled(3000), 100, 3, true).unwrap();
    assert_eq!(w.entries.values().filter(|(s, _)| *s == STEM).count(), 50);
}

#[test]
fn validate_against_catches_out_of_range() {
    let c = labeled(10);
    let mut w = make_weak_labels(&c, 3, 0, false).unwrap();
    w.entries.insert(10, (STEM, -1));
    assert!(w.validate_against(&c).is_err());
}

#[test]
fn weak_label_file_round_trip() {
    let w = make_weak_labels(&labeled(500), 20, 9, false).unwrap();
    let text = w.to_text();
    assert!(text.starts_with("#weaklabels k=20 seed=9 cloud=c"));
    assert_eq!(WeakLabels::parse(&text).unwrap(), w);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.txt");
    w.save(&path).unwrap();
    assert_eq!(WeakLabels::load(&path).unwrap(), w);
    assert!(WeakLabels::parse("1 0 0\n").is_err());
    assert!(WeakLabels::parse("#weaklabels k=1 seed=0 cloud=x\n1 0\n").is_err());
}

#[test]
fn subsample_counts_and_identity() {
    let c = labeled(1000);
    assert_eq!(random_subsample(&c, 0.2, 1).unwrap().len(), 200);
    assert_eq!(random_subsample(&c, 1.0, 1).unwrap(), c);
    assert_eq!(random_subsample(&c, 0.2, 1).unwrap(), random_subsample(&c, 0.2, 1).unwrap());
    assert_eq!(random_subsample(&labeled(7), 0.5, 1).unwrap().len(), 4);
    assert!(random_subsample(&c, 0.0, 1).is_err());
    assert!(random_subsample(&c, 1.5, 1).is_err());
}

#[test]
fn subsample_keeps_labels_aligned() {
    let c = labeled(300);
    let s = random_subsample(&c, 0.3, 4).unwrap();
    for i in 0..s.len() {
        let orig = s.coords()[i].x as usize;
        assert_eq!(s.semantic().unwrap()[i], c.semantic().unwrap()[orig]);
    }
}

#[test]
fn strip_soil() {
    let c = labeled(9);
    assert_eq!(strip_class(&c, SOIL), c);
    let mixed = PointCloud::new(line(4), vec![[0.5; 3]; 4], Some(vec![SOIL, STEM, SOIL, LEAF]), None, "c").unwrap();
    let s = strip_class(&mixed, SOIL);
    let soil = mixed.semantic().unwrap().iter().filter(|&&v| v == SOIL).count();
    assert_eq!(s.len(), mixed.len() - soil);
    assert_eq!(s.semantic().unwrap(), &[STEM, LEAF]);
    assert_eq!(s.coords()[0].x, 1.0);
    let all = PointCloud::new(line(2), vec![[0.5; 3]; 2], Some(vec![SOIL, SOIL]), None, "c").unwrap();
    assert!(strip_class(&all, SOIL).ensure_non_empty().is_err());
}
