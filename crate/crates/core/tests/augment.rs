use std::f64::consts::FRAC_PI_2;

use nalgebra::{Point3, Rotation3, Vector3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shootseg::augment::*;
use shootseg::PointCloud;

fn sample_cloud() -> PointCloud {
    let coords: Vec<Point3<f64>> = (0..40)
        .map(|i| {
            let t = i as f64;
            Point3::new((t * 0.7).sin() * 10.0, (t * 1.3).cos() * 5.0, t * 0.5)
        })
        .collect();
    let sem = (0..40).map(|i| i % 2).collect();
    PointCloud::new(coords, vec![[0.3, 0.6, 0.2]; 40], Some(sem), None, "a").unwrap()
}

#[test]
fn identity_config_is_identity() {
    let c = sample_cloud();
    let out = random_transform(&c, &AugmentConfig::identity(), 5).unwrap();
    for (a, b) in out.coords().iter().zip(c.coords()) {
        assert!((a - b).norm() < 1e-12);
    }
    assert_eq!(out.colors(), c.colors());
}

#[test]
fn quarter_turn_about_z() {
    let t = SimilarityTransform {
        rotation: Rotation3::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2),
        ..SimilarityTransform::identity()
    };
    let p = t.apply_point(&Point3::new(1.0, 0.0, 0.0));
    assert!((p - Point3::new(0.0, 1.0, 0.0)).norm() < 1e-9);
}

#[test]
fn vector_and_point_maps_agree() {
    let cfg = AugmentConfig::for_voxel_size(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t = SimilarityTransform::sample(&cfg, Point3::new(3.0, -1.0, 2.0), &mut rng);
    let (a, b) = (Point3::new(1.0, 2.0, 3.0), Point3::new(-4.0, 0.5, 7.0));
    let lhs = t.apply_point(&b) - t.apply_point(&a);
    assert!((lhs - t.apply_vector(&(b - a))).norm() < 1e-12);
    assert!((t.linear() * (b - a) - lhs).norm() < 1e-12);
}

#[test]
fn labels_and_count_preserved() {
    let c = sample_cloud();
    let out = random_transform(&c, &AugmentConfig::for_voxel_size(0.5), 11).unwrap();
    assert_eq!(out.len(), c.len());
    assert_eq!(out.semantic(), c.semantic());
    assert!(out.colors().iter().flatten().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn deterministic_and_seed_sensitive() {
    let c = sample_cloud();
    let cfg = AugmentConfig::for_voxel_size(1.0);
    assert_eq!(random_transform(&c, &cfg, 3).unwrap(), random_transform(&c, &cfg, 3).unwrap());
    let distinct = (0..50u64)
        .filter(|&s| {
            let a = SimilarityTransform::sample(&cfg, Point3::origin(), &mut ChaCha8Rng::seed_from_u64(s));
            let b = SimilarityTransform::sample(&cfg, Point3::origin(), &mut ChaCha8Rng::seed_from_u64(s + 1000));
            a.rotation.angle_to(&b.rotation) > 1e-6
        })
        .count();
    assert_eq!(distinct, 50);
}

#[test]
fn centroid_is_fixed_point_without_jitter() {
    let c = sample_cloud();
    let mut cfg = AugmentConfig::for_voxel_size(1.0);
    cfg.jitter_sigma = 0.0;
    let out = random_transform(&c, &cfg, 8).unwrap();
    assert!((out.centroid() - c.centroid()).norm() < 1e-9);
}

#[test]
fn invalid_configs() {
    let mut cfg = AugmentConfig::identity();
    cfg.scale_range = [1.2, 1.1];
    assert!(cfg.validate().is_err());
    cfg = AugmentConfig::identity();
    cfg.scale_range = [0.0, 1.1];
    assert!(cfg.validate().is_err());
    cfg = AugmentConfig::identity();
    cfg.flip_probability = 1.5;
    assert!(cfg.validate().is_err());
    cfg = AugmentConfig::identity();
    cfg.jitter_sigma = -0.1;
    assert!(cfg.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn no_jitter_is_a_similarity(seed in any::<u64>(), lo in 0.5f64..1.0, span in 0.0f64..0.5, flip in 0.0f64..=1.0) {
        let c = sample_cloud();
        let cfg = AugmentConfig {
            rotation_z_max: std::f64::consts::PI,
            rotation_xy_max: 0.3,
            scale_range: [lo, lo + span],
            jitter_sigma: 0.0,
            flip_probability: flip,
            color_jitter_sigma: 0.1,
        };
        let (out, t) = random_transform_with(&c, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(t.scale >= lo && t.scale <= lo + span);
        for i in 0..c.len() {
            for j in (i + 1)..c.len() {
                let d0 = (c.coords()[i] - c.coords()[j]).norm();
                let d1 = (out.coords()[i] - out.coords()[j]).norm();
                prop_assert!((d1 - t.scale * d0).abs() < 1e-9 * d0.max(1.0));
            }
        }
        prop_assert_eq!(out.semantic(), c.semantic());
    }
}
