//! Seeded geometric augmentations.
//!
//! A transform is applied about the cloud centroid in a fixed order: axis
//! flips, uniform scale, rotation (about z, then a small tilt about x and y),
//! per-point Gaussian jitter and finally color jitter clamped to `[0, 1]`.

use nalgebra::{Matrix3, Point3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Rotation about z drawn from `[-max, max]`, radians.
    pub rotation_z_max: f64,
    /// Tilt about x and about y, each drawn from `[-max, max]`, radians.
    pub rotation_xy_max: f64,
    pub scale_range: [f64; 2],
    /// Per-point positional noise, mm.
    pub jitter_sigma: f64,
    /// Probability of mirroring along x, and independently along y.
    pub flip_probability: f64,
    pub color_jitter_sigma: f64,
}

impl AugmentConfig {
    /// Defaults for a given voxel size; jitter is a fifth of a voxel.
    pub fn for_voxel_size(voxel_size: f64) -> Self {
        Self {
            rotation_z_max: std::f64::consts::PI,
            rotation_xy_max: 0.1,
            scale_range: [0.9, 1.1],
            jitter_sigma: 0.2 * voxel_size,
            flip_probability: 0.5,
            color_jitter_sigma: 0.05,
        }
    }

    /// No-op configuration.
    pub fn identity() -> Self {
        Self {
            rotation_z_max: 0.0,
            rotation_xy_max: 0.0,
            scale_range: [1.0, 1.0],
            jitter_sigma: 0.0,
            flip_probability: 0.0,
            color_jitter_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::invalid(format!("scale range [{lo}, {hi}] must satisfy 0 < lo <= hi")));
        }
        for (name, v) in [
            ("rotation_z_max", self.rotation_z_max),
            ("rotation_xy_max", self.rotation_xy_max),
            ("jitter_sigma", self.jitter_sigma),
            ("color_jitter_sigma", self.color_jitter_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be a finite non-negative number")));
            }
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::invalid("flip_probability must lie in [0,1]"));
        }
        Ok(())
    }
}

/// The similarity part of an augmentation: `p' = R * s * F * (p - c) + c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub flip_x: bool,
    pub flip_y: bool,
    pub scale: f64,
    pub rotation: Rotation3<f64>,
    pub center: Point3<f64>,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self {
            flip_x: false,
            flip_y: false,
            scale: 1.0,
            rotation: Rotation3::identity(),
            center: Point3::origin(),
        }
    }

    /// Linear part `R * s * F`.
    pub fn linear(&self) -> Matrix3<f64> {
        let f = Matrix3::from_diagonal(&Vector3::new(
            if self.flip_x { -1.0 } else { 1.0 },
            if self.flip_y { -1.0 } else { 1.0 },
            1.0,
        ));
        self.rotation.matrix() * (f * self.scale)
    }

    pub fn apply_point(&self, p: &Point3<f64>) -> Point3<f64> {
        self.center + self.apply_vector(&(p - self.center))
    }

    /// Transforms a displacement (no translation).
    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        let mut w = *v;
        if self.flip_x {
            w.x = -w.x;
        }
        if self.flip_y {
            w.y = -w.y;
        }
        self.rotation * (w * self.scale)
    }

    /// Draws flips, scale and rotation in that order from `rng`.
    pub fn sample(cfg: &AugmentConfig, center: Point3<f64>, rng: &mut impl Rng) -> Self {
        let flip_x = rng.random::<f64>() < cfg.flip_probability;
        let flip_y = rng.random::<f64>() < cfg.flip_probability;
        let [lo, hi] = cfg.scale_range;
        let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let sym = |rng: &mut dyn rand::RngCore, max: f64| {
            if max > 0.0 {
                rng.random_range(-max..=max)
            } else {
                0.0
            }
        };
        let rz = sym(rng, cfg.rotation_z_max);
        let rx = sym(rng, cfg.rotation_xy_max);
        let ry = sym(rng, cfg.rotation_xy_max);
        let rotation = Rotation3::from_axis_angle(&Vector3::y_axis(), ry)
            * Rotation3::from_axis_angle(&Vector3::x_axis(), rx)
            * Rotation3::from_axis_angle(&Vector3::z_axis(), rz);
        Self {
            flip_x,
            flip_y,
            scale,
            rotation,
            center,
        }
    }
}

/// Applies a random augmentation and returns the drawn similarity part too.
pub fn random_transform_with(
    cloud: &PointCloud,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(PointCloud, SimilarityTransform)> {
    cfg.validate()?;
    let t = SimilarityTransform::sample(cfg, cloud.centroid(), rng);
    let mut coords: Vec<Point3<f64>> = cloud.coords().iter().map(|p| t.apply_point(p)).collect();
    if cfg.jitter_sigma > 0.0 {
        let n = Normal::new(0.0, cfg.jitter_sigma).expect("validated sigma");
        for p in &mut coords {
            p.x += n.sample(rng);
            p.y += n.sample(rng);
            p.z += n.sample(rng);
        }
    }
    let mut colors = cloud.colors().to_vec();
    if cfg.color_jitter_sigma > 0.0 {
        let n = Normal::new(0.0, cfg.color_jitter_sigma).expect("validated sigma");
        for c in &mut colors {
            for ch in c.iter_mut() {
                *ch = (*ch + n.sample(rng)).clamp(0.0, 1.0);
            }
        }
    }
    let out = cloud.clone().with_coords(coords)?.with_colors(colors)?;
    Ok((out, t))
}

/// Seeded random augmentation; labels and point order are unchanged.
pub fn random_transform(cloud: &PointCloud, cfg: &AugmentConfig, seed: u64) -> Result<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_transform_with(cloud, cfg, &mut rng).map(|(c, _)| c)
}
