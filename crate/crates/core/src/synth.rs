//! Procedural labeled plants with analytic ground truth.
//!
//! A plant is a (possibly tilted and gently bent) cylindrical stem carrying
//! leaves. Each leaf is a ruled surface: a circular-arc midrib in a vertical
//! plane swept along a horizontal lateral direction, trimmed to an elliptical
//! planform. The surface is developable, so the midrib arc length and the
//! maximum blade width are exact geodesic ground truths.

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cloud::{PointCloud, LEAF, SOIL, STEM, UNLABELED};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StemSpec {
    pub height: f64,
    pub radius: f64,
    /// Initial lean from vertical, radians.
    pub tilt: f64,
    /// Horizontal direction of the lean, radians.
    pub tilt_azimuth: f64,
    /// Change of lean per mm of stem length, radians/mm.
    pub curvature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeafSpec {
    /// Stem arc length at which the leaf attaches, mm.
    pub attach_height: f64,
    /// Horizontal direction the leaf points to, radians.
    pub azimuth: f64,
    /// Straight-line distance from leaf base to tip, mm.
    pub length: f64,
    /// Maximum blade width, mm.
    pub width: f64,
    /// Total downward turning of the midrib from base to tip, radians.
    pub droop: f64,
    /// Initial upward angle of the midrib, radians.
    pub elevation: f64,
}

impl LeafSpec {
    /// Midrib arc length.
    pub fn arc_length(&self) -> f64 {
        if self.droop.abs() < 1e-12 {
            self.length
        } else {
            let half = 0.5 * self.droop;
            self.length * half / half.sin()
        }
    }

    /// Midrib position at arc length `s` in the leaf plane:
    /// (horizontal distance from the base, height above the base).
    pub fn midrib(&self, s: f64) -> (f64, f64) {
        let e0 = self.elevation;
        if self.droop.abs() < 1e-12 {
            return (s * e0.cos(), s * e0.sin());
        }
        let r = self.arc_length() / self.droop;
        let phi = e0 - s / r;
        (r * (e0.sin() - phi.sin()), r * (phi.cos() - e0.cos()))
    }

    /// Half-width of the blade at arc length `s`.
    pub fn half_width(&self, s: f64) -> f64 {
        let l = self.arc_length();
        let x = 2.0 * s / l - 1.0;
        0.5 * self.width * (1.0 - x * x).max(0.0).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoleSpec {
    pub count: usize,
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoilSpec {
    pub radius: f64,
    /// Height of the soil disk relative to the stem base, mm.
    pub depth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub stem: StemSpec,
    pub leaves: Vec<LeafSpec>,
    /// Surface sampling density, points/mm².
    pub density: f64,
    /// Gaussian coordinate noise added after ground truth, mm.
    pub noise_sigma: f64,
    pub holes: Option<HoleSpec>,
    pub soil: Option<SoilSpec>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafTruth {
    pub instance: i32,
    pub length: f64,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub stem_diameter: f64,
    pub leaves: Vec<LeafTruth>,
}

impl GroundTruth {
    /// Rows of `cloud_id,trait,organ_id,value_mm` (no header).
    pub fn csv_rows(&self, cloud_id: &str) -> String {
        let mut s = format!("{cloud_id},stem_diameter,stem,{:.6}\n", self.stem_diameter);
        for l in &self.leaves {
            s.push_str(&format!("{cloud_id},leaf_length,{},{:.6}\n", l.instance, l.length));
            s.push_str(&format!("{cloud_id},leaf_width,{},{:.6}\n", l.instance, l.width));
        }
        s
    }
}

/// Gap between the stem surface and a leaf base, mm.
const LEAF_GAP: f64 = 2.0;
const STEM_COLOR: [f64; 3] = [0.26, 0.6, 0.2];
const LEAF_COLOR: [f64; 3] = [0.24, 0.62, 0.18];
const SOIL_COLOR: [f64; 3] = [0.45, 0.34, 0.24];
const COLOR_NOISE: f64 = 0.03;

impl PlantSpec {
    pub fn spacing(&self) -> f64 {
        1.0 / self.density.sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.stem;
        if !(s.height > 0.0 && s.radius > 0.0) {
            return Err(Error::invalid("stem height and radius must be positive"));
        }
        if !(self.density > 0.0 && self.density.is_finite()) {
            return Err(Error::invalid("sampling density must be positive"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise sigma must be non-negative"));
        }
        for (i, l) in self.leaves.iter().enumerate() {
            if !(l.length > 0.0 && l.width > 0.0) {
                return Err(Error::invalid(format!("leaf {i}: length and width must be positive")));
            }
            if !(l.droop >= 0.0 && l.droop < std::f64::consts::PI) {
                return Err(Error::invalid(format!("leaf {i}: droop must lie in [0, pi)")));
            }
            if !(0.0..=s.height).contains(&l.attach_height) {
                return Err(Error::invalid(format!("leaf {i}: attach height outside the stem")));
            }
        }
        Ok(())
    }

    fn stem_frame(&self, s: f64) -> (Point3<f64>, Vector3<f64>) {
        let st = &self.stem;
        let (ca, sa) = (st.tilt_azimuth.cos(), st.tilt_azimuth.sin());
        let theta = st.tilt + st.curvature * s;
        let (h, z) = if st.curvature.abs() < 1e-12 {
            (s * st.tilt.sin(), s * st.tilt.cos())
        } else {
            let k = st.curvature;
            ((st.tilt.cos() - theta.cos()) / k, (theta.sin() - st.tilt.sin()) / k)
        };
        let pos = Point3::new(h * ca, h * sa, z);
        let tangent = Vector3::new(theta.sin() * ca, theta.sin() * sa, theta.cos());
        (pos, tangent)
    }
}

fn jitter_color(base: [f64; 3], n: &Normal<f64>, rng: &mut impl Rng) -> [f64; 3] {
    base.map(|c| (c + n.sample(rng)).clamp(0.0, 1.0))
}

/// Samples the plant and returns the labeled cloud with its ground truth.
///
/// Instance ids are `0..leaves.len()` in spec order; stem and soil points
/// carry instance `-1`.
pub fn generate_plant(spec: &PlantSpec) -> Result<(PointCloud, GroundTruth)> {
    spec.validate()?;
    let h = spec.spacing();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let color_noise = Normal::new(0.0, COLOR_NOISE).expect("finite sigma");
    let mut coords = Vec::new();
    let mut colors = Vec::new();
    let mut sem = Vec::new();
    let mut inst = Vec::new();

    let st = &spec.stem;
    let rings = (st.height / h).ceil().max(1.0) as usize;
    let per_ring = ((2.0 * std::f64::consts::PI * st.radius / h).ceil() as usize).max(6);
    for i in 0..=rings {
        let s = st.height * i as f64 / rings as f64;
        let (c, t) = spec.stem_frame(s);
        let n = Vector3::new(-st.tilt_azimuth.sin(), st.tilt_azimuth.cos(), 0.0);
        let b = t.cross(&n).normalize();
        let phase = if i % 2 == 0 { 0.0 } else { 0.5 };
        for j in 0..per_ring {
            let psi = 2.0 * std::f64::consts::PI * (j as f64 + phase) / per_ring as f64;
            coords.push(c + (n * psi.cos() + b * psi.sin()) * st.radius);
            colors.push(jitter_color(STEM_COLOR, &color_noise, &mut rng));
            sem.push(STEM);
            inst.push(UNLABELED);
        }
    }

    let mut truth = GroundTruth {
        stem_diameter: 2.0 * st.radius,
        leaves: Vec::new(),
    };
    for (id, leaf) in spec.leaves.iter().enumerate() {
        let (c, _) = spec.stem_frame(leaf.attach_height);
        let dir = Vector3::new(leaf.azimuth.cos(), leaf.azimuth.sin(), 0.0);
        let lateral = Vector3::new(-leaf.azimuth.sin(), leaf.azimuth.cos(), 0.0);
        let base = c + dir * (st.radius + LEAF_GAP);
        let l = leaf.arc_length();
        let mut rows = (l / h).ceil() as usize;
        rows += rows % 2;
        for i in 0..=rows {
            let s = l * i as f64 / rows as f64;
            let (a, v) = leaf.midrib(s);
            let center = base + dir * a + Vector3::z() * v;
            let w = leaf.half_width(s);
            let mut m = (2.0 * w / h).ceil() as usize;
            m += m % 2;
            for j in 0..=m {
                let u = if m == 0 { 0.0 } else { -w + 2.0 * w * j as f64 / m as f64 };
                coords.push(center + lateral * u);
                colors.push(jitter_color(LEAF_COLOR, &color_noise, &mut rng));
                sem.push(LEAF);
                inst.push(id as i32);
            }
        }
        truth.leaves.push(LeafTruth {
            instance: id as i32,
            length: l,
            width: leaf.width,
        });
    }

    if let Some(soil) = spec.soil {
        let n = (soil.radius / h).ceil() as i64;
        let (c0, _) = spec.stem_frame(0.0);
        for ix in -n..=n {
            for iy in -n..=n {
                let (x, y) = (ix as f64 * h, iy as f64 * h);
                let r = (x * x + y * y).sqrt();
                if r > soil.radius || r < st.radius + LEAF_GAP {
                    continue;
                }
                coords.push(Point3::new(c0.x + x, c0.y + y, c0.z - soil.depth));
                colors.push(jitter_color(SOIL_COLOR, &color_noise, &mut rng));
                sem.push(SOIL);
                inst.push(UNLABELED);
            }
        }
    }

    let mut keep = vec![true; coords.len()];
    if let Some(holes) = spec.holes {
        let leaf_idx: Vec<usize> = (0..coords.len()).filter(|&i| sem[i] == LEAF).collect();
        if !leaf_idx.is_empty() {
            let r2 = holes.radius * holes.radius;
            for _ in 0..holes.count {
                let center = coords[leaf_idx[rng.random_range(0..leaf_idx.len())]];
                for &i in &leaf_idx {
                    if (coords[i] - center).norm_squared() <= r2 {
                        keep[i] = false;
                    }
                }
            }
        }
    }

    if spec.noise_sigma > 0.0 {
        let n = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
        for p in &mut coords {
            p.x += n.sample(&mut rng);
            p.y += n.sample(&mut rng);
            p.z += n.sample(&mut rng);
        }
    }

    let idx: Vec<usize> = (0..coords.len()).filter(|&i| keep[i]).collect();
    let cloud = PointCloud::new(
        idx.iter().map(|&i| coords[i]).collect(),
        idx.iter().map(|&i| colors[i]).collect(),
        Some(idx.iter().map(|&i| sem[i]).collect()),
        Some(idx.iter().map(|&i| inst[i]).collect()),
        format!("synth-{}", spec.seed),
    )?;
    Ok((cloud, truth))
}

/// Ranges for [`random_spec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomPlantOptions {
    pub leaves: [usize; 2],
    pub density: f64,
    pub noise_sigma: f64,
    pub holes: Option<HoleSpec>,
    pub soil: Option<SoilSpec>,
    /// Upper bound of the leaf droop, radians.
    pub max_droop: f64,
}

impl Default for RandomPlantOptions {
    fn default() -> Self {
        Self {
            leaves: [4, 6],
            density: 1.0,
            noise_sigma: 0.0,
            holes: None,
            soil: None,
            max_droop: std::f64::consts::FRAC_PI_3,
        }
    }
}

/// Seeded random plant: stem 80-140 mm tall with radius 1.5-3 mm, leaves
/// 40-70 mm long with width 0.3-0.45 of the length, attached at least 12 mm apart with
/// phyllotactic azimuths.
pub fn random_spec(seed: u64, opts: &RandomPlantOptions) -> PlantSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_91a7);
    let height = rng.random_range(80.0..140.0);
    let stem = StemSpec {
        height,
        radius: rng.random_range(1.5..3.0),
        tilt: rng.random_range(0.0..0.12),
        tilt_azimuth: rng.random_range(0.0..std::f64::consts::TAU),
        curvature: rng.random_range(-0.001..0.001),
    };
    let n = rng.random_range(opts.leaves[0]..=opts.leaves[1]);
    let lowest = 0.35 * height;
    let spacing = ((height - 5.0 - lowest) / n.max(1) as f64).max(12.0);
    let start_az = rng.random_range(0.0..std::f64::consts::TAU);
    let golden = 137.5f64.to_radians();
    let leaves = (0..n)
        .map(|i| {
            let length = rng.random_range(40.0..70.0);
            LeafSpec {
                attach_height: (lowest + spacing * i as f64 + rng.random_range(0.0..0.2) * spacing).min(height),
                azimuth: start_az + golden * i as f64 + rng.random_range(-0.15..0.15),
                length,
                width: rng.random_range(0.3..0.45) * length,
                droop: rng.random_range(0.0..opts.max_droop.max(1e-9)),
                elevation: rng.random_range(0.2..0.6),
            }
        })
        .collect();
    PlantSpec {
        stem,
        leaves,
        density: opts.density,
        noise_sigma: opts.noise_sigma,
        holes: opts.holes,
        soil: opts.soil,
        seed,
    }
}
