//! Point-cloud data model.
//!
//! Coordinates are in millimeters, colors are RGB with each channel in `[0, 1]`.
//! Semantic labels use `-1` for unlabeled, `0` stem, `1` leaf and `2` soil.
//! Instance labels use `-1` for none and `0..` for leaf ids.

mod io;
mod spatial;
mod voxel;

pub use io::{load_cloud, parse_ply, parse_xyzl, save_cloud, write_ply, write_xyzl, CloudFormat};
pub use spatial::{brute_force_radius, SpatialIndex};
pub use voxel::{voxel_downsample, voxelize, VoxelMap, Voxelized};

use nalgebra::Point3;

use crate::{Error, Result};

pub const UNLABELED: i32 = -1;
pub const STEM: i32 = 0;
pub const LEAF: i32 = 1;
pub const SOIL: i32 = 2;

/// Squared Euclidean distance, the single distance predicate shared by
/// every neighborhood query in the crate.
#[inline]
pub fn dist2(a: &Point3<f64>, b: &Point3<f64>) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

/// A plant point cloud with optional per-point labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    coords: Vec<Point3<f64>>,
    colors: Vec<[f64; 3]>,
    semantic: Option<Vec<i32>>,
    instance: Option<Vec<i32>>,
    source_id: String,
}

impl PointCloud {
    /// Builds a cloud, checking every structural invariant.
    pub fn new(
        coords: Vec<Point3<f64>>,
        colors: Vec<[f64; 3]>,
        semantic: Option<Vec<i32>>,
        instance: Option<Vec<i32>>,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        let m = coords.len();
        if colors.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "{} colors for {} points",
                colors.len(),
                m
            )));
        }
        if let Some((i, _)) = coords
            .iter()
            .enumerate()
            .find(|(_, p)| !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()))
        {
            return Err(Error::NonFinite(format!("coordinate of point {i}")));
        }
        for (name, labels) in [("semantic", &semantic), ("instance", &instance)] {
            if let Some(l) = labels {
                if l.len() != m {
                    return Err(Error::DimensionMismatch(format!(
                        "{} {name} labels for {m} points",
                        l.len()
                    )));
                }
                if let Some(bad) = l.iter().find(|&&v| v < UNLABELED) {
                    return Err(Error::invalid(format!("{name} label {bad} below -1")));
                }
            }
        }
        if let Some(inst) = &instance {
            let ok = match &semantic {
                Some(sem) => inst.iter().zip(sem).all(|(&i, &s)| i < 0 || s >= 0),
                None => inst.iter().all(|&i| i < 0),
            };
            if !ok {
                return Err(Error::invalid(
                    "instance label assigned to a point without semantic label",
                ));
            }
        }
        Ok(Self {
            coords,
            colors,
            semantic,
            instance,
            source_id: source_id.into(),
        })
    }

    /// A cloud with coordinates only; colors default to mid gray.
    pub fn from_coords(coords: Vec<Point3<f64>>, source_id: impl Into<String>) -> Result<Self> {
        let colors = vec![[0.5; 3]; coords.len()];
        Self::new(coords, colors, None, None, source_id)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Point3<f64>] {
        &self.coords
    }

    pub fn colors(&self) -> &[[f64; 3]] {
        &self.colors
    }

    pub fn semantic(&self) -> Option<&[i32]> {
        self.semantic.as_deref()
    }

    pub fn instance(&self) -> Option<&[i32]> {
        self.instance.as_deref()
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn set_source_id(&mut self, id: impl Into<String>) {
        self.source_id = id.into();
    }

    /// Errors with [`Error::EmptyInput`] when the cloud has no points.
    pub fn ensure_non_empty(&self) -> Result<()> {
        if self.is_empty() {
            Err(Error::EmptyInput(format!("cloud '{}' has no points", self.source_id)))
        } else {
            Ok(())
        }
    }

    /// Replaces both label arrays, re-checking invariants.
    pub fn with_labels(self, semantic: Option<Vec<i32>>, instance: Option<Vec<i32>>) -> Result<Self> {
        Self::new(self.coords, self.colors, semantic, instance, self.source_id)
    }

    /// Drops all labels.
    pub fn without_labels(mut self) -> Self {
        self.semantic = None;
        self.instance = None;
        self
    }

    /// Replaces coordinates, keeping colors and labels.
    pub fn with_coords(self, coords: Vec<Point3<f64>>) -> Result<Self> {
        Self::new(coords, self.colors, self.semantic, self.instance, self.source_id)
    }

    /// Replaces colors, keeping coordinates and labels.
    pub fn with_colors(self, colors: Vec<[f64; 3]>) -> Result<Self> {
        Self::new(self.coords, colors, self.semantic, self.instance, self.source_id)
    }

    /// Subset of points in the given order, labels carried along.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        let pick = |v: &Vec<i32>| indices.iter().map(|&i| v[i]).collect::<Vec<_>>();
        PointCloud {
            coords: indices.iter().map(|&i| self.coords[i]).collect(),
            colors: indices.iter().map(|&i| self.colors[i]).collect(),
            semantic: self.semantic.as_ref().map(pick),
            instance: self.instance.as_ref().map(pick),
            source_id: self.source_id.clone(),
        }
    }

    pub fn centroid(&self) -> Point3<f64> {
        centroid(&self.coords)
    }

    /// Indices of points with the given semantic label.
    pub fn indices_of_class(&self, class: i32) -> Vec<usize> {
        match &self.semantic {
            Some(sem) => (0..sem.len()).filter(|&i| sem[i] == class).collect(),
            None => Vec::new(),
        }
    }

    /// Ground-truth instances as sorted index lists, ordered by instance id.
    pub fn instance_sets(&self) -> Vec<(i32, Vec<usize>)> {
        let Some(inst) = &self.instance else {
            return Vec::new();
        };
        let mut map = std::collections::BTreeMap::<i32, Vec<usize>>::new();
        for (i, &id) in inst.iter().enumerate() {
            if id >= 0 {
                map.entry(id).or_default().push(i);
            }
        }
        map.into_iter().collect()
    }
}

/// Arithmetic mean of a point set; the origin for an empty slice.
pub fn centroid(points: &[Point3<f64>]) -> Point3<f64> {
    if points.is_empty() {
        return Point3::origin();
    }
    let mut sum = [0.0; 3];
    for p in points {
        sum[0] += p.x;
        sum[1] += p.y;
        sum[2] += p.z;
    }
    let n = points.len() as f64;
    Point3::new(sum[0] / n, sum[1] / n, sum[2] / n)
}
