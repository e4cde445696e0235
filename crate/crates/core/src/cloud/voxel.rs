use std::collections::HashMap;

use nalgebra::Point3;

use super::{dist2, PointCloud};
use crate::{Error, Result};

/// Mapping from voxel key to the original point indices it contains.
///
/// Voxels are ordered by their smallest member index, so the map is
/// deterministic for a given input order.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelMap {
    voxel_size: f64,
    keys: Vec<[i64; 3]>,
    members: Vec<Vec<usize>>,
}

impl VoxelMap {
    pub fn build(coords: &[Point3<f64>], voxel_size: f64) -> Result<Self> {
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(Error::invalid(format!("voxel size must be positive, got {voxel_size}")));
        }
        let mut lookup: HashMap<[i64; 3], usize> = HashMap::new();
        let mut keys = Vec::new();
        let mut members: Vec<Vec<usize>> = Vec::new();
        for (i, p) in coords.iter().enumerate() {
            let key = Self::key_for(p, voxel_size);
            let slot = *lookup.entry(key).or_insert_with(|| {
                keys.push(key);
                members.push(Vec::new());
                keys.len() - 1
            });
            members[slot].push(i);
        }
        Ok(Self {
            voxel_size,
            keys,
            members,
        })
    }

    pub fn key_for(p: &Point3<f64>, voxel_size: f64) -> [i64; 3] {
        [
            (p.x / voxel_size).floor() as i64,
            (p.y / voxel_size).floor() as i64,
            (p.z / voxel_size).floor() as i64,
        ]
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[[i64; 3]] {
        &self.keys
    }

    pub fn members(&self, voxel: usize) -> &[usize] {
        &self.members[voxel]
    }

    /// For every original point, the row of the voxel holding it.
    pub fn point_to_voxel(&self, num_points: usize) -> Vec<usize> {
        let mut out = vec![usize::MAX; num_points];
        for (v, m) in self.members.iter().enumerate() {
            for &i in m {
                out[i] = v;
            }
        }
        out
    }
}

/// Output of [`voxelize`]: the downsampled cloud plus the bookkeeping that
/// maps it back onto the original points.
#[derive(Debug, Clone)]
pub struct Voxelized {
    pub cloud: PointCloud,
    /// Downsampled row -> member closest to the voxel centroid.
    pub index_map: Vec<usize>,
    pub map: VoxelMap,
}

impl Voxelized {
    /// Broadcasts per-voxel values back to every original point.
    pub fn scatter<T: Clone>(&self, per_voxel: &[T], num_points: usize) -> Vec<T>
    where
        T: Default,
    {
        let mut out = vec![T::default(); num_points];
        for (v, value) in per_voxel.iter().enumerate() {
            for &i in self.map.members(v) {
                out[i] = value.clone();
            }
        }
        out
    }
}

/// Majority vote with ties going to the lowest label value.
fn majority(labels: impl Iterator<Item = i32>) -> i32 {
    let mut counts: Vec<(i32, usize)> = Vec::new();
    for l in labels {
        match counts.iter_mut().find(|(v, _)| *v == l) {
            Some((_, c)) => *c += 1,
            None => counts.push((l, 1)),
        }
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(v, _)| v)
        .unwrap_or(super::UNLABELED)
}

/// One point per occupied voxel: centroid coordinates, mean color and
/// majority labels. The instance vote only counts members carrying the
/// winning semantic label.
pub fn voxelize(cloud: &PointCloud, voxel_size: f64) -> Result<Voxelized> {
    let map = VoxelMap::build(cloud.coords(), voxel_size)?;
    let n = map.len();
    let mut coords = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    let mut index_map = Vec::with_capacity(n);
    let mut sem_out = cloud.semantic().map(|_| Vec::with_capacity(n));
    let mut inst_out = cloud.instance().map(|_| Vec::with_capacity(n));
    for v in 0..n {
        let members = map.members(v);
        let pts: Vec<Point3<f64>> = members.iter().map(|&i| cloud.coords()[i]).collect();
        let c = super::centroid(&pts);
        let mut rgb = [0.0; 3];
        for &i in members {
            for (a, ch) in rgb.iter_mut().enumerate() {
                *ch += cloud.colors()[i][a];
            }
        }
        let k = members.len() as f64;
        colors.push(rgb.map(|x| (x / k).clamp(0.0, 1.0)));
        let rep = members
            .iter()
            .copied()
            .min_by(|&a, &b| dist2(&cloud.coords()[a], &c).total_cmp(&dist2(&cloud.coords()[b], &c)).then(a.cmp(&b)))
            .expect("voxels are never empty");
        index_map.push(rep);
        coords.push(c);
        let winner = cloud.semantic().map(|sem| majority(members.iter().map(|&i| sem[i])));
        if let (Some(out), Some(w)) = (sem_out.as_mut(), winner) {
            out.push(w);
        }
        if let (Some(out), Some(inst)) = (inst_out.as_mut(), cloud.instance()) {
            let label = match (winner, cloud.semantic()) {
                (Some(w), Some(sem)) if w >= 0 => {
                    majority(members.iter().filter(|&&i| sem[i] == w).map(|&i| inst[i]))
                }
                _ => super::UNLABELED,
            };
            out.push(label);
        }
    }
    let out = PointCloud::new(coords, colors, sem_out, inst_out, cloud.source_id())?;
    Ok(Voxelized {
        cloud: out,
        index_map,
        map,
    })
}

/// Voxel-grid downsampling returning the reduced cloud and, per output
/// point, the original member nearest to the voxel centroid.
pub fn voxel_downsample(cloud: &PointCloud, voxel_size: f64) -> Result<(PointCloud, Vec<usize>)> {
    let v = voxelize(cloud, voxel_size)?;
    Ok((v.cloud, v.index_map))
}
