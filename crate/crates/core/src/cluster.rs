//! Ball clustering on original and offset-shifted coordinates and the union
//! of both cluster sets.

use std::collections::VecDeque;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::cloud::{SpatialIndex, LEAF};
use crate::metrics::set_iou;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Original,
    Shifted,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstancePrediction {
    /// Sorted, unique point indices.
    pub indices: Vec<usize>,
    pub class: i32,
    pub score: f64,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    /// Ball radius on original coordinates, mm.
    pub radius: f64,
    /// Ball radius on shifted coordinates, mm.
    pub shifted_radius: f64,
    pub min_size: usize,
    /// Pairs with IoU strictly above this merge; values >= 1 disable merging.
    pub merge_iou: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            radius: 1.5,
            shifted_radius: 1.5,
            min_size: 50,
            merge_iou: 0.75,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.shifted_radius > 0.0) {
            return Err(Error::Config("cluster radii must be positive".into()));
        }
        if !(self.merge_iou >= 0.0) {
            return Err(Error::Config("merge_iou must be non-negative".into()));
        }
        Ok(())
    }
}

/// Connected components of masked points linked within `radius`, each
/// sorted ascending, ordered by smallest member, with components smaller
/// than `min_size` dropped.
pub fn ball_cluster(coords: &[Point3<f64>], mask: &[bool], radius: f64, min_size: usize) -> Result<Vec<Vec<usize>>> {
    if !(radius > 0.0) {
        return Err(Error::invalid(format!("cluster radius must be positive, got {radius}")));
    }
    if mask.len() != coords.len() {
        return Err(Error::DimensionMismatch("mask and coords differ in length".into()));
    }
    let members: Vec<usize> = (0..coords.len()).filter(|&i| mask[i]).collect();
    if members.is_empty() {
        return Ok(Vec::new());
    }
    let sub: Vec<Point3<f64>> = members.iter().map(|&i| coords[i]).collect();
    let index = SpatialIndex::build(&sub, radius)?;
    let mut label = vec![usize::MAX; sub.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for s in 0..sub.len() {
        if label[s] != usize::MAX {
            continue;
        }
        let id = out.len();
        label[s] = id;
        queue.push_back(s);
        let mut comp = Vec::new();
        while let Some(u) = queue.pop_front() {
            comp.push(members[u]);
            index.for_each_within(&sub[u], radius, |v| {
                if label[v] == usize::MAX {
                    label[v] = id;
                    queue.push_back(v);
                }
            });
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out.retain(|c| c.len() >= min_size);
    Ok(out)
}

/// Breadth-first region grow from `seed` over the ball graph of radius
/// `radius`, stopping after `max_points` points. Returns sorted indices.
pub fn region_grow(coords: &[Point3<f64>], seed: usize, radius: f64, max_points: usize) -> Result<Vec<usize>> {
    if seed >= coords.len() {
        return Err(Error::invalid(format!("seed index {seed} out of range")));
    }
    if !(radius > 0.0) {
        return Err(Error::invalid("region radius must be positive"));
    }
    let index = SpatialIndex::build(coords, radius)?;
    let mut seen = vec![false; coords.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::from([seed]);
    seen[seed] = true;
    while let Some(u) = queue.pop_front() {
        if out.len() >= max_points {
            break;
        }
        out.push(u);
        for v in index.radius_neighbors(&coords[u], radius) {
            if !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    out.sort_unstable();
    Ok(out)
}

fn mean_score(indices: &[usize], leaf_prob: &[f64]) -> f64 {
    indices.iter().map(|&i| leaf_prob[i]).sum::<f64>() / indices.len() as f64
}

fn union_sorted(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        let take_a = j >= b.len() || (i < a.len() && a[i] <= b[j]);
        let v = if take_a { a[i] } else { b[j] };
        if take_a {
            i += 1;
            if j < b.len() && b[j] == v {
                j += 1;
            }
        } else {
            j += 1;
        }
        out.push(v);
    }
    out
}

/// Concatenates clusters from original (`cc`) and shifted (`cs`)
/// coordinates, merges pairs whose IoU exceeds `merge_iou` until none
/// remain, scores each cluster by mean leaf probability and sorts by score
/// (descending, stable).
pub fn dual_set_union(
    cc: &[Vec<usize>],
    cs: &[Vec<usize>],
    merge_iou: f64,
    leaf_prob: &[f64],
) -> Vec<InstancePrediction> {
    let mut items: Vec<(Vec<usize>, Provenance)> = cc
        .iter()
        .map(|c| (c.clone(), Provenance::Original))
        .chain(cs.iter().map(|c| (c.clone(), Provenance::Shifted)))
        .filter(|(c, _)| !c.is_empty())
        .collect();
    'outer: loop {
        for i in 0..items.len() {
            for j in (i + 1)..items.len() {
                if set_iou(&items[i].0, &items[j].0) > merge_iou {
                    let (b, pb) = items.remove(j);
                    let (a, pa) = &items[i];
                    let merged = union_sorted(a, &b);
                    let prov = if *pa == pb { pb } else { Provenance::Both };
                    items[i] = (merged, prov);
                    continue 'outer;
                }
            }
        }
        break;
    }
    let mut out: Vec<InstancePrediction> = items
        .into_iter()
        .map(|(indices, provenance)| InstancePrediction {
            score: mean_score(&indices, leaf_prob),
            indices,
            class: LEAF,
            provenance,
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}

/// Full dual-set clustering of leaf-predicted points.
pub fn dual_set_cluster(
    coords: &[Point3<f64>],
    offsets: &[nalgebra::Vector3<f64>],
    leaf_mask: &[bool],
    leaf_prob: &[f64],
    cfg: &ClusterConfig,
) -> Result<Vec<InstancePrediction>> {
    cfg.validate()?;
    if offsets.len() != coords.len() || leaf_prob.len() != coords.len() {
        return Err(Error::DimensionMismatch("offsets/probabilities do not match coords".into()));
    }
    let cc = ball_cluster(coords, leaf_mask, cfg.radius, cfg.min_size)?;
    let shifted: Vec<Point3<f64>> = coords.iter().zip(offsets).map(|(p, o)| p + o).collect();
    let cs = ball_cluster(&shifted, leaf_mask, cfg.shifted_radius, cfg.min_size)?;
    Ok(dual_set_union(&cc, &cs, cfg.merge_iou, leaf_prob))
}
