//! Organ-level traits: stem diameter, leaf length and leaf width.
//!
//! Leaf measurements are geodesic: shortest paths on an undirected
//! k-nearest-neighbor graph with Euclidean edge weights between extreme
//! points along the principal axes, pulled taut to remove the graph's
//! zigzag. `extract_traits` denoises leaf surfaces before measuring.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use nalgebra::{Matrix3, Point3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::cloud::{centroid, PointCloud, SpatialIndex, LEAF, STEM};
use crate::{Error, Result};

/// Neighbors per point in the geodesic graph.
pub const DEFAULT_K: usize = 10;
/// Neighbors in the local plane fits used to denoise leaf surfaces.
pub const DENOISE_K: usize = 16;
const LEAF_BINS: usize = 5;
const MIN_BIN_POINTS: usize = 3;
/// Half-thickness of a width strip in median nearest-neighbor spacings.
const STRIP_SPACINGS: f64 = 1.0;
/// Deviation allowed when pulling a geodesic taut, in the same units.
const TAUT_SPACINGS: f64 = 1.0;
const MIN_STEM_POINTS: usize = 8;
/// Relative tolerance for ties and degenerate spreads along an axis.
const AXIS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub centroid: Point3<f64>,
    /// Unit axes ordered by descending variance.
    pub axes: [Vector3<f64>; 3],
    pub eigenvalues: [f64; 3],
}

impl Pca {
    pub fn project(&self, p: &Point3<f64>, axis: usize) -> f64 {
        (p - self.centroid).dot(&self.axes[axis])
    }
}

/// Principal axes of the population covariance. Each axis is signed so that
/// its largest-magnitude component is positive.
pub fn pca_axes(points: &[Point3<f64>]) -> Result<Pca> {
    if points.is_empty() {
        return Err(Error::EmptyInput("PCA of an empty point set".into()));
    }
    let c = centroid(points);
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
    }
    cov /= points.len() as f64;
    let scale = cov.abs().max();
    if !(scale > 0.0) {
        return Err(Error::Degenerate("all points coincide (rank-0 covariance)".into()));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut axes = [Vector3::zeros(); 3];
    let mut eigenvalues = [0.0; 3];
    for (slot, &k) in order.iter().enumerate() {
        let mut v: Vector3<f64> = eig.eigenvectors.column(k).into_owned().normalize();
        let mut lead = 0;
        for a in 1..3 {
            if v[a].abs() > v[lead].abs() {
                lead = a;
            }
        }
        if v[lead] < 0.0 {
            v = -v;
        }
        axes[slot] = v;
        eigenvalues[slot] = eig.eigenvalues[k].max(0.0);
    }
    Ok(Pca {
        centroid: c,
        axes,
        eigenvalues,
    })
}

/// Total-least-squares line: centroid and first principal axis.
pub fn fit_line_tls(points: &[Point3<f64>]) -> Result<(Point3<f64>, Vector3<f64>)> {
    let pca = pca_axes(points)?;
    Ok((pca.centroid, pca.axes[0]))
}

/// Distance from `p` to the line through `origin` with unit `dir`.
pub fn point_line_distance(p: &Point3<f64>, origin: &Point3<f64>, dir: &Vector3<f64>) -> f64 {
    let d = p - origin;
    (d - dir * d.dot(dir)).norm()
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Twice the median distance of the lowest quarter (by z range) of the stem
/// points to their total-least-squares axis.
pub fn stem_diameter(points: &[Point3<f64>]) -> Result<f64> {
    if points.len() < MIN_STEM_POINTS {
        return Err(Error::invalid(format!(
            "stem diameter needs at least {MIN_STEM_POINTS} points, got {}",
            points.len()
        )));
    }
    let zmin = points.iter().map(|p| p.z).fold(f64::INFINITY, f64::min);
    let zmax = points.iter().map(|p| p.z).fold(f64::NEG_INFINITY, f64::max);
    if !(zmax > zmin) {
        return Err(Error::Degenerate("stem points span no z range".into()));
    }
    let cut = zmin + (zmax - zmin) / 4.0;
    let low: Vec<Point3<f64>> = points.iter().copied().filter(|p| p.z <= cut).collect();
    if low.len() < 3 {
        return Err(Error::Degenerate(format!("only {} points in the lowest stem part", low.len())));
    }
    let (origin, dir) = fit_line_tls(&low)?;
    let mut dists: Vec<f64> = low.iter().map(|p| point_line_distance(p, &origin, &dir)).collect();
    Ok(2.0 * median(&mut dists))
}

/// Undirected kNN graph with Euclidean edge weights.
#[derive(Debug, Clone)]
pub struct KnnGraph {
    adj: Vec<Vec<(usize, f64)>>,
}

#[derive(PartialEq)]
struct HeapItem(f64, usize);

impl Eq for HeapItem {}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

impl KnnGraph {
    /// Links every point to its `k` nearest others (ties by index); an edge
    /// exists if either endpoint selected the other.
    pub fn build(points: &[Point3<f64>], k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("kNN graph needs k >= 1"));
        }
        if points.len() < k + 1 {
            return Err(Error::invalid(format!(
                "kNN graph with k={k} needs at least {} points, got {}",
                k + 1,
                points.len()
            )));
        }
        let index = SpatialIndex::build_auto(points)?;
        let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); points.len()];
        for (i, p) in points.iter().enumerate() {
            for (j, d) in index.k_nearest(p, k + 1).into_iter().filter(|&(j, _)| j != i).take(k) {
                adj[i].push((j, d));
                adj[j].push((i, d));
            }
        }
        for list in &mut adj {
            list.sort_by(|a, b| a.0.cmp(&b.0));
            list.dedup_by_key(|e| e.0);
        }
        Ok(Self { adj })
    }

    pub fn len(&self) -> usize {
        self.adj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adj.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.adj[i]
    }

    /// Dijkstra distances from `src` to every node (`INFINITY` if unreachable).
    pub fn distances_from(&self, src: usize) -> Vec<f64> {
        self.dijkstra(src, None)
    }

    /// Shortest path length, or `None` when `dst` is unreachable.
    pub fn path_length(&self, src: usize, dst: usize) -> Option<f64> {
        let d = self.dijkstra(src, Some(dst))[dst];
        d.is_finite().then_some(d)
    }

    /// Nodes of a shortest path from `src` to `dst`, both included.
    pub fn path_nodes(&self, src: usize, dst: usize) -> Option<Vec<usize>> {
        let mut prev = vec![usize::MAX; self.adj.len()];
        let dist = self.dijkstra_with(src, Some(dst), &mut prev);
        if !dist[dst].is_finite() {
            return None;
        }
        let mut path = vec![dst];
        while *path.last().unwrap() != src {
            path.push(prev[*path.last().unwrap()]);
        }
        path.reverse();
        Some(path)
    }

    fn dijkstra(&self, src: usize, target: Option<usize>) -> Vec<f64> {
        self.dijkstra_with(src, target, &mut vec![usize::MAX; self.adj.len()])
    }

    fn dijkstra_with(&self, src: usize, target: Option<usize>, prev: &mut [usize]) -> Vec<f64> {
        let mut dist = vec![f64::INFINITY; self.adj.len()];
        let mut heap = BinaryHeap::new();
        dist[src] = 0.0;
        heap.push(HeapItem(0.0, src));
        while let Some(HeapItem(d, u)) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            if Some(u) == target {
                break;
            }
            for &(v, w) in &self.adj[u] {
                let nd = d + w;
                if nd < dist[v] {
                    dist[v] = nd;
                    prev[v] = u;
                    heap.push(HeapItem(nd, v));
                }
            }
        }
        dist
    }
}

/// Geodesic distance between points `i` and `j` on the kNN graph.
pub fn shortest_path(points: &[Point3<f64>], i: usize, j: usize, k: usize) -> Result<Option<f64>> {
    if i >= points.len() || j >= points.len() {
        return Err(Error::invalid("shortest_path index out of range"));
    }
    if i == j {
        return Ok(Some(0.0));
    }
    Ok(KnnGraph::build(points, k)?.path_length(i, j))
}

/// Indices of the minimum and maximum of `values`; values within
/// `tol` of the extreme tie and go to the lowest index.
fn extremes(values: &[(usize, f64)], tol: f64) -> (usize, usize) {
    let lo = values.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
    let hi = values.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
    let first = |target: f64| {
        values
            .iter()
            .filter(|v| (v.1 - target).abs() <= tol)
            .map(|v| v.0)
            .min()
            .expect("non-empty")
    };
    (first(lo), first(hi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeodesicMeasure {
    pub value: f64,
    pub endpoints: (usize, usize),
    /// The endpoints were disconnected and the straight-line distance was used.
    pub fallback: bool,
}

fn pc_extremes(points: &[Point3<f64>], pca: &Pca, axis: usize, subset: &[usize]) -> ((usize, usize), f64) {
    let proj: Vec<(usize, f64)> = subset.iter().map(|&i| (i, pca.project(&points[i], axis))).collect();
    let lo = proj.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
    let hi = proj.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
    let extent = pca.eigenvalues[0].sqrt().max(f64::MIN_POSITIVE);
    (extremes(&proj, AXIS_TOL * extent), hi - lo)
}

/// Length of `path` after pulling it taut: runs of vertices are replaced by
/// their chord while every skipped vertex stays within `tol` of it. This
/// removes the zigzag imposed by the graph's few edge directions but still
/// bends around holes and folds. The greedy pass runs from both ends and the
/// shorter result is kept, so the value does not depend on path direction.
pub fn taut_length(points: &[Point3<f64>], path: &[usize], tol: f64) -> f64 {
    let reversed: Vec<usize> = path.iter().rev().copied().collect();
    pull_taut(points, path, tol).min(pull_taut(points, &reversed, tol))
}

fn pull_taut(points: &[Point3<f64>], path: &[usize], tol: f64) -> f64 {
    let mut total = 0.0;
    let mut i = 0;
    while i + 1 < path.len() {
        let mut j = i + 1;
        while j + 1 < path.len() {
            let (a, b) = (points[path[i]], points[path[j + 1]]);
            let dir = b - a;
            let len = dir.norm();
            let fits = path[i + 1..=j].iter().all(|&m| {
                let d = points[m] - a;
                let t = (d.dot(&dir) / (len * len)).clamp(0.0, 1.0);
                (d - dir * t).norm() <= tol
            });
            if !fits {
                break;
            }
            j += 1;
        }
        total += (points[path[j]] - points[path[i]]).norm();
        i = j;
    }
    total
}

fn median_spacing(graph: &KnnGraph) -> f64 {
    let mut nearest: Vec<f64> =
        (0..graph.len()).filter_map(|i| graph.neighbors(i).iter().map(|e| e.1).reduce(f64::min)).collect();
    median(&mut nearest)
}

fn measure(graph: &KnnGraph, points: &[Point3<f64>], a: usize, b: usize, tol: f64) -> GeodesicMeasure {
    match graph.path_nodes(a, b) {
        Some(path) => GeodesicMeasure {
            value: taut_length(points, &path, tol),
            endpoints: (a, b),
            fallback: false,
        },
        None => GeodesicMeasure {
            value: (points[a] - points[b]).norm(),
            endpoints: (a, b),
            fallback: true,
        },
    }
}

fn leaf_precheck(points: &[Point3<f64>], k: usize) -> Result<()> {
    if points.len() < k + 1 {
        return Err(Error::invalid(format!(
            "leaf measurement needs at least {} points, got {}",
            k + 1,
            points.len()
        )));
    }
    Ok(())
}

/// Geodesic distance between the extreme points along the first principal axis.
pub fn leaf_length(points: &[Point3<f64>], k: usize) -> Result<GeodesicMeasure> {
    leaf_precheck(points, k)?;
    let pca = pca_axes(points)?;
    let graph = KnnGraph::build(points, k)?;
    leaf_length_with(points, &pca, &graph)
}

fn leaf_length_with(points: &[Point3<f64>], pca: &Pca, graph: &KnnGraph) -> Result<GeodesicMeasure> {
    let all: Vec<usize> = (0..points.len()).collect();
    let ((a, b), _) = pc_extremes(points, pca, 0, &all);
    Ok(measure(graph, points, a, b, TAUT_SPACINGS * median_spacing(graph)))
}

/// Maximum geodesic distance between extreme points along the second and
/// third principal axes, taken within five equal slices along the first.
pub fn leaf_width(points: &[Point3<f64>], k: usize) -> Result<GeodesicMeasure> {
    leaf_precheck(points, k)?;
    let pca = pca_axes(points)?;
    let graph = KnnGraph::build(points, k)?;
    leaf_width_with(points, &pca, &graph)
}

fn leaf_width_with(points: &[Point3<f64>], pca: &Pca, graph: &KnnGraph) -> Result<GeodesicMeasure> {
    let proj: Vec<f64> = points.iter().map(|p| pca.project(p, 0)).collect();
    let lo = proj.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = proj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let step = (hi - lo) / LEAF_BINS as f64;
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); LEAF_BINS];
    for (i, t) in proj.iter().enumerate() {
        let b = if step > 0.0 {
            (((t - lo) / step).floor() as usize).min(LEAF_BINS - 1)
        } else {
            0
        };
        bins[b].push(i);
    }
    let degenerate_spread = AXIS_TOL * pca.eigenvalues[0].sqrt().max(f64::MIN_POSITIVE) * 10.0;
    let spacing = median_spacing(graph);
    let half_strip = STRIP_SPACINGS * spacing;
    let mut best: Option<GeodesicMeasure> = None;
    for (k, bin) in bins.iter().enumerate().filter(|(_, b)| b.len() >= MIN_BIN_POINTS) {
        // End points come from a thin strip across the middle of the slice so
        // that the pair faces straight across the blade.
        let station = lo + (k as f64 + 0.5) * step;
        let strip: Vec<usize> = bin.iter().copied().filter(|&i| (proj[i] - station).abs() <= half_strip).collect();
        let bin = if strip.len() >= MIN_BIN_POINTS { &strip } else { bin };
        let pairs = [1, 2].map(|axis| pc_extremes(points, pca, axis, bin));
        for (k, &((a, b), spread)) in pairs.iter().enumerate() {
            // A third-axis pair only spans the blade when the slice is folded
            // more than it is wide; otherwise it runs diagonally.
            if a == b || spread <= degenerate_spread || (k == 1 && spread <= pairs[0].1) {
                continue;
            }
            let m = measure(graph, points, a, b, TAUT_SPACINGS * spacing);
            if best.as_ref().is_none_or(|cur| m.value > cur.value) {
                best = Some(m);
            }
        }
    }
    best.ok_or_else(|| Error::Degenerate("every leaf-width slice is degenerate".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafTraits {
    pub instance: i32,
    pub points: usize,
    pub length: f64,
    pub width: f64,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitReport {
    pub cloud_id: String,
    pub provenance: String,
    pub stem_diameter: Option<f64>,
    pub leaves: Vec<LeafTraits>,
    /// Problems that prevented a trait from being measured.
    pub notes: Vec<String>,
}

/// Projects every point onto the plane fitted to its `k` nearest neighbors,
/// removing scanner noise normal to the surface while leaving the outline in
/// place.
pub fn denoise_surface(points: &[Point3<f64>], k: usize) -> Result<Vec<Point3<f64>>> {
    if points.len() < k + 1 || k < 3 {
        return Err(Error::invalid(format!("surface denoising with k={k} needs k >= 3 and k+1 points")));
    }
    let index = SpatialIndex::build_auto(points)?;
    let out = points
        .iter()
        .map(|p| {
            let local: Vec<Point3<f64>> = index.k_nearest(p, k + 1).into_iter().map(|(j, _)| points[j]).collect();
            match pca_axes(&local) {
                Ok(pca) => p - pca.axes[2] * pca.project(p, 2),
                Err(_) => *p,
            }
        })
        .collect();
    Ok(out)
}

/// Measures every organ of a labeled cloud. Leaf instances with fewer than
/// `min_leaf_points` points are skipped.
pub fn extract_traits(cloud: &PointCloud, min_leaf_points: usize, provenance: &str) -> Result<TraitReport> {
    let sem = cloud
        .semantic()
        .ok_or_else(|| Error::invalid("trait extraction needs semantic labels"))?;
    let coords = cloud.coords();
    let mut notes = Vec::new();
    let stem: Vec<Point3<f64>> = (0..cloud.len()).filter(|&i| sem[i] == STEM).map(|i| coords[i]).collect();
    let stem_diameter = match stem_diameter(&stem) {
        Ok(d) => Some(d),
        Err(e) => {
            notes.push(format!("stem: {e}"));
            None
        }
    };
    let mut groups: BTreeMap<i32, Vec<Point3<f64>>> = BTreeMap::new();
    if let Some(inst) = cloud.instance() {
        for i in 0..cloud.len() {
            if sem[i] == LEAF && inst[i] >= 0 {
                groups.entry(inst[i]).or_default().push(coords[i]);
            }
        }
    }
    let mut leaves = Vec::new();
    for (id, pts) in groups {
        if pts.len() < min_leaf_points.max(DENOISE_K + 1) {
            continue;
        }
        let result = denoise_surface(&pts, DENOISE_K).and_then(|pts| {
            let pca = pca_axes(&pts)?;
            let graph = KnnGraph::build(&pts, DEFAULT_K)?;
            Ok((leaf_length_with(&pts, &pca, &graph)?, leaf_width_with(&pts, &pca, &graph)?))
        });
        match result {
            Ok((len, wid)) => {
                let mut flags = Vec::new();
                if len.fallback {
                    flags.push("length_disconnected".to_string());
                }
                if wid.fallback {
                    flags.push("width_disconnected".to_string());
                }
                leaves.push(LeafTraits {
                    instance: id,
                    points: pts.len(),
                    length: len.value,
                    width: wid.value,
                    flags,
                });
            }
            Err(e) => notes.push(format!("leaf {id}: {e}")),
        }
    }
    Ok(TraitReport {
        cloud_id: cloud.source_id().to_string(),
        provenance: provenance.to_string(),
        stem_diameter,
        leaves,
        notes,
    })
}

impl TraitReport {
    /// Rows of `cloud_id,trait,organ_id,value_mm,flags` (no header).
    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        if let Some(d) = self.stem_diameter {
            s.push_str(&format!("{},stem_diameter,stem,{d:.6},\n", self.cloud_id));
        }
        for leaf in &self.leaves {
            let flags = leaf.flags.join(";");
            s.push_str(&format!(
                "{},leaf_length,{},{:.6},{flags}\n",
                self.cloud_id, leaf.instance, leaf.length
            ));
            s.push_str(&format!(
                "{},leaf_width,{},{:.6},{flags}\n",
                self.cloud_id, leaf.instance, leaf.width
            ));
        }
        s
    }
}

pub const TRAIT_CSV_HEADER: &str = "cloud_id,trait,organ_id,value_mm,flags";
