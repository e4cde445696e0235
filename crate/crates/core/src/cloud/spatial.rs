use std::collections::HashMap;

use nalgebra::Point3;

use super::dist2;
use crate::{Error, Result};

type CellKey = [i64; 3];

/// Uniform-grid hash over a fixed coordinate array.
///
/// Points are bucketed by `floor(coord / cell_size)`; radius and kNN queries
/// visit only the buckets overlapping the query region.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    cell_size: f64,
    coords: Vec<Point3<f64>>,
    /// Point indices grouped by cell, ascending within each cell.
    order: Vec<usize>,
    cells: HashMap<CellKey, (usize, usize)>,
    min_key: CellKey,
    max_key: CellKey,
}

fn key_of(p: &Point3<f64>, cell: f64) -> CellKey {
    [
        (p.x / cell).floor() as i64,
        (p.y / cell).floor() as i64,
        (p.z / cell).floor() as i64,
    ]
}

impl SpatialIndex {
    pub fn build(coords: &[Point3<f64>], cell_size: f64) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::EmptyInput("spatial index over zero points".into()));
        }
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::invalid(format!("cell size must be positive, got {cell_size}")));
        }
        let mut keyed: Vec<(CellKey, usize)> =
            coords.iter().enumerate().map(|(i, p)| (key_of(p, cell_size), i)).collect();
        keyed.sort_unstable();
        let mut cells = HashMap::new();
        let mut order = Vec::with_capacity(keyed.len());
        let mut min_key = [i64::MAX; 3];
        let mut max_key = [i64::MIN; 3];
        let mut start = 0;
        while start < keyed.len() {
            let key = keyed[start].0;
            let mut end = start;
            while end < keyed.len() && keyed[end].0 == key {
                order.push(keyed[end].1);
                end += 1;
            }
            for a in 0..3 {
                min_key[a] = min_key[a].min(key[a]);
                max_key[a] = max_key[a].max(key[a]);
            }
            cells.insert(key, (start, end));
            start = end;
        }
        Ok(Self {
            cell_size,
            coords: coords.to_vec(),
            order,
            cells,
            min_key,
            max_key,
        })
    }

    /// Builds with a cell size targeting a few points per occupied cell.
    pub fn build_auto(coords: &[Point3<f64>]) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::EmptyInput("spatial index over zero points".into()));
        }
        let mut lo = coords[0];
        let mut hi = coords[0];
        for p in coords {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let ext: Vec<f64> = (0..3).map(|a| (hi[a] - lo[a]).max(1e-9)).collect();
        // Plant clouds are surfaces; size cells from the area of the two largest extents.
        let mut sorted = ext.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let area = sorted[0] * sorted[1];
        // Nearly collinear clouds fall back to the spacing along the longest extent.
        let n = coords.len() as f64;
        let cell = (area / n * 4.0).sqrt().max(sorted[0] * 4.0 / n).max(1e-6);
        Self::build(coords, cell)
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
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

    fn cell_points(&self, key: &CellKey) -> &[usize] {
        match self.cells.get(key) {
            Some(&(s, e)) => &self.order[s..e],
            None => &[],
        }
    }

    /// Calls `f(i)` for every point within distance `r` of `query`, unordered.
    pub fn for_each_within(&self, query: &Point3<f64>, r: f64, mut f: impl FnMut(usize)) {
        let r2 = r * r;
        let lo = key_of(&(query - nalgebra::Vector3::repeat(r)), self.cell_size);
        let hi = key_of(&(query + nalgebra::Vector3::repeat(r)), self.cell_size);
        let lo = [0, 1, 2].map(|a| lo[a].max(self.min_key[a]));
        let hi = [0, 1, 2].map(|a| hi[a].min(self.max_key[a]));
        if (0..3).any(|a| lo[a] > hi[a]) {
            return;
        }
        let span: i128 = (0..3).map(|a| (hi[a] - lo[a] + 1) as i128).product();
        if span > self.cells.len() as i128 {
            for &(s, e) in self.cells.values() {
                for &i in &self.order[s..e] {
                    if dist2(&self.coords[i], query) <= r2 {
                        f(i);
                    }
                }
            }
            return;
        }
        for x in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for z in lo[2]..=hi[2] {
                    for &i in self.cell_points(&[x, y, z]) {
                        if dist2(&self.coords[i], query) <= r2 {
                            f(i);
                        }
                    }
                }
            }
        }
    }

    /// All indices `i` with `|coords[i] - query| <= r`, ascending.
    pub fn radius_neighbors(&self, query: &Point3<f64>, r: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.for_each_within(query, r, |i| out.push(i));
        out.sort_unstable();
        out
    }

    /// The `k` nearest points to `query` as `(index, distance)`, ordered by
    /// distance then index. Returns fewer than `k` only when the index is smaller.
    pub fn k_nearest(&self, query: &Point3<f64>, k: usize) -> Vec<(usize, f64)> {
        if k == 0 {
            return Vec::new();
        }
        let center = key_of(query, self.cell_size);
        let mut cand: Vec<(f64, usize)> = Vec::new();
        let finish = |mut cand: Vec<(f64, usize)>| {
            cand.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cand.truncate(k);
            cand.into_iter().map(|(d2, i)| (i, d2.sqrt())).collect()
        };
        if k >= self.coords.len() {
            return finish((0..self.coords.len()).map(|i| (dist2(&self.coords[i], query), i)).collect());
        }
        // Rings closer than the occupied box hold no points.
        let mut ring = (0..3)
            .map(|a| (self.min_key[a] - center[a]).max(center[a] - self.max_key[a]).max(0))
            .max()
            .unwrap_or(0);
        loop {
            // Once a shell outgrows the occupied cells, a scan is cheaper.
            let shell = (2 * ring as i128 + 1).pow(2) * 6;
            if shell > self.cells.len() as i128 * 8 {
                return finish((0..self.coords.len()).map(|i| (dist2(&self.coords[i], query), i)).collect());
            }
            self.visit_ring(center, ring, |i| cand.push((dist2(&self.coords[i], query), i)));
            if cand.len() >= k {
                cand.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                cand.truncate(k);
                // Unvisited cells are at least ring * cell_size away.
                let bound = ring as f64 * self.cell_size;
                if cand[k - 1].0 <= bound * bound {
                    return finish(cand);
                }
            }
            ring += 1;
        }
    }

    fn visit_ring(&self, c: CellKey, ring: i64, mut f: impl FnMut(usize)) {
        let (lo, hi) = (self.min_key, self.max_key);
        for x in (c[0] - ring).max(lo[0])..=(c[0] + ring).min(hi[0]) {
            for y in (c[1] - ring).max(lo[1])..=(c[1] + ring).min(hi[1]) {
                let on_xy_shell = (x - c[0]).abs() == ring || (y - c[1]).abs() == ring;
                let mut visit = |z: i64| {
                    for &i in self.cell_points(&[x, y, z]) {
                        f(i);
                    }
                };
                if on_xy_shell {
                    for z in (c[2] - ring).max(lo[2])..=(c[2] + ring).min(hi[2]) {
                        visit(z);
                    }
                } else {
                    visit(c[2] - ring);
                    visit(c[2] + ring);
                }
            }
        }
    }
}

/// Reference O(M) radius filter.
pub fn brute_force_radius(coords: &[Point3<f64>], query: &Point3<f64>, r: f64) -> Vec<usize> {
    let r2 = r * r;
    (0..coords.len()).filter(|&i| dist2(&coords[i], query) <= r2).collect()
}
