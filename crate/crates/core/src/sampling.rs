//! Farthest point sampling and generation of sparse supervision sets.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Point3;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cloud::{dist2, PointCloud, UNLABELED};
use crate::{Error, Result};

/// Greedy farthest point sampling.
///
/// The first pick is `start`; every later pick maximizes the minimum squared
/// distance to the points already chosen, ties going to the lowest index.
/// Returns `min(count, M)` indices.
pub fn farthest_point_sample(coords: &[Point3<f64>], count: usize, start: usize) -> Result<Vec<usize>> {
    if coords.is_empty() {
        return Err(Error::EmptyInput("farthest point sampling over zero points".into()));
    }
    if count == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    if start >= coords.len() {
        return Err(Error::invalid(format!(
            "start index {start} out of range for {} points",
            coords.len()
        )));
    }
    let m = coords.len();
    let h = count.min(m);
    let mut picked = vec![false; m];
    let mut min_d = vec![f64::INFINITY; m];
    let mut out = Vec::with_capacity(h);
    let mut current = start;
    loop {
        picked[current] = true;
        out.push(current);
        if out.len() == h {
            break;
        }
        let origin = coords[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..m {
            if picked[i] {
                continue;
            }
            let d = dist2(&coords[i], &origin);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(out)
}

/// Sparse labels on a handful of points of one cloud.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeakLabels {
    /// point index -> (semantic, instance)
    pub entries: BTreeMap<usize, (i32, i32)>,
    /// Requested count; `entries` holds fewer when the cloud has fewer labeled points.
    pub k: usize,
    pub seed: u64,
    pub source_id: String,
}

impl WeakLabels {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Checks that every index is in range for `cloud` and every entry is labeled.
    pub fn validate_against(&self, cloud: &PointCloud) -> Result<()> {
        for (&i, &(s, _)) in &self.entries {
            if i >= cloud.len() {
                return Err(Error::invalid(format!(
                    "weak label index {i} out of range for {} points",
                    cloud.len()
                )));
            }
            if s == UNLABELED {
                return Err(Error::invalid(format!("weak label at {i} is unlabeled")));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("#weaklabels k={} seed={} cloud={}\n", self.k, self.seed, self.source_id);
        for (i, (s, t)) in &self.entries {
            let _ = writeln!(out, "{i} {s} {t}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::EmptyInput("weak-label file".into()))?;
        let rest = header.strip_prefix("#weaklabels").ok_or_else(|| Error::Parse {
            line: 1,
            message: "missing '#weaklabels' header".into(),
        })?;
        let mut k = None;
        let mut seed = None;
        let mut source = None;
        for tok in rest.split_whitespace() {
            let (key, value) = tok.split_once('=').ok_or_else(|| Error::Parse {
                line: 1,
                message: format!("malformed header field '{tok}'"),
            })?;
            let bad = || Error::Parse {
                line: 1,
                message: format!("invalid value for {key}"),
            };
            match key {
                "k" => k = Some(value.parse::<usize>().map_err(|_| bad())?),
                "seed" => seed = Some(value.parse::<u64>().map_err(|_| bad())?),
                "cloud" => source = Some(value.to_string()),
                _ => {
                    return Err(Error::Parse {
                        line: 1,
                        message: format!("unknown header field '{key}'"),
                    })
                }
            }
        }
        let (Some(k), Some(seed), Some(source_id)) = (k, seed, source) else {
            return Err(Error::Parse {
                line: 1,
                message: "header needs k, seed and cloud".into(),
            });
        };
        let mut entries = BTreeMap::new();
        for (n, raw) in lines {
            let line = n + 1;
            let l = raw.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            let toks: Vec<&str> = l.split_whitespace().collect();
            if toks.len() != 3 {
                return Err(Error::Parse {
                    line,
                    message: format!("expected 'index sem inst', found {} fields", toks.len()),
                });
            }
            let err = |what: &str| Error::Parse {
                line,
                message: format!("invalid {what}"),
            };
            let i: usize = toks[0].parse().map_err(|_| err("index"))?;
            let s: i32 = toks[1].parse().map_err(|_| err("semantic label"))?;
            let t: i32 = toks[2].parse().map_err(|_| err("instance label"))?;
            if s < 0 {
                return Err(err("semantic label (must be >= 0)"));
            }
            if entries.insert(i, (s, t)).is_some() {
                return Err(Error::Parse {
                    line,
                    message: format!("duplicate index {i}"),
                });
            }
        }
        Ok(Self {
            entries,
            k,
            seed,
            source_id,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Draws `k` labeled points uniformly without replacement.
///
/// With `stratified`, the budget is split evenly across semantic classes
/// (remainder to the lowest classes); this is an experiment knob, never the default.
pub fn make_weak_labels(cloud: &PointCloud, k: usize, seed: u64, stratified: bool) -> Result<WeakLabels> {
    if k == 0 {
        return Err(Error::invalid("weak-label count must be at least 1"));
    }
    let sem = cloud
        .semantic()
        .ok_or_else(|| Error::invalid(format!("cloud '{}' has no semantic labels", cloud.source_id())))?;
    let labeled: Vec<usize> = (0..cloud.len()).filter(|&i| sem[i] != UNLABELED).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<usize> = if stratified {
        let mut by_class: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
        for &i in &labeled {
            by_class.entry(sem[i]).or_default().push(i);
        }
        let classes = by_class.len().max(1);
        let mut out = Vec::new();
        for (c, (_, pool)) in by_class.iter().enumerate() {
            let quota = k / classes + usize::from(c < k % classes);
            let take = quota.min(pool.len());
            out.extend(index::sample(&mut rng, pool.len(), take).into_iter().map(|j| pool[j]));
        }
        out
    } else {
        let take = k.min(labeled.len());
        index::sample(&mut rng, labeled.len(), take)
            .into_iter()
            .map(|j| labeled[j])
            .collect()
    };
    let inst = cloud.instance();
    let entries = chosen
        .into_iter()
        .map(|i| (i, (sem[i], inst.map_or(UNLABELED, |v| v[i]))))
        .collect();
    Ok(WeakLabels {
        entries,
        k,
        seed,
        source_id: cloud.source_id().to_string(),
    })
}

/// Keeps `ceil(ratio * M)` points chosen uniformly without replacement,
/// preserving their original order.
pub fn random_subsample(cloud: &PointCloud, ratio: f64, seed: u64) -> Result<PointCloud> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid(format!("subsample ratio must be in (0,1], got {ratio}")));
    }
    cloud.ensure_non_empty()?;
    let m = cloud.len();
    let keep = ((ratio * m as f64).ceil() as usize).clamp(1, m);
    if keep == m {
        return Ok(cloud.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, m, keep).into_vec();
    idx.sort_unstable();
    Ok(cloud.select(&idx))
}

/// Removes every point of the given semantic class; order is preserved.
pub fn strip_class(cloud: &PointCloud, class: i32) -> PointCloud {
    match cloud.semantic() {
        Some(sem) => {
            let keep: Vec<usize> = (0..cloud.len()).filter(|&i| sem[i] != class).collect();
            cloud.select(&keep)
        }
        None => cloud.clone(),
    }
}
