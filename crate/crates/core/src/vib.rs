//! Viewpoint-bottleneck self-supervised pretraining.
//!
//! Two augmented views of the same voxelized cloud pass through the shared
//! backbone. Rows of both feature matrices are sampled with one farthest
//! point sampling index list (computed on the un-augmented coordinates), so
//! row `i` of each view describes the same point. The loss pushes the
//! cross-correlation of standardized features toward identity.

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{random_transform_with, AugmentConfig};
use crate::cloud::{voxelize, PointCloud};
use crate::nn::{
    train, vib_terms, BackboneConfig, Checkpoint, Graph, Matrix, Model, ModelConfig, NodeId, ParamStore, Schedule,
    StdMode, StepLoss, TrainEvent, TrainMeta,
};
use crate::sampling::farthest_point_sample;
use crate::{Error, Result};

/// Variance floor of the correlation standardization.
pub const CORR_EPS: f64 = 1e-5;
pub(crate) const PRETRAIN_TAG: u64 = 1;

/// `D x D` cross-correlation of two sampled feature matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossCorrelation {
    pub z: Matrix,
    pub h: usize,
    pub lambda: f64,
}

fn empty_store() -> &'static ParamStore {
    static STORE: OnceLock<ParamStore> = OnceLock::new();
    STORE.get_or_init(ParamStore::new)
}

/// Selects the same FPS rows from both views. `h` larger than the row count
/// is clamped; the returned flag reports the clamp.
pub fn sample_representations(
    zp: &Matrix,
    zq: &Matrix,
    coords: &[nalgebra::Point3<f64>],
    h: usize,
    start: usize,
) -> Result<(Matrix, Matrix, Vec<usize>, bool)> {
    if zp.shape() != zq.shape() || zp.rows() != coords.len() {
        return Err(Error::DimensionMismatch("views and coordinates must have equal row counts".into()));
    }
    let clamped = h > coords.len();
    let idx = farthest_point_sample(coords, h.min(coords.len()), start)?;
    Ok((zp.select_rows(&idx), zq.select_rows(&idx), idx, clamped))
}

/// Records `(1/H) * std(zp)ᵀ std(zq)` on `g`, columns standardized over rows.
pub fn correlation_node(g: &mut Graph, zp: NodeId, zq: NodeId) -> NodeId {
    let h = g.value(zp).rows();
    let sp = g.standardize(zp, StdMode::Floor(CORR_EPS));
    let sq = g.standardize(zq, StdMode::Floor(CORR_EPS));
    let z = g.matmul_tn(sp, sq);
    g.scale(z, 1.0 / h as f64)
}

pub fn cross_correlation(zp: &Matrix, zq: &Matrix, lambda: f64) -> Result<CrossCorrelation> {
    if zp.shape() != zq.shape() {
        return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", zp.shape(), zq.shape())));
    }
    if zp.rows() < 2 {
        return Err(Error::invalid("cross-correlation needs at least two samples"));
    }
    let mut g = Graph::new(empty_store());
    let a = g.input(zp.clone());
    let b = g.input(zq.clone());
    let z = correlation_node(&mut g, a, b);
    Ok(CrossCorrelation {
        z: g.value(z).clone(),
        h: zp.rows(),
        lambda,
    })
}

pub fn vib_loss(c: &CrossCorrelation) -> f64 {
    vib_terms(&c.z, c.lambda).0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub schedule: Schedule,
    pub lambda: f64,
    /// FPS sample count per cloud.
    pub samples: usize,
    pub batch_size: usize,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Free-form settings recorded in the checkpoint.
    #[serde(default)]
    pub settings: BTreeMap<String, String>,
}

impl PretrainConfig {
    pub fn new(voxel_size: f64) -> Self {
        Self {
            schedule: Schedule::default(),
            lambda: 0.005,
            samples: 256,
            batch_size: 2,
            augment: AugmentConfig::for_voxel_size(voxel_size),
            seed: 0,
            settings: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.augment.validate()?;
        if !(self.lambda > 0.0) {
            return Err(Error::Config("lambda must be positive".into()));
        }
        if self.samples < 2 || self.batch_size == 0 {
            return Err(Error::Config("samples must be >= 2 and batch_size >= 1".into()));
        }
        Ok(())
    }
}

/// CSV header of the pretraining loss log.
pub const LOSS_LOG_HEADER: &str = "iter,lr,loss,diag_term,offdiag_term";

/// Voxelizes every cloud; labels are dropped.
pub fn prepare_pretrain_data(clouds: &[PointCloud], voxel_size: f64) -> Result<Vec<PointCloud>> {
    if clouds.is_empty() {
        return Err(Error::EmptyInput("pretraining needs at least one cloud".into()));
    }
    clouds
        .iter()
        .map(|c| {
            c.ensure_non_empty()?;
            Ok(voxelize(&c.clone().without_labels(), voxel_size)?.cloud)
        })
        .collect()
}

/// Records the batch-mean viewpoint-bottleneck loss for one iteration.
fn pretrain_step(
    g: &mut Graph,
    model: &Model,
    data: &[PointCloud],
    cfg: &PretrainConfig,
    rng: &mut impl Rng,
) -> Result<StepLoss> {
    let mut total: Option<NodeId> = None;
    let (mut diag, mut off) = (0.0, 0.0);
    for _ in 0..cfg.batch_size {
        let cloud = &data[rng.random_range(0..data.len())];
        let m = cloud.len();
        if m < 2 {
            return Err(Error::invalid(format!("cloud '{}' has fewer than two voxels", cloud.source_id())));
        }
        let start = rng.random_range(0..m);
        let idx = Arc::new(farthest_point_sample(cloud.coords(), cfg.samples.min(m), start)?);
        let mut views = Vec::with_capacity(2);
        for _ in 0..2 {
            let (v, _) = random_transform_with(cloud, &cfg.augment, rng)?;
            let prepared = model.prepare(v.coords(), v.colors())?;
            let f = model.forward_features(g, &prepared);
            views.push(g.gather_rows(f, idx.clone()));
        }
        let z = correlation_node(g, views[0], views[1]);
        let (_, d, o) = vib_terms(g.value(z), cfg.lambda);
        diag += d;
        off += o;
        let l = g.vib_loss(z, cfg.lambda);
        total = Some(match total {
            Some(t) => g.add(t, l),
            None => l,
        });
    }
    let b = cfg.batch_size as f64;
    let loss = g.scale(total.expect("batch_size >= 1"), 1.0 / b);
    Ok(StepLoss {
        loss,
        parts: vec![diag / b, off / b],
    })
}

/// Pretrains a backbone, or resumes from `resume` (a pretraining checkpoint).
pub fn pretrain(
    clouds: &[PointCloud],
    backbone: BackboneConfig,
    cfg: &PretrainConfig,
    resume: Option<Checkpoint>,
    observer: &mut dyn FnMut(TrainEvent),
) -> Result<Checkpoint> {
    cfg.validate()?;
    let data = prepare_pretrain_data(clouds, backbone.voxel_size)?;
    let (model, momentum, meta) = match resume {
        Some(ck) => {
            if ck.meta.kind != "pretrain" {
                return Err(Error::Config(format!("cannot resume pretraining from a '{}' checkpoint", ck.meta.kind)));
            }
            (ck.to_model()?, ck.momentum, ck.meta)
        }
        None => (
            Model::new(ModelConfig::backbone_only(backbone), cfg.seed)?,
            None,
            TrainMeta {
                kind: "pretrain".into(),
                iteration: 0,
                total_iterations: cfg.schedule.iterations,
                seed: cfg.seed,
                settings: cfg.settings.clone(),
            },
        ),
    };
    train(
        model,
        momentum,
        &cfg.schedule,
        meta,
        PRETRAIN_TAG,
        |g, model, rng| pretrain_step(g, model, &data, cfg, rng),
        observer,
    )
}
