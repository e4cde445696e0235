//! Sparse-label fine-tuning of the semantic and offset heads, and inference.

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use nalgebra::{Point3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{random_transform_with, AugmentConfig};
use crate::cloud::{voxelize, PointCloud, LEAF, UNLABELED};
use crate::cluster::{dual_set_cluster, ClusterConfig, InstancePrediction};
use crate::nn::{
    softmax, train, BackboneConfig, Checkpoint, Graph, Matrix, Model, ModelConfig, NodeId, ParamStore, Schedule,
    StepLoss, TrainEvent, TrainMeta,
};
use crate::sampling::WeakLabels;
use crate::{Error, Result};

const SEMANTIC_TAG: u64 = 2;
const INSTANCE_TAG: u64 = 3;

fn empty_store() -> &'static ParamStore {
    static STORE: OnceLock<ParamStore> = OnceLock::new();
    STORE.get_or_init(ParamStore::new)
}

/// Per-row argmax; ties go to the lowest class.
pub fn predict_labels(scores: &Matrix) -> Vec<i32> {
    (0..scores.rows())
        .map(|r| {
            let row = scores.row(r);
            let mut best = 0;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            best as i32
        })
        .collect()
}

/// Softmax cross-entropy averaged over `(row, class)` targets.
pub fn masked_cross_entropy(scores: &Matrix, targets: &[(usize, usize)]) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::EmptyInput("cross-entropy needs at least one labeled point".into()));
    }
    if targets.iter().any(|&(r, c)| r >= scores.rows() || c >= scores.cols()) {
        return Err(Error::invalid("cross-entropy target out of range"));
    }
    let mut g = Graph::new(empty_store());
    let s = g.input(scores.clone());
    let l = g.cross_entropy(s, Arc::new(targets.to_vec()));
    Ok(g.scalar(l))
}

/// `(L_reg, L_dir)` over points with `mask[i]`, where the target of point
/// `i` is `centroids[i] - coords[i]`.
pub fn offset_losses(
    offsets: &[Vector3<f64>],
    coords: &[Point3<f64>],
    centroids: &[Option<Point3<f64>>],
    mask: &[bool],
) -> Result<(f64, f64)> {
    let n = offsets.len();
    if coords.len() != n || centroids.len() != n || mask.len() != n {
        return Err(Error::DimensionMismatch("offset loss inputs differ in length".into()));
    }
    let mut targets = Vec::new();
    for i in 0..n {
        if mask[i] {
            let c = centroids[i].ok_or_else(|| Error::invalid(format!("masked point {i} has no centroid")))?;
            let d = c - coords[i];
            targets.push((i, [d.x, d.y, d.z]));
        }
    }
    if targets.is_empty() {
        return Err(Error::EmptyInput("offset loss mask is all zero".into()));
    }
    let mut g = Graph::new(empty_store());
    let o = g.input(Matrix::from_vec(n, 3, offsets.iter().flat_map(|v| [v.x, v.y, v.z]).collect()));
    let targets = Arc::new(targets);
    let reg = g.offset_reg(o, targets.clone());
    let dir = g.offset_dir(o, targets);
    Ok((g.scalar(reg), g.scalar(dir)))
}

/// Centroid of the annotated points of every leaf instance.
pub fn instance_centroids(coords: &[Point3<f64>], weak: &WeakLabels) -> BTreeMap<i32, Point3<f64>> {
    let mut acc: BTreeMap<i32, (Vector3<f64>, usize)> = BTreeMap::new();
    for (&i, &(s, k)) in &weak.entries {
        if s == LEAF && k >= 0 {
            let e = acc.entry(k).or_insert((Vector3::zeros(), 0));
            e.0 += coords[i].coords;
            e.1 += 1;
        }
    }
    acc.into_iter()
        .map(|(k, (sum, n))| (k, Point3::from(sum / n as f64)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Semantic,
    Instance,
}

impl Task {
    pub fn kind(&self) -> &'static str {
        match self {
            Task::Semantic => "semantic",
            Task::Instance => "instance",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub semantic: f64,
    pub reg: f64,
    pub dir: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            semantic: 1.0,
            reg: 1.0,
            dir: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub task: Task,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub augment: AugmentConfig,
    pub seed: u64,
    pub classes: usize,
    pub weights: LossWeights,
    /// Output scale of the offset head, mm.
    pub offset_scale: f64,
    #[serde(default)]
    pub settings: BTreeMap<String, String>,
}

impl FinetuneConfig {
    pub fn new(task: Task, voxel_size: f64) -> Self {
        Self {
            task,
            schedule: Schedule::default(),
            batch_size: 2,
            augment: AugmentConfig::for_voxel_size(voxel_size),
            seed: 0,
            classes: 2,
            weights: LossWeights::default(),
            offset_scale: 10.0,
            settings: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.augment.validate()?;
        if self.batch_size == 0 || self.classes < 2 {
            return Err(Error::Config("batch_size must be >= 1 and classes >= 2".into()));
        }
        if !(self.offset_scale > 0.0) {
            return Err(Error::Config("offset_scale must be positive".into()));
        }
        Ok(())
    }
}

/// A training cloud with its sparse labels (indices refer to `cloud`).
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub cloud: PointCloud,
    pub weak: WeakLabels,
}

/// Voxelized training sample with targets attached to voxel rows.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub voxels: PointCloud,
    pub semantic_targets: Vec<(usize, usize)>,
    /// Voxel row and untransformed displacement toward its instance centroid.
    pub offset_targets: Vec<(usize, Vector3<f64>)>,
}

pub fn prepare_sample(sample: &TrainSample, voxel_size: f64, classes: usize) -> Result<PreparedSample> {
    let cloud = &sample.cloud;
    cloud.ensure_non_empty()?;
    sample.weak.validate_against(cloud)?;
    if sample.weak.is_empty() {
        return Err(Error::EmptyInput(format!("no weak labels for '{}'", cloud.source_id())));
    }
    let vox = voxelize(&cloud.clone().without_labels(), voxel_size)?;
    let row_of = vox.map.point_to_voxel(cloud.len());
    let centroids = instance_centroids(cloud.coords(), &sample.weak);
    let mut semantic_targets = Vec::new();
    let mut offset_targets = Vec::new();
    for (&i, &(s, k)) in &sample.weak.entries {
        if s < 0 || s as usize >= classes {
            return Err(Error::invalid(format!("weak label class {s} outside 0..{classes}")));
        }
        let row = row_of[i];
        semantic_targets.push((row, s as usize));
        if s == LEAF && k >= 0 {
            offset_targets.push((row, centroids[&k] - vox.cloud.coords()[row]));
        }
    }
    Ok(PreparedSample {
        voxels: vox.cloud,
        semantic_targets,
        offset_targets,
    })
}

fn finetune_step(
    g: &mut Graph,
    model: &Model,
    data: &[PreparedSample],
    cfg: &FinetuneConfig,
    rng: &mut impl Rng,
) -> Result<StepLoss> {
    let mut total: Option<NodeId> = None;
    let mut parts = [0.0; 3];
    let push = |g: &mut Graph, total: &mut Option<NodeId>, n: NodeId, w: f64| {
        let n = g.scale(n, w);
        *total = Some(match *total {
            Some(t) => g.add(t, n),
            None => n,
        });
    };
    for _ in 0..cfg.batch_size {
        let sample = &data[rng.random_range(0..data.len())];
        let (view, t) = random_transform_with(&sample.voxels, &cfg.augment, rng)?;
        let prepared = model.prepare(view.coords(), view.colors())?;
        let out = model.forward(g, &prepared);
        let scores = out.scores.expect("fine-tuned models carry a semantic head");
        let ce = g.cross_entropy(scores, Arc::new(sample.semantic_targets.clone()));
        parts[0] += g.scalar(ce);
        push(g, &mut total, ce, cfg.weights.semantic);
        if let (Task::Instance, Some(o)) = (cfg.task, out.offsets) {
            if !sample.offset_targets.is_empty() {
                let targets: Arc<Vec<(usize, [f64; 3])>> = Arc::new(
                    sample
                        .offset_targets
                        .iter()
                        .map(|(r, d)| {
                            let v = t.apply_vector(d);
                            (*r, [v.x, v.y, v.z])
                        })
                        .collect(),
                );
                let reg = g.offset_reg(o, targets.clone());
                let dir = g.offset_dir(o, targets);
                parts[1] += g.scalar(reg);
                parts[2] += g.scalar(dir);
                push(g, &mut total, reg, cfg.weights.reg);
                push(g, &mut total, dir, cfg.weights.dir);
            }
        }
    }
    let b = cfg.batch_size as f64;
    let loss = g.scale(total.expect("batch_size >= 1"), 1.0 / b);
    Ok(StepLoss {
        loss,
        parts: parts.iter().map(|p| p / b).collect(),
    })
}

/// Where fine-tuning starts from.
#[derive(Debug, Clone)]
pub enum FinetuneInit {
    /// Backbone copied from a checkpoint, heads freshly initialized.
    Pretrained(Checkpoint),
    /// Everything randomly initialized (the baseline).
    Random(BackboneConfig),
    /// Continue an interrupted fine-tuning run.
    Resume(Checkpoint),
}

/// CSV header of the fine-tuning loss log.
pub const FINETUNE_LOG_HEADER: &str = "iter,lr,loss,semantic_term,reg_term,dir_term";

pub fn finetune(
    init: FinetuneInit,
    samples: &[TrainSample],
    cfg: &FinetuneConfig,
    observer: &mut dyn FnMut(TrainEvent),
) -> Result<Checkpoint> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyInput("fine-tuning needs at least one sample".into()));
    }
    let meta = TrainMeta {
        kind: cfg.task.kind().into(),
        iteration: 0,
        total_iterations: cfg.schedule.iterations,
        seed: cfg.seed,
        settings: cfg.settings.clone(),
    };
    let head_config = |backbone: BackboneConfig| ModelConfig {
        backbone,
        semantic_classes: Some(cfg.classes),
        offset_scale: (cfg.task == Task::Instance).then_some(cfg.offset_scale),
    };
    let (model, momentum, meta) = match init {
        FinetuneInit::Random(backbone) => (Model::new(head_config(backbone), cfg.seed)?, None, meta),
        FinetuneInit::Pretrained(ck) => {
            let mut model = Model::new(head_config(ck.model.backbone), cfg.seed)?;
            let copied = model.params.copy_prefix_from(&ck.params, "backbone.")?;
            if copied == 0 {
                return Err(Error::Checkpoint("pretrained checkpoint holds no backbone parameters".into()));
            }
            (model, None, meta)
        }
        FinetuneInit::Resume(ck) => {
            if ck.meta.kind != cfg.task.kind() {
                return Err(Error::Config(format!(
                    "cannot resume {} fine-tuning from a '{}' checkpoint",
                    cfg.task.kind(),
                    ck.meta.kind
                )));
            }
            (ck.to_model()?, ck.momentum, ck.meta)
        }
    };
    let voxel = model.config.backbone.voxel_size;
    let data = samples
        .iter()
        .map(|s| prepare_sample(s, voxel, cfg.classes))
        .collect::<Result<Vec<_>>>()?;
    let tag = match cfg.task {
        Task::Semantic => SEMANTIC_TAG,
        Task::Instance => INSTANCE_TAG,
    };
    train(
        model,
        momentum,
        &cfg.schedule,
        meta,
        tag,
        |g, model, rng| finetune_step(g, model, &data, cfg, rng),
        observer,
    )
}

/// Per-point inference output.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub semantic: Vec<i32>,
    /// Softmax probability of the leaf class per point.
    pub leaf_prob: Vec<f64>,
    pub offsets: Option<Vec<Vector3<f64>>>,
    pub instances: Vec<InstancePrediction>,
    /// Instance id per point (`-1` outside every instance); a point covered
    /// by several instances takes the highest-scoring one.
    pub instance_labels: Vec<i32>,
}

/// Runs the model on a whole cloud: voxelize, predict per voxel, broadcast
/// to points and, with an offset head, cluster leaf points.
pub fn infer(model: &Model, cloud: &PointCloud, cluster: &ClusterConfig) -> Result<Prediction> {
    if !model.has_semantic_head() {
        return Err(Error::Checkpoint("inference needs a model with a semantic head".into()));
    }
    cloud.ensure_non_empty()?;
    let vox = voxelize(&cloud.clone().without_labels(), model.config.backbone.voxel_size)?;
    let prepared = model.prepare(vox.cloud.coords(), vox.cloud.colors())?;
    let mut g = Graph::new(&model.params);
    let out = model.forward(&mut g, &prepared);
    let scores = g.value(out.scores.expect("checked above"));
    if !scores.is_finite() {
        return Err(Error::NonFinite("semantic scores".into()));
    }
    let probs = softmax(scores);
    let labels = predict_labels(scores);
    let leaf_col = LEAF as usize;
    let voxel_leaf: Vec<f64> = (0..probs.rows())
        .map(|r| if leaf_col < probs.cols() { probs[(r, leaf_col)] } else { 0.0 })
        .collect();
    let m = cloud.len();
    let semantic = vox.scatter(&labels, m);
    let leaf_prob = vox.scatter(&voxel_leaf, m);
    let offsets = out.offsets.map(|o| {
        let o = g.value(o);
        let per_voxel: Vec<Vector3<f64>> = (0..o.rows()).map(|r| Vector3::new(o[(r, 0)], o[(r, 1)], o[(r, 2)])).collect();
        vox.scatter(&per_voxel, m)
    });
    let mut instances = Vec::new();
    let mut instance_labels = vec![UNLABELED; m];
    if let Some(off) = &offsets {
        let mask: Vec<bool> = semantic.iter().map(|&s| s == LEAF).collect();
        instances = dual_set_cluster(cloud.coords(), off, &mask, &leaf_prob, cluster)?;
        for (id, inst) in instances.iter().enumerate().rev() {
            for &i in &inst.indices {
                instance_labels[i] = id as i32;
            }
        }
    }
    Ok(Prediction {
        semantic,
        leaf_prob,
        offsets,
        instances,
        instance_labels,
    })
}
