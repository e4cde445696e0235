use std::sync::Arc;

use nalgebra::Point3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Neighborhood, NodeId, StdMode};
use super::{Matrix, ParamId, ParamStore};
use crate::cloud::centroid;
use crate::{Error, Result};

pub(crate) const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub blocks: usize,
    pub output_dim: usize,
    /// Neighborhood radius of every aggregation block, mm.
    pub aggregation_radius: f64,
    pub voxel_size: f64,
    /// Centered coordinates are divided by this before entering the network, mm.
    pub coord_scale: f64,
}

impl BackboneConfig {
    pub fn for_voxel_size(voxel_size: f64) -> Self {
        Self {
            input_dim: 6,
            hidden_dim: 32,
            blocks: 3,
            output_dim: 32,
            aggregation_radius: 4.0 * voxel_size,
            voxel_size,
            coord_scale: 50.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim != 6 {
            return Err(Error::Config(format!("input_dim must be 6 (xyz + rgb), got {}", self.input_dim)));
        }
        if self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("hidden_dim and output_dim must be at least 1".into()));
        }
        for (name, v) in [
            ("aggregation_radius", self.aggregation_radius),
            ("voxel_size", self.voxel_size),
            ("coord_scale", self.coord_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Network input for one (already voxelized) cloud: the `M x 6` feature
/// matrix and the fixed aggregation neighborhoods.
#[derive(Debug, Clone)]
pub struct PreparedCloud {
    pub features: Matrix,
    pub neighborhood: Arc<Neighborhood>,
}

impl PreparedCloud {
    pub fn new(coords: &[Point3<f64>], colors: &[[f64; 3]], cfg: &BackboneConfig) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::EmptyInput("cannot run the backbone on an empty cloud".into()));
        }
        if coords.len() != colors.len() {
            return Err(Error::DimensionMismatch("coords and colors differ in length".into()));
        }
        let c = centroid(coords);
        let mut features = Matrix::zeros(coords.len(), 6);
        for (i, (p, rgb)) in coords.iter().zip(colors).enumerate() {
            let row = features.row_mut(i);
            row[0] = (p.x - c.x) / cfg.coord_scale;
            row[1] = (p.y - c.y) / cfg.coord_scale;
            row[2] = (p.z - c.z) / cfg.coord_scale;
            row[3..].copy_from_slice(rgb);
        }
        let neighborhood = Arc::new(Neighborhood::from_radius(coords, cfg.aggregation_radius));
        Ok(Self { features, neighborhood })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
struct Block {
    weight: ParamId,
    self_weight: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

/// Parameter handles of the point encoder.
#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    lift_w: ParamId,
    lift_b: ParamId,
    blocks: Vec<Block>,
    out_w: ParamId,
    out_b: ParamId,
}

pub(crate) fn lookup(store: &ParamStore, name: &str, shape: (usize, usize)) -> Result<ParamId> {
    let id = store
        .find(name)
        .ok_or_else(|| Error::DimensionMismatch(format!("missing parameter '{name}'")))?;
    if store.get(id).shape() != shape {
        return Err(Error::DimensionMismatch(format!(
            "parameter '{name}' has shape {:?}, expected {shape:?}",
            store.get(id).shape()
        )));
    }
    Ok(id)
}

impl Backbone {
    /// Registers freshly initialized parameters (He-normal weights, zero
    /// biases, unit gamma) in `store`.
    pub fn init(cfg: BackboneConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (c, d) = (cfg.hidden_dim, cfg.output_dim);
        let lift_w = store.add_he("backbone.lift.weight", cfg.input_dim, c, rng);
        let lift_b = store.add("backbone.lift.bias", Matrix::zeros(1, c));
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for t in 0..cfg.blocks {
            blocks.push(Block {
                weight: store.add_he(&format!("backbone.block{t}.weight"), c, c, rng),
                self_weight: store.add_he(&format!("backbone.block{t}.self_weight"), c, c, rng),
                gamma: store.add(format!("backbone.block{t}.gamma"), Matrix::filled(1, c, 1.0)),
                beta: store.add(format!("backbone.block{t}.beta"), Matrix::zeros(1, c)),
            });
        }
        let out_w = store.add_he("backbone.out.weight", c, d, rng);
        let out_b = store.add("backbone.out.bias", Matrix::zeros(1, d));
        Ok(Self {
            cfg,
            lift_w,
            lift_b,
            blocks,
            out_w,
            out_b,
        })
    }

    /// Finds existing parameters by name, checking shapes.
    pub fn bind(cfg: BackboneConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let (c, d) = (cfg.hidden_dim, cfg.output_dim);
        let blocks = (0..cfg.blocks)
            .map(|t| {
                Ok(Block {
                    weight: lookup(store, &format!("backbone.block{t}.weight"), (c, c))?,
                    self_weight: lookup(store, &format!("backbone.block{t}.self_weight"), (c, c))?,
                    gamma: lookup(store, &format!("backbone.block{t}.gamma"), (1, c))?,
                    beta: lookup(store, &format!("backbone.block{t}.beta"), (1, c))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            lift_w: lookup(store, "backbone.lift.weight", (cfg.input_dim, c))?,
            lift_b: lookup(store, "backbone.lift.bias", (1, c))?,
            blocks,
            out_w: lookup(store, "backbone.out.weight", (c, d))?,
            out_b: lookup(store, "backbone.out.bias", (1, d))?,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Records the encoder on `g` and returns the `M x D` feature node.
    pub fn forward(&self, g: &mut Graph, input: &PreparedCloud) -> NodeId {
        let x = g.input(input.features.clone());
        let w = g.param(self.lift_w);
        let b = g.param(self.lift_b);
        let h = g.matmul(x, w);
        let h = g.add_bias(h, b);
        let mut h = g.relu(h);
        for block in &self.blocks {
            let a = g.neighbor_mean(h, input.neighborhood.clone());
            let w = g.param(block.weight);
            let a = g.matmul(a, w);
            let ws = g.param(block.self_weight);
            let s = g.matmul(h, ws);
            let a = g.add(a, s);
            let a = g.standardize(a, StdMode::Additive(BN_EPS));
            let gamma = g.param(block.gamma);
            let beta = g.param(block.beta);
            let a = g.scale_shift(a, gamma, beta);
            h = g.relu(a);
        }
        let w = g.param(self.out_w);
        let b = g.param(self.out_b);
        let o = g.matmul(h, w);
        g.add_bias(o, b)
    }
}
