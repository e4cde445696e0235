use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backbone::{Backbone, BackboneConfig, PreparedCloud};
use super::graph::{Graph, NodeId};
use super::heads::{OffsetHead, SemanticHead};
use super::ParamStore;
use crate::{Error, Result};

/// Architecture description stored in every checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Class count of the semantic head, if present.
    pub semantic_classes: Option<usize>,
    /// Output scale of the offset head in mm, if present.
    pub offset_scale: Option<f64>,
}

impl ModelConfig {
    pub fn backbone_only(backbone: BackboneConfig) -> Self {
        Self {
            backbone,
            semantic_classes: None,
            offset_scale: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.semantic_classes == Some(0) || self.semantic_classes == Some(1) {
            return Err(Error::Config("semantic head needs at least 2 classes".into()));
        }
        if let Some(s) = self.offset_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("offset scale must be positive, got {s}")));
            }
        }
        Ok(())
    }
}

/// Backbone plus optional heads, owning its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    backbone: Backbone,
    semantic: Option<SemanticHead>,
    offset: Option<OffsetHead>,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub features: NodeId,
    pub scores: Option<NodeId>,
    pub offsets: Option<NodeId>,
}

impl Model {
    /// Seeded random initialization, rounded to single precision.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let backbone = Backbone::init(config.backbone, &mut params, &mut rng)?;
        let d = config.backbone.output_dim;
        let semantic = config
            .semantic_classes
            .map(|n| SemanticHead::init(d, n, &mut params, &mut rng));
        let offset = config
            .offset_scale
            .map(|s| OffsetHead::init(d, s, &mut params, &mut rng));
        params.round_to_f32();
        Ok(Self {
            config,
            params,
            backbone,
            semantic,
            offset,
        })
    }

    /// Wraps existing parameters, checking every name and shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::bind(config.backbone, &params)?;
        let d = config.backbone.output_dim;
        let semantic = config
            .semantic_classes
            .map(|n| SemanticHead::bind(d, n, &params))
            .transpose()?;
        let offset = config
            .offset_scale
            .map(|s| OffsetHead::bind(d, s, &params))
            .transpose()?;
        Ok(Self {
            config,
            params,
            backbone,
            semantic,
            offset,
        })
    }

    pub fn has_semantic_head(&self) -> bool {
        self.semantic.is_some()
    }

    pub fn has_offset_head(&self) -> bool {
        self.offset.is_some()
    }

    pub fn prepare(&self, coords: &[nalgebra::Point3<f64>], colors: &[[f64; 3]]) -> Result<PreparedCloud> {
        PreparedCloud::new(coords, colors, &self.config.backbone)
    }

    pub fn forward_features(&self, g: &mut Graph, input: &PreparedCloud) -> NodeId {
        self.backbone.forward(g, input)
    }

    pub fn forward(&self, g: &mut Graph, input: &PreparedCloud) -> ForwardOutput {
        let features = self.backbone.forward(g, input);
        let scores = self.semantic.as_ref().map(|h| h.forward(g, features));
        let offsets = self.offset.as_ref().map(|h| h.forward(g, features));
        ForwardOutput {
            features,
            scores,
            offsets,
        }
    }
}
