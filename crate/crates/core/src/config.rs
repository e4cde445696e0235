//! Flat `key=value` run configuration.
//!
//! Every key has a default; files and overrides may only set known keys.
//! [`RunConfig::to_text`] writes every key in sorted order, which is the
//! frozen copy stored next to a run's outputs.

use std::collections::BTreeMap;
use std::path::Path;

use crate::augment::AugmentConfig;
use crate::cluster::ClusterConfig;
use crate::nn::{BackboneConfig, Schedule};
use crate::segment::{FinetuneConfig, LossWeights, Task};
use crate::synth::{HoleSpec, RandomPlantOptions, SoilSpec};
use crate::vib::PretrainConfig;
use crate::{Error, Result};

/// `(key, default, description)`; an empty default means "derived".
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "master seed of the subcommand"),
    ("voxel_size", "1.5", "backbone voxel grid, mm"),
    ("data.input", "", "input cloud (xyzl or ply)"),
    ("data.weak", "", "weak-label file of data.input"),
    ("data.manifest", "", "dataset manifest: lines of `split cloud [weak]`"),
    ("data.prediction", "", "predicted cloud for evaluate"),
    ("data.truth", "", "ground-truth cloud for evaluate"),
    ("model.checkpoint", "", "checkpoint to load"),
    ("backbone.hidden_dim", "32", "channels C"),
    ("backbone.blocks", "3", "aggregation blocks T"),
    ("backbone.output_dim", "32", "feature dimension D"),
    ("backbone.aggregation_radius", "", "neighborhood radius, mm (default 4 x voxel_size)"),
    ("backbone.coord_scale", "50", "coordinate normalization, mm"),
    ("augment.rotation_z_max", "3.141592653589793", "radians"),
    ("augment.rotation_xy_max", "0.1", "radians"),
    ("augment.scale_min", "0.9", ""),
    ("augment.scale_max", "1.1", ""),
    ("augment.jitter_sigma", "", "mm (default 0.2 x voxel_size)"),
    ("augment.flip_probability", "0.5", ""),
    ("augment.color_jitter_sigma", "0.05", ""),
    ("pretrain.iterations", "1000", ""),
    ("pretrain.batch_size", "2", ""),
    ("pretrain.lr0", "0.1", ""),
    ("pretrain.power", "0.9", ""),
    ("pretrain.momentum", "0.9", ""),
    ("pretrain.clip_norm", "5", "0 disables clipping"),
    ("pretrain.lambda", "0.005", "off-diagonal weight"),
    ("pretrain.samples", "256", "FPS rows H per cloud"),
    ("pretrain.checkpoint_every", "0", "0 disables intermediate checkpoints"),
    ("finetune.init", "pretrained", "pretrained | random | resume"),
    ("finetune.iterations", "1000", ""),
    ("finetune.batch_size", "2", ""),
    ("finetune.lr0", "0.1", ""),
    ("finetune.power", "0.9", ""),
    ("finetune.momentum", "0.9", ""),
    ("finetune.clip_norm", "5", "0 disables clipping"),
    ("finetune.checkpoint_every", "0", ""),
    ("finetune.classes", "2", ""),
    ("finetune.weight_semantic", "1", ""),
    ("finetune.weight_reg", "1", ""),
    ("finetune.weight_dir", "1", ""),
    ("finetune.offset_scale", "10", "offset head output scale, mm"),
    ("weak.k", "100", "labeled points per cloud"),
    ("weak.ratio", "0.2", "random subsampling ratio before drawing labels"),
    ("weak.strip_soil", "true", "remove soil points first"),
    ("weak.stratified", "false", "split k evenly across classes"),
    ("cluster.radius", "1.5", "mm"),
    ("cluster.shifted_radius", "1.5", "mm"),
    ("cluster.min_size", "50", "points"),
    ("cluster.merge_iou", "0.75", ">= 1 disables merging"),
    ("synth.count", "30", "plants"),
    ("synth.holdout", "10", "plants in the val split"),
    ("synth.leaves_min", "4", ""),
    ("synth.leaves_max", "6", ""),
    ("synth.density", "3", "points/mm²"),
    ("synth.noise_sigma", "0", "mm"),
    ("synth.max_droop", "1.0471975511965976", "radians"),
    ("synth.holes", "0", "hole disks per plant"),
    ("synth.hole_radius", "2", "mm"),
    ("synth.soil", "false", "add a soil disk"),
    ("traits.min_leaf_points", "50", ""),
    ("serve.addr", "127.0.0.1:8080", ""),
    ("serve.data_dir", "", "directory of clouds to serve"),
    ("serve.session_dir", "", "label sessions (default <data_dir>/sessions)"),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    /// Defaults overridden by the lines of `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key '{key}'"))),
        }
    }

    /// Applies a `key=value` override.
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got '{assignment}'")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("'{key}' is not a registered config key"))
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        let v: f64 = self.parsed(key)?;
        if !v.is_finite() {
            return Err(Error::Config(format!("{key}: must be finite")));
        }
        Ok(v)
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.parsed(key)
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.parsed(key)
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        self.parsed(key)
    }

    /// `None` for an empty value.
    pub fn path(&self, key: &str) -> Option<&Path> {
        let v = self.get(key);
        (!v.is_empty()).then(|| Path::new(v))
    }

    pub fn require_path(&self, key: &str) -> Result<&Path> {
        self.path(key)
            .ok_or_else(|| Error::Config(format!("{key} must be set")))
    }

    fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        if self.get(key).is_empty() {
            Ok(default)
        } else {
            self.f64(key)
        }
    }

    pub fn voxel_size(&self) -> Result<f64> {
        let v = self.f64("voxel_size")?;
        if !(v > 0.0) {
            return Err(Error::Config("voxel_size must be positive".into()));
        }
        Ok(v)
    }

    pub fn backbone(&self) -> Result<BackboneConfig> {
        let voxel = self.voxel_size()?;
        let cfg = BackboneConfig {
            input_dim: 6,
            hidden_dim: self.usize("backbone.hidden_dim")?,
            blocks: self.usize("backbone.blocks")?,
            output_dim: self.usize("backbone.output_dim")?,
            aggregation_radius: self.f64_or("backbone.aggregation_radius", 4.0 * voxel)?,
            voxel_size: voxel,
            coord_scale: self.f64("backbone.coord_scale")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn augment(&self) -> Result<AugmentConfig> {
        let voxel = self.voxel_size()?;
        let cfg = AugmentConfig {
            rotation_z_max: self.f64("augment.rotation_z_max")?,
            rotation_xy_max: self.f64("augment.rotation_xy_max")?,
            scale_range: [self.f64("augment.scale_min")?, self.f64("augment.scale_max")?],
            jitter_sigma: self.f64_or("augment.jitter_sigma", 0.2 * voxel)?,
            flip_probability: self.f64("augment.flip_probability")?,
            color_jitter_sigma: self.f64("augment.color_jitter_sigma")?,
        };
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    fn schedule(&self, prefix: &str) -> Result<Schedule> {
        let clip = self.f64(&format!("{prefix}.clip_norm"))?;
        let s = Schedule {
            iterations: self.usize(&format!("{prefix}.iterations"))?,
            lr0: self.f64(&format!("{prefix}.lr0"))?,
            power: self.f64(&format!("{prefix}.power"))?,
            momentum: self.f64(&format!("{prefix}.momentum"))?,
            clip_norm: (clip > 0.0).then_some(clip),
            checkpoint_every: self.usize(&format!("{prefix}.checkpoint_every"))?,
        };
        s.validate()?;
        Ok(s)
    }

    fn settings(&self) -> BTreeMap<String, String> {
        self.values.clone()
    }

    pub fn pretrain(&self) -> Result<PretrainConfig> {
        let cfg = PretrainConfig {
            schedule: self.schedule("pretrain")?,
            lambda: self.f64("pretrain.lambda")?,
            samples: self.usize("pretrain.samples")?,
            batch_size: self.usize("pretrain.batch_size")?,
            augment: self.augment()?,
            seed: self.u64("seed")?,
            settings: self.settings(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn finetune(&self, task: Task) -> Result<FinetuneConfig> {
        let cfg = FinetuneConfig {
            task,
            schedule: self.schedule("finetune")?,
            batch_size: self.usize("finetune.batch_size")?,
            augment: self.augment()?,
            seed: self.u64("seed")?,
            classes: self.usize("finetune.classes")?,
            weights: LossWeights {
                semantic: self.f64("finetune.weight_semantic")?,
                reg: self.f64("finetune.weight_reg")?,
                dir: self.f64("finetune.weight_dir")?,
            },
            offset_scale: self.f64("finetune.offset_scale")?,
            settings: self.settings(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn cluster(&self) -> Result<ClusterConfig> {
        let cfg = ClusterConfig {
            radius: self.f64("cluster.radius")?,
            shifted_radius: self.f64("cluster.shifted_radius")?,
            min_size: self.usize("cluster.min_size")?,
            merge_iou: self.f64("cluster.merge_iou")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn synth(&self) -> Result<RandomPlantOptions> {
        let holes = self.usize("synth.holes")?;
        let lo = self.usize("synth.leaves_min")?;
        let hi = self.usize("synth.leaves_max")?;
        if lo > hi {
            return Err(Error::Config("synth.leaves_min exceeds synth.leaves_max".into()));
        }
        Ok(RandomPlantOptions {
            leaves: [lo, hi],
            density: self.f64("synth.density")?,
            noise_sigma: self.f64("synth.noise_sigma")?,
            holes: (holes > 0).then(|| -> Result<HoleSpec> {
                Ok(HoleSpec {
                    count: holes,
                    radius: self.f64("synth.hole_radius")?,
                })
            }).transpose()?,
            soil: self.bool("synth.soil")?.then_some(SoilSpec {
                radius: 40.0,
                depth: 3.0,
            }),
            max_droop: self.f64("synth.max_droop")?,
        })
    }
}
