use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, TrainMeta};
use super::graph::{Graph, NodeId};
use super::model::Model;
use super::optim::{poly_lr, Sgd};
use crate::{Error, Result};

/// Optimizer and learning-rate schedule shared by every training loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub iterations: usize,
    pub lr0: f64,
    pub power: f64,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    /// Emit an intermediate checkpoint every this many iterations (0 = never).
    pub checkpoint_every: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            iterations: 1000,
            lr0: 0.1,
            power: 0.9,
            momentum: 0.9,
            clip_norm: Some(5.0),
            checkpoint_every: 0,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0,1), got {}", self.momentum)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Generator for iteration `iter`; depends only on `(seed, tag, iter)` so a
/// resumed run draws the same batches and augmentations.
pub fn iteration_rng(seed: u64, tag: u64, iter: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ iter as u64);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterLog {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    /// Loss components reported by the step function.
    pub parts: Vec<f64>,
}

pub enum TrainEvent<'a> {
    Iteration(&'a IterLog),
    Checkpoint(&'a Checkpoint),
}

/// Loss of one iteration: the scalar node plus reported components.
pub struct StepLoss {
    pub loss: NodeId,
    pub parts: Vec<f64>,
}

/// Runs SGD from `meta.iteration` up to `schedule.iterations`.
///
/// `step` records the loss of one iteration on a fresh graph. The returned
/// checkpoint holds the final parameters and momentum buffer.
pub fn train<F>(
    mut model: Model,
    momentum: Option<super::ParamStore>,
    schedule: &Schedule,
    mut meta: TrainMeta,
    tag: u64,
    mut step: F,
    observer: &mut dyn FnMut(TrainEvent),
) -> Result<Checkpoint>
where
    F: FnMut(&mut Graph<'_>, &Model, &mut ChaCha8Rng) -> Result<StepLoss>,
{
    schedule.validate()?;
    meta.total_iterations = schedule.iterations;
    if meta.iteration > schedule.iterations {
        return Err(Error::Config(format!(
            "checkpoint iteration {} exceeds the schedule's {}",
            meta.iteration, schedule.iterations
        )));
    }
    let mut opt = match momentum {
        Some(v) => Sgd::with_velocity(v, schedule.momentum, schedule.clip_norm),
        None => Sgd::new(&model.params, schedule.momentum, schedule.clip_norm),
    };
    for iter in meta.iteration..schedule.iterations {
        let lr = poly_lr(iter, schedule.iterations, schedule.lr0, schedule.power)?;
        let mut rng = iteration_rng(meta.seed, tag, iter);
        let (loss, parts, grads) = {
            let mut g = Graph::new(&model.params);
            let out = step(&mut g, &model, &mut rng)?;
            let loss = g.scalar(out.loss);
            let grads = g.backward(out.loss);
            (loss, out.parts, grads)
        };
        if !loss.is_finite() || !grads.is_finite() {
            meta.iteration = iter;
            let last_good = Checkpoint::from_model(&model, meta, Some(opt.velocity().clone()));
            return Err(Error::Diverged {
                iteration: iter,
                last_good: Box::new(last_good),
            });
        }
        opt.step(&mut model.params, &grads, lr);
        observer(TrainEvent::Iteration(&IterLog {
            iter,
            lr,
            loss,
            parts,
        }));
        let done = iter + 1;
        if schedule.checkpoint_every > 0 && done % schedule.checkpoint_every == 0 && done < schedule.iterations {
            meta.iteration = done;
            let ck = Checkpoint::from_model(&model, meta.clone(), Some(opt.velocity().clone()));
            observer(TrainEvent::Checkpoint(&ck));
        }
    }
    meta.iteration = schedule.iterations;
    Ok(Checkpoint::from_model(&model, meta, Some(opt.velocity().clone())))
}
