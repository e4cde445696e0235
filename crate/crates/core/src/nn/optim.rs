use super::graph::Gradients;
use super::ParamStore;
use crate::{Error, Result};

/// Polynomial decay `lr0 * (1 - iter/total)^power`.
pub fn poly_lr(iter: usize, total: usize, lr0: f64, power: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::invalid("poly_lr needs total > 0"));
    }
    if iter > total {
        return Err(Error::invalid(format!("iteration {iter} beyond total {total}")));
    }
    if !(lr0 > 0.0) {
        return Err(Error::invalid("lr0 must be positive"));
    }
    Ok(lr0 * (1.0 - iter as f64 / total as f64).powf(power))
}

/// SGD with a classical momentum buffer: `v = mu*v + g`, `p -= lr*v`.
///
/// Parameters and buffers are rounded to `f32` after every step, so a
/// checkpoint written in single precision resumes the exact trajectory.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    /// Rescale gradients whose global norm exceeds this value.
    pub clip_norm: Option<f64>,
    velocity: ParamStore,
}

impl Sgd {
    pub fn new(params: &ParamStore, momentum: f64, clip_norm: Option<f64>) -> Self {
        Self {
            momentum,
            clip_norm,
            velocity: params.zeros_like(),
        }
    }

    /// Resumes with a saved momentum buffer.
    pub fn with_velocity(velocity: ParamStore, momentum: f64, clip_norm: Option<f64>) -> Self {
        Self {
            momentum,
            clip_norm,
            velocity,
        }
    }

    pub fn velocity(&self) -> &ParamStore {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) {
        let mut factor = 1.0;
        if let Some(max) = self.clip_norm {
            let norm = grads.global_norm();
            if norm > max {
                factor = max / norm;
            }
        }
        for id in params.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else {
                let v = self.velocity.get_mut(id);
                v.scale(self.momentum);
                continue;
            };
            let v = self.velocity.get_mut(id);
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = self.momentum * *vi + factor * gi;
            }
            let p = params.get_mut(id);
            for (pi, vi) in p.data_mut().iter_mut().zip(v.data()) {
                *pi -= lr * vi;
            }
        }
        params.round_to_f32();
        self.velocity.round_to_f32();
    }
}
