use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::nn::ParamStore;

/// Cosine-annealed learning rate `lr0 * (1 + cos(pi * t / T)) / 2`, for
/// `0 <= t <= T`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = t.min(total) as f64;
    (lr0 * (1.0 + (PI * t / total as f64).cos()) / 2.0).max(0.0)
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v <- momentum * v + grad + wd * param`, `param <- param - lr * v`.
/// Decay only touches parameters flagged for it.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        }
    }

    pub fn velocity(&self, index: usize) -> &[f64] {
        &self.velocity[index]
    }

    /// `grads` is indexed like the store; `None` counts as a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Vec<f64>>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape(
                "sgd_step",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        let ids: Vec<_> = params.ids().collect();
        for ((id, grad), vel) in ids.into_iter().zip(grads).zip(&mut self.velocity) {
            let decay = if params.param(id).decay { self.weight_decay } else { 0.0 };
            let value = params.get_mut(id).data_mut();
            if let Some(g) = grad {
                if g.len() != value.len() {
                    return Err(Error::shape(
                        "sgd_step",
                        format!("gradient of {} elements for {}", g.len(), value.len()),
                    ));
                }
            }
            for i in 0..value.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                vel[i] = self.momentum * vel[i] + g + decay * value[i];
                value[i] -= lr * vel[i];
            }
        }
        Ok(())
    }
}
