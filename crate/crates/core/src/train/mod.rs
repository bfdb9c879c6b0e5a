//! Training: label-smoothed cross-entropy, momentum SGD under a cosine
//! schedule, augmentation, metrics and checkpoints.

mod augment;
pub mod checkpoint;
mod loss;
mod metrics;
mod optim;
mod trainer;

use std::collections::BTreeMap;

pub use augment::{augment, AugmentConfig};
pub use loss::{label_smooth_ce, smoothed_target};
pub use metrics::Metrics;
pub use optim::{cosine_lr, Sgd};
pub use trainer::{clip_global_norm, evaluate, sample_rng, train, EpochRecord, TrainOutcome, METRICS_HEADER};

use crate::config::{parse_value, take};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub smoothing: f64,
    /// Largest global L2 norm of the batch gradient; 0 disables clipping.
    pub grad_clip: f64,
    pub aug: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 250,
            lr0: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            smoothing: 0.2,
            grad_clip: 0.0,
            aug: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch_size and epochs must be positive"));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::config(format!("smoothing must be in [0, 1), got {}", self.smoothing)));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return Err(Error::config(format!("grad_clip must be non-negative, got {}", self.grad_clip)));
        }
        if !(self.lr0 >= 0.0 && self.momentum >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::config("lr, momentum and weight_decay must be non-negative"));
        }
        self.aug.validate()
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr", self.lr0.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("smoothing", self.smoothing.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("scale_lo", self.aug.scale_lo.to_string()),
            ("scale_hi", self.aug.scale_hi.to_string()),
            ("jitter_std", self.aug.jitter_std.to_string()),
            ("jitter_clip", self.aug.jitter_clip.to_string()),
            ("max_drop_ratio", self.aug.max_drop_ratio.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Reads the keys written by [`TrainConfig::to_pairs`], removing them
    /// from `pairs`. Missing keys keep their defaults.
    pub fn from_pairs(pairs: &mut BTreeMap<String, String>) -> Result<Self> {
        let mut c = TrainConfig::default();
        macro_rules! field {
            ($key:literal, $($field:ident).+) => {
                if let Some(v) = take(pairs, $key) {
                    c.$($field).+ = parse_value($key, &v)?;
                }
            };
        }
        field!("batch_size", batch_size);
        field!("epochs", epochs);
        field!("lr", lr0);
        field!("momentum", momentum);
        field!("weight_decay", weight_decay);
        field!("smoothing", smoothing);
        field!("grad_clip", grad_clip);
        field!("scale_lo", aug.scale_lo);
        field!("scale_hi", aug.scale_hi);
        field!("jitter_std", aug.jitter_std);
        field!("jitter_clip", aug.jitter_clip);
        field!("max_drop_ratio", aug.max_drop_ratio);
        field!("seed", seed);
        Ok(c)
    }
}
