//! `key=value` run configuration shared by every command.
//!
//! Values come from, in increasing priority: built-in defaults, a config
//! file, the `MGT_SEED` environment variable (seed only) and `--key value`
//! flags. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::ScaleConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

pub const SEED_ENV: &str = "MGT_SEED";

/// Every accepted key with its default and meaning.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("dataset", "", "dataset manifest; empty means generate the synthetic shapes in memory"),
    ("out", "runs/mgt", "output directory"),
    ("checkpoint", "", "checkpoint to evaluate (eval, robustness)"),
    ("per_class", "75", "synthetic objects per class (2:1 train/test split)"),
    ("points", "256", "points per synthetic object"),
    ("scales", "16:16,32:8", "patch scales as K:S pairs, small K first"),
    ("d_out", "128", "token width"),
    ("layers", "2", "encoder depth"),
    ("mlp_ratio", "4", "encoder MLP width multiplier"),
    ("attention", "geodesic", "geodesic | dot"),
    ("factors", "1", "sphere factors per token in geodesic attention"),
    ("temperature", "1", "geodesic attention temperature"),
    ("sphere_map", "true", "enable sphere mapping in the local feature extractor"),
    ("mrc", "true", "enable max-pool/repeat/concat in the local feature extractor"),
    ("batch_size", "32", "mini-batch size"),
    ("epochs", "30", "training epochs"),
    ("lr", "0.02", "initial learning rate (cosine annealed per epoch)"),
    ("momentum", "0.9", "SGD momentum"),
    ("weight_decay", "0.0001", "L2 weight decay on weight matrices"),
    ("smoothing", "0.2", "label smoothing"),
    ("grad_clip", "1", "clip the batch gradient to this global L2 norm (0 = off)"),
    ("scale_lo", "0.8", "lower bound of the random scale augmentation"),
    ("scale_hi", "1.25", "upper bound of the random scale augmentation"),
    ("jitter_std", "0.02", "standard deviation of the coordinate jitter"),
    ("jitter_clip", "0.05", "jitter clip"),
    ("max_drop_ratio", "0.125", "largest fraction of points randomly dropped"),
    ("seed", "0", "master seed (overridden by MGT_SEED)"),
    ("keep", "256,128,64", "retained point counts for the robustness sweep"),
    ("step", "0.00001", "finite-difference step for gradcheck"),
    ("tolerance", "0.0001", "gradcheck relative tolerance"),
];

pub(crate) fn take(pairs: &mut BTreeMap<String, String>, key: &str) -> Option<String> {
    pairs.remove(key)
}

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("invalid value `{value}` for `{key}`")))
}

pub(crate) fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        other => Err(Error::config(format!("invalid boolean `{other}` for `{key}`"))),
    }
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected key=value, got `{line}`", i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn render_pairs(pairs: &[(String, String)]) -> String {
    let mut s = String::new();
    for (k, v) in pairs {
        let _ = writeln!(s, "{k}={v}");
    }
    s
}

fn optional_path(v: String) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

/// Fully resolved settings of one command invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub per_class: usize,
    pub points: usize,
    /// `num_classes` and `channels` are filled in from the dataset.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub keep: Vec<usize>,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut pairs: BTreeMap<String, String> =
            KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect();
        Self::from_complete(&mut pairs).expect("built-in defaults are valid")
    }
}

impl RunConfig {
    fn from_complete(pairs: &mut BTreeMap<String, String>) -> Result<Self> {
        let mut req = |k: &str| take(pairs, k).ok_or_else(|| Error::config(format!("missing key `{k}`")));
        let dataset = optional_path(req("dataset")?);
        let out = PathBuf::from(req("out")?);
        let checkpoint = optional_path(req("checkpoint")?);
        let per_class = parse_value("per_class", &req("per_class")?)?;
        let points = parse_value("points", &req("points")?)?;
        let keep = req("keep")?
            .split(',')
            .map(|v| parse_value("keep", v))
            .collect::<Result<Vec<usize>>>()?;
        let step = parse_value("step", &req("step")?)?;
        let tolerance = parse_value("tolerance", &req("tolerance")?)?;
        let mut model = ModelConfig::from_pairs(pairs)?;
        model.num_classes = 4;
        let train = TrainConfig::from_pairs(pairs)?;
        if let Some(k) = pairs.keys().next() {
            return Err(Error::config(format!("unknown key `{k}`")));
        }
        ScaleConfig::new(model.scales.scales().to_vec())?;
        train.validate()?;
        Ok(RunConfig {
            dataset,
            out,
            checkpoint,
            per_class,
            points,
            model,
            train,
            keep,
            step,
            tolerance,
        })
    }

    /// Defaults, overridden by `file` (if any), then `seed_env`, then
    /// `overrides`.
    pub fn resolve(
        file: Option<&Path>,
        seed_env: Option<&str>,
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let mut pairs: BTreeMap<String, String> =
            KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect();
        let mut apply = |k: &str, v: &str| -> Result<()> {
            if !KEYS.iter().any(|(key, _, _)| *key == k) {
                return Err(Error::config(format!("unknown key `{k}`")));
            }
            pairs.insert(k.to_string(), v.to_string());
            Ok(())
        };
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (k, v) in parse_pairs(&text)? {
                apply(&k, &v)?;
            }
        }
        if let Some(seed) = seed_env {
            apply("seed", seed)?;
        }
        for (k, v) in overrides {
            apply(k, v)?;
        }
        Self::from_complete(&mut pairs)
    }

    /// Every key with its resolved value, in documentation order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut all: BTreeMap<String, String> = BTreeMap::new();
        all.insert("dataset".into(), path(&self.dataset));
        all.insert("out".into(), self.out.display().to_string());
        all.insert("checkpoint".into(), path(&self.checkpoint));
        all.insert("per_class".into(), self.per_class.to_string());
        all.insert("points".into(), self.points.to_string());
        all.insert(
            "keep".into(),
            self.keep.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
        );
        all.insert("step".into(), self.step.to_string());
        all.insert("tolerance".into(), self.tolerance.to_string());
        all.extend(self.model.to_pairs());
        all.extend(self.train.to_pairs());
        KEYS.iter()
            .filter_map(|(k, _, _)| all.remove_entry(*k))
            .collect()
    }

    pub fn render(&self) -> String {
        render_pairs(&self.to_pairs())
    }
}
