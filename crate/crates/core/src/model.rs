//! The full classifier: multi-scale patch embedding, class token, position
//! encoding, pre-norm encoder stack and a linear head on the class token.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{Attention, AttentionConfig, AttentionKind};
use crate::autodiff::{Tape, Tensor, Var};
use crate::config::{parse_bool, parse_value, take};
use crate::error::{Error, Result};
use crate::geometry::{divide, FpsStart, PatchSet, PointCloud, ScaleConfig};
use crate::nn::{normal, Graph, LayerNorm, Linear, Mlp, ParamId, ParamStore};
use crate::slfe::{Slfe, SlfeAblation};

/// Hidden width of the position-encoding MLP.
pub const POSITION_HIDDEN: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub scales: ScaleConfig,
    /// Input channels per point (3 or 6).
    pub channels: usize,
    pub d_out: usize,
    /// Encoder depth.
    pub layers: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub attention: AttentionConfig,
    pub ablation: SlfeAblation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            scales: ScaleConfig::standard(),
            channels: 3,
            d_out: 256,
            layers: 4,
            mlp_ratio: 4,
            num_classes: 40,
            attention: AttentionConfig::default(),
            ablation: SlfeAblation::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels != 3 && self.channels != 6 {
            return Err(Error::config(format!("channels must be 3 or 6, got {}", self.channels)));
        }
        if self.layers == 0 {
            return Err(Error::config("encoder needs at least one layer"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("at least two classes required"));
        }
        if self.d_out == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("d_out and mlp_ratio must be positive"));
        }
        self.attention.validate(self.d_out)
    }

    /// Class token plus one token per patch.
    pub fn token_count(&self) -> usize {
        1 + self.scales.total_patches()
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("scales", self.scales.to_string()),
            ("channels", self.channels.to_string()),
            ("d_out", self.d_out.to_string()),
            ("layers", self.layers.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("attention", self.attention.kind.to_string()),
            ("factors", self.attention.factors.to_string()),
            ("temperature", self.attention.temperature.to_string()),
            ("sphere_map", self.ablation.sphere_map.to_string()),
            ("mrc", self.ablation.mrc.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Reads the keys written by [`ModelConfig::to_pairs`], removing them
    /// from `pairs`. Missing keys keep their defaults.
    pub fn from_pairs(pairs: &mut BTreeMap<String, String>) -> Result<Self> {
        let mut c = ModelConfig::default();
        if let Some(v) = take(pairs, "scales") {
            c.scales = ScaleConfig::parse(&v)?;
        }
        if let Some(v) = take(pairs, "channels") {
            c.channels = parse_value("channels", &v)?;
        }
        if let Some(v) = take(pairs, "d_out") {
            c.d_out = parse_value("d_out", &v)?;
        }
        if let Some(v) = take(pairs, "layers") {
            c.layers = parse_value("layers", &v)?;
        }
        if let Some(v) = take(pairs, "mlp_ratio") {
            c.mlp_ratio = parse_value("mlp_ratio", &v)?;
        }
        if let Some(v) = take(pairs, "num_classes") {
            c.num_classes = parse_value("num_classes", &v)?;
        }
        if let Some(v) = take(pairs, "attention") {
            c.attention.kind = v.parse::<AttentionKind>()?;
        }
        if let Some(v) = take(pairs, "factors") {
            c.attention.factors = parse_value("factors", &v)?;
        }
        if let Some(v) = take(pairs, "temperature") {
            c.attention.temperature = parse_value("temperature", &v)?;
        }
        if let Some(v) = take(pairs, "sphere_map") {
            c.ablation.sphere_map = parse_bool("sphere_map", &v)?;
        }
        if let Some(v) = take(pairs, "mrc") {
            c.ablation.mrc = parse_bool("mrc", &v)?;
        }
        Ok(c)
    }
}

/// Pre-norm encoder layer: attention and MLP sublayers, each added back to
/// the residual stream.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attention: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderLayer {
    pub fn forward(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let h = self.norm1.forward(g, z)?;
        let a = self.attention.forward(g, h)?;
        let z = g.tape.add(z, a)?;
        let h = self.norm2.forward(g, z)?;
        let m = self.mlp.forward(g, h)?;
        g.tape.add(z, m)
    }
}

/// Class prediction and its probability vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub probabilities: Vec<f64>,
}

/// All learnable state plus the structure that indexes into it.
#[derive(Clone, Debug)]
pub struct MgtModel {
    config: ModelConfig,
    pub params: ParamStore,
    pub slfe: Vec<Slfe>,
    pub class_token: ParamId,
    pub class_center: ParamId,
    pub position: Mlp,
    pub layers: Vec<EncoderLayer>,
    pub final_norm: LayerNorm,
    pub head: Linear,
}

impl MgtModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.d_out;
        let slfe = (0..config.scales.len())
            .map(|i| Slfe::new(&mut params, &format!("slfe{i}"), config.channels, d, &mut rng))
            .collect();
        let class_token = params.add("class_token", normal(&mut rng, &[d]), false);
        let class_center = params.add("class_center", normal(&mut rng, &[3]), false);
        let position = Mlp::new(&mut params, "position", [3, POSITION_HIDDEN, d], false, &mut rng);
        let layers = (0..config.layers)
            .map(|l| {
                let name = format!("encoder{l}");
                Ok(EncoderLayer {
                    norm1: LayerNorm::new(&mut params, &format!("{name}.norm1"), d),
                    attention: Attention::new(&mut params, &format!("{name}.attention"), d, config.attention, &mut rng)?,
                    norm2: LayerNorm::new(&mut params, &format!("{name}.norm2"), d),
                    mlp: Mlp::new(&mut params, &format!("{name}.mlp"), [d, config.mlp_ratio * d, d], false, &mut rng),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let final_norm = LayerNorm::new(&mut params, "final_norm", d);
        let head = Linear::new(&mut params, "head", d, config.num_classes, &mut rng);
        Ok(MgtModel {
            config,
            params,
            slfe,
            class_token,
            class_center,
            position,
            layers,
            final_norm,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }

    /// Copy of the model with the encoder stack removed, so that the logits
    /// are the head applied to the normalized class token of the embedding.
    pub fn without_encoder(&self) -> MgtModel {
        let mut m = self.clone();
        m.layers.clear();
        m
    }

    /// Initial token sequence `[1 + S, d_out]` from divided patches: class
    /// token followed by the patch embeddings of every scale, plus the
    /// position encoding of `[class center, patch centers]`.
    pub fn embed_patches(&self, g: &mut Graph, patches: &PatchSet) -> Result<Var> {
        if patches.scales.len() != self.slfe.len() {
            return Err(Error::config(format!(
                "{} patch scales for a model with {}",
                patches.scales.len(),
                self.slfe.len()
            )));
        }
        let d = self.config.d_out;
        let mut tokens = Vec::with_capacity(patches.scales.len() + 1);
        let cls = g.param(self.class_token);
        tokens.push(g.tape.reshape(cls, vec![1, d])?);
        for (sp, slfe) in patches.scales.iter().zip(&self.slfe) {
            let x = g.tape.constant(sp.patches.clone());
            tokens.push(slfe.forward(g, x, self.config.ablation)?);
        }
        let tokens = g.tape.concat(&tokens, 0)?;

        let center = g.param(self.class_center);
        let center = g.tape.reshape(center, vec![1, 3])?;
        let patch_centers = g.tape.constant(patches.center_xyz());
        let positions = g.tape.concat(&[center, patch_centers], 0)?;
        let encoding = self.position.forward(g, positions)?;
        g.tape.add(tokens, encoding)
    }

    /// Divides `cloud` into patches and embeds them.
    pub fn embed(&self, g: &mut Graph, cloud: &PointCloud, start: FpsStart) -> Result<Var> {
        if cloud.channels() != self.config.channels {
            return Err(Error::config(format!(
                "cloud has {} channels, model expects {}",
                cloud.channels(),
                self.config.channels
            )));
        }
        let patches = divide(cloud, &self.config.scales, start)?;
        self.embed_patches(g, &patches)
    }

    /// Runs the encoder stack, returning the final token sequence.
    pub fn encode(&self, g: &mut Graph, z0: Var) -> Result<Var> {
        let mut z = z0;
        for (l, layer) in self.layers.iter().enumerate() {
            z = layer
                .forward(g, z)
                .map_err(|e| e.context(format!("encoder layer {l}")))?;
        }
        Ok(z)
    }

    /// Head applied to the layer-normalized class token; `[num_classes]`.
    pub fn readout(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let cls = g.tape.gather(z, 0, &[0])?;
        let y = self.final_norm.forward(g, cls)?;
        let logits = self.head.forward(g, y)?;
        g.tape.reshape(logits, vec![self.config.num_classes])
    }

    pub fn encoder_forward(&self, g: &mut Graph, z0: Var) -> Result<Var> {
        let z = self.encode(g, z0)?;
        self.readout(g, z)
    }

    pub fn logits(&self, g: &mut Graph, cloud: &PointCloud, start: FpsStart) -> Result<Var> {
        let z0 = self.embed(g, cloud, start)?;
        self.encoder_forward(g, z0)
    }

    pub fn logits_tensor(&self, cloud: &PointCloud, start: FpsStart) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &self.params);
        let logits = self.logits(&mut g, cloud, start)?;
        Ok(g.tape.value(logits).clone())
    }

    /// Softmax class probabilities; ties in the arg-max go to the lowest
    /// class index.
    pub fn predict(&self, cloud: &PointCloud, start: FpsStart) -> Result<Prediction> {
        Ok(prediction_from_logits(self.logits_tensor(cloud, start)?.data()))
    }
}

pub fn prediction_from_logits(logits: &[f64]) -> Prediction {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = exp.iter().sum();
    let probabilities: Vec<f64> = exp.iter().map(|e| e / total).collect();
    let mut class = 0;
    for (i, &p) in probabilities.iter().enumerate() {
        if p > probabilities[class] {
            class = i;
        }
    }
    Prediction { class, probabilities }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_token_count() {
        assert_eq!(ModelConfig::default().token_count(), 121);
    }

    #[test]
    fn uniform_logits_pick_class_zero() {
        let p = prediction_from_logits(&[0.3, 0.3, 0.3]);
        assert_eq!(p.class, 0);
        assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_pairs_round_trip() {
        let mut c = ModelConfig::default();
        c.scales = ScaleConfig::parse("16:16,32:8").unwrap();
        c.attention.kind = AttentionKind::Dot;
        c.ablation.mrc = false;
        let mut pairs: BTreeMap<String, String> = c.to_pairs().into_iter().collect();
        assert_eq!(ModelConfig::from_pairs(&mut pairs).unwrap(), c);
        assert!(pairs.is_empty());
    }

    #[test]
    fn invalid_configs() {
        let c = ModelConfig { layers: 0, ..Default::default() };
        assert!(c.validate().is_err());
        let c = ModelConfig { num_classes: 1, ..Default::default() };
        assert!(c.validate().is_err());
        let mut c = ModelConfig { d_out: 30, ..Default::default() };
        c.attention.factors = 4;
        assert!(MgtModel::new(c, 0).is_err());
    }
}
