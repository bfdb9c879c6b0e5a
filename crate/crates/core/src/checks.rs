//! The gradient-check suite: each differentiable building block on small
//! random inputs, plus the whole model under the training loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{Attention, AttentionConfig, AttentionKind};
use crate::autodiff::{grad_check, GradCheckOptions, GradCheckReport, Tape, Tensor, Var};
use crate::error::Result;
use crate::geometry::{FpsStart, PointCloud, ScaleConfig};
use crate::model::{EncoderLayer, MgtModel, ModelConfig};
use crate::nn::{Graph, LayerNorm, Mlp, ParamStore};
use crate::slfe::{mrc, sphere_map, SlfeAblation};
use crate::train::label_smooth_ce;

/// Named group of checked parameters.
#[derive(Clone, Debug)]
pub struct GroupReport {
    pub group: &'static str,
    pub report: GradCheckReport,
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("non-empty shape")
}

/// Scalar loss `sum(y * w)` with fixed random weights, so every output
/// element receives a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(&mut rng, tape.shape(y), -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum_all(p)
}

fn store_pairs(store: &ParamStore) -> Vec<(String, Tensor)> {
    store.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
}

/// Moves every parameter to a generic point: uniform in [-0.5, 0.5], gains
/// and sphere-map scales around 1. At the initializer, layer norms see
/// pre-activations of size ~0.02 and the loss is too curved for central
/// differences to resolve at the default step.
fn randomize(store: &mut ParamStore, rng: &mut impl Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        let name = &store.param(id).name;
        let around_one = name.ends_with("gain") || name.ends_with("alpha") || name.ends_with("beta");
        let shape = store.get(id).shape().to_vec();
        let (lo, hi) = if around_one { (0.5, 1.5) } else { (-0.5, 0.5) };
        *store.get_mut(id) = uniform(rng, &shape, lo, hi);
    }
}

fn bind_all<'t, 'p>(tape: &'t mut Tape, store: &'p ParamStore, vars: &[Var]) -> Graph<'t, 'p> {
    let mut g = Graph::new(tape, store);
    for (id, &v) in store.ids().zip(vars) {
        g.bind(id, v);
    }
    g
}

fn check_sphere_map(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = vec![
        ("features".to_string(), uniform(&mut rng, &[2, 5, 6], -1.0, 1.0)),
        ("alpha".to_string(), uniform(&mut rng, &[6], 0.5, 1.5)),
        ("beta".to_string(), uniform(&mut rng, &[6], 0.5, 1.5)),
        ("bias".to_string(), uniform(&mut rng, &[6], -0.5, 0.5)),
    ];
    grad_check(
        |tape, v| {
            let y = sphere_map(tape, v[0], v[1], v[2], v[3])?;
            weighted_sum(tape, y, 11)
        },
        &params,
        opts,
    )
}

fn check_mrc(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = vec![("features".to_string(), uniform(&mut rng, &[3, 4, 5], -1.0, 1.0))];
    grad_check(
        |tape, v| {
            let y = mrc(tape, v[0])?;
            weighted_sum(tape, y, 12)
        },
        &params,
        opts,
    )
}

fn check_attention(kind: AttentionKind, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let config = AttentionConfig {
        kind,
        factors: 2,
        temperature: 0.7,
    };
    let attention = Attention::new(&mut store, "attention", 8, config, &mut rng)?;
    randomize(&mut store, &mut rng);
    let mut params = store_pairs(&store);
    params.push(("tokens".to_string(), uniform(&mut rng, &[5, 8], -1.0, 1.0)));
    let n = store.len();
    grad_check(
        |tape, v| {
            let mut g = bind_all(tape, &store, &v[..n]);
            let y = attention.forward(&mut g, v[n])?;
            weighted_sum(g.tape, y, 13)
        },
        &params,
        opts,
    )
}

fn check_encoder_layer(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let d = 8;
    let layer = EncoderLayer {
        norm1: LayerNorm::new(&mut store, "norm1", d),
        attention: Attention::new(&mut store, "attention", d, AttentionConfig::default(), &mut rng)?,
        norm2: LayerNorm::new(&mut store, "norm2", d),
        mlp: Mlp::new(&mut store, "mlp", [d, 2 * d, d], false, &mut rng),
    };
    randomize(&mut store, &mut rng);
    let mut params = store_pairs(&store);
    params.push(("tokens".to_string(), uniform(&mut rng, &[5, d], -1.0, 1.0)));
    let n = store.len();
    grad_check(
        |tape, v| {
            let mut g = bind_all(tape, &store, &v[..n]);
            let y = layer.forward(&mut g, v[n])?;
            weighted_sum(g.tape, y, 14)
        },
        &params,
        opts,
    )
}

/// Tiny end-to-end configuration: two scales on a 64-point cloud, one
/// encoder layer, width 8, two classes.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        scales: ScaleConfig::parse("8:8,16:4").expect("valid scales"),
        channels: 3,
        d_out: 8,
        layers: 1,
        mlp_ratio: 2,
        num_classes: 2,
        attention: AttentionConfig::default(),
        ablation: SlfeAblation::default(),
    }
}

pub fn toy_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    PointCloud::new(values, 3, 1).expect("valid cloud")
}

/// Parameter-name prefixes of the end-to-end groups.
pub const END_TO_END_GROUPS: &[(&str, &[&str])] = &[
    ("class_token", &["class_token"]),
    ("class_center", &["class_center"]),
    ("position_mlp", &["position."]),
    ("slfe_stage", &["slfe0."]),
    ("encoder_layer_e2e", &["encoder0."]),
    ("head", &["final_norm.", "head."]),
];

fn check_end_to_end(opts: &GradCheckOptions) -> Result<Vec<GroupReport>> {
    let mut model = MgtModel::new(toy_model_config(), 5)?;
    randomize(&mut model.params, &mut ChaCha8Rng::seed_from_u64(7));
    let cloud = toy_cloud(64, 6);
    let opts = GradCheckOptions {
        max_elements: opts.max_elements.or(Some(32)),
        ..opts.clone()
    };
    let mut out = Vec::new();
    for &(group, prefixes) in END_TO_END_GROUPS {
        let ids: Vec<_> = model
            .params
            .ids()
            .filter(|&id| prefixes.iter().any(|p| model.params.param(id).name.starts_with(p)))
            .collect();
        let params: Vec<(String, Tensor)> = ids
            .iter()
            .map(|&id| (model.params.param(id).name.clone(), model.params.get(id).clone()))
            .collect();
        let report = grad_check(
            |tape, v| {
                let mut g = Graph::new(tape, &model.params);
                for (&id, &var) in ids.iter().zip(v) {
                    g.bind(id, var);
                }
                let logits = model.logits(&mut g, &cloud, FpsStart::Pinned(0))?;
                label_smooth_ce(g.tape, logits, &[cloud.label], 0.2)
            },
            &params,
            &opts,
        )?;
        out.push(GroupReport { group, report });
    }
    Ok(out)
}

/// Runs every group with the given finite-difference step and tolerance.
pub fn gradient_suite(step: f64, tolerance: f64) -> Result<Vec<GroupReport>> {
    let opts = GradCheckOptions {
        step,
        tolerance,
        ..GradCheckOptions::default()
    };
    let mut groups = vec![
        GroupReport { group: "sphere_map", report: check_sphere_map(&opts)? },
        GroupReport { group: "mrc", report: check_mrc(&opts)? },
        GroupReport { group: "geodesic_attention", report: check_attention(AttentionKind::Geodesic, &opts)? },
        GroupReport { group: "dot_attention", report: check_attention(AttentionKind::Dot, &opts)? },
        GroupReport { group: "encoder_layer", report: check_encoder_layer(&opts)? },
    ];
    groups.extend(check_end_to_end(&opts)?);
    Ok(groups)
}
