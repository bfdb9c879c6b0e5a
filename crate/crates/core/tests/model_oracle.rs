mod common;

use common::{max_abs_diff, random_cloud, scramble, tensor_rows};
use mgt::attention::{AttentionConfig, AttentionKind};
use mgt::autodiff::{Tape, Tensor};
use mgt::geometry::{normalize, FpsStart, PointCloud, ScaleConfig};
use mgt::model::{prediction_from_logits, MgtModel, ModelConfig};
use mgt::nn::Graph;
use mgt::slfe::SlfeAblation;
use mgt::Error;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy_config(attention: AttentionConfig) -> ModelConfig {
    ModelConfig {
        scales: ScaleConfig::parse("4:4,8:2").unwrap(),
        channels: 3,
        d_out: 8,
        layers: 2,
        mlp_ratio: 2,
        num_classes: 3,
        attention,
        ablation: SlfeAblation::default(),
    }
}

fn toy_model(attention: AttentionConfig, seed: u64) -> MgtModel {
    let mut model = MgtModel::new(toy_config(attention), seed).unwrap();
    scramble(&mut model.params, seed + 100);
    model
}

fn geodesic() -> AttentionConfig {
    AttentionConfig { kind: AttentionKind::Geodesic, factors: 2, temperature: 0.7 }
}

fn dot() -> AttentionConfig {
    AttentionConfig { kind: AttentionKind::Dot, ..AttentionConfig::default() }
}

fn z0(model: &MgtModel, cloud: &PointCloud, start: FpsStart) -> Tensor {
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, &model.params);
    let z = model.embed(&mut g, cloud, start).unwrap();
    g.tape.value(z).clone()
}

fn zero(model: &mut MgtModel, name: &str) {
    let id = model.params.find(name).unwrap_or_else(|| panic!("missing {name}"));
    let shape = model.params.get(id).shape().to_vec();
    *model.params.get_mut(id) = Tensor::zeros(&shape);
}

#[test]
fn eight_point_forward_matches_scalar_loops() {
    let cloud = normalize(&random_cloud(8, 1));
    for attention in [geodesic(), dot()] {
        for seed in 0..3 {
            let model = toy_model(attention, seed);
            for start in 0..8 {
                let got = model.logits_tensor(&cloud, FpsStart::Pinned(start)).unwrap();
                let want = common::model_logits(&model, &cloud, FpsStart::Pinned(start));
                assert_eq!(got.shape(), [3]);
                let err = max_abs_diff(got.data(), &want);
                assert!(err < 1e-8, "{attention:?} seed {seed} start {start}: {err:e}");
            }
        }
    }
}

#[test]
fn ablated_forwards_match_scalar_loops() {
    let cloud = normalize(&random_cloud(8, 2));
    for (sphere_map, mrc) in [(false, false), (true, false), (false, true)] {
        let mut config = toy_config(geodesic());
        config.ablation = SlfeAblation { sphere_map, mrc };
        let mut model = MgtModel::new(config, 4).unwrap();
        scramble(&mut model.params, 5);
        let got = model.logits_tensor(&cloud, FpsStart::Pinned(3)).unwrap();
        let want = common::model_logits(&model, &cloud, FpsStart::Pinned(3));
        assert!(max_abs_diff(got.data(), &want) < 1e-8);
    }
}

#[test]
fn token_count_of_the_standard_scales() {
    let config = ModelConfig { scales: ScaleConfig::standard(), ..ModelConfig::default() };
    assert_eq!(config.token_count(), 121);
    let cloud = normalize(&random_cloud(1024, 3));
    let mut config = config;
    config.d_out = 8;
    config.layers = 1;
    let model = MgtModel::new(config, 0).unwrap();
    assert_eq!(z0(&model, &cloud, FpsStart::Pinned(0)).shape(), [121, 8]);
}

#[test]
fn parameter_count_depends_only_on_the_config() {
    let a = MgtModel::new(toy_config(geodesic()), 1).unwrap();
    let b = MgtModel::new(toy_config(geodesic()), 2).unwrap();
    let c = MgtModel::new(toy_config(dot()), 1).unwrap();
    assert_eq!(a.parameter_count(), b.parameter_count());
    assert_eq!(c.parameter_count(), a.parameter_count() + 2 * 2 * (8 * 8 + 8));
}

#[test]
fn zero_position_weights_detach_tokens_from_centers() {
    let mut model = toy_model(geodesic(), 7);
    zero(&mut model, "position.fc2.weight");
    let a = normalize(&random_cloud(8, 10));
    let b = normalize(&random_cloud(8, 11));
    let za = z0(&model, &a, FpsStart::Pinned(0));
    let zb = z0(&model, &b, FpsStart::Pinned(0));
    let bias = common::vecp(&model.params, "position.fc2.bias");
    let class_token: Vec<f64> = common::vecp(&model.params, "class_token").iter().zip(&bias).map(|(t, b)| t + b).collect();
    assert_eq!(&za.data()[..8], &class_token[..]);
    assert_eq!(&za.data()[..8], &zb.data()[..8]);
    let mut moved = model.clone();
    let id = moved.params.find("class_center").unwrap();
    moved.params.get_mut(id).data_mut()[0] += 5.0;
    assert_eq!(z0(&moved, &a, FpsStart::Pinned(0)), za);
}

#[test]
fn translation_before_normalization_leaves_tokens_unchanged() {
    let model = toy_model(geodesic(), 8);
    let cloud = random_cloud(32, 12);
    let shifted: Vec<f64> = cloud.values().chunks(3).flat_map(|p| [p[0] + 3.0, p[1] - 7.5, p[2] + 0.25]).collect();
    let shifted = PointCloud::new(shifted, 3, 0).unwrap();
    let a = z0(&model, &normalize(&cloud), FpsStart::Pinned(5));
    let b = z0(&model, &normalize(&shifted), FpsStart::Pinned(5));
    assert!(a.max_abs_diff(&b) < 1e-10);
}

#[test]
fn empty_stack_reads_out_the_normalized_class_token() {
    let model = toy_model(geodesic(), 9);
    let bare = model.without_encoder();
    let cloud = normalize(&random_cloud(8, 13));
    let z = tensor_rows(&z0(&model, &cloud, FpsStart::Pinned(0)));
    let want = common::linear(&model.params, "head", &common::layer_norm(&model.params, "final_norm", &z[0]));
    let got = bare.logits_tensor(&cloud, FpsStart::Pinned(0)).unwrap();
    assert!(max_abs_diff(got.data(), &want) < 1e-12);
}

#[test]
fn zeroed_sublayer_outputs_make_the_encoder_an_identity() {
    for attention in [geodesic(), dot()] {
        let mut model = toy_model(attention, 10);
        for l in 0..2 {
            for p in ["attention.value.weight", "attention.value.bias", "mlp.fc2.weight", "mlp.fc2.bias"] {
                zero(&mut model, &format!("encoder{l}.{p}"));
            }
        }
        let cloud = normalize(&random_cloud(8, 14));
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &model.params);
        let z = model.embed(&mut g, &cloud, FpsStart::Pinned(0)).unwrap();
        let out = model.encode(&mut g, z).unwrap();
        assert_eq!(g.tape.value(z), g.tape.value(out));
    }
}

#[test]
fn forward_leaves_parameters_alone() {
    let model = toy_model(dot(), 11);
    let before = model.params.clone();
    model.predict(&normalize(&random_cloud(8, 15)), FpsStart::Seeded(3)).unwrap();
    for (a, b) in before.iter().zip(model.params.iter()) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn prediction_is_a_distribution_with_lowest_index_ties() {
    let model = toy_model(geodesic(), 12);
    let cloud = normalize(&random_cloud(8, 16));
    let p = model.predict(&cloud, FpsStart::Pinned(0)).unwrap();
    assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(p, model.predict(&cloud, FpsStart::Pinned(0)).unwrap());
    let tie = prediction_from_logits(&[0.4, 0.4, 0.4]);
    assert_eq!(tie.class, 0);
    assert!(max_abs_diff(&tie.probabilities, &[1.0 / 3.0; 3]) < 1e-15);
    assert_eq!(prediction_from_logits(&[-1.0, 2.0, 2.0]).class, 1);
}

#[test]
fn non_finite_activation_names_the_layer() {
    let mut model = toy_model(geodesic(), 13);
    let id = model.params.find("encoder1.mlp.fc1.bias").unwrap();
    model.params.get_mut(id).data_mut()[0] = f64::INFINITY;
    let err = model.logits_tensor(&normalize(&random_cloud(8, 17)), FpsStart::Pinned(0)).unwrap_err();
    assert!(matches!(err.root(), Error::NonFinite { .. }), "{err}");
    assert!(err.to_string().contains("encoder layer 1"), "{err}");
}

#[test]
fn wrong_channel_count_is_a_config_error() {
    let model = toy_model(geodesic(), 14);
    let cloud = PointCloud::new(vec![0.5; 8 * 6], 6, 0).unwrap();
    assert!(model.logits_tensor(&cloud, FpsStart::Pinned(0)).unwrap_err().is_config());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn pinned_start_makes_point_order_irrelevant(seed in 0u64..1000, start in 0usize..24) {
        let model = toy_model(geodesic(), 15);
        let cloud = normalize(&random_cloud(24, seed));
        let mut order: Vec<usize> = (0..24).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed + 1));
        let permuted = cloud.select(&order);
        let new_start = order.iter().position(|&i| i == start).unwrap();
        let a = model.predict(&cloud, FpsStart::Pinned(start)).unwrap();
        let b = model.predict(&permuted, FpsStart::Pinned(new_start)).unwrap();
        prop_assert_eq!(a.class, b.class);
        prop_assert!(max_abs_diff(&a.probabilities, &b.probabilities) < 1e-9);
    }
}
