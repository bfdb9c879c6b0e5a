mod common;

use std::f64::consts::PI;

use common::{max_abs_diff, random_matrix, scramble, tensor_rows, Mat};
use mgt::attention::{
    geodesic_dist, geodesic_distances, project_oblique, Attention, AttentionConfig, AttentionKind,
};
use mgt::autodiff::{Tape, Tensor};
use mgt::nn::{Graph, ParamStore};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn layer(width: usize, config: AttentionConfig, seed: u64) -> (Attention, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let att = Attention::new(&mut store, "att", width, config, &mut rng).unwrap();
    scramble(&mut store, seed + 1);
    (att, store)
}

fn identity_value(store: &mut ParamStore, width: usize) {
    let mut eye = vec![0.0; width * width];
    eye.iter_mut().step_by(width + 1).for_each(|v| *v = 1.0);
    let w = store.find("att.value.weight").unwrap();
    *store.get_mut(w) = Tensor::new(vec![width, width], eye).unwrap();
    let b = store.find("att.value.bias").unwrap();
    *store.get_mut(b) = Tensor::zeros(&[width]);
}

fn rows_tensor(rows: &Mat) -> Tensor {
    Tensor::new(vec![rows.len(), rows[0].len()], rows.iter().flatten().copied().collect()).unwrap()
}

fn run(att: &Attention, store: &ParamStore, tokens: &Mat) -> (Mat, Mat) {
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, store);
    let x = g.tape.constant(rows_tensor(tokens));
    let w = att.weights(&mut g, x).unwrap();
    let out = att.forward(&mut g, x).unwrap();
    (tensor_rows(g.tape.value(w)), tensor_rows(g.tape.value(out)))
}

fn geodesic(factors: usize, temperature: f64) -> AttentionConfig {
    AttentionConfig { kind: AttentionKind::Geodesic, factors, temperature }
}

fn distances(tokens: &Mat, factors: usize) -> Mat {
    let mut tape = Tape::new();
    let x = tape.constant(rows_tensor(tokens));
    let p = project_oblique(&mut tape, x, factors).unwrap();
    let d = geodesic_distances(&mut tape, p, factors).unwrap();
    tensor_rows(tape.value(d))
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

#[test]
fn projection_scales_blocks_to_unit_length() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![2, 4], vec![3.0, 4.0, 0.0, -2.0, 0.0, 0.0, 1.0, 1.0]).unwrap());
    let one = project_oblique(&mut tape, x, 1).unwrap();
    let two = project_oblique(&mut tape, x, 2).unwrap();
    let norm = 29f64.sqrt();
    assert!(max_abs_diff(tape.value(one).data(), &[3.0 / norm, 4.0 / norm, 0.0, -2.0 / norm, 0.0, 0.0, 0.5f64.sqrt(), 0.5f64.sqrt()]) < 1e-15);
    assert!(max_abs_diff(tape.value(two).data(), &[0.6, 0.8, 0.0, -1.0, 0.0, 0.0, 0.5f64.sqrt(), 0.5f64.sqrt()]) < 1e-15);
}

#[test]
fn single_factor_identity_value_is_a_softmax_of_angles() {
    let (att, mut store) = layer(4, geodesic(1, 1.0), 1);
    identity_value(&mut store, 4);
    let tokens = random_matrix(5, 4, 2);
    let (_, out) = run(&att, &store, &tokens);
    for i in 0..5 {
        let logits: Vec<f64> = (0..5)
            .map(|j| {
                if i == j {
                    return 0.0;
                }
                let (a, b) = (unit(&tokens[i]), unit(&tokens[j]));
                -a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>().acos()
            })
            .collect();
        let w = common::softmax(&logits);
        let want: Vec<f64> = (0..4).map(|c| (0..5).map(|j| w[j] * tokens[j][c]).sum()).collect();
        assert!(max_abs_diff(&out[i], &want) < 1e-10);
    }
}

#[test]
fn geodesic_layer_matches_scalar_loops() {
    for (factors, temperature) in [(1, 1.0), (2, 0.7), (4, 2.5)] {
        let (att, store) = layer(8, geodesic(factors, temperature), 3);
        let tokens = random_matrix(6, 8, 4);
        let (w, out) = run(&att, &store, &tokens);
        let want_w = common::geodesic_weights(&tokens, factors, temperature);
        let want = common::attention(&store, "att", &tokens, Some((factors, temperature)));
        for i in 0..6 {
            assert!(max_abs_diff(&w[i], &want_w[i]) < 1e-10);
            assert!(max_abs_diff(&out[i], &want[i]) < 1e-10);
        }
    }
}

#[test]
fn dot_layer_matches_scalar_loops() {
    let config = AttentionConfig { kind: AttentionKind::Dot, ..AttentionConfig::default() };
    let (att, store) = layer(8, config, 5);
    let tokens = random_matrix(7, 8, 6);
    let (w, out) = run(&att, &store, &tokens);
    let want_w = common::dot_weights(&store, "att", &tokens);
    let want = common::attention(&store, "att", &tokens, None);
    for i in 0..7 {
        assert!(max_abs_diff(&w[i], &want_w[i]) < 1e-10);
        assert!(max_abs_diff(&out[i], &want[i]) < 1e-10);
    }
}

#[test]
fn dot_layer_without_parameters_sits_on_a_uniform_row() {
    let config = AttentionConfig { kind: AttentionKind::Dot, ..AttentionConfig::default() };
    let (att, mut store) = layer(4, config, 7);
    for name in ["att.query.weight", "att.key.weight", "att.query.bias", "att.key.bias"] {
        let id = store.find(name).unwrap();
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::zeros(&shape);
    }
    let (w, _) = run(&att, &store, &random_matrix(5, 4, 8));
    for row in w {
        assert!(row.iter().all(|v| (v - 0.2).abs() < 1e-15));
    }
}

#[test]
fn single_token_attends_to_itself() {
    let (att, store) = layer(6, geodesic(3, 0.5), 9);
    let tokens = random_matrix(1, 6, 10);
    let (w, out) = run(&att, &store, &tokens);
    assert_eq!(w, vec![vec![1.0]]);
    let want = common::linear(&store, "att.value", &tokens[0]);
    assert!(max_abs_diff(&out[0], &want) < 1e-12);
}

#[test]
fn identical_tokens_split_attention_evenly() {
    let (att, store) = layer(4, geodesic(2, 1.0), 11);
    let t = vec![0.3, -1.2, 0.8, 0.5];
    let tokens = vec![t.clone(), t];
    let d = distances(&tokens, 2);
    assert!(d.iter().flatten().all(|&v| v <= 1e-6), "{d:?}");
    let (w, _) = run(&att, &store, &tokens);
    for row in w {
        assert!(max_abs_diff(&row, &[0.5, 0.5]) < 1e-6);
    }
}

#[test]
fn pairwise_distances_match_the_arccos_formula() {
    for factors in [1, 2, 4] {
        let tokens = random_matrix(5, 8, 12 + factors as u64);
        let d = distances(&tokens, factors);
        let projected: Mat = tokens.iter().map(|t| common::project(t, factors)).collect();
        for i in 0..5 {
            for j in 0..5 {
                let want = if i == j { 0.0 } else { geodesic_dist(&projected[i], &projected[j], factors) };
                assert!((d[i][j] - want).abs() < 1e-12, "{factors} {i} {j}");
            }
        }
    }
}

#[test]
fn point_distance_matches_an_independent_formula() {
    let a = unit(&[1.0, 2.0, -1.0, 0.5]);
    let b = unit(&[0.0, 1.0, 3.0, -2.0]);
    let cos: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    assert!((geodesic_dist(&a, &b, 1) - cos.acos()).abs() < 1e-12);
    let neg: Vec<f64> = a.iter().map(|x| -x).collect();
    assert!((geodesic_dist(&a, &neg, 1) - PI).abs() < 1e-12);
    let blocks = [[1.0, 0.0, 0.0, 1.0], [0.0, 1.0, 0.0, -1.0]];
    let want = ((PI / 2.0).powi(2) + PI.powi(2)).sqrt();
    assert!((geodesic_dist(&blocks[0], &blocks[1], 2) - want).abs() < 1e-12);
}

fn token(width: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, width).prop_filter("blocks away from zero", |v| {
        v.chunks(2).all(|b| b.iter().map(|x| x * x).sum::<f64>() > 1e-2)
    })
}

/// Every pair of corresponding 2-blocks is at least a little off parallel,
/// where arccos is well conditioned.
fn generic_pair(a: &[f64], b: &[f64]) -> bool {
    a.chunks(2).zip(b.chunks(2)).all(|(x, y)| {
        let c: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>()
            / (x.iter().map(|v| v * v).sum::<f64>() * y.iter().map(|v| v * v).sum::<f64>()).sqrt();
        c.abs() < 1.0 - 1e-6
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn distance_is_a_bounded_symmetric_metric(a in token(8), b in token(8), c in token(8), factors in prop::sample::select(vec![1usize, 2, 4])) {
        let d = distances(&vec![a, b, c], factors);
        let bound = PI * (factors as f64).sqrt() + 1e-12;
        for i in 0..3 {
            prop_assert_eq!(d[i][i], 0.0);
            for j in 0..3 {
                prop_assert!(d[i][j] >= 0.0 && d[i][j] <= bound);
                prop_assert!((d[i][j] - d[j][i]).abs() < 1e-12);
                for k in 0..3 {
                    prop_assert!(d[i][k] <= d[i][j] + d[j][k] + 1e-9);
                }
            }
        }
    }

    #[test]
    fn distance_ignores_block_scale(a in token(8), b in token(8), s in prop::collection::vec(0.1f64..10.0, 4)) {
        prop_assume!(generic_pair(&a, &b));
        let scaled: Vec<f64> = a.iter().enumerate().map(|(i, v)| v * s[i / 2]).collect();
        let d1 = distances(&vec![a, b.clone()], 4);
        let d2 = distances(&vec![scaled, b], 4);
        prop_assert!((d1[0][1] - d2[0][1]).abs() < 1e-10);
    }

    #[test]
    fn attention_rows_are_stochastic_and_favor_self(tokens in prop::collection::vec(token(8), 2..7), tau in 0.1f64..5.0) {
        let w = common::geodesic_weights(&tokens, 2, tau);
        let (att, store) = layer(8, geodesic(2, tau), 13);
        let (got, _) = run(&att, &store, &tokens);
        for (i, row) in got.iter().enumerate() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v > 0.0));
            prop_assert!(row.iter().all(|&v| v <= row[i] + 1e-15));
            prop_assert!(max_abs_diff(row, &w[i]) < 1e-10);
        }
    }
}
