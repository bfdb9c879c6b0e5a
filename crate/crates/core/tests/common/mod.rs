//! Scalar-loop reference implementations used as oracles. They read
//! parameters by name and share no code with the tape-based forward.
#![allow(dead_code)]

use mgt::autodiff::Tensor;
use mgt::geometry::{divide, FpsStart, PointCloud};
use mgt::model::MgtModel;
use mgt::nn::ParamStore;
use mgt::slfe::SlfeAblation;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows).map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

pub fn random_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<[f64; 3]> = (0..n)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();
    PointCloud::from_xyz(&pts, 0).unwrap()
}

/// Moves every parameter of `store` to uniform values (gains and sphere
/// scales around 1) so oracle comparisons are not dominated by tiny
/// initial weights.
pub fn scramble(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.param(id).name.clone();
        let around_one = name.ends_with("gain") || name.ends_with("alpha") || name.ends_with("beta");
        let shape = store.get(id).shape().to_vec();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| if around_one { rng.random_range(0.5..1.5) } else { rng.random_range(-0.5..0.5) })
            .collect();
        *store.get_mut(id) = Tensor::new(shape, data).unwrap();
    }
}

pub fn vecp(store: &ParamStore, name: &str) -> Vec<f64> {
    store.by_name(name).unwrap_or_else(|| panic!("missing {name}")).data().to_vec()
}

pub fn linear(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    let w = store.by_name(&format!("{name}.weight")).unwrap();
    let b = vecp(store, &format!("{name}.bias"));
    let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), n_in);
    (0..n_out)
        .map(|o| b[o] + (0..n_in).map(|i| x[i] * w.get(&[i, o])).sum::<f64>())
        .collect()
}

pub fn layer_norm(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    let gain = vecp(store, &format!("{name}.gain"));
    let offset = vecp(store, &format!("{name}.offset"));
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = (var + 1e-9).sqrt();
    x.iter().enumerate().map(|(i, v)| (v - mean) / sd * gain[i] + offset[i]).collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn mlp(store: &ParamStore, name: &str, x: &[f64], normalized: bool) -> Vec<f64> {
    let mut h = linear(store, &format!("{name}.fc1"), x);
    if normalized {
        h = layer_norm(store, &format!("{name}.norm"), &h);
    }
    let h: Vec<f64> = h.into_iter().map(gelu).collect();
    linear(store, &format!("{name}.fc2"), &h)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One patch (K rows of width d) through the sphere mapping.
pub fn sphere_map(patch: &Mat, alpha: &[f64], beta: &[f64], bias: &[f64]) -> Mat {
    let k = patch.len();
    let d = patch[0].len();
    let mean: Vec<f64> = (0..d).map(|c| patch.iter().map(|r| r[c]).sum::<f64>() / k as f64).collect();
    let centered: Mat = patch.iter().map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect()).collect();
    let mut out = Vec::with_capacity(k);
    for j in 0..k {
        let nj = norm(&centered[j]);
        let mut cos_sum = 0.0;
        for s in 0..k {
            cos_sum += dot(&centered[j], &centered[s]) / (nj * norm(&centered[s]) + 1e-5);
        }
        out.push(
            (0..d)
                .map(|c| alpha[c] * centered[j][c] / (nj + 1e-5) + beta[c] / k as f64 * cos_sum + bias[c])
                .collect(),
        );
    }
    out
}

pub fn mrc(patch: &Mat) -> Mat {
    let c = patch[0].len();
    let pooled: Vec<f64> = (0..c)
        .map(|i| patch.iter().map(|r| r[i]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    patch.iter().map(|r| r.iter().chain(&pooled).copied().collect()).collect()
}

/// One `K x C` patch to one embedding vector.
pub fn slfe(store: &ParamStore, name: &str, patch: &Mat, ablation: SlfeAblation) -> Vec<f64> {
    let mut h: Mat = patch.iter().map(|p| mlp(store, &format!("{name}.lift"), p, true)).collect();
    if ablation.sphere_map {
        h = sphere_map(
            &h,
            &vecp(store, &format!("{name}.sphere.alpha")),
            &vecp(store, &format!("{name}.sphere.beta")),
            &vecp(store, &format!("{name}.sphere.bias")),
        );
    }
    let h: Mat = h.iter().map(|p| mlp(store, &format!("{name}.mid"), p, true)).collect();
    let h = if ablation.mrc {
        mrc(&h)
    } else {
        h.iter().map(|r| r.iter().chain(r).copied().collect()).collect()
    };
    let h: Mat = h.iter().map(|p| mlp(store, &format!("{name}.post"), p, true)).collect();
    (0..h[0].len())
        .map(|c| h.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

pub fn project(token: &[f64], factors: usize) -> Vec<f64> {
    let m = token.len() / factors;
    token
        .chunks(m)
        .flat_map(|b| {
            let n = (b.iter().map(|x| x * x).sum::<f64>() + 1e-24).sqrt();
            b.iter().map(move |x| x / n).collect::<Vec<_>>()
        })
        .collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Attention matrix of the geodesic variant; the diagonal distance is 0.
pub fn geodesic_weights(tokens: &Mat, factors: usize, temperature: f64) -> Mat {
    let p: Mat = tokens.iter().map(|t| project(t, factors)).collect();
    let m = tokens[0].len() / factors;
    (0..p.len())
        .map(|i| {
            let logits: Vec<f64> = (0..p.len())
                .map(|j| {
                    if i == j {
                        return 0.0;
                    }
                    let d2: f64 = (0..factors)
                        .map(|b| {
                            let c = dot(&p[i][b * m..(b + 1) * m], &p[j][b * m..(b + 1) * m]);
                            c.clamp(-1.0, 1.0).acos().powi(2)
                        })
                        .sum();
                    -d2.sqrt() / temperature
                })
                .collect();
            softmax(&logits)
        })
        .collect()
}

pub fn dot_weights(store: &ParamStore, name: &str, tokens: &Mat) -> Mat {
    let q: Mat = tokens.iter().map(|t| linear(store, &format!("{name}.query"), t)).collect();
    let k: Mat = tokens.iter().map(|t| linear(store, &format!("{name}.key"), t)).collect();
    let scale = 1.0 / (tokens[0].len() as f64).sqrt();
    q.iter()
        .map(|qi| softmax(&k.iter().map(|kj| dot(qi, kj) * scale).collect::<Vec<_>>()))
        .collect()
}

pub fn attention(store: &ParamStore, name: &str, tokens: &Mat, geodesic: Option<(usize, f64)>) -> Mat {
    let a = match geodesic {
        Some((factors, temperature)) => geodesic_weights(tokens, factors, temperature),
        None => dot_weights(store, name, tokens),
    };
    let v: Mat = tokens.iter().map(|t| linear(store, &format!("{name}.value"), t)).collect();
    a.iter()
        .map(|row| (0..v[0].len()).map(|c| row.iter().zip(&v).map(|(w, vj)| w * vj[c]).sum()).collect())
        .collect()
}

/// Full classifier forward by loops; patch division comes from the
/// library (it has its own oracle tests).
pub fn model_logits(model: &MgtModel, cloud: &PointCloud, start: FpsStart) -> Vec<f64> {
    let cfg = model.config();
    let p = &model.params;
    let set = divide(cloud, &cfg.scales, start).unwrap();
    let mut tokens: Mat = vec![vecp(p, "class_token")];
    let mut centers: Mat = vec![vecp(p, "class_center")];
    for (s, sp) in set.scales.iter().enumerate() {
        for (i, row) in sp.neighbor_indices.iter().enumerate() {
            let patch: Mat = row.iter().map(|&j| cloud.point(j).to_vec()).collect();
            tokens.push(slfe(p, &format!("slfe{s}"), &patch, cfg.ablation));
            centers.push(cloud.point(sp.center_indices[i])[..3].to_vec());
        }
    }
    let mut z: Mat = tokens
        .iter()
        .zip(&centers)
        .map(|(t, c)| {
            let e = mlp(p, "position", c, false);
            t.iter().zip(&e).map(|(a, b)| a + b).collect()
        })
        .collect();
    let geodesic = match cfg.attention.kind {
        mgt::attention::AttentionKind::Geodesic => Some((cfg.attention.factors, cfg.attention.temperature)),
        mgt::attention::AttentionKind::Dot => None,
    };
    for l in 0..model.layers.len() {
        let h: Mat = z.iter().map(|t| layer_norm(p, &format!("encoder{l}.norm1"), t)).collect();
        let a = attention(p, &format!("encoder{l}.attention"), &h, geodesic);
        for (zi, ai) in z.iter_mut().zip(&a) {
            zi.iter_mut().zip(ai).for_each(|(x, y)| *x += y);
        }
        for zi in z.iter_mut() {
            let h = layer_norm(p, &format!("encoder{l}.norm2"), zi);
            let m = mlp(p, &format!("encoder{l}.mlp"), &h, false);
            zi.iter_mut().zip(&m).for_each(|(x, y)| *x += y);
        }
    }
    let y = layer_norm(p, "final_norm", &z[0]);
    linear(p, "head", &y)
}

pub fn tensor_rows(t: &Tensor) -> Mat {
    let c = *t.shape().last().unwrap();
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|d| (a[d] - b[d]) * (a[d] - b[d])).sum()
}

/// Continuous clouds for even seeds, clouds on a 4x4x4 integer grid (many
/// distance ties and duplicate points) for odd seeds.
pub fn grid_or_uniform_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            if seed % 2 == 0 {
                [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]
            } else {
                [0, 1, 2].map(|_| rng.random_range(0..4) as f64)
            }
        })
        .collect();
    PointCloud::from_xyz(&pts, 0).unwrap()
}

pub fn fps_oracle(c: &PointCloud, count: usize, start: usize) -> Vec<usize> {
    let mut picks = vec![start];
    while picks.len() < count {
        let mut best = None;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..c.len() {
            if picks.contains(&i) {
                continue;
            }
            let d = picks
                .iter()
                .map(|&p| dist2(c.xyz(p), c.xyz(i)))
                .fold(f64::INFINITY, f64::min);
            if d > best_d {
                best_d = d;
                best = Some(i);
            }
        }
        picks.push(best.unwrap());
    }
    picks
}

pub fn knn_oracle(c: &PointCloud, center: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..c.len()).collect();
    idx.sort_by(|&a, &b| {
        dist2(c.xyz(center), c.xyz(a))
            .partial_cmp(&dist2(c.xyz(center), c.xyz(b)))
            .unwrap()
    });
    let pos = idx.iter().position(|&i| i == center).unwrap();
    idx.remove(pos);
    idx.insert(0, center);
    idx.truncate(k);
    idx
}
