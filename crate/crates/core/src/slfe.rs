//! Shared local feature extractor: turns each `K x C_in` patch into one
//! `d_out` vector.
//!
//! Per point: lift MLP (C_in -> 64), sphere mapping, mid MLP (64 -> 128),
//! max-pool/repeat/concat (128 -> 256), post MLP (256 -> d_out). A final
//! channel-wise max over the patch makes the result independent of point
//! order. Each scale owns a separate extractor; the sharing is across the
//! patches of one scale.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Graph, Mlp, ParamId, ParamStore};

/// Feature width at the sphere-mapping stage.
pub const SPHERE_DIM: usize = 64;
/// Stability term in the sphere-mapping denominators. Not learned.
pub const SPHERE_EPS: f64 = 1e-5;
pub const MID_DIM: usize = 128;

/// Which optional stages run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlfeAblation {
    pub sphere_map: bool,
    pub mrc: bool,
}

impl Default for SlfeAblation {
    fn default() -> Self {
        SlfeAblation {
            sphere_map: true,
            mrc: true,
        }
    }
}

/// Learnable scale `alpha`, angle weight `beta` and offset `bias`, each of
/// width [`SPHERE_DIM`].
#[derive(Clone, Debug)]
pub struct SphereMapParams {
    pub alpha: ParamId,
    pub beta: ParamId,
    pub bias: ParamId,
}

impl SphereMapParams {
    pub fn new(store: &mut ParamStore, name: &str) -> Self {
        SphereMapParams {
            alpha: store.add(format!("{name}.alpha"), Tensor::full(&[SPHERE_DIM], 1.0), false),
            beta: store.add(format!("{name}.beta"), Tensor::full(&[SPHERE_DIM], 1.0), false),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[SPHERE_DIM]), false),
        }
    }
}

/// Maps the points of every patch towards a unit sphere around the patch
/// mean and adds the mean cosine between each point and the points of its
/// patch:
///
/// `out_ij = alpha * c_ij / (|c_ij| + eps)
///         + beta / K * sum_s <c_ij, c_is> / (|c_ij| |c_is| + eps) + bias`
///
/// where `c_ij` is point `j` of patch `i` minus the patch mean.
///
/// `features` is `[S, K, d]`; `alpha`, `beta`, `bias` are `[d]`.
pub fn sphere_map(tape: &mut Tape, features: Var, alpha: Var, beta: Var, bias: Var) -> Result<Var> {
    let (s, k, d) = match *tape.shape(features) {
        [s, k, d] => (s, k, d),
        ref other => return Err(Error::shape("sphere_map", format!("features {other:?}, expected [S, K, d]"))),
    };
    for p in [alpha, beta, bias] {
        if tape.shape(p) != [d] {
            return Err(Error::shape(
                "sphere_map",
                format!("parameter {:?} for feature width {d}", tape.shape(p)),
            ));
        }
    }
    let mean = tape.mean(features, 1)?;
    let mean = tape.reshape(mean, vec![s, 1, d])?;
    let centered = tape.sub(features, mean)?;

    let squared = tape.mul(centered, centered)?;
    let sq_norm = tape.sum(squared, 2)?;
    let norm = tape.sqrt(sq_norm)?;

    let guarded = tape.add_scalar(norm, SPHERE_EPS)?;
    let guarded = tape.reshape(guarded, vec![s, k, 1])?;
    let unit = tape.div(centered, guarded)?;
    let radial = tape.mul(unit, alpha)?;

    let centered_t = tape.transpose(centered, 1, 2)?;
    let dots = tape.matmul(centered, centered_t)?;
    let rows = tape.reshape(norm, vec![s, k, 1])?;
    let cols = tape.reshape(norm, vec![s, 1, k])?;
    let norm_products = tape.matmul(rows, cols)?;
    let denom = tape.add_scalar(norm_products, SPHERE_EPS)?;
    let cosines = tape.div(dots, denom)?;
    let cos_sum = tape.sum(cosines, 2)?;
    let cos_mean = tape.mul_scalar(cos_sum, 1.0 / k as f64)?;
    let cos_mean = tape.reshape(cos_mean, vec![s * k, 1])?;
    let beta_row = tape.reshape(beta, vec![1, d])?;
    let angular = tape.matmul(cos_mean, beta_row)?;
    let angular = tape.reshape(angular, vec![s, k, d])?;

    let out = tape.add(radial, angular)?;
    tape.add(out, bias)
}

/// Max-pool over the points of each patch, repeat the pooled vector for
/// every point and append it: `[S, K, C] -> [S, K, 2C]`, channels ordered
/// `[point features, pooled features]`.
pub fn mrc(tape: &mut Tape, features: Var) -> Result<Var> {
    let shape = tape.shape(features).to_vec();
    let [s, _, c] = shape[..] else {
        return Err(Error::shape("mrc", format!("features {shape:?}, expected [S, K, C]")));
    };
    let pooled = tape.max(features, 1)?;
    let pooled = tape.reshape(pooled, vec![s, 1, c])?;
    let repeated = tape.broadcast_to(pooled, shape)?;
    tape.concat(&[features, repeated], 2)
}

/// Parameters of one scale's extractor.
#[derive(Clone, Debug)]
pub struct Slfe {
    pub lift: Mlp,
    pub sphere: SphereMapParams,
    pub mid: Mlp,
    pub post: Mlp,
    pub channels: usize,
    pub d_out: usize,
}

impl Slfe {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Slfe {
            lift: Mlp::new(store, &format!("{name}.lift"), [channels, SPHERE_DIM, SPHERE_DIM], true, rng),
            sphere: SphereMapParams::new(store, &format!("{name}.sphere")),
            mid: Mlp::new(store, &format!("{name}.mid"), [SPHERE_DIM, MID_DIM, MID_DIM], true, rng),
            post: Mlp::new(store, &format!("{name}.post"), [2 * MID_DIM, d_out, d_out], true, rng),
            channels,
            d_out,
        }
    }

    /// `[S, K, C_in]` patches to `[S, d_out]` embeddings.
    pub fn forward(&self, g: &mut Graph, patches: Var, ablation: SlfeAblation) -> Result<Var> {
        let shape = g.tape.shape(patches).to_vec();
        if shape.len() != 3 || shape[2] != self.channels {
            return Err(Error::shape(
                "slfe",
                format!("patches {shape:?}, expected [S, K, {}]", self.channels),
            ));
        }
        let mut h = self.lift.forward(g, patches)?;
        if ablation.sphere_map {
            let alpha = g.param(self.sphere.alpha);
            let beta = g.param(self.sphere.beta);
            let bias = g.param(self.sphere.bias);
            h = sphere_map(g.tape, h, alpha, beta, bias)?;
        }
        let h = self.mid.forward(g, h)?;
        let h = if ablation.mrc {
            mrc(g.tape, h)?
        } else {
            g.tape.concat(&[h, h], 2)?
        };
        let h = self.post.forward(g, h)?;
        g.tape.max(h, 1)
    }
}
