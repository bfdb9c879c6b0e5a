//! Self-attention over patch tokens.
//!
//! The geodesic variant projects every token onto an oblique manifold (a
//! product of `n` unit spheres, one per contiguous block of channels),
//! measures pairwise great-circle distances there and attends with
//! `softmax(-D / tau) * W_v(z)`. Queries and keys are the projected tokens
//! themselves; only the value map is learned. The dot-product variant is the
//! usual single-head scaled dot-product attention and exists for
//! comparison.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Graph, Linear, ParamStore};

/// Guard added to block norms before projecting.
pub const PROJECTION_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    Geodesic,
    Dot,
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionKind::Geodesic => "geodesic",
            AttentionKind::Dot => "dot",
        })
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "geodesic" => Ok(AttentionKind::Geodesic),
            "dot" => Ok(AttentionKind::Dot),
            other => Err(Error::config(format!("unknown attention kind `{other}` (geodesic|dot)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub kind: AttentionKind,
    /// Number of sphere factors each token is split into.
    pub factors: usize,
    /// Divides the negative distances before the softmax.
    pub temperature: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            kind: AttentionKind::Geodesic,
            factors: 1,
            temperature: 1.0,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self, width: usize) -> Result<()> {
        if self.factors == 0 || width % self.factors != 0 {
            return Err(Error::config(format!(
                "factor count {} must divide the token width {width}",
                self.factors
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

fn token_shape(tape: &Tape, tokens: Var, op: &'static str) -> Result<(usize, usize)> {
    match *tape.shape(tokens) {
        [t, d] => Ok((t, d)),
        ref other => Err(Error::shape(op, format!("tokens {other:?}, expected [T, d]"))),
    }
}

/// Splits each `[T, d]` token into `factors` equal blocks and scales every
/// block to unit length. The guard sits under the square root,
/// `b / sqrt(|b|^2 + eps^2)`, so a block of ordinary size comes out unit
/// length to rounding and identical tokens stay at distance ~1e-8.
pub fn project_oblique(tape: &mut Tape, tokens: Var, factors: usize) -> Result<Var> {
    let (t, d) = token_shape(tape, tokens, "project_oblique")?;
    if factors == 0 || d % factors != 0 {
        return Err(Error::shape("project_oblique", format!("{factors} blocks for width {d}")));
    }
    let blocks = tape.reshape(tokens, vec![t, factors, d / factors])?;
    let sq = tape.mul(blocks, blocks)?;
    let sq = tape.sum(sq, 2)?;
    let sq = tape.add_scalar(sq, PROJECTION_EPS * PROJECTION_EPS)?;
    let norms = tape.sqrt(sq)?;
    let norms = tape.reshape(norms, vec![t, factors, 1])?;
    let unit = tape.div(blocks, norms)?;
    tape.reshape(unit, vec![t, d])
}

/// Pairwise oblique-manifold distances between projected tokens:
/// `D_ij = sqrt(sum_b arccos^2(<P_ib, P_jb>))`, shape `[T, T]`.
///
/// The diagonal is exactly zero. Computed through the dot product it would
/// be `arccos(1 - rounding)`, about 1e-8, and jitter under perturbation.
pub fn geodesic_distances(tape: &mut Tape, projected: Var, factors: usize) -> Result<Var> {
    let (t, d) = token_shape(tape, projected, "geodesic_distances")?;
    if factors == 0 || d % factors != 0 {
        return Err(Error::shape("geodesic_distances", format!("{factors} blocks for width {d}")));
    }
    let blocks = tape.reshape(projected, vec![t, factors, d / factors])?;
    let by_factor = tape.transpose(blocks, 0, 1)?;
    let by_factor_t = tape.transpose(by_factor, 1, 2)?;
    let cosines = tape.matmul(by_factor, by_factor_t)?;
    let angles = tape.arccos(cosines)?;
    let mut off_diagonal = vec![1.0; t * t];
    off_diagonal.iter_mut().step_by(t + 1).for_each(|v| *v = 0.0);
    let mask = tape.constant(Tensor::new(vec![1, t, t], off_diagonal)?);
    let angles = tape.mul(angles, mask)?;
    let sq = tape.mul(angles, angles)?;
    let total = tape.sum(sq, 0)?;
    tape.sqrt(total)
}

/// Distance between two tokens that are already blockwise unit length.
pub fn geodesic_dist(q: &[f64], k: &[f64], factors: usize) -> f64 {
    assert_eq!(q.len(), k.len());
    assert!(factors > 0 && q.len() % factors == 0);
    let m = q.len() / factors;
    q.chunks(m)
        .zip(k.chunks(m))
        .map(|(a, b)| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            dot.clamp(-1.0, 1.0).acos().powi(2)
        })
        .sum::<f64>()
        .sqrt()
}

/// Attention parameters of one encoder layer.
#[derive(Clone, Debug)]
pub struct Attention {
    pub config: AttentionConfig,
    pub value: Linear,
    /// Query and key maps; only the dot-product variant has them.
    pub query_key: Option<(Linear, Linear)>,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        config: AttentionConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate(width)?;
        let query_key = match config.kind {
            AttentionKind::Geodesic => None,
            AttentionKind::Dot => Some((
                Linear::new(store, &format!("{name}.query"), width, width, rng),
                Linear::new(store, &format!("{name}.key"), width, width, rng),
            )),
        };
        let value = Linear::new(store, &format!("{name}.value"), width, width, rng);
        Ok(Attention {
            config,
            value,
            query_key,
        })
    }

    /// Row-stochastic `[T, T]` attention matrix.
    pub fn weights(&self, g: &mut Graph, tokens: Var) -> Result<Var> {
        let (_, d) = token_shape(g.tape, tokens, "attention")?;
        let logits = match &self.query_key {
            None => {
                let projected = project_oblique(g.tape, tokens, self.config.factors)?;
                let dist = geodesic_distances(g.tape, projected, self.config.factors)?;
                g.tape.mul_scalar(dist, -1.0 / self.config.temperature)?
            }
            Some((query, key)) => {
                let q = query.forward(g, tokens)?;
                let k = key.forward(g, tokens)?;
                let kt = g.tape.transpose(k, 0, 1)?;
                let scores = g.tape.matmul(q, kt)?;
                g.tape.mul_scalar(scores, 1.0 / (d as f64).sqrt())?
            }
        };
        g.tape.softmax_rows(logits)
    }

    pub fn forward(&self, g: &mut Graph, tokens: Var) -> Result<Var> {
        let weights = self.weights(g, tokens)?;
        let values = self.value.forward(g, tokens)?;
        g.tape.matmul(weights, values)
    }
}
