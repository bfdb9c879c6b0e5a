//! Named parameters and the small layers the model is assembled from.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Standard deviation of the initial weights.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Whether weight decay applies.
    pub decay: bool,
}

/// Flat, ordered list of named tensors. Order is creation order, which is
/// also the checkpoint order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value, decay });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.find(name).map(|id| self.get(id))
    }

    /// Replaces every value with the one of the same name in `other`.
    pub fn load_from(&mut self, other: &[(String, Tensor)]) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::config(format!(
                "expected {} tensors, found {}",
                self.params.len(),
                other.len()
            )));
        }
        for (name, value) in other {
            let id = self
                .find(name)
                .ok_or_else(|| Error::config(format!("unexpected tensor `{name}`")))?;
            if self.get(id).shape() != value.shape() {
                return Err(Error::config(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    value.shape(),
                    self.get(id).shape()
                )));
            }
            *self.get_mut(id) = value.clone();
        }
        Ok(())
    }
}

/// A tape plus a lazily populated mapping from parameters to tape leaves.
pub struct Graph<'t, 'p> {
    pub tape: &'t mut Tape,
    params: &'p ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'t, 'p> Graph<'t, 'p> {
    pub fn new(tape: &'t mut Tape, params: &'p ParamStore) -> Self {
        Graph {
            tape,
            bound: vec![None; params.len()],
            params,
        }
    }

    /// Uses `var` for `id` instead of placing the stored value on the tape.
    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.bound[id.0] = Some(var);
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.var(self.params.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    /// Gradient per parameter (in store order) after a backward pass.
    /// Parameters that were not used get `None`.
    pub fn collect(&self, grads: &mut Gradients) -> Vec<Option<Vec<f64>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| grads.take(v)))
            .collect()
    }
}

/// Normal samples with std [`INIT_STD`], redrawn outside two standard
/// deviations.
pub fn truncated_normal(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * INIT_STD {
                break v;
            }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

pub fn normal(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let n: usize = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect())
}

/// `y = x W + b` over the last axis; `W` is stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: store.add(format!("{name}.weight"), truncated_normal(rng, &[inputs, outputs]), true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]), false),
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.tape.shape(x).to_vec();
        if shape.last() != Some(&self.inputs) {
            return Err(Error::shape(
                "linear",
                format!("input {shape:?} for {}->{} layer", self.inputs, self.outputs),
            ));
        }
        let rows = shape[..shape.len() - 1].iter().product();
        let flat = if shape.len() == 2 { x } else { g.tape.reshape(x, vec![rows, self.inputs])? };
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.tape.matmul(flat, w)?;
        let y = g.tape.add(y, b)?;
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.outputs;
        g.tape.reshape(y, out_shape)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub offset: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[width], 1.0), false),
            offset: store.add(format!("{name}.offset"), Tensor::zeros(&[width]), false),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let offset = g.param(self.offset);
        g.tape.layer_norm(x, gain, offset)
    }
}

/// Affine, optional layer-norm, GELU, affine.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub norm: Option<LayerNorm>,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        widths: [usize; 3],
        normalized: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fc1 = Linear::new(store, &format!("{name}.fc1"), widths[0], widths[1], rng);
        let norm = normalized.then(|| LayerNorm::new(store, &format!("{name}.norm"), widths[1]));
        let fc2 = Linear::new(store, &format!("{name}.fc2"), widths[1], widths[2], rng);
        Mlp { fc1, norm, fc2 }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = self.fc1.forward(g, x)?;
        if let Some(norm) = &self.norm {
            h = norm.forward(g, h)?;
        }
        let h = g.tape.gelu(h)?;
        self.fc2.forward(g, h)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn truncated_normal_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = truncated_normal(&mut rng, &[100, 100]);
        assert!(t.data().iter().all(|v| v.abs() <= 2.0 * INIT_STD));
        let mean = t.data().iter().sum::<f64>() / 1e4;
        assert!(mean.abs() < 1e-3);
    }

    #[test]
    fn linear_maps_leading_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 3, 5, &mut rng);
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &store);
        let x = g.tape.constant(Tensor::full(&[2, 4, 3], 1.0));
        let y = lin.forward(&mut g, x).unwrap();
        assert_eq!(g.tape.shape(y), &[2, 4, 5]);
        let w = store.get(lin.weight);
        let expected: f64 = (0..3).map(|i| w.get(&[i, 2])).sum();
        assert!((g.tape.value(y).get(&[1, 3, 2]) - expected).abs() < 1e-15);
    }

    #[test]
    fn biases_and_norms_skip_decay() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        Mlp::new(&mut store, "m", [2, 4, 2], true, &mut rng);
        let decayed: Vec<&str> = store.iter().filter(|p| p.decay).map(|p| p.name.as_str()).collect();
        assert_eq!(decayed, vec!["m.fc1.weight", "m.fc2.weight"]);
    }
}
