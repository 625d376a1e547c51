//! Linear maps and small perceptrons over the autodiff graph.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

/// Kaiming-uniform matrix for a ReLU stack: `U(-√(6/fan_in), √(6/fan_in))`.
pub fn kaiming_uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("fan_in x fan_out")
}

/// `y = x·W + b` over the last axis, `W: in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let weight = store.register(format!("{name}.w"), kaiming_uniform(in_dim, out_dim, rng));
        let bias = Some(store.register(format!("{name}.b"), Tensor::zeros(&[out_dim])));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn without_bias(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let weight = store.register(format!("{name}.w"), kaiming_uniform(in_dim, out_dim, rng));
        Linear {
            weight,
            bias: None,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        let y = x.matmul(&g.param(store, self.weight))?;
        match self.bias {
            Some(b) => y.add(&g.param(store, b)),
            None => Ok(y),
        }
    }

    /// Overwrites the weight with the identity and zeroes the bias.
    pub fn set_identity(&self, store: &mut ParamStore) {
        assert_eq!(self.in_dim, self.out_dim, "identity needs a square map");
        *store.value_mut(self.weight) = Tensor::eye(self.in_dim);
        if let Some(b) = self.bias {
            *store.value_mut(b) = Tensor::zeros(&[self.out_dim]);
        }
    }

    pub fn fill(&self, store: &mut ParamStore, weight: f64, bias: f64) {
        *store.value_mut(self.weight) = Tensor::full(&[self.in_dim, self.out_dim], weight);
        if let Some(b) = self.bias {
            *store.value_mut(b) = Tensor::full(&[self.out_dim], bias);
        }
    }
}

/// Stack of [`Linear`] layers with ReLU between them, and optionally after
/// the last one.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub relu_last: bool,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`.
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], relu_last: bool, rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers, relu_last }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i < last || self.relu_last {
                h = h.relu();
            }
        }
        Ok(h)
    }
}
