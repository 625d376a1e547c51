use std::collections::BTreeMap;

use crate::error::{Result, SpilError};

use super::tensor::Tensor;

/// Index of a parameter within its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named tensor and its accumulated gradient. Buffers (`trainable ==
/// false`) are saved with the model but skipped by the optimizer.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub trainable: bool,
}

/// Owns every trainable parameter of a model, keyed by a unique dotted name
/// such as `stage0.local.head3.m`.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Registers a parameter. Panics on a duplicate name, which is always a
    /// bug in the model builder.
    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.insert(name.into(), value, true)
    }

    /// Registers a non-trainable tensor.
    pub fn register_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.insert(name.into(), value, false)
    }

    fn insert(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        let id = ParamId(self.params.len());
        let prev = self.by_name.insert(name.clone(), id);
        assert!(prev.is_none(), "duplicate parameter name `{name}`");
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            trainable,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Ids in lexicographic name order, the order used for serialization.
    pub fn ids_by_name(&self) -> Vec<ParamId> {
        self.by_name.values().copied().collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        let p = &mut self.params[id.0];
        assert_eq!(grad.len(), p.value.numel(), "gradient length for `{}`", p.name);
        match &mut p.grad {
            Some(g) => g.data_mut().iter_mut().zip(grad).for_each(|(a, b)| *a += b),
            None => {
                p.grad = Some(Tensor::new(p.value.shape().to_vec(), grad.to_vec()).expect("grad shape"))
            }
        }
    }

    /// Sets every gradient buffer to zeros.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Some(Tensor::zeros(p.value.shape()));
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }
}

/// Velocity buffers for SGD with momentum.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub velocity: Vec<Tensor>,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(SpilError::Config(format!("learning rate {learning_rate} must be finite and >= 0")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(SpilError::Config(format!("momentum {momentum} must lie in [0, 1)")));
        }
        Ok(OptimizerState {
            velocity: store.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            learning_rate,
            momentum,
        })
    }
}

/// `v ← μ·v + g; w ← w − lr·v`, then zeroes the gradients.
///
/// Fails without touching any weight if a parameter has no gradient.
pub fn sgd_momentum_step(store: &mut ParamStore, state: &mut OptimizerState) -> Result<()> {
    assert_eq!(state.velocity.len(), store.len(), "optimizer state built for another store");
    if let Some(p) = store.params.iter().find(|p| p.trainable && p.grad.is_none()) {
        return Err(SpilError::MissingGradient(p.name.clone()));
    }
    let (lr, mu) = (state.learning_rate, state.momentum);
    for (p, v) in store.params.iter_mut().zip(&mut state.velocity) {
        if !p.trainable {
            continue;
        }
        let grad = p.grad.as_mut().expect("checked above");
        for ((w, v), g) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
            *v = mu * *v + g;
            *w -= lr * *v;
        }
        grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
    }
    Ok(())
}
