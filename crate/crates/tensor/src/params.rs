use rand::Rng;

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
///
/// Parameters live outside any tape; each forward pass binds them onto a
/// fresh tape as leaves, so a store can move between workers freely.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Parameters {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Parameters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name `{name}`"
        );
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Adds a tensor drawn uniformly from `[-bound, bound]` with `bound = 1/sqrt(fan_in)`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound));
        self.add(name, t)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar entries.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Binds every parameter onto `tape` as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        Bindings(self.tensors.iter().map(|t| tape.param(t.clone())).collect())
    }

    /// Copies current parameter values into leaves bound earlier.
    pub fn rebind(&self, tape: &mut Tape, bindings: &Bindings) -> Result<()> {
        for (t, &v) in self.tensors.iter().zip(bindings.vars()) {
            tape.set_leaf(v, t.data())?;
        }
        Ok(())
    }

    /// Binds every parameter as a constant, for inference.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bindings {
        Bindings(self.tensors.iter().map(|t| tape.constant(t.clone())).collect())
    }
}

/// Tape variables for each parameter of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bindings(Vec<Var>);

impl Bindings {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bindings(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Per-parameter gradient buffers, aligned with a [`Parameters`] store.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &Parameters) -> Self {
        Gradients {
            grads: params.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    /// Reads the gradients of a completed backward pass.
    pub fn from_tape(params: &Parameters, tape: &Tape, bindings: &Bindings) -> Result<Self> {
        let mut g = Self::zeros_like(params);
        g.accumulate(params, tape, bindings, 1.0)?;
        Ok(g)
    }

    /// Adds `scale` times the tape gradients into the buffers.
    pub fn accumulate(
        &mut self,
        params: &Parameters,
        tape: &Tape,
        bindings: &Bindings,
        scale: f64,
    ) -> Result<()> {
        for id in params.ids() {
            let src = tape
                .grad(bindings.var(id))
                .ok_or_else(|| TensorError::MissingGrad(params.name(id).to_string()))?;
            for (d, &s) in self.grads[id.0].iter_mut().zip(src) {
                *d += scale * s;
            }
        }
        Ok(())
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn norm(&self, id: ParamId) -> f64 {
        self.grads[id.0].iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.is_finite())
    }

    pub fn clear(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }
}
