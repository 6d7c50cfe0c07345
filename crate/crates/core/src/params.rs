//! Named parameter storage and lazy binding onto a gradient tape.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::{DENSE_INIT_STD, DICT_INIT_STD};
use crate::tensor::init::{trunc_normal, SeededRng};
use crate::tensor::{Tape, Tensor, Var};

pub const WEIGHT_INIT_STD: f64 = 0.02;

/// What a parameter does; decides initialization, weight decay and the
/// accounting bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// FC or conv weight.
    Weight,
    /// FC or conv bias.
    Bias,
    NormGain,
    NormBias,
    Dictionary,
    Stabilizer,
    DenseRelation,
    TokenBias,
}

impl Role {
    pub fn init(self, shape: Vec<usize>, rng: &mut SeededRng) -> Tensor {
        match self {
            Role::Weight => trunc_normal(shape, WEIGHT_INIT_STD, rng),
            Role::Dictionary => trunc_normal(shape, DICT_INIT_STD, rng),
            Role::DenseRelation => trunc_normal(shape, DENSE_INIT_STD, rng),
            Role::Bias | Role::NormBias => Tensor::zeros(shape),
            Role::NormGain | Role::Stabilizer | Role::TokenBias => Tensor::ones(shape),
        }
    }

    pub fn decays(self) -> bool {
        self == Role::Weight
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: Role,
    /// Belongs to a temporal branch; absent from image-mode checkpoints.
    pub temporal: bool,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: impl Into<Vec<usize>>, role: Role) -> Self {
        Self { name: name.into(), shape: shape.into(), role, temporal: false }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Tags every spec in `specs` as temporal.
pub fn mark_temporal(mut specs: Vec<ParamSpec>) -> Vec<ParamSpec> {
    for s in &mut specs {
        s.temporal = true;
    }
    specs
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    specs: Vec<ParamSpec>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    /// Initializes every spec in order from `rng`.
    pub fn init(specs: Vec<ParamSpec>, rng: &mut SeededRng) -> Result<Self> {
        let mut store = Self::default();
        for spec in specs {
            let value = spec.role.init(spec.shape.clone(), rng);
            store.insert(spec, value)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, spec: ParamSpec, value: Tensor) -> Result<()> {
        if value.shape() != spec.shape {
            return Err(Error::shape("param", format!("{}: {:?} vs {:?}", spec.name, value.shape(), spec.shape)));
        }
        if self.index.contains_key(&spec.name) {
            return Err(Error::Invalid(format!("duplicate parameter `{}`", spec.name)));
        }
        self.index.insert(spec.name.clone(), self.specs.len());
        self.specs.push(spec);
        self.values.push(value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn position(&self, name: &str) -> Result<usize> {
        self.index.get(name).copied().ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.values[self.position(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = self.position(name)?;
        Ok(&mut self.values[i])
    }

    /// Replaces a value, keeping the declared shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self.position(name)?;
        if value.shape() != self.specs[i].shape {
            return Err(Error::shape("param", format!("{name}: {:?} vs {:?}", value.shape(), self.specs[i].shape)));
        }
        self.values[i] = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamSpec, &Tensor)> {
        self.specs.iter().zip(&self.values)
    }

    /// Total number of stored scalars.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Binds store entries to tape leaves on first use, so parameters a forward
/// pass never reads never appear on the tape.
pub struct Binder<'a> {
    store: &'a ParamStore,
    trainable: bool,
    vars: HashMap<usize, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        Self { store, trainable, vars: HashMap::new() }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn var(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        let i = self.store.position(name)?;
        if let Some(&v) = self.vars.get(&i) {
            return Ok(v);
        }
        let v = tape.leaf(self.store.values[i].clone(), self.trainable);
        self.vars.insert(i, v);
        Ok(v)
    }

    pub fn is_bound(&self, name: &str) -> bool {
        self.store.position(name).is_ok_and(|i| self.vars.contains_key(&i))
    }

    /// Gradients aligned with the store; unbound parameters get zeros.
    pub fn gradients(&self, tape: &Tape) -> Vec<Tensor> {
        self.store
            .specs
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                self.vars
                    .get(&i)
                    .and_then(|&v| tape.grad(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(spec.shape.clone()))
            })
            .collect()
    }
}

/// Worst relative error between taped parameter gradients of a scalar
/// function and central finite differences, over at most
/// `coords_per_param` evenly spaced coordinates of each tensor.
pub fn finite_diff_params<F>(store: &ParamStore, f: F, h: f64, coords_per_param: usize) -> Result<f64>
where
    F: Fn(&mut Tape, &mut Binder) -> Result<Var>,
{
    let mut tape = Tape::new();
    let mut binder = Binder::new(store, true);
    let loss = f(&mut tape, &mut binder)?;
    tape.backward(loss)?;
    let analytic = binder.gradients(&tape);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let mut b = Binder::new(s, false);
        let out = f(&mut t, &mut b)?;
        Ok(t.value(out).item())
    };
    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    for (p, grad) in analytic.iter().enumerate() {
        let n = store.values[p].len();
        let stride = n.div_ceil(coords_per_param.max(1));
        for i in (0..n).step_by(stride.max(1)) {
            let orig = probe.values[p].data()[i];
            probe.values[p].data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe.values[p].data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe.values[p].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[i];
            // Biases feeding batch norm have an exact zero gradient; the
            // floor keeps round-off there from reading as a large error.
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5));
        }
    }
    Ok(worst)
}
