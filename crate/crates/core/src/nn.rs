//! Named parameter storage, initialisation and per-forward binding into a [`Graph`].

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{MonetError, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Multiplicative weights, initialised from a truncated normal scaled by `fan_in`.
    Weight {
        fan_in: usize,
    },
    Bias,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn weight(name: impl Into<String>, shape: &[usize], fan_in: usize) -> Self {
        Self { name: name.into(), shape: shape.to_vec(), kind: ParamKind::Weight { fan_in } }
    }

    pub fn bias(name: impl Into<String>, len: usize) -> Self {
        Self { name: name.into(), shape: vec![len], kind: ParamKind::Bias }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Parameters keyed by name, iterated in lexicographic order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Scalar> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self { tensors: BTreeMap::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Truncated-normal weights (stddev `1/√fan_in`, redrawn beyond ±2 stddev) and zero biases.
    pub fn init(specs: &[ParamSpec], rng: &mut impl Rng) -> Self {
        let mut store = Self::new();
        for spec in specs {
            let tensor = match spec.kind {
                ParamKind::Bias => Tensor::zeros(&spec.shape),
                ParamKind::Weight { fan_in } => {
                    let std = 1.0 / (fan_in.max(1) as f64).sqrt();
                    let data = (0..spec.numel()).map(|_| T::of(std * truncated_standard_normal(rng))).collect();
                    Tensor::new(&spec.shape, data).expect("spec shape")
                }
            };
            store.insert(spec.name.clone(), tensor);
        }
        store
    }

    pub fn zeros(specs: &[ParamSpec]) -> Self {
        let mut store = Self::new();
        for spec in specs {
            store.insert(spec.name.clone(), Tensor::zeros(&spec.shape));
        }
        store
    }

    pub fn insert(&mut self, name: String, tensor: Tensor<T>) {
        self.tensors.insert(name, tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Lists every disagreement between the store and the expected specs.
    pub fn mismatches(&self, specs: &[ParamSpec]) -> Vec<String> {
        let mut problems = Vec::new();
        for spec in specs {
            match self.tensors.get(&spec.name) {
                None => problems.push(format!("{}: missing", spec.name)),
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    problems.push(format!("{}: shape {:?}, expected {:?}", spec.name, t.shape(), spec.shape))
                }
                Some(_) => {}
            }
        }
        for name in self.tensors.keys() {
            if !specs.iter().any(|s| &s.name == name) {
                problems.push(format!("{name}: unexpected tensor"));
            }
        }
        problems
    }

    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        let problems = self.mismatches(specs);
        if problems.is_empty() {
            Ok(())
        } else {
            Err(MonetError::CheckpointMismatch(problems))
        }
    }
}

pub fn truncated_standard_normal(rng: &mut impl Rng) -> f64 {
    loop {
        let v: f64 = StandardNormal.sample(rng);
        if v.abs() <= 2.0 {
            return v;
        }
    }
}

/// Parameters of one forward pass, registered into the graph on first use.
pub struct Bound<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    trainable: bool,
    vars: HashMap<String, Var>,
}

impl<'a, T: Scalar> Bound<'a, T> {
    /// Parameters that receive gradients.
    pub fn trainable(store: &'a ParamStore<T>) -> Self {
        Self { store, trainable: true, vars: HashMap::new() }
    }

    /// Parameters treated as constants (evaluation).
    pub fn frozen(store: &'a ParamStore<T>) -> Self {
        Self { store, trainable: false, vars: HashMap::new() }
    }

    /// Binds `name`, checking it against the shape the calling block expects.
    pub fn get(&mut self, g: &mut Graph<T>, name: &str, shape: &[usize]) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let block = name.rsplit_once('.').map_or(name, |(b, _)| b).to_string();
        let tensor = self.store.get(name).ok_or_else(|| MonetError::BlockShape {
            block: block.clone(),
            detail: format!("missing parameter {name}"),
        })?;
        if tensor.shape() != shape {
            return Err(MonetError::BlockShape {
                block,
                detail: format!("{name} has shape {:?}, block plan needs {:?}", tensor.shape(), shape),
            });
        }
        let v = if self.trainable { g.param(tensor.clone()) } else { g.constant(tensor.clone()) };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn is_bound(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Gradient for every stored parameter; parameters never used get zeros.
    pub fn collect_gradients(&self, grads: &mut Gradients<T>) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, t) in self.store.iter() {
            let g = self.vars.get(name).and_then(|&v| grads.take(v)).unwrap_or_else(|| Tensor::zeros(t.shape()));
            out.insert(name.clone(), g);
        }
        out
    }
}
