//! Named parameter storage and the glue that binds it into a [`Graph`].

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered set of named tensors. Two stores with the same layout can be
/// mixed elementwise (EMA, optimizer state).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    decay: Vec<bool>,
    lookup: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            decay: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    /// Registers a tensor. `decay` marks it for weight decay.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter {name}");
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        self.decay.push(decay);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.decay[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Errors unless `other` has identical names and shapes.
    pub fn check_same_layout(&self, other: &ParamStore<T>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Structure("parameter names differ".into()));
        }
        for (i, (a, b)) in self.tensors.iter().zip(&other.tensors).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::Structure(format!(
                    "parameter {} has shape {:?} vs {:?}",
                    self.names[i],
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    /// Zero-filled store with the same layout.
    pub fn zeros_like(&self) -> ParamStore<T> {
        let mut out = self.clone();
        for t in out.tensors.iter_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
        out
    }

    /// Euclidean distance between two stores of the same layout.
    pub fn distance(&self, other: &ParamStore<T>) -> T {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| {
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| (x - y) * (x - y))
                    .sum::<T>()
            })
            .sum::<T>()
            .sqrt()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            decay: self.decay.clone(),
            lookup: self.lookup.clone(),
        }
    }
}

/// Per-parameter gradients aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ParamGrads<T> {
    pub grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn empty(n: usize) -> Self {
        ParamGrads {
            grads: vec![None; n],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }

    /// `self += scale · other`.
    pub fn accumulate(&mut self, other: ParamGrads<T>, scale: T) {
        for (dst, src) in self.grads.iter_mut().zip(other.grads) {
            if let Some(src) = src {
                match dst {
                    Some(d) => d.iter_mut().zip(&src).for_each(|(a, &b)| *a += scale * b),
                    None => *dst = Some(src.into_iter().map(|b| scale * b).collect()),
                }
            }
        }
    }

    pub fn count(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn norm(&self) -> T {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|&x| x * x).sum::<T>())
            .sum::<T>()
            .sqrt()
    }
}

/// Lazily materializes parameters as graph leaves.
///
/// With `track = false` every parameter enters as a constant, so no
/// gradient can reach it.
pub struct Binder<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    vars: Vec<Option<Var>>,
    track: bool,
}

impl<'a, T: Scalar> Binder<'a, T> {
    pub fn new(store: &'a ParamStore<T>, track: bool) -> Self {
        Binder {
            store,
            vars: vec![None; store.len()],
            track,
        }
    }

    pub fn tracking(&self) -> bool {
        self.track
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn var(&mut self, g: &mut Graph<T>, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = g.leaf(self.store.get(id).clone(), self.track);
        self.vars[id.0] = Some(v);
        v
    }

    pub fn collect(&self, grads: &mut Gradients<T>) -> ParamGrads<T> {
        ParamGrads {
            grads: self
                .vars
                .iter()
                .map(|v| v.and_then(|v| grads.take(v)))
                .collect(),
        }
    }
}

/// Truncated normal (±2σ) initializer.
pub fn trunc_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let normal = Normal::new(0.0, std).expect("valid std");
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break T::lit(v);
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Linear layer parameters.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        Self::with_std(store, rng, name, fan_in, fan_out, bias, 0.02)
    }

    pub fn with_std<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        std: f64,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), trunc_normal(rng, &[fan_in, fan_out], std), true);
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([fan_out]), false));
        Linear { w, b }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Binder<T>, x: Var) -> Var {
        let w = p.var(g, self.w);
        let b = self.b.map(|b| p.var(g, b));
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub g: ParamId,
    pub b: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        let g = store.add(format!("{name}.weight"), Tensor::full([width], T::one()), false);
        let b = store.add(format!("{name}.bias"), Tensor::zeros([width]), false);
        LayerNorm { g, b }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Binder<T>, x: Var) -> Var {
        let gv = p.var(g, self.g);
        let bv = p.var(g, self.b);
        g.layer_norm(x, gv, bv)
    }
}
