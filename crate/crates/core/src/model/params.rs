use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Handle to one learnable tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Optimizer parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// LIF decay and threshold scalars.
    Lif,
    /// Everything else.
    Main,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub group: ParamGroup,
}

/// Flat, ordered list of named learnable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<Param<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    /// Adds a tensor.
    ///
    /// # Panics
    ///
    /// If `name` is already taken; names key checkpoints.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, group: ParamGroup) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.entries.push(Param { name, value, group });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }

    /// Inserts every parameter into `graph`, returning vars indexed by [`ParamId`].
    pub fn bind(&self, graph: &mut Graph<T>, requires_grad: bool) -> Bound<T> {
        Bound { vars: self.entries.iter().map(|p| graph.leaf(p.value.clone(), requires_grad)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), group: p.group })
                .collect(),
        }
    }
}

/// Parameters of a store as graph variables.
#[derive(Clone)]
pub struct Bound<T> {
    vars: Vec<Var<T>>,
}

impl<T: Scalar> Bound<T> {
    /// Wraps vars given in parameter order.
    pub fn from_vars(vars: Vec<Var<T>>) -> Self {
        Self { vars }
    }

    #[inline]
    pub fn var(&self, id: ParamId) -> &Var<T> {
        &self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<T>] {
        &self.vars
    }
}

/// Normal(0, std) samples truncated to two standard deviations by rejection.
pub(crate) fn trunc_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, dims: [usize; 4], std: f64) -> Tensor<T> {
    let numel: usize = dims.iter().product();
    let data = (0..numel)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break T::lit(z * std);
            }
        })
        .collect();
    Tensor::from_vec(dims, data).expect("init extents are positive")
}

pub(crate) fn zeros<T: Scalar>(dims: [usize; 4]) -> Tensor<T> {
    Tensor::zeros(dims).expect("init extents are positive")
}

pub(crate) fn filled<T: Scalar>(dims: [usize; 4], v: f64) -> Tensor<T> {
    Tensor::full(dims, T::lit(v)).expect("init extents are positive")
}
