//! Learned parameters, non-learned buffers, and the visitor used to walk
//! them by stable dotted names (checkpointing, optimizers, counting).

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::numerics::Scalar;

/// Whether batch normalization uses batch statistics (and updates running
/// statistics) or the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A learned tensor together with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub dims: Vec<usize>,
}

impl<T: Scalar> Param<T> {
    pub fn zeros(dims: &[usize]) -> Self {
        Self::filled(dims, T::zero())
    }

    pub fn filled(dims: &[usize], v: T) -> Self {
        let n = dims.iter().product();
        Param {
            value: vec![v; n],
            grad: vec![T::zero(); n],
            dims: dims.to_vec(),
        }
    }

    /// He-normal (fan-in) initialization: `N(0, 2 / fan_in)`.
    pub fn he_normal<R: Rng>(dims: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let mut p = Self::zeros(dims);
        for v in p.value.iter_mut() {
            *v = T::lit(normal.sample(rng));
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Callback interface for walking every named tensor of a module tree.
///
/// Names are dotted paths such as `backbone.layer1.0.conv1.weight`; their
/// order is the declaration order of the module tree and is stable.
pub trait Visitor<T> {
    fn param(&mut self, name: &str, p: &mut Param<T>);
    fn buffer(&mut self, name: &str, dims: &[usize], values: &mut Vec<T>);
}

pub trait Module<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>);
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

struct Counter {
    params: usize,
    buffers: usize,
}

impl<T> Visitor<T> for Counter {
    fn param(&mut self, _: &str, p: &mut Param<T>) {
        self.params += p.value.len();
    }
    fn buffer(&mut self, _: &str, _: &[usize], values: &mut Vec<T>) {
        self.buffers += values.len();
    }
}

/// Number of learned scalar values (buffers excluded).
pub fn count_params<T, M: Module<T> + ?Sized>(m: &mut M) -> usize {
    let mut c = Counter { params: 0, buffers: 0 };
    m.visit("", &mut c);
    c.params
}

pub fn zero_grads<T: Scalar, M: Module<T> + ?Sized>(m: &mut M) {
    struct Z;
    impl<T: Scalar> Visitor<T> for Z {
        fn param(&mut self, _: &str, p: &mut Param<T>) {
            p.zero_grad();
        }
        fn buffer(&mut self, _: &str, _: &[usize], _: &mut Vec<T>) {}
    }
    m.visit("", &mut Z);
}

/// Ordered list of parameter names (buffers excluded).
pub fn param_names<T, M: Module<T> + ?Sized>(m: &mut M) -> Vec<String> {
    struct Names(Vec<String>);
    impl<T> Visitor<T> for Names {
        fn param(&mut self, name: &str, _: &mut Param<T>) {
            self.0.push(name.to_string());
        }
        fn buffer(&mut self, _: &str, _: &[usize], _: &mut Vec<T>) {}
    }
    let mut n = Names(Vec::new());
    m.visit("", &mut n);
    n.0
}
