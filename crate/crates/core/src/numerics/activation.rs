use super::{FeatureMap, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    /// `x · relu6(x + 3) / 6`
    HardSwish,
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

#[inline]
fn hard_swish<T: Scalar>(v: T) -> T {
    let six = T::lit(6.0);
    v * (v + T::lit(3.0)).max(T::zero()).min(six) / six
}

#[inline]
fn hard_swish_grad<T: Scalar>(v: T) -> T {
    if v <= T::lit(-3.0) {
        T::zero()
    } else if v >= T::lit(3.0) {
        T::one()
    } else {
        (T::lit(2.0) * v + T::lit(3.0)) / T::lit(6.0)
    }
}

pub fn activation<T: Scalar>(x: &FeatureMap<T>, kind: Activation) -> FeatureMap<T> {
    match kind {
        Activation::Relu => x.map(|v| v.max(T::zero())),
        Activation::Sigmoid => x.map(sigmoid),
        Activation::HardSwish => x.map(hard_swish),
    }
}

/// Elementwise activation layer. Caches what its derivative needs.
#[derive(Clone, Debug)]
pub struct Act<T> {
    pub kind: Activation,
    cache: Option<FeatureMap<T>>,
}

impl<T: Scalar> Act<T> {
    pub fn new(kind: Activation) -> Self {
        Act { kind, cache: None }
    }

    pub fn relu() -> Self {
        Self::new(Activation::Relu)
    }

    pub fn sigmoid() -> Self {
        Self::new(Activation::Sigmoid)
    }

    pub fn forward(&mut self, x: &FeatureMap<T>) -> FeatureMap<T> {
        let y = activation(x, self.kind);
        // relu/sigmoid derivatives are functions of the output; hard-swish needs the input
        self.cache = Some(match self.kind {
            Activation::HardSwish => x.clone(),
            _ => y.clone(),
        });
        y
    }

    /// In-place variant: `x` becomes the activation output.
    pub fn forward_owned(&mut self, x: FeatureMap<T>) -> FeatureMap<T> {
        match self.kind {
            Activation::HardSwish => self.forward(&x),
            kind => {
                let mut y = x;
                let f: fn(T) -> T = match kind {
                    Activation::Relu => |v: T| v.max(T::zero()),
                    _ => sigmoid,
                };
                y.data_mut().iter_mut().for_each(|v| *v = f(*v));
                self.cache = Some(y.clone());
                y
            }
        }
    }

    pub fn backward(&mut self, dy: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let c = self
            .cache
            .take()
            .ok_or_else(|| Error::State("activation backward without forward".into()))?;
        match self.kind {
            Activation::Relu => dy.zip_map(&c, |d, y| if y > T::zero() { d } else { T::zero() }),
            Activation::Sigmoid => dy.zip_map(&c, |d, y| d * y * (T::one() - y)),
            Activation::HardSwish => dy.zip_map(&c, |d, x| d * hard_swish_grad(x)),
        }
    }
}
