use rand::Rng;

use super::{apply_directional, apply_directional_backward, as_column, as_row, concat_last, slice_last};
use crate::error::{Error, Result};
use crate::numerics::{
    directional_avg_backward, directional_pool, sigmoid, Act, Activation, Axis, BatchNorm2d, Conv2d, ConvSpec,
    FeatureMap, PoolMode, Scalar,
};
use crate::params::{join, Mode, Module, Visitor};

/// Coordinate attention: average pools along each axis are concatenated,
/// squeezed through one joint `1×1 conv → BN → h-swish` bottleneck, split
/// again, and expanded by separate per-direction `1×1` convolutions.
pub struct CoordAtt<T> {
    pub conv1: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    pub conv_h: Conv2d<T>,
    pub conv_w: Conv2d<T>,
    act: Act<T>,
    cache: Option<(FeatureMap<T>, FeatureMap<T>, FeatureMap<T>)>,
}

impl<T: Scalar> CoordAtt<T> {
    pub fn new<R: Rng>(channels: usize, hidden: usize, rng: &mut R) -> Self {
        CoordAtt {
            conv1: Conv2d::new(ConvSpec::new(channels, hidden, 1), rng),
            bn: BatchNorm2d::new(hidden),
            conv_h: Conv2d::new(ConvSpec::new(hidden, channels, 1).with_bias(true), rng),
            conv_w: Conv2d::new(ConvSpec::new(hidden, channels, 1).with_bias(true), rng),
            act: Act::new(Activation::HardSwish),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &FeatureMap<T>, mode: Mode) -> Result<FeatureMap<T>> {
        let s = x.shape();
        let f_h = as_row(directional_pool(x, Axis::Horizontal, PoolMode::Avg));
        let f_w = directional_pool(x, Axis::Vertical, PoolMode::Avg);
        let z = self.conv1.forward(&concat_last(&f_h, &f_w))?;
        let z = self.bn.forward(&z, mode)?;
        let z = self.act.forward(&z);
        let a_h = as_column(self.conv_h.forward(&slice_last(&z, 0, s.h))?.map(sigmoid));
        let a_w = self.conv_w.forward(&slice_last(&z, s.h, s.w))?.map(sigmoid);
        let y = apply_directional(x, &a_h, &a_w)?;
        self.cache = Some((x.clone(), a_h, a_w));
        Ok(y)
    }

    pub fn backward(&mut self, dy: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let (x, a_h, a_w) = self
            .cache
            .take()
            .ok_or_else(|| Error::State("coordinate attention backward without forward".into()))?;
        let s = x.shape();
        let (mut dx, dah, daw) = apply_directional_backward(dy, &x, &a_h, &a_w);
        let de_h = as_row(dah.zip_map(&a_h, |d, a| d * a * (T::one() - a))?);
        let de_w = daw.zip_map(&a_w, |d, a| d * a * (T::one() - a))?;
        let dz = concat_last(&self.conv_h.backward(&de_h)?, &self.conv_w.backward(&de_w)?);
        let dz = self.act.backward(&dz)?;
        let dz = self.bn.backward(&dz)?;
        let df = self.conv1.backward(&dz)?;
        dx.add_assign(&directional_avg_backward(&as_column(slice_last(&df, 0, s.h)), s, Axis::Horizontal))?;
        dx.add_assign(&directional_avg_backward(&slice_last(&df, s.h, s.w), s, Axis::Vertical))?;
        Ok(dx)
    }
}

impl<T: Scalar> Module<T> for CoordAtt<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.conv1.visit(&join(prefix, "conv1"), v);
        self.bn.visit(&join(prefix, "bn"), v);
        self.conv_h.visit(&join(prefix, "conv_h"), v);
        self.conv_w.visit(&join(prefix, "conv_w"), v);
    }
}
