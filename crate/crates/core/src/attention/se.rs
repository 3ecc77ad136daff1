use rand::Rng;

use super::{global_avg_backward, scale_channels, scale_channels_backward};
use crate::error::{Error, Result};
use crate::numerics::{global_pool, Act, Conv2d, ConvSpec, FeatureMap, PoolMode, Scalar};
use crate::params::{join, Module, Visitor};

/// Squeeze-and-excitation: global average pool, bias-free `C → C/r → C`
/// MLP with ReLU, sigmoid channel gate.
pub struct Se<T> {
    pub fc1: Conv2d<T>,
    pub fc2: Conv2d<T>,
    relu: Act<T>,
    cache: Option<(FeatureMap<T>, FeatureMap<T>)>,
}

impl<T: Scalar> Se<T> {
    pub fn new<R: Rng>(channels: usize, hidden: usize, rng: &mut R) -> Self {
        Se {
            fc1: Conv2d::new(ConvSpec::new(channels, hidden, 1), rng),
            fc2: Conv2d::new(ConvSpec::new(hidden, channels, 1), rng),
            relu: Act::relu(),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let pooled = global_pool(x, PoolMode::Avg).out;
        let z = self.fc1.forward(&pooled)?;
        let z = self.relu.forward_owned(z);
        let gate = self.fc2.forward(&z)?.map(crate::numerics::sigmoid);
        let y = scale_channels(x, &gate);
        self.cache = Some((x.clone(), gate));
        Ok(y)
    }

    pub fn backward(&mut self, dy: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let (x, gate) = self
            .cache
            .take()
            .ok_or_else(|| Error::State("SE backward without forward".into()))?;
        let (mut dx, dgate) = scale_channels_backward(dy, &x, &gate);
        let dz = dgate.zip_map(&gate, |d, s| d * s * (T::one() - s))?;
        let dz = self.fc2.backward(&dz)?;
        let dz = self.relu.backward(&dz)?;
        let dpooled = self.fc1.backward(&dz)?;
        dx.add_assign(&global_avg_backward(&dpooled, x.shape()))?;
        Ok(dx)
    }
}

impl<T: Scalar> Module<T> for Se<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.fc1.visit(&join(prefix, "fc1"), v);
        self.fc2.visit(&join(prefix, "fc2"), v);
    }
}
