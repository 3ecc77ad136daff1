use rand::Rng;

use super::{concat_last, global_avg_backward, scale_channels, scale_channels_backward, slice_last, CBAM_KERNEL};
use crate::error::{Error, Result};
use crate::numerics::{
    channel_pool, global_pool, scatter_argmax, sigmoid, Act, Conv2d, ConvSpec, FeatureMap, PoolMode, Scalar,
};
use crate::params::{join, Module, Visitor};

/// CBAM: channel gate from a shared MLP over avg- and max-pooled
/// descriptors, followed by a spatial gate from a 7×7 convolution over the
/// channel-wise mean and max maps.
pub struct Cbam<T> {
    pub fc1: Conv2d<T>,
    pub fc2: Conv2d<T>,
    /// `2 → 1`, 7×7, padding 3, no bias.
    pub spatial: Conv2d<T>,
    relu: Act<T>,
    cache: Option<CbamCache<T>>,
}

struct CbamCache<T> {
    x: FeatureMap<T>,
    x1: FeatureMap<T>,
    gate_c: FeatureMap<T>,
    gate_s: FeatureMap<T>,
    global_argmax: Vec<usize>,
    channel_argmax: Vec<usize>,
}

impl<T: Scalar> Cbam<T> {
    pub fn new<R: Rng>(channels: usize, hidden: usize, rng: &mut R) -> Self {
        Cbam {
            fc1: Conv2d::new(ConvSpec::new(channels, hidden, 1), rng),
            fc2: Conv2d::new(ConvSpec::new(hidden, channels, 1), rng),
            spatial: Conv2d::new(ConvSpec::new(2, 1, CBAM_KERNEL), rng),
            relu: Act::relu(),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let s = x.shape();
        let avg = global_pool(x, PoolMode::Avg).out;
        let max = global_pool(x, PoolMode::Max);
        // column 0 carries the avg descriptor, column 1 the max descriptor
        let pooled = concat_last(&avg, &max.out);
        let z = self.fc1.forward(&pooled)?;
        let z = self.relu.forward_owned(z);
        let m = self.fc2.forward(&z)?;
        let gate_c = slice_last(&m, 0, 1)
            .zip_map(&slice_last(&m, 1, 1), |a, b| sigmoid(a + b))?;
        let x1 = scale_channels(x, &gate_c);

        let c_avg = channel_pool(&x1, PoolMode::Avg).out;
        let c_max = channel_pool(&x1, PoolMode::Max);
        let sp = FeatureMap::concat_channels(&[&c_avg, &c_max.out])?;
        let gate_s = self.spatial.forward(&sp)?.map(sigmoid);
        let mut y = x1.clone();
        for b in 0..s.b {
            let g = gate_s.plane(b, 0).to_vec();
            for c in 0..s.c {
                y.plane_mut(b, c).iter_mut().zip(&g).for_each(|(v, &w)| *v *= w);
            }
        }
        self.cache = Some(CbamCache {
            x: x.clone(),
            x1,
            gate_c,
            gate_s,
            global_argmax: max.argmax,
            channel_argmax: c_max.argmax,
        });
        Ok(y)
    }

    pub fn backward(&mut self, dy: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let CbamCache {
            x,
            x1,
            gate_c,
            gate_s,
            global_argmax,
            channel_argmax,
        } = self
            .cache
            .take()
            .ok_or_else(|| Error::State("CBAM backward without forward".into()))?;
        let s = x.shape();
        let p = s.plane();

        // spatial gate
        let mut dx1 = FeatureMap::zeros(s);
        let mut dgate_s = FeatureMap::zeros(gate_s.shape());
        for b in 0..s.b {
            let g = gate_s.plane(b, 0).to_vec();
            let mut acc = vec![T::zero(); p];
            for c in 0..s.c {
                let d = dy.plane(b, c);
                let v = x1.plane(b, c);
                for i in 0..p {
                    acc[i] += d[i] * v[i];
                }
                let dst = dx1.plane_mut(b, c);
                for i in 0..p {
                    dst[i] = d[i] * g[i];
                }
            }
            dgate_s.plane_mut(b, 0).copy_from_slice(&acc);
        }
        let dconv = dgate_s.zip_map(&gate_s, |d, g| d * g * (T::one() - g))?;
        let dsp = self.spatial.backward(&dconv)?;
        let inv_c = T::one() / T::from_usize_lossy(s.c);
        let d_avg = dsp.slice_channels(0, 1)?;
        for b in 0..s.b {
            let g = d_avg.plane(b, 0).to_vec();
            for c in 0..s.c {
                dx1.plane_mut(b, c).iter_mut().zip(&g).for_each(|(v, &d)| *v += d * inv_c);
            }
        }
        dx1.add_assign(&scatter_argmax(&dsp.slice_channels(1, 1)?, &channel_argmax, s)?)?;

        // channel gate
        let (mut dx, dgate_c) = scale_channels_backward(&dx1, &x, &gate_c);
        let dm_half = dgate_c.zip_map(&gate_c, |d, g| d * g * (T::one() - g))?;
        let dm = concat_last(&dm_half, &dm_half);
        let dz = self.fc2.backward(&dm)?;
        let dz = self.relu.backward(&dz)?;
        let dpooled = self.fc1.backward(&dz)?;
        dx.add_assign(&global_avg_backward(&slice_last(&dpooled, 0, 1), s))?;
        dx.add_assign(&scatter_argmax(&slice_last(&dpooled, 1, 1), &global_argmax, s)?)?;
        Ok(dx)
    }
}

impl<T: Scalar> Module<T> for Cbam<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.fc1.visit(&join(prefix, "fc1"), v);
        self.fc2.visit(&join(prefix, "fc2"), v);
        self.spatial.visit(&join(prefix, "spatial"), v);
    }
}
