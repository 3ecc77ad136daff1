use super::{FeatureMap, Scalar};
use crate::error::{Error, Result};
use crate::params::{join, Mode, Module, Param, Visitor};

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Per-channel batch normalization over `(B, H, W)`.
///
/// Train mode normalizes with the (biased) batch variance and folds the
/// unbiased variance into the running estimate with `momentum`.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running: Option<RunningStats<T>>,
    pub momentum: T,
    pub epsilon: T,
    cache: Option<BnCache<T>>,
}

#[derive(Clone, Debug)]
struct BnCache<T> {
    x_hat: FeatureMap<T>,
    inv_std: Vec<T>,
    mode: Mode,
}

impl<T: Scalar> BatchNorm2d<T> {
    /// gamma = 1, beta = 0, running statistics (0, 1).
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::filled(&[channels], T::one()),
            beta: Param::zeros(&[channels]),
            running: Some(RunningStats {
                mean: vec![T::zero(); channels],
                var: vec![T::one(); channels],
            }),
            momentum: T::lit(DEFAULT_MOMENTUM),
            epsilon: T::lit(DEFAULT_EPSILON),
            cache: None,
        }
    }

    /// A state that has never seen data; eval-mode forward is an error.
    pub fn uninitialized(channels: usize) -> Self {
        BatchNorm2d {
            running: None,
            ..Self::new(channels)
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&mut self, x: &FeatureMap<T>, mode: Mode) -> Result<FeatureMap<T>> {
        let s = x.shape();
        let c = self.channels();
        if s.c != c {
            return Err(Error::Shape(format!("batch norm over {c} channels got {s}")));
        }
        if !(self.epsilon > T::zero()) {
            return Err(Error::Config("batch norm epsilon must be > 0".into()));
        }
        let n = s.b * s.plane();
        let nt = T::from_usize_lossy(n);
        let mut x_hat = FeatureMap::zeros(s);
        let mut out = FeatureMap::zeros(s);
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut sum = T::zero();
                    for b in 0..s.b {
                        sum += x.plane(b, ch).iter().copied().sum::<T>();
                    }
                    let mean = sum / nt;
                    let mut sq = T::zero();
                    for b in 0..s.b {
                        for &v in x.plane(b, ch) {
                            sq += (v - mean) * (v - mean);
                        }
                    }
                    let var = sq / nt;
                    let unbiased = if n > 1 { sq / T::from_usize_lossy(n - 1) } else { var };
                    let running = self.running.get_or_insert_with(|| RunningStats {
                        mean: vec![T::zero(); c],
                        var: vec![T::one(); c],
                    });
                    let m = self.momentum;
                    running.mean[ch] = (T::one() - m) * running.mean[ch] + m * mean;
                    running.var[ch] = (T::one() - m) * running.var[ch] + m * unbiased;
                    (mean, var)
                }
                Mode::Eval => {
                    let running = self
                        .running
                        .as_ref()
                        .ok_or_else(|| Error::State("eval-mode batch norm without running statistics".into()))?;
                    (running.mean[ch], running.var[ch])
                }
            };
            let istd = T::one() / (var + self.epsilon).sqrt();
            inv_std[ch] = istd;
            let (g, bt) = (self.gamma.value[ch], self.beta.value[ch]);
            let p = s.plane();
            for b in 0..s.b {
                let start = (b * c + ch) * p;
                let src = &x.data()[start..start + p];
                let xh = &mut x_hat.data_mut()[start..start + p];
                let dst = &mut out.data_mut()[start..start + p];
                for i in 0..p {
                    xh[i] = (src[i] - mean) * istd;
                    dst[i] = g * xh[i] + bt;
                }
            }
        }
        self.cache = Some(BnCache { x_hat, inv_std, mode });
        Ok(out)
    }

    pub fn backward(&mut self, dy: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let BnCache { x_hat, inv_std, mode } = self
            .cache
            .take()
            .ok_or_else(|| Error::State("batch norm backward without forward".into()))?;
        let s = x_hat.shape();
        dy.expect_shape(s, "batch norm backward")?;
        let nt = T::from_usize_lossy(s.b * s.plane());
        let mut dx = FeatureMap::zeros(s);
        for ch in 0..self.channels() {
            let mut sum_dy = T::zero();
            let mut sum_dy_xh = T::zero();
            for b in 0..s.b {
                for (&d, &xh) in dy.plane(b, ch).iter().zip(x_hat.plane(b, ch)) {
                    sum_dy += d;
                    sum_dy_xh += d * xh;
                }
            }
            self.gamma.grad[ch] += sum_dy_xh;
            self.beta.grad[ch] += sum_dy;
            let g = self.gamma.value[ch];
            let istd = inv_std[ch];
            let p = s.plane();
            for b in 0..s.b {
                let start = (b * s.c + ch) * p;
                let dyp = &dy.data()[start..start + p];
                let xhp = &x_hat.data()[start..start + p];
                let dxp = &mut dx.data_mut()[start..start + p];
                match mode {
                    Mode::Train => {
                        let k = g * istd / nt;
                        for i in 0..dxp.len() {
                            dxp[i] = k * (nt * dyp[i] - sum_dy - xhp[i] * sum_dy_xh);
                        }
                    }
                    Mode::Eval => {
                        for i in 0..dxp.len() {
                            dxp[i] = dyp[i] * g * istd;
                        }
                    }
                }
            }
        }
        Ok(dx)
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        v.param(&join(prefix, "gamma"), &mut self.gamma);
        v.param(&join(prefix, "beta"), &mut self.beta);
        let c = self.channels();
        let running = self.running.get_or_insert_with(|| RunningStats {
            mean: vec![T::zero(); c],
            var: vec![T::one(); c],
        });
        v.buffer(&join(prefix, "running_mean"), &[c], &mut running.mean);
        v.buffer(&join(prefix, "running_var"), &[c], &mut running.var);
    }
}

/// Functional form of [`BatchNorm2d::forward`].
pub fn batch_norm<T: Scalar>(x: &FeatureMap<T>, bn: &mut BatchNorm2d<T>, mode: Mode) -> Result<FeatureMap<T>> {
    bn.forward(x, mode)
}
