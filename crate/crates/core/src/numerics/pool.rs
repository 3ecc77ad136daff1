//! Windowed max pooling and the axis-collapsing reductions used by the
//! attention modules.

use super::{FeatureMap, Scalar, Shape};
use crate::error::{Error, Result};

/// Output of a max reduction: values plus the flat input offset that won.
#[derive(Clone, Debug)]
pub struct Pooled<T> {
    pub out: FeatureMap<T>,
    pub argmax: Vec<usize>,
}

/// Windowed max pooling with implicit −∞ padding.
pub fn max_pool2d<T: Scalar>(x: &FeatureMap<T>, kernel: usize, stride: usize, padding: usize) -> Result<Pooled<T>> {
    let s = x.shape();
    if kernel == 0 || stride == 0 || padding > kernel / 2 {
        return Err(Error::Shape(format!("bad pool window k={kernel} s={stride} p={padding}")));
    }
    let (ph, pw) = (s.h + 2 * padding, s.w + 2 * padding);
    if ph < kernel || pw < kernel {
        return Err(Error::Shape(format!("pool window {kernel} larger than padded input {s}")));
    }
    let oh = (ph - kernel) / stride + 1;
    let ow = (pw - kernel) / stride + 1;
    let os = Shape::new(s.b, s.c, oh, ow);
    let mut out = FeatureMap::zeros(os);
    let mut argmax = vec![0usize; os.numel()];
    let mut o = 0;
    for b in 0..s.b {
        for c in 0..s.c {
            let base = (b * s.c + c) * s.plane();
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut at = usize::MAX;
                    for ki in 0..kernel {
                        let iy = (oy * stride + ki) as isize - padding as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        for kj in 0..kernel {
                            let ix = (ox * stride + kj) as isize - padding as isize;
                            if ix < 0 || ix >= s.w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * s.w + ix as usize;
                            let v = x.data()[idx];
                            if v > best || at == usize::MAX {
                                best = v;
                                at = idx;
                            }
                        }
                    }
                    out.data_mut()[o] = best;
                    argmax[o] = at;
                    o += 1;
                }
            }
        }
    }
    Ok(Pooled { out, argmax })
}

/// Routes each output gradient to the input position that produced it.
pub fn scatter_argmax<T: Scalar>(dy: &FeatureMap<T>, argmax: &[usize], input: Shape) -> Result<FeatureMap<T>> {
    if dy.data().len() != argmax.len() {
        return Err(Error::Shape("argmax length does not match gradient".into()));
    }
    let mut dx = FeatureMap::zeros(input);
    for (&d, &i) in dy.data().iter().zip(argmax) {
        dx.data_mut()[i] += d;
    }
    Ok(dx)
}

#[derive(Clone, Debug)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    cache: Option<(Vec<usize>, Shape)>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        MaxPool2d {
            kernel,
            stride,
            padding,
            cache: None,
        }
    }

    pub fn forward<T: Scalar>(&mut self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let Pooled { out, argmax } = max_pool2d(x, self.kernel, self.stride, self.padding)?;
        self.cache = Some((argmax, x.shape()));
        Ok(out)
    }

    pub fn backward<T: Scalar>(&mut self, dy: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let (argmax, shape) = self
            .cache
            .take()
            .ok_or_else(|| Error::State("max pool backward without forward".into()))?;
        scatter_argmax(dy, &argmax, shape)
    }
}

/// Which spatial axis a directional pool keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Collapse W: output `B×C×H×1`.
    Horizontal,
    /// Collapse H: output `B×C×1×W`.
    Vertical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

fn collapsed_shape(s: Shape, axis: Axis) -> Shape {
    match axis {
        Axis::Horizontal => Shape::new(s.b, s.c, s.h, 1),
        Axis::Vertical => Shape::new(s.b, s.c, 1, s.w),
    }
}

/// Average or max over one spatial axis. For max, also returns the winning
/// flat input offsets.
pub fn directional_pool_with_argmax<T: Scalar>(x: &FeatureMap<T>, axis: Axis, mode: PoolMode) -> Pooled<T> {
    let s = x.shape();
    let os = collapsed_shape(s, axis);
    let mut out = FeatureMap::zeros(os);
    let mut argmax = if mode == PoolMode::Max { vec![0; os.numel()] } else { Vec::new() };
    let d = x.data();
    for b in 0..s.b {
        for c in 0..s.c {
            let base = (b * s.c + c) * s.plane();
            let (outer, inner, outer_step, inner_step) = match axis {
                Axis::Horizontal => (s.h, s.w, s.w, 1),
                Axis::Vertical => (s.w, s.h, 1, s.w),
            };
            for i in 0..outer {
                let start = base + i * outer_step;
                let o = (b * s.c + c) * outer + i;
                match mode {
                    PoolMode::Avg => {
                        let mut acc = T::zero();
                        for j in 0..inner {
                            acc += d[start + j * inner_step];
                        }
                        out.data_mut()[o] = acc / T::from_usize_lossy(inner);
                    }
                    PoolMode::Max => {
                        let mut best = d[start];
                        let mut at = start;
                        for j in 1..inner {
                            let v = d[start + j * inner_step];
                            if v > best {
                                best = v;
                                at = start + j * inner_step;
                            }
                        }
                        out.data_mut()[o] = best;
                        argmax[o] = at;
                    }
                }
            }
        }
    }
    Pooled { out, argmax }
}

pub fn directional_pool<T: Scalar>(x: &FeatureMap<T>, axis: Axis, mode: PoolMode) -> FeatureMap<T> {
    directional_pool_with_argmax(x, axis, mode).out
}

/// Gradient of the average directional pool: spreads `dy` evenly.
pub fn directional_avg_backward<T: Scalar>(dy: &FeatureMap<T>, input: Shape, axis: Axis) -> FeatureMap<T> {
    let inv = T::one()
        / T::from_usize_lossy(match axis {
            Axis::Horizontal => input.w,
            Axis::Vertical => input.h,
        });
    FeatureMap::from_fn(input, |b, c, y, x| match axis {
        Axis::Horizontal => dy.at(b, c, y, 0) * inv,
        Axis::Vertical => dy.at(b, c, 0, x) * inv,
    })
}

/// Global reduction over `H·W` to `B×C×1×1`.
pub fn global_pool<T: Scalar>(x: &FeatureMap<T>, mode: PoolMode) -> Pooled<T> {
    let s = x.shape();
    let mut out = FeatureMap::zeros((s.b, s.c, 1, 1));
    let mut argmax = if mode == PoolMode::Max { vec![0; s.b * s.c] } else { Vec::new() };
    for b in 0..s.b {
        for c in 0..s.c {
            let plane = x.plane(b, c);
            let o = b * s.c + c;
            match mode {
                PoolMode::Avg => {
                    out.data_mut()[o] = plane.iter().copied().sum::<T>() / T::from_usize_lossy(plane.len());
                }
                PoolMode::Max => {
                    let (mut at, mut best) = (0, plane[0]);
                    for (i, &v) in plane.iter().enumerate().skip(1) {
                        if v > best {
                            best = v;
                            at = i;
                        }
                    }
                    out.data_mut()[o] = best;
                    argmax[o] = o * s.plane() + at;
                }
            }
        }
    }
    Pooled { out, argmax }
}

/// Reduction over the channel axis to `B×1×H×W`.
pub fn channel_pool<T: Scalar>(x: &FeatureMap<T>, mode: PoolMode) -> Pooled<T> {
    let s = x.shape();
    let p = s.plane();
    let mut out = FeatureMap::zeros((s.b, 1, s.h, s.w));
    let mut argmax = if mode == PoolMode::Max { vec![0; s.b * p] } else { Vec::new() };
    for b in 0..s.b {
        for i in 0..p {
            let o = b * p + i;
            let first = b * s.c * p + i;
            match mode {
                PoolMode::Avg => {
                    let mut acc = T::zero();
                    for c in 0..s.c {
                        acc += x.data()[first + c * p];
                    }
                    out.data_mut()[o] = acc / T::from_usize_lossy(s.c);
                }
                PoolMode::Max => {
                    let (mut at, mut best) = (first, x.data()[first]);
                    for c in 1..s.c {
                        let v = x.data()[first + c * p];
                        if v > best {
                            best = v;
                            at = first + c * p;
                        }
                    }
                    out.data_mut()[o] = best;
                    argmax[o] = at;
                }
            }
        }
    }
    Pooled { out, argmax }
}
