//! Corner-aligned bilinear resampling.
//!
//! Output index `i` samples source coordinate `i·(in−1)/(out−1)` (0 when the
//! output axis has length 1), so the four output corners reproduce the
//! input corners exactly.

use super::{FeatureMap, Scalar, Shape};
use crate::error::{Error, Result};

/// Per output index: low source index, high source index, weight of high.
fn taps<T: Scalar>(src: usize, dst: usize) -> Vec<(usize, usize, T)> {
    (0..dst)
        .map(|i| {
            if dst == 1 || src == 1 {
                return (0, 0, T::zero());
            }
            // exact rational position i·(src−1)/(dst−1)
            let num = i * (src - 1);
            let den = dst - 1;
            let lo = num / den;
            let rem = num % den;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, T::from_usize_lossy(rem) / T::from_usize_lossy(den))
        })
        .collect()
}

pub fn resize_bilinear<T: Scalar>(x: &FeatureMap<T>, out_h: usize, out_w: usize) -> Result<FeatureMap<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape("resize target must be positive".into()));
    }
    let s = x.shape();
    let ty = taps::<T>(s.h, out_h);
    let tx = taps::<T>(s.w, out_w);
    let mut out = FeatureMap::zeros((s.b, s.c, out_h, out_w));
    let mut o = 0;
    for b in 0..s.b {
        for c in 0..s.c {
            let p = x.plane(b, c);
            for &(y0, y1, fy) in &ty {
                let (r0, r1) = (&p[y0 * s.w..(y0 + 1) * s.w], &p[y1 * s.w..(y1 + 1) * s.w]);
                for &(x0, x1, fx) in &tx {
                    let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                    let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                    out.data_mut()[o] = top + (bot - top) * fy;
                    o += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`resize_bilinear`].
pub fn resize_bilinear_backward<T: Scalar>(dy: &FeatureMap<T>, input: Shape) -> Result<FeatureMap<T>> {
    let ds = dy.shape();
    if ds.b != input.b || ds.c != input.c {
        return Err(Error::Shape(format!("resize backward: {ds} vs input {input}")));
    }
    let ty = taps::<T>(input.h, ds.h);
    let tx = taps::<T>(input.w, ds.w);
    let mut dx = FeatureMap::zeros(input);
    let mut o = 0;
    let one = T::one();
    for b in 0..ds.b {
        for c in 0..ds.c {
            let p = dx.plane_mut(b, c);
            for &(y0, y1, fy) in &ty {
                for &(x0, x1, fx) in &tx {
                    let g = dy.data()[o];
                    o += 1;
                    p[y0 * input.w + x0] += g * (one - fy) * (one - fx);
                    p[y0 * input.w + x1] += g * (one - fy) * fx;
                    p[y1 * input.w + x0] += g * fy * (one - fx);
                    p[y1 * input.w + x1] += g * fy * fx;
                }
            }
        }
    }
    Ok(dx)
}

/// Integer-factor corner-aligned upsampling.
pub fn bilinear_upsample<T: Scalar>(x: &FeatureMap<T>, scale: usize) -> Result<FeatureMap<T>> {
    if scale == 0 {
        return Err(Error::Shape("upsample scale must be >= 1".into()));
    }
    let s = x.shape();
    resize_bilinear(x, s.h * scale, s.w * scale)
}

#[derive(Clone, Debug, Default)]
pub struct Upsample {
    pub scale: usize,
    input: Option<Shape>,
}

impl Upsample {
    pub fn new(scale: usize) -> Self {
        Upsample { scale, input: None }
    }

    pub fn forward<T: Scalar>(&mut self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        self.input = Some(x.shape());
        bilinear_upsample(x, self.scale)
    }

    pub fn backward<T: Scalar>(&mut self, dy: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let s = self
            .input
            .take()
            .ok_or_else(|| Error::State("upsample backward without forward".into()))?;
        resize_bilinear_backward(dy, s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_one_is_identity() {
        let x = FeatureMap::<f32>::from_fn((1, 2, 3, 4), |_, c, y, x| (c * 12 + y * 4 + x) as f32 * 0.37);
        assert_eq!(bilinear_upsample(&x, 1).unwrap(), x);
    }

    #[test]
    fn constants_stay_constant() {
        let x = FeatureMap::<f32>::filled((1, 1, 5, 3), 0.25);
        let y = bilinear_upsample(&x, 3).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn corners_exact_on_downsize_too() {
        let x = FeatureMap::<f64>::from_fn((1, 1, 9, 7), |_, _, y, x| (y * 7 + x) as f64);
        let y = resize_bilinear(&x, 4, 3).unwrap();
        assert_eq!(y.at(0, 0, 0, 0), x.at(0, 0, 0, 0));
        assert_eq!(y.at(0, 0, 3, 2), x.at(0, 0, 8, 6));
        assert_eq!(y.at(0, 0, 0, 2), x.at(0, 0, 0, 6));
    }
}
