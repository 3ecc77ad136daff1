//! 2-D cross-correlation (no kernel flip) with zero padding, lowered to
//! GEMM through an im2col buffer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{FeatureMap, Scalar, Shape};
use crate::error::{Error, Result};
use crate::params::{join, Module, Param, Visitor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Square kernel, stride 1, "same" padding for odd kernels, no bias.
    pub fn new(in_channels: usize, out_channels: usize, k: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (k, k),
            stride: 1,
            padding: k / 2,
            groups: 1,
            bias: false,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = p;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            groups,
            ..
        } = *self;
        if in_channels == 0 || out_channels == 0 || kernel.0 == 0 || kernel.1 == 0 {
            return Err(Error::Shape(format!("degenerate conv spec {self:?}")));
        }
        if stride == 0 {
            return Err(Error::Shape("conv stride must be >= 1".into()));
        }
        if groups == 0 || in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(Error::Shape(format!(
                "channels {in_channels}->{out_channels} not divisible by groups {groups}"
            )));
        }
        Ok(())
    }

    /// `in_channels / groups · kh · kw`
    pub fn fan_in(&self) -> usize {
        self.in_channels / self.groups * self.kernel.0 * self.kernel.1
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel.0,
            self.kernel.1,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.out_channels * self.fan_in() + if self.bias { self.out_channels } else { 0 }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < kh || pw < kw {
            return Err(Error::Shape(format!(
                "input {h}x{w} (padded {ph}x{pw}) smaller than kernel {kh}x{kw}"
            )));
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let (oh, ow) = self.output_hw(input.h, input.w)?;
        Ok(Shape::new(input.b, self.out_channels, oh, ow))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == 1 && self.padding == 0
    }
}

/// Column-buffer budget (elements) used to pick the batch chunk size.
const COLS_BUDGET: usize = 1 << 24;

/// Valid output columns `[lo, hi)` for kernel offset `kj` at stride 1.
fn valid_range(ow: usize, w: usize, p: usize, kj: usize) -> (usize, usize) {
    let lo = p.saturating_sub(kj).min(ow);
    let hi = (w + p).saturating_sub(kj).min(ow).max(lo);
    (lo, hi)
}

/// Unfolds `channels` planes of one sample into columns `[col0, col0 + oh·ow)`
/// of the row-major `K × ld` matrix `cols`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    src: &[T],
    channels: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    cols: &mut [T],
    ld: usize,
    col0: usize,
) {
    let (kh, kw) = spec.kernel;
    let (s, p) = (spec.stride, spec.padding);
    let n = oh * ow;
    let mut row = 0;
    for c in 0..channels {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let dst = &mut cols[row * ld + col0..row * ld + col0 + n];
                for oy in 0..oh {
                    let iy = (oy * s + ki) as isize - p as isize;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let in_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if s == 1 {
                        let (lo, hi) = valid_range(ow, w, p, kj);
                        out_row[..lo].fill(T::zero());
                        out_row[hi..].fill(T::zero());
                        if hi > lo {
                            let start = lo + kj - p;
                            out_row[lo..hi].copy_from_slice(&in_row[start..start + hi - lo]);
                        }
                    } else {
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = (ox * s + kj) as isize - p as isize;
                            *v = if ix < 0 || ix >= w as isize {
                                T::zero()
                            } else {
                                in_row[ix as usize]
                            };
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `dst`.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    channels: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    dst: &mut [T],
    ld: usize,
    col0: usize,
) {
    let (kh, kw) = spec.kernel;
    let (s, p) = (spec.stride, spec.padding);
    let n = oh * ow;
    let mut row = 0;
    for c in 0..channels {
        let plane = &mut dst[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let src = &cols[row * ld + col0..row * ld + col0 + n];
                for oy in 0..oh {
                    let iy = (oy * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let in_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src_row = &src[oy * ow..(oy + 1) * ow];
                    if s == 1 {
                        let (lo, hi) = valid_range(ow, w, p, kj);
                        if hi > lo {
                            let start = lo + kj - p;
                            for (d, &v) in in_row[start..start + hi - lo].iter_mut().zip(&src_row[lo..hi]) {
                                *d += v;
                            }
                        }
                    } else {
                        for (ox, &v) in src_row.iter().enumerate() {
                            let ix = (ox * s + kj) as isize - p as isize;
                            if ix >= 0 && ix < w as isize {
                                in_row[ix as usize] += v;
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Fills `cols` (`K × nb·n`) for samples `b0..b0+nb` of group `gi`.
fn unfold<T: Scalar>(x: &FeatureMap<T>, spec: &ConvSpec, os: Shape, b0: usize, nb: usize, gi: usize, cols: &mut [T]) {
    let xs = x.shape();
    let cin_g = spec.in_channels / spec.groups;
    let n = os.h * os.w;
    let ld = nb * n;
    for bi in 0..nb {
        let start = ((b0 + bi) * xs.c + gi * cin_g) * xs.plane();
        let src = &x.data()[start..start + cin_g * xs.plane()];
        if spec.is_pointwise() {
            for c in 0..cin_g {
                cols[c * ld + bi * n..c * ld + (bi + 1) * n].copy_from_slice(&src[c * n..(c + 1) * n]);
            }
        } else {
            im2col(src, cin_g, xs.h, xs.w, spec, os.h, os.w, cols, ld, bi * n);
        }
    }
}

/// Copies channels `c0..c0+rows` of samples `b0..b0+nb` into a
/// `rows × nb·n` matrix.
fn gather<T: Scalar>(m: &[T], s: Shape, b0: usize, nb: usize, c0: usize, rows: usize, mat: &mut [T]) {
    let n = s.plane();
    let ld = nb * n;
    for bi in 0..nb {
        for r in 0..rows {
            let off = ((b0 + bi) * s.c + c0 + r) * n;
            mat[r * ld + bi * n..r * ld + (bi + 1) * n].copy_from_slice(&m[off..off + n]);
        }
    }
}

/// Inverse of [`gather`].
fn scatter<T: Scalar>(m: &mut [T], s: Shape, b0: usize, nb: usize, c0: usize, rows: usize, mat: &[T]) {
    let n = s.plane();
    let ld = nb * n;
    for bi in 0..nb {
        for r in 0..rows {
            let off = ((b0 + bi) * s.c + c0 + r) * n;
            m[off..off + n].copy_from_slice(&mat[r * ld + bi * n..r * ld + (bi + 1) * n]);
        }
    }
}

fn chunk_size(spec: &ConvSpec, batch: usize, n: usize) -> usize {
    let per_sample = spec.fan_in().max(spec.out_channels / spec.groups) * n;
    (COLS_BUDGET / per_sample.max(1)).clamp(1, batch.max(1))
}

fn check_args<T: Scalar>(x: Shape, spec: &ConvSpec, weight: &[T], bias: Option<&[T]>) -> Result<Shape> {
    spec.validate()?;
    if x.c != spec.in_channels {
        return Err(Error::Shape(format!(
            "conv expects {} input channels, got {x}",
            spec.in_channels
        )));
    }
    let wlen: usize = spec.weight_dims().iter().product();
    if weight.len() != wlen {
        return Err(Error::Shape(format!(
            "conv weight has {} values, spec needs {wlen}",
            weight.len()
        )));
    }
    match (spec.bias, bias) {
        (true, Some(b)) if b.len() == spec.out_channels => {}
        (false, None) => {}
        _ => {
            return Err(Error::Shape(format!(
                "conv bias presence/length does not match spec (bias={})",
                spec.bias
            )))
        }
    }
    if !weight.iter().all(|v| v.is_finite()) || !bias.unwrap_or(&[]).iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("non-finite convolution weights".into()));
    }
    spec.output_shape(x)
}

/// Forward convolution. Weight layout is `[out, in/groups, kh, kw]`.
pub fn conv2d<T: Scalar>(
    x: &FeatureMap<T>,
    spec: &ConvSpec,
    weight: &[T],
    bias: Option<&[T]>,
) -> Result<FeatureMap<T>> {
    let xs = x.shape();
    let os = check_args(xs, spec, weight, bias)?;
    let g = spec.groups;
    let cout_g = spec.out_channels / g;
    let k = spec.fan_in();
    let n = os.h * os.w;
    let mut out = FeatureMap::zeros(os);
    let chunk = chunk_size(spec, xs.b, n);
    let mut cols = vec![T::zero(); k * chunk * n];
    let mut res = vec![T::zero(); cout_g * chunk * n];
    let mut b0 = 0;
    while b0 < xs.b {
        let nb = chunk.min(xs.b - b0);
        let ld = nb * n;
        for gi in 0..g {
            unfold(x, spec, os, b0, nb, gi, &mut cols);
            let w_g = &weight[gi * cout_g * k..(gi + 1) * cout_g * k];
            T::gemm(cout_g, k, ld, w_g, (k as isize, 1), &cols, (ld as isize, 1), T::zero(), &mut res, (ld as isize, 1));
            scatter(out.data_mut(), os, b0, nb, gi * cout_g, cout_g, &res);
        }
        b0 += nb;
    }
    if let Some(bias) = bias {
        for b in 0..os.b {
            for (co, &bv) in bias.iter().enumerate() {
                out.plane_mut(b, co).iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`]. Returns `dx` and accumulates into `dw`/`db`.
pub fn conv2d_backward<T: Scalar>(
    x: &FeatureMap<T>,
    spec: &ConvSpec,
    weight: &[T],
    dy: &FeatureMap<T>,
    dw: &mut [T],
    db: Option<&mut [T]>,
    need_dx: bool,
) -> Result<Option<FeatureMap<T>>> {
    let xs = x.shape();
    let os = spec.output_shape(xs)?;
    dy.expect_shape(os, "conv2d_backward dy")?;
    let g = spec.groups;
    let (cin_g, cout_g) = (spec.in_channels / g, spec.out_channels / g);
    let k = spec.fan_in();
    let n = os.h * os.w;
    let chunk = chunk_size(spec, xs.b, n);
    let mut cols = vec![T::zero(); k * chunk * n];
    let mut dyc = vec![T::zero(); cout_g * chunk * n];
    let mut dx = need_dx.then(|| FeatureMap::zeros(xs));
    let mut b0 = 0;
    while b0 < xs.b {
        let nb = chunk.min(xs.b - b0);
        let ld = nb * n;
        for gi in 0..g {
            unfold(x, spec, os, b0, nb, gi, &mut cols);
            gather(dy.data(), os, b0, nb, gi * cout_g, cout_g, &mut dyc);
            // dW_g += dY_g · colsᵀ
            let dw_g = &mut dw[gi * cout_g * k..(gi + 1) * cout_g * k];
            T::gemm(cout_g, ld, k, &dyc, (ld as isize, 1), &cols, (1, ld as isize), T::one(), dw_g, (k as isize, 1));
            if let Some(dx) = dx.as_mut() {
                // dcols = W_gᵀ · dY_g, reusing the column buffer
                let w_g = &weight[gi * cout_g * k..(gi + 1) * cout_g * k];
                T::gemm(k, cout_g, ld, w_g, (1, k as isize), &dyc, (ld as isize, 1), T::zero(), &mut cols, (ld as isize, 1));
                if spec.is_pointwise() {
                    scatter(dx.data_mut(), xs, b0, nb, gi * cin_g, cin_g, &cols);
                } else {
                    for bi in 0..nb {
                        let start = ((b0 + bi) * xs.c + gi * cin_g) * xs.plane();
                        let dst = &mut dx.data_mut()[start..start + cin_g * xs.plane()];
                        col2im(&cols, cin_g, xs.h, xs.w, spec, os.h, os.w, dst, ld, bi * n);
                    }
                }
            }
        }
        b0 += nb;
    }
    if let Some(db) = db {
        for b in 0..os.b {
            for (co, d) in db.iter_mut().enumerate() {
                *d += dy.plane(b, co).iter().copied().sum::<T>();
            }
        }
    }
    Ok(dx)
}

/// Convolution layer owning its parameters and the input cached for
/// the backward pass.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub spec: ConvSpec,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    cache: Option<FeatureMap<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng>(spec: ConvSpec, rng: &mut R) -> Self {
        spec.validate().expect("valid conv spec");
        Conv2d {
            spec,
            weight: Param::he_normal(&spec.weight_dims(), spec.fan_in(), rng),
            bias: spec.bias.then(|| Param::zeros(&[spec.out_channels])),
            cache: None,
        }
    }

    pub fn zeroed(spec: ConvSpec) -> Self {
        Conv2d {
            spec,
            weight: Param::zeros(&spec.weight_dims()),
            bias: spec.bias.then(|| Param::zeros(&[spec.out_channels])),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let y = conv2d(x, &self.spec, &self.weight.value, self.bias.as_ref().map(|b| b.value.as_slice()))?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        self.backward_inner(dy, true).map(|dx| dx.expect("dx requested"))
    }

    /// Backward pass that only accumulates parameter gradients.
    pub fn backward_params_only(&mut self, dy: &FeatureMap<T>) -> Result<()> {
        self.backward_inner(dy, false).map(|_| ())
    }

    fn backward_inner(&mut self, dy: &FeatureMap<T>, need_dx: bool) -> Result<Option<FeatureMap<T>>> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| Error::State("conv backward without forward".into()))?;
        conv2d_backward(
            &x,
            &self.spec,
            &self.weight.value,
            dy,
            &mut self.weight.grad,
            self.bias.as_mut().map(|b| b.grad.as_mut_slice()),
            need_dx,
        )
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        v.param(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = self.bias.as_mut() {
            v.param(&join(prefix, "bias"), b);
        }
    }
}
