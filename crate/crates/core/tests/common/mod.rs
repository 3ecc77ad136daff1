#![allow(dead_code)]

use std::collections::HashMap;
use std::path::Path;

use gca_resunet::data::{gen_synthetic, load_dataset, Dataset, SynthConfig};
use gca_resunet::numerics::{FeatureMap, Shape};
use gca_resunet::params::{Module, Param, Visitor};
use gca_resunet::Mode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod suite;

pub const BN_EPS: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: impl Into<Shape>, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> FeatureMap<f64> {
    FeatureMap::from_fn(shape, |_, _, _, _| rng.random_range(lo..hi))
}

pub fn rand_map(shape: impl Into<Shape>, rng: &mut ChaCha8Rng) -> FeatureMap<f64> {
    uniform(shape, -1.0, 1.0, rng)
}

pub fn rand_vec(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn bits_eq(a: &FeatureMap<f32>, b: &FeatureMap<f32>) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

// ---- primitive oracles -------------------------------------------------

pub struct ConvArgs {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

/// Sliding-window cross-correlation with zero padding.
pub fn conv_naive(x: &FeatureMap<f64>, a: &ConvArgs, w: &[f64], bias: Option<&[f64]>) -> FeatureMap<f64> {
    let s = x.shape();
    let oh = (s.h + 2 * a.pad - a.k) / a.stride + 1;
    let ow = (s.w + 2 * a.pad - a.k) / a.stride + 1;
    let cin_g = a.cin / a.groups;
    let cout_g = a.cout / a.groups;
    let mut out = FeatureMap::zeros((s.b, a.cout, oh, ow));
    for b in 0..s.b {
        for co in 0..a.cout {
            let g = co / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |bb| bb[co]);
                    for ci in 0..cin_g {
                        for ky in 0..a.k {
                            for kx in 0..a.k {
                                let iy = (oy * a.stride + ky) as isize - a.pad as isize;
                                let ix = (ox * a.stride + kx) as isize - a.pad as isize;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                let wv = w[((co * cin_g + ci) * a.k + ky) * a.k + kx];
                                acc += wv * x.at(b, g * cin_g + ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    *out.at_mut(b, co, oy, ox) = acc;
                }
            }
        }
    }
    out
}

/// Batch normalization with explicit statistics; `None` uses the biased
/// batch statistics.
pub fn bn_naive(
    x: &FeatureMap<f64>,
    gamma: &[f64],
    beta: &[f64],
    stats: Option<(&[f64], &[f64])>,
) -> FeatureMap<f64> {
    let s = x.shape();
    let mut out = FeatureMap::zeros(s);
    for c in 0..s.c {
        let (mean, var) = match stats {
            Some((m, v)) => (m[c], v[c]),
            None => {
                let mut vals = Vec::new();
                for b in 0..s.b {
                    for y in 0..s.h {
                        for xx in 0..s.w {
                            vals.push(x.at(b, c, y, xx));
                        }
                    }
                }
                let n = vals.len() as f64;
                let m = vals.iter().sum::<f64>() / n;
                (m, vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n)
            }
        };
        for b in 0..s.b {
            for y in 0..s.h {
                for xx in 0..s.w {
                    *out.at_mut(b, c, y, xx) = gamma[c] * (x.at(b, c, y, xx) - mean) / (var + BN_EPS).sqrt() + beta[c];
                }
            }
        }
    }
    out
}

pub fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

pub fn sigm(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn hswish(v: f64) -> f64 {
    v * (v + 3.0).clamp(0.0, 6.0) / 6.0
}

pub fn maxpool_naive(x: &FeatureMap<f64>, k: usize, stride: usize, pad: usize) -> FeatureMap<f64> {
    let s = x.shape();
    let oh = (s.h + 2 * pad - k) / stride + 1;
    let ow = (s.w + 2 * pad - k) / stride + 1;
    FeatureMap::from_fn((s.b, s.c, oh, ow), |b, c, oy, ox| {
        let mut best = f64::NEG_INFINITY;
        for ky in 0..k {
            for kx in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                let ix = (ox * stride + kx) as isize - pad as isize;
                if iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w {
                    best = best.max(x.at(b, c, iy as usize, ix as usize));
                }
            }
        }
        best
    })
}

/// Reductions of one `(b, c)` plane: along W for each row (`H×1`), along H
/// for each column (`1×W`).
pub fn row_avg(x: &FeatureMap<f64>, b: usize, c: usize, y: usize) -> f64 {
    (0..x.shape().w).map(|i| x.at(b, c, y, i)).sum::<f64>() / x.shape().w as f64
}

pub fn row_max(x: &FeatureMap<f64>, b: usize, c: usize, y: usize) -> f64 {
    (0..x.shape().w).map(|i| x.at(b, c, y, i)).fold(f64::NEG_INFINITY, f64::max)
}

pub fn col_avg(x: &FeatureMap<f64>, b: usize, c: usize, xx: usize) -> f64 {
    (0..x.shape().h).map(|i| x.at(b, c, i, xx)).sum::<f64>() / x.shape().h as f64
}

pub fn col_max(x: &FeatureMap<f64>, b: usize, c: usize, xx: usize) -> f64 {
    (0..x.shape().h).map(|i| x.at(b, c, i, xx)).fold(f64::NEG_INFINITY, f64::max)
}

pub fn plane_avg(x: &FeatureMap<f64>, b: usize, c: usize) -> f64 {
    let s = x.shape();
    let mut acc = 0.0;
    for y in 0..s.h {
        for xx in 0..s.w {
            acc += x.at(b, c, y, xx);
        }
    }
    acc / (s.h * s.w) as f64
}

pub fn plane_max(x: &FeatureMap<f64>, b: usize, c: usize) -> f64 {
    let s = x.shape();
    let mut m = f64::NEG_INFINITY;
    for y in 0..s.h {
        for xx in 0..s.w {
            m = m.max(x.at(b, c, y, xx));
        }
    }
    m
}

/// Corner-aligned bilinear resampling evaluated pointwise.
pub fn resize_naive(x: &FeatureMap<f64>, oh: usize, ow: usize) -> FeatureMap<f64> {
    let s = x.shape();
    let coord = |i: usize, src: usize, dst: usize| -> (usize, usize, f64) {
        if dst == 1 || src == 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
        let lo = (pos.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        (lo, hi, pos - lo as f64)
    };
    FeatureMap::from_fn((s.b, s.c, oh, ow), |b, c, y, xx| {
        let (y0, y1, fy) = coord(y, s.h, oh);
        let (x0, x1, fx) = coord(xx, s.w, ow);
        let v00 = x.at(b, c, y0, x0);
        let v01 = x.at(b, c, y0, x1);
        let v10 = x.at(b, c, y1, x0);
        let v11 = x.at(b, c, y1, x1);
        (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)
    })
}

// ---- attention oracles -------------------------------------------------

/// Weights of one GCA instance in plain nested form.
/// `reduce[g][j][c]`, `expand[g][c][j]`.
pub struct GcaWeights {
    pub groups: usize,
    pub cg: usize,
    pub hidden: usize,
    pub reduce: Vec<Vec<Vec<f64>>>,
    pub expand: Vec<Vec<Vec<f64>>>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running: (Vec<f64>, Vec<f64>),
}

pub struct GcaOracle {
    pub y: FeatureMap<f64>,
    /// `a_h[b][g][c][y]`
    pub a_h: Vec<Vec<Vec<Vec<f64>>>>,
    /// `a_w[b][g][c][x]`
    pub a_w: Vec<Vec<Vec<Vec<f64>>>>,
}

/// Direct loop evaluation of grouped coordinate attention.
///
/// Per group and direction: fused descriptor `avg + max`, reduce conv,
/// BN (shared over groups and directions), ReLU, expand conv, sigmoid.
/// Train mode normalizes with statistics over every hidden activation of
/// the call.
pub fn gca_naive(x: &FeatureMap<f64>, p: &GcaWeights, mode: Mode) -> GcaOracle {
    let s = x.shape();
    let (gn, cg, hd) = (p.groups, p.cg, p.hidden);
    // z[b][g][j][pos] with pos in 0..H (rows) then H..H+W (columns)
    let mut z = vec![vec![vec![vec![0.0; s.h + s.w]; hd]; gn]; s.b];
    for b in 0..s.b {
        for g in 0..gn {
            for j in 0..hd {
                for y in 0..s.h {
                    let mut acc = 0.0;
                    for c in 0..cg {
                        let ch = g * cg + c;
                        acc += p.reduce[g][j][c] * (row_avg(x, b, ch, y) + row_max(x, b, ch, y));
                    }
                    z[b][g][j][y] = acc;
                }
                for xx in 0..s.w {
                    let mut acc = 0.0;
                    for c in 0..cg {
                        let ch = g * cg + c;
                        acc += p.reduce[g][j][c] * (col_avg(x, b, ch, xx) + col_max(x, b, ch, xx));
                    }
                    z[b][g][j][s.h + xx] = acc;
                }
            }
        }
    }
    let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
        Mode::Eval => (p.running.0.clone(), p.running.1.clone()),
        Mode::Train => (0..hd)
            .map(|j| {
                let vals: Vec<f64> = z.iter().flat_map(|zb| zb.iter().flat_map(|zg| zg[j].iter().copied())).collect();
                let n = vals.len() as f64;
                let m = vals.iter().sum::<f64>() / n;
                (m, vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n)
            })
            .unzip(),
    };
    let mut a_h = vec![vec![vec![vec![0.0; s.h]; cg]; gn]; s.b];
    let mut a_w = vec![vec![vec![vec![0.0; s.w]; cg]; gn]; s.b];
    for b in 0..s.b {
        for g in 0..gn {
            for pos in 0..s.h + s.w {
                let r: Vec<f64> = (0..hd)
                    .map(|j| relu(p.gamma[j] * (z[b][g][j][pos] - mean[j]) / (var[j] + BN_EPS).sqrt() + p.beta[j]))
                    .collect();
                for c in 0..cg {
                    let e: f64 = (0..hd).map(|j| p.expand[g][c][j] * r[j]).sum();
                    if pos < s.h {
                        a_h[b][g][c][pos] = sigm(e);
                    } else {
                        a_w[b][g][c][pos - s.h] = sigm(e);
                    }
                }
            }
        }
    }
    let y = FeatureMap::from_fn(s, |b, ch, yy, xx| {
        let (g, c) = (ch / cg, ch % cg);
        x.at(b, ch, yy, xx) * a_h[b][g][c][yy] * a_w[b][g][c][xx]
    });
    GcaOracle { y, a_h, a_w }
}

/// Pulls the weights out of a live module.
pub fn gca_weights(m: &gca_resunet::attention::Gca<f64>) -> GcaWeights {
    let (gn, cg, hd) = (m.cfg.groups, m.cfg.group_channels(), m.cfg.hidden());
    let running = m.bn.running.as_ref().expect("running stats");
    GcaWeights {
        groups: gn,
        cg,
        hidden: hd,
        reduce: (0..gn)
            .map(|g| (0..hd).map(|j| (0..cg).map(|c| m.reduce[g].weight.value[j * cg + c]).collect()).collect())
            .collect(),
        expand: (0..gn)
            .map(|g| (0..cg).map(|c| (0..hd).map(|j| m.expand[g].weight.value[c * hd + j]).collect()).collect())
            .collect(),
        gamma: m.bn.gamma.value.clone(),
        beta: m.bn.beta.value.clone(),
        running: (running.mean.clone(), running.var.clone()),
    }
}

/// `out = x · gate[b][c]`
fn scale_naive(x: &FeatureMap<f64>, gate: &[Vec<f64>]) -> FeatureMap<f64> {
    FeatureMap::from_fn(x.shape(), |b, c, y, xx| x.at(b, c, y, xx) * gate[b][c])
}

/// Dense `out[o] = Σ_i w[o·n_in + i] · v[i]` plus optional bias.
pub fn dense(w: &[f64], bias: Option<&[f64]>, v: &[f64], n_out: usize) -> Vec<f64> {
    let n_in = v.len();
    (0..n_out)
        .map(|o| (0..n_in).map(|i| w[o * n_in + i] * v[i]).sum::<f64>() + bias.map_or(0.0, |b| b[o]))
        .collect()
}

pub fn se_naive(x: &FeatureMap<f64>, w1: &[f64], w2: &[f64], hidden: usize) -> FeatureMap<f64> {
    let s = x.shape();
    let gate: Vec<Vec<f64>> = (0..s.b)
        .map(|b| {
            let pooled: Vec<f64> = (0..s.c).map(|c| plane_avg(x, b, c)).collect();
            let z: Vec<f64> = dense(w1, None, &pooled, hidden).into_iter().map(relu).collect();
            dense(w2, None, &z, s.c).into_iter().map(sigm).collect()
        })
        .collect();
    scale_naive(x, &gate)
}

pub fn cbam_naive(x: &FeatureMap<f64>, w1: &[f64], w2: &[f64], hidden: usize, spatial: &[f64]) -> FeatureMap<f64> {
    let s = x.shape();
    let mlp = |v: &[f64]| -> Vec<f64> {
        let z: Vec<f64> = dense(w1, None, v, hidden).into_iter().map(relu).collect();
        dense(w2, None, &z, s.c)
    };
    let gate: Vec<Vec<f64>> = (0..s.b)
        .map(|b| {
            let avg: Vec<f64> = (0..s.c).map(|c| plane_avg(x, b, c)).collect();
            let max: Vec<f64> = (0..s.c).map(|c| plane_max(x, b, c)).collect();
            mlp(&avg).iter().zip(mlp(&max)).map(|(a, m)| sigm(a + m)).collect()
        })
        .collect();
    let x1 = scale_naive(x, &gate);
    let pair = FeatureMap::from_fn((s.b, 2, s.h, s.w), |b, k, y, xx| {
        let vals = (0..s.c).map(|c| x1.at(b, c, y, xx));
        if k == 0 {
            vals.sum::<f64>() / s.c as f64
        } else {
            vals.fold(f64::NEG_INFINITY, f64::max)
        }
    });
    let args = ConvArgs {
        cin: 2,
        cout: 1,
        k: 7,
        stride: 1,
        pad: 3,
        groups: 1,
    };
    let sp = conv_naive(&pair, &args, spatial, None);
    FeatureMap::from_fn(s, |b, c, y, xx| x1.at(b, c, y, xx) * sigm(sp.at(b, 0, y, xx)))
}

pub struct CoordWeights<'a> {
    pub conv1: &'a [f64],
    pub gamma: &'a [f64],
    pub beta: &'a [f64],
    pub running: Option<(&'a [f64], &'a [f64])>,
    pub conv_h: &'a [f64],
    pub bias_h: &'a [f64],
    pub conv_w: &'a [f64],
    pub bias_w: &'a [f64],
    pub hidden: usize,
}

/// Coordinate attention: joint h/w descriptor bottleneck, split, two
/// expansions. `running = None` means train-mode statistics.
pub fn coordatt_naive(x: &FeatureMap<f64>, p: &CoordWeights) -> FeatureMap<f64> {
    let s = x.shape();
    let len = s.h + s.w;
    // z[b][j][pos]
    let mut z = vec![vec![vec![0.0; len]; p.hidden]; s.b];
    for b in 0..s.b {
        for pos in 0..len {
            let f: Vec<f64> = (0..s.c)
                .map(|c| if pos < s.h { row_avg(x, b, c, pos) } else { col_avg(x, b, c, pos - s.h) })
                .collect();
            for (j, v) in dense(p.conv1, None, &f, p.hidden).into_iter().enumerate() {
                z[b][j][pos] = v;
            }
        }
    }
    let (mean, var): (Vec<f64>, Vec<f64>) = match p.running {
        Some((m, v)) => (m.to_vec(), v.to_vec()),
        None => (0..p.hidden)
            .map(|j| {
                let vals: Vec<f64> = z.iter().flat_map(|zb| zb[j].iter().copied()).collect();
                let n = vals.len() as f64;
                let m = vals.iter().sum::<f64>() / n;
                (m, vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n)
            })
            .unzip(),
    };
    let mut a_h = vec![vec![vec![0.0; s.h]; s.c]; s.b];
    let mut a_w = vec![vec![vec![0.0; s.w]; s.c]; s.b];
    for b in 0..s.b {
        for pos in 0..len {
            let r: Vec<f64> = (0..p.hidden)
                .map(|j| hswish(p.gamma[j] * (z[b][j][pos] - mean[j]) / (var[j] + BN_EPS).sqrt() + p.beta[j]))
                .collect();
            if pos < s.h {
                for (c, e) in dense(p.conv_h, Some(p.bias_h), &r, s.c).into_iter().enumerate() {
                    a_h[b][c][pos] = sigm(e);
                }
            } else {
                for (c, e) in dense(p.conv_w, Some(p.bias_w), &r, s.c).into_iter().enumerate() {
                    a_w[b][c][pos - s.h] = sigm(e);
                }
            }
        }
    }
    FeatureMap::from_fn(s, |b, c, y, xx| x.at(b, c, y, xx) * a_h[b][c][y] * a_w[b][c][xx])
}

// ---- parameter plumbing ------------------------------------------------

struct Collect<'a, T> {
    f: &'a mut dyn FnMut(&str, &mut Param<T>),
}

impl<T> Visitor<T> for Collect<'_, T> {
    fn param(&mut self, name: &str, p: &mut Param<T>) {
        (self.f)(name, p)
    }
    fn buffer(&mut self, _: &str, _: &[usize], _: &mut Vec<T>) {}
}

pub fn for_each_param<T, M: Module<T> + ?Sized>(m: &mut M, mut f: impl FnMut(&str, &mut Param<T>)) {
    let mut c = Collect { f: &mut f };
    m.visit("", &mut c);
}

pub fn flat_params<M: Module<f64> + ?Sized>(m: &mut M) -> Vec<f64> {
    let mut out = Vec::new();
    for_each_param(m, |_, p| out.extend_from_slice(&p.value));
    out
}

pub fn flat_grads<M: Module<f64> + ?Sized>(m: &mut M) -> Vec<f64> {
    let mut out = Vec::new();
    for_each_param(m, |_, p| out.extend_from_slice(&p.grad));
    out
}

pub fn set_flat_params<M: Module<f64> + ?Sized>(m: &mut M, values: &[f64]) {
    let mut i = 0;
    for_each_param(m, |_, p| {
        let n = p.value.len();
        p.value.copy_from_slice(&values[i..i + n]);
        i += n;
    });
    assert_eq!(i, values.len());
}

pub fn named_params<T: Clone, M: Module<T> + ?Sized>(m: &mut M) -> HashMap<String, Vec<T>> {
    let mut out = HashMap::new();
    for_each_param(m, |n, p| {
        out.insert(n.to_string(), p.value.clone());
    });
    out
}

/// Copies every parameter of `src` whose name also exists in `dst`.
pub fn copy_shared_params<T: Clone, A: Module<T> + ?Sized, B: Module<T> + ?Sized>(src: &mut A, dst: &mut B) -> usize {
    let values = named_params(src);
    let mut copied = 0;
    for_each_param(dst, |n, p| {
        if let Some(v) = values.get(n) {
            p.value.clone_from(v);
            copied += 1;
        }
    });
    copied
}

// ---- finite differences -----------------------------------------------

/// `‖a − n‖ / max(‖a‖, ‖n‖)`
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let up = f(&xp);
            xp[i] = orig - h;
            let down = f(&xp);
            xp[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn dot(a: &FeatureMap<f64>, r: &FeatureMap<f64>) -> f64 {
    a.data().iter().zip(r.data()).map(|(x, y)| x * y).sum()
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Finite-difference check of a layer `y = F(x; θ)` under the scalar
/// objective `⟨y, r⟩`. `forward` must not depend on previous calls;
/// `backward` receives `r` and returns `dx` while accumulating parameter
/// gradients into the module. Returns `(input rel err, param rel err)`.
pub fn check_layer<M: Module<f64>>(
    m: &mut M,
    x: &FeatureMap<f64>,
    r: &FeatureMap<f64>,
    forward: impl Fn(&mut M, &FeatureMap<f64>) -> FeatureMap<f64>,
    backward: impl Fn(&mut M, &FeatureMap<f64>) -> FeatureMap<f64>,
) -> (f64, f64) {
    gca_resunet::params::zero_grads(m);
    let y = forward(m, x);
    assert_eq!(y.shape(), r.shape());
    let dx = backward(m, r);
    let dtheta = flat_grads(m);

    let num_dx = numeric_grad(x.data(), FD_STEP, |v| {
        let xv = FeatureMap::from_vec(x.shape(), v.to_vec()).unwrap();
        dot(&forward(m, &xv), r)
    });
    let theta = flat_params(m);
    let num_dtheta = numeric_grad(&theta, FD_STEP, |v| {
        set_flat_params(m, v);
        dot(&forward(m, x), r)
    });
    set_flat_params(m, &theta);
    (rel_err(dx.data(), &num_dx), rel_err(&dtheta, &num_dtheta))
}

// ---- datasets ------------------------------------------------------------

pub fn synth(dir: &Path, cfg: &SynthConfig) -> Dataset {
    gen_synthetic(cfg, dir).expect("generate");
    load_dataset(dir).expect("load")
}
