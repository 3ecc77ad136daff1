//! Randomized oracle sweeps shared by the oracle tests and the acceptance
//! runner. Each sweep returns the number of cases and the worst absolute
//! error against its naive reference.

use gca_resunet::attention::{Attention, Gca, GcaConfig};
use gca_resunet::backbone::{Bottleneck, BottleneckSpec};
use gca_resunet::numerics::{
    activation, channel_pool, conv2d, directional_pool, global_pool, max_pool2d, resize_bilinear, Activation, Axis,
    BatchNorm2d, ConvSpec, FeatureMap, PoolMode, RunningStats,
};
use gca_resunet::losses::{ce_loss_grad, dice_loss_grad, LabelMask, LossConfig};
use gca_resunet::{AttentionConfig, AttentionKind, Mode};
use rand::Rng;

use super::*;

#[derive(Debug, Clone)]
pub struct Sweep {
    pub name: &'static str,
    pub cases: usize,
    pub max_err: f64,
    pub tol: f64,
}

impl Sweep {
    pub fn ok(&self) -> bool {
        self.max_err <= self.tol
    }
}

pub const CASES: usize = 120;

pub fn conv_sweep(seed: u64) -> Sweep {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..CASES {
        let groups = [1, 1, 2][r.random_range(0..3)];
        let cin = groups * r.random_range(1..4);
        let cout = groups * r.random_range(1..4);
        let k: usize = [1, 3, 5, 7][r.random_range(0..4)];
        let stride = r.random_range(1..3);
        let pad = r.random_range(0..=k / 2);
        let h = r.random_range(k.saturating_sub(2 * pad).max(1)..10);
        let w = r.random_range(k.saturating_sub(2 * pad).max(1)..10);
        let b = r.random_range(1..3);
        let bias = r.random_bool(0.5);
        let spec = ConvSpec::new(cin, cout, k)
            .stride(stride)
            .padding(pad)
            .groups(groups)
            .with_bias(bias);
        let x = rand_map((b, cin, h, w), &mut r);
        let wt = rand_vec(spec.num_params() - if bias { cout } else { 0 }, 1.0, &mut r);
        let bv = bias.then(|| rand_vec(cout, 1.0, &mut r));
        let got = conv2d(&x, &spec, &wt, bv.as_deref()).unwrap();
        let args = ConvArgs {
            cin,
            cout,
            k,
            stride,
            pad,
            groups,
        };
        let want = conv_naive(&x, &args, &wt, bv.as_deref());
        worst = worst.max(max_abs(got.data(), want.data()));
    }
    Sweep {
        name: "conv2d",
        cases: CASES,
        max_err: worst,
        tol: 1e-6,
    }
}

pub fn bn_sweep(seed: u64) -> Sweep {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for i in 0..CASES {
        let c = r.random_range(1..6);
        let shape = (r.random_range(1..4), c, r.random_range(1..6), r.random_range(1..6));
        let x = uniform(shape, -3.0, 3.0, &mut r);
        let mut bn = BatchNorm2d::<f64>::new(c);
        bn.gamma.value = rand_vec(c, 2.0, &mut r);
        bn.beta.value = rand_vec(c, 2.0, &mut r);
        let mean = rand_vec(c, 1.0, &mut r);
        let var: Vec<f64> = (0..c).map(|_| r.random_range(0.1..3.0)).collect();
        bn.running = Some(RunningStats {
            mean: mean.clone(),
            var: var.clone(),
        });
        let (mode, stats) = if i % 2 == 0 {
            (Mode::Train, None)
        } else {
            (Mode::Eval, Some((mean.as_slice(), var.as_slice())))
        };
        if mode == Mode::Train && shape.0 * shape.2 * shape.3 == 1 {
            continue;
        }
        let got = bn.forward(&x, mode).unwrap();
        let want = bn_naive(&x, &bn.gamma.value, &bn.beta.value, stats);
        worst = worst.max(max_abs(got.data(), want.data()));
    }
    Sweep {
        name: "batch_norm",
        cases: CASES,
        max_err: worst,
        tol: 1e-6,
    }
}

pub fn activation_sweep(seed: u64) -> Sweep {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for i in 0..CASES {
        let x = uniform((1, 2, r.random_range(1..6), r.random_range(1..6)), -8.0, 8.0, &mut r);
        let (kind, f): (Activation, fn(f64) -> f64) = match i % 3 {
            0 => (Activation::Relu, relu),
            1 => (Activation::Sigmoid, sigm),
            _ => (Activation::HardSwish, hswish),
        };
        let got = activation(&x, kind);
        let want: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
        worst = worst.max(max_abs(got.data(), &want));
    }
    Sweep {
        name: "activations",
        cases: CASES,
        max_err: worst,
        tol: 1e-7,
    }
}

pub fn maxpool_sweep(seed: u64) -> Sweep {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..CASES {
        let k = r.random_range(1..4);
        let stride = r.random_range(1..3);
        let pad = r.random_range(0..=k / 2);
        let x = rand_map((r.random_range(1..3), r.random_range(1..4), r.random_range(k..9), r.random_range(k..9)), &mut r);
        let got = max_pool2d(&x, k, stride, pad).unwrap().out;
        let want = maxpool_naive(&x, k, stride, pad);
        worst = worst.max(max_abs(got.data(), want.data()));
    }
    Sweep {
        name: "max_pool2d",
        cases: CASES,
        max_err: worst,
        tol: 0.0,
    }
}

pub fn reduction_sweep(seed: u64) -> Sweep {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for i in 0..CASES {
        let x = rand_map((r.random_range(1..3), r.random_range(1..9), r.random_range(1..8), r.random_range(1..8)), &mut r);
        let s = x.shape();
        let mode = if i % 2 == 0 { PoolMode::Avg } else { PoolMode::Max };
        let avg = mode == PoolMode::Avg;
        let got_h = directional_pool(&x, Axis::Horizontal, mode);
        let want_h = FeatureMap::from_fn((s.b, s.c, s.h, 1), |b, c, y, _| {
            if avg {
                row_avg(&x, b, c, y)
            } else {
                row_max(&x, b, c, y)
            }
        });
        let got_w = directional_pool(&x, Axis::Vertical, mode);
        let want_w = FeatureMap::from_fn((s.b, s.c, 1, s.w), |b, c, _, xx| {
            if avg {
                col_avg(&x, b, c, xx)
            } else {
                col_max(&x, b, c, xx)
            }
        });
        let got_g = global_pool(&x, mode).out;
        let want_g = FeatureMap::from_fn((s.b, s.c, 1, 1), |b, c, _, _| {
            if avg {
                plane_avg(&x, b, c)
            } else {
                plane_max(&x, b, c)
            }
        });
        let got_c = channel_pool(&x, mode).out;
        let want_c = FeatureMap::from_fn((s.b, 1, s.h, s.w), |b, _, y, xx| {
            let vals = (0..s.c).map(|c| x.at(b, c, y, xx));
            if avg {
                vals.sum::<f64>() / s.c as f64
            } else {
                vals.fold(f64::NEG_INFINITY, f64::max)
            }
        });
        for (g, w) in [(got_h, want_h), (got_w, want_w), (got_g, want_g), (got_c, want_c)] {
            worst = worst.max(max_abs(g.data(), w.data()));
        }
    }
    Sweep {
        name: "pool reductions",
        cases: CASES,
        max_err: worst,
        tol: 1e-6,
    }
}

pub fn resize_sweep(seed: u64) -> Sweep {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..CASES {
        let x = rand_map((r.random_range(1..3), r.random_range(1..4), r.random_range(1..9), r.random_range(1..9)), &mut r);
        let (oh, ow) = (r.random_range(1..17), r.random_range(1..17));
        let got = resize_bilinear(&x, oh, ow).unwrap();
        let want = resize_naive(&x, oh, ow);
        worst = worst.max(max_abs(got.data(), want.data()));
    }
    Sweep {
        name: "resize_bilinear",
        cases: CASES,
        max_err: worst,
        tol: 1e-6,
    }
}

pub fn primitive_sweeps() -> Vec<Sweep> {
    vec![
        conv_sweep(11),
        bn_sweep(12),
        activation_sweep(13),
        maxpool_sweep(14),
        reduction_sweep(15),
        resize_sweep(16),
    ]
}

/// Randomizes the excitation BN of a GCA so both modes are exercised
/// away from the identity.
pub fn randomize_gca_bn(m: &mut Gca<f64>, r: &mut ChaCha8Rng) {
    let h = m.cfg.hidden();
    m.bn.gamma.value = (0..h).map(|_| r.random_range(0.5..1.5)).collect();
    m.bn.beta.value = rand_vec(h, 0.5, r);
    m.bn.running = Some(RunningStats {
        mean: rand_vec(h, 0.5, r),
        var: (0..h).map(|_| r.random_range(0.5..2.0)).collect(),
    });
}

/// Every combination of C∈{8,16,32}, G∈{1,2,4}, H,W∈{4,7,8}, repeated for
/// B∈{1,2} with alternating BN mode and random r∈{1,2,4}: 162 configs.
pub fn gca_sweep(seed: u64) -> Sweep {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for b in [1, 2] {
        for c in [8, 16, 32] {
            for g in [1, 2, 4] {
                for h in [4, 7, 8] {
                    for w in [4, 7, 8] {
                        let cfg = GcaConfig {
                            channels: c,
                            groups: g,
                            reduction: [1, 2, 4][r.random_range(0..3)],
                            min_hidden: r.random_range(1..5),
                        };
                        let mut m = Gca::<f64>::new(cfg, &mut r).unwrap();
                        randomize_gca_bn(&mut m, &mut r);
                        let x = uniform((b, c, h, w), -2.0, 2.0, &mut r);
                        let mode = if cases % 2 == 0 { Mode::Eval } else { Mode::Train };
                        let want = gca_naive(&x, &gca_weights(&m), mode);
                        let got = m.forward(&x, mode).unwrap();
                        worst = worst.max(max_abs(got.data(), want.y.data()));
                        let maps = m.last_maps().unwrap();
                        for (gi, map) in maps.iter().enumerate() {
                            for bi in 0..b {
                                for ci in 0..cfg.group_channels() {
                                    for yi in 0..h {
                                        worst = worst.max((map.a_h.at(bi, ci, yi, 0) - want.a_h[bi][gi][ci][yi]).abs());
                                    }
                                    for xi in 0..w {
                                        worst = worst.max((map.a_w.at(bi, ci, 0, xi) - want.a_w[bi][gi][ci][xi]).abs());
                                    }
                                }
                            }
                        }
                        cases += 1;
                    }
                }
            }
        }
    }
    Sweep {
        name: "gca_forward",
        cases,
        max_err: worst,
        tol: 1e-6,
    }
}

/// Forces every GCA map of `b` to exactly 1: BN emits 1, ReLU keeps it,
/// and the expand weights sum to a logit where the sigmoid rounds to 1.
pub fn saturate_gca<T: gca_resunet::Scalar>(b: &mut Bottleneck<T>) {
    let Attention::Gca(g) = &mut b.attn else { panic!("not a GCA block") };
    g.bn.gamma.value.fill(T::zero());
    g.bn.beta.value.fill(T::one());
    let h = g.cfg.hidden();
    for e in &mut g.expand {
        e.weight.value.fill(T::lit(1000.0 / h as f64));
    }
}

/// Saturated-GCA bottleneck vs a plain bottleneck with the same weights,
/// in both modes. True when outputs agree bit for bit and every map is 1.
pub fn bypass_is_exact(cin: usize, planes: usize, stride: usize, seed: u64) -> bool {
    let spec = BottleneckSpec::new(cin, planes, stride, AttentionConfig::default());
    let mut with = Bottleneck::<f32>::new(spec, &mut rng(seed)).unwrap();
    saturate_gca(&mut with);
    let plain = BottleneckSpec {
        attention: spec.attention.with_kind(AttentionKind::None),
        ..spec
    };
    let mut without = Bottleneck::<f32>::new(plain, &mut rng(seed + 1)).unwrap();
    copy_shared_params(&mut with, &mut without);
    let x: FeatureMap<f32> = rand_map((2, cin, 6, 6), &mut rng(seed + 2)).cast();
    [Mode::Train, Mode::Eval].into_iter().all(|mode| {
        let a = with.forward(&x, mode).unwrap();
        let b = without.forward(&x, mode).unwrap();
        let Attention::Gca(g) = &with.attn else { unreachable!() };
        let ones = g
            .last_maps()
            .unwrap()
            .iter()
            .all(|m| m.a_h.data().iter().chain(m.a_w.data()).all(|&v| v == 1.0));
        ones && bits_eq(&a, &b)
    })
}

/// Perturbs one group at a time in eval mode. Returns whether every other
/// group's output stayed bitwise fixed while the perturbed group changed.
pub fn group_locality_holds(groups: usize, seed: u64) -> bool {
    let cfg = GcaConfig {
        channels: 16,
        groups,
        reduction: 2,
        min_hidden: 2,
    };
    let mut r = rng(seed);
    let mut m = Gca::<f64>::new(cfg, &mut r).unwrap();
    randomize_gca_bn(&mut m, &mut r);
    let x = rand_map((2, 16, 6, 5), &mut r);
    let y = m.forward(&x, Mode::Eval).unwrap();
    let cg = cfg.group_channels();
    (0..groups).all(|target| {
        let mut xp = x.clone();
        let mut part = xp.slice_channels(target * cg, cg).unwrap();
        part.add_assign(&rand_map((2, cg, 6, 5), &mut r)).unwrap();
        xp.write_channels(target * cg, &part).unwrap();
        let yp = m.forward(&xp, Mode::Eval).unwrap();
        let group = |f: &FeatureMap<f64>, g: usize| f.slice_channels(g * cg, cg).unwrap();
        let others_fixed = (0..groups).filter(|&o| o != target).all(|o| {
            let (a, b) = (group(&y, o), group(&yp, o));
            a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits())
        });
        others_fixed && group(&y, target) != group(&yp, target)
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MapBounds {
    pub seen: usize,
    /// Values outside (0, 1) for inputs of magnitude ≤ 3.
    pub open_violations: usize,
    /// Values outside [0, 1] or non-finite for inputs up to magnitude 100.
    pub closed_violations: usize,
}

/// Samples GCA maps over random configs, both modes and input scales
/// from 0.1 to 100. Large inputs may saturate the sigmoid to exactly 0
/// or 1 in floating point, so those only count against the closed range.
pub fn gca_map_bounds(seed: u64) -> MapBounds {
    let mut r = rng(seed);
    let mut out = MapBounds::default();
    let scales = [0.1, 1.0, 3.0, 10.0, 100.0];
    for i in 0..100 {
        let groups = [1, 2, 4][i % 3];
        let cfg = GcaConfig {
            channels: groups * r.random_range(1..9),
            groups,
            reduction: r.random_range(1..5),
            min_hidden: r.random_range(1..4),
        };
        let mut m = Gca::<f64>::new(cfg, &mut r).unwrap();
        randomize_gca_bn(&mut m, &mut r);
        let scale = scales[i % scales.len()];
        let x = uniform((2, cfg.channels, r.random_range(1..9), r.random_range(1..9)), -scale, scale, &mut r);
        let mode = if i % 2 == 0 { Mode::Train } else { Mode::Eval };
        m.forward(&x, mode).unwrap();
        for map in m.last_maps().unwrap() {
            for &v in map.a_h.data().iter().chain(map.a_w.data()) {
                out.seen += 1;
                if scale <= 3.0 && !(v > 0.0 && v < 1.0) {
                    out.open_violations += 1;
                }
                if !(0.0..=1.0).contains(&v) {
                    out.closed_violations += 1;
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct FdCheck {
    pub name: String,
    pub input_err: f64,
    pub param_err: f64,
}

impl FdCheck {
    pub fn ok(&self) -> bool {
        self.input_err < FD_TOL && self.param_err < FD_TOL
    }
}

fn loss_check(name: &str, logits: &FeatureMap<f64>, f: impl Fn(&FeatureMap<f64>) -> (f64, FeatureMap<f64>)) -> FdCheck {
    let (_, g) = f(logits);
    let num = numeric_grad(logits.data(), FD_STEP, |v| f(&FeatureMap::from_vec(logits.shape(), v.to_vec()).unwrap()).0);
    FdCheck {
        name: name.into(),
        input_err: rel_err(g.data(), &num),
        param_err: 0.0,
    }
}

/// Finite-difference checks in f64 for GCA (both modes, G = 2 and 4),
/// a GCA bottleneck (both modes, plus a strided projection block), the
/// Dice loss (background in and out) and cross-entropy.
pub fn fd_checks() -> Vec<FdCheck> {
    let mut r = rng(31);
    let mut out = Vec::new();
    for (groups, shape, mode) in [
        (2, (1, 8, 4, 4), Mode::Train),
        (2, (1, 8, 4, 4), Mode::Eval),
        (4, (2, 16, 5, 3), Mode::Train),
    ] {
        let cfg = GcaConfig {
            channels: shape.1,
            groups,
            reduction: 2,
            min_hidden: 1,
        };
        let mut m = Gca::<f64>::new(cfg, &mut r).unwrap();
        randomize_gca_bn(&mut m, &mut r);
        let x = rand_map(shape, &mut r);
        let dir = rand_map(x.shape(), &mut r);
        let (i, p) = check_layer(&mut m, &x, &dir, |m, x| m.forward(x, mode).unwrap(), |m, d| m.backward(d).unwrap());
        out.push(FdCheck {
            name: format!("gca G={groups} {mode:?}"),
            input_err: i,
            param_err: p,
        });
    }
    let gca = AttentionConfig {
        kind: AttentionKind::Gca,
        groups: 2,
        reduction: 2,
        min_hidden: 2,
    };
    for (spec, shape, mode) in [
        (BottleneckSpec::new(8, 2, 1, gca), (1, 8, 6, 6), Mode::Train),
        (BottleneckSpec::new(8, 2, 1, gca), (1, 8, 6, 6), Mode::Eval),
        (BottleneckSpec::new(4, 2, 2, gca), (2, 4, 6, 6), Mode::Train),
    ] {
        let mut b = Bottleneck::<f64>::new(spec, &mut r).unwrap();
        if let Attention::Gca(g) = &mut b.attn {
            randomize_gca_bn(g, &mut r);
        }
        let x = rand_map(shape, &mut r);
        let y = b.forward(&x, mode).unwrap();
        let dir = rand_map(y.shape(), &mut r);
        let (i, p) = check_layer(&mut b, &x, &dir, |m, x| m.forward(x, mode).unwrap(), |m, d| m.backward(d).unwrap());
        out.push(FdCheck {
            name: format!("bottleneck {}->{} stride {} {mode:?}", spec.in_channels, spec.out_channels(), spec.stride),
            input_err: i,
            param_err: p,
        });
    }
    let logits = uniform((2, 4, 3, 5), -2.0, 2.0, &mut r);
    let t = LabelMask::new(2, 3, 5, (0..30).map(|_| r.random_range(0..4u8)).collect()).unwrap();
    for bg in [true, false] {
        let cfg = LossConfig {
            include_background_in_loss: bg,
            ..LossConfig::default()
        };
        out.push(loss_check(&format!("dice background={bg}"), &logits, |l| dice_loss_grad(l, &t, &cfg).unwrap()));
    }
    out.push(loss_check("cross-entropy", &logits, |l| ce_loss_grad(l, &t).unwrap()));
    out
}
