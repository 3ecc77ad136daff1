//! Dice + cross-entropy objective and the hard Dice metric.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{FeatureMap, Scalar, Shape};

/// Integer class map `B×H×W`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(b: usize, h: usize, w: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != b * h * w {
            return Err(Error::Shape(format!(
                "label mask {b}x{h}x{w} needs {} values, got {}",
                b * h * w,
                labels.len()
            )));
        }
        Ok(LabelMask { b, h, w, labels })
    }

    pub fn filled(b: usize, h: usize, w: usize, class: u8) -> Self {
        LabelMask {
            b,
            h,
            w,
            labels: vec![class; b * h * w],
        }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn at(&self, b: usize, y: usize, x: usize) -> u8 {
        self.labels[(b * self.h + y) * self.w + x]
    }

    /// Sample `b` as a standalone mask.
    pub fn sample(&self, b: usize) -> LabelMask {
        let n = self.plane();
        LabelMask {
            b: 1,
            h: self.h,
            w: self.w,
            labels: self.labels[b * n..(b + 1) * n].to_vec(),
        }
    }

    pub fn stack(masks: &[&LabelMask]) -> Result<LabelMask> {
        let first = masks.first().ok_or_else(|| Error::Shape("cannot stack zero masks".into()))?;
        let mut labels = Vec::new();
        let mut b = 0;
        for m in masks {
            if (m.h, m.w) != (first.h, first.w) {
                return Err(Error::Shape(format!(
                    "mask {}x{} does not match {}x{}",
                    m.h, m.w, first.h, first.w
                )));
            }
            labels.extend_from_slice(&m.labels);
            b += m.b;
        }
        Ok(LabelMask {
            b,
            h: first.h,
            w: first.w,
            labels,
        })
    }

    /// Fails if any label is `>= num_classes`.
    pub fn check(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().position(|&l| l as usize >= num_classes) {
            Some(i) => Err(Error::Input(format!(
                "label {} at index {i} is out of range for {num_classes} classes",
                self.labels[i]
            ))),
            None => Ok(()),
        }
    }

    pub fn counts(&self, num_classes: usize) -> Vec<usize> {
        let mut c = vec![0; num_classes];
        for &l in &self.labels {
            if let Some(v) = c.get_mut(l as usize) {
                *v += 1;
            }
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub dice_weight: f64,
    pub ce_weight: f64,
    pub epsilon: f64,
    pub include_background_in_loss: bool,
    pub include_background_in_metric: bool,
    /// DSC assigned to a class absent from both prediction and target.
    pub absent_class_dsc: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            dice_weight: 0.5,
            ce_weight: 0.5,
            epsilon: 1e-5,
            include_background_in_loss: true,
            include_background_in_metric: false,
            absent_class_dsc: 1.0,
        }
    }
}

impl LossConfig {
    pub fn weighted(dice_weight: f64, ce_weight: f64) -> Self {
        LossConfig {
            dice_weight,
            ce_weight,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.dice_weight) || !ok(self.ce_weight) || self.dice_weight + self.ce_weight == 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be >= 0 and not both zero (dice {}, ce {})",
                self.dice_weight, self.ce_weight
            )));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(0.0..=1.0).contains(&self.absent_class_dsc) {
            return Err(Error::Config("absent_class_dsc must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn first_class(&self, include_background: bool) -> usize {
        usize::from(!include_background)
    }
}

fn check_pair<T: Scalar>(logits: &FeatureMap<T>, target: &LabelMask) -> Result<Shape> {
    let s = logits.shape();
    if (s.b, s.h, s.w) != (target.b, target.h, target.w) {
        return Err(Error::Shape(format!(
            "logits {s} do not match target {}x{}x{}",
            target.b, target.h, target.w
        )));
    }
    if s.c < 2 {
        return Err(Error::Shape(format!("need at least 2 classes, logits are {s}")));
    }
    target.check(s.c)?;
    Ok(s)
}

/// Channel-wise softmax with max subtraction.
pub fn softmax<T: Scalar>(logits: &FeatureMap<T>) -> FeatureMap<T> {
    let s = logits.shape();
    let n = s.plane();
    let mut out = FeatureMap::zeros(s);
    let src = logits.data();
    let dst = out.data_mut();
    for b in 0..s.b {
        let base = b * s.c * n;
        for i in 0..n {
            let at = |c: usize| base + c * n + i;
            let m = (0..s.c).map(|c| src[at(c)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for c in 0..s.c {
                let e = (src[at(c)] - m).exp();
                dst[at(c)] = e;
                z = z + e;
            }
            for c in 0..s.c {
                dst[at(c)] = dst[at(c)] / z;
            }
        }
    }
    out
}

/// Per-pixel argmax over channels; ties go to the lowest class.
pub fn argmax<T: Scalar>(logits: &FeatureMap<T>) -> LabelMask {
    let s = logits.shape();
    let n = s.plane();
    let src = logits.data();
    let mut labels = Vec::with_capacity(s.b * n);
    for b in 0..s.b {
        let base = b * s.c * n;
        for i in 0..n {
            let mut best = 0;
            for c in 1..s.c {
                if src[base + c * n + i] > src[base + best * n + i] {
                    best = c;
                }
            }
            labels.push(best as u8);
        }
    }
    LabelMask {
        b: s.b,
        h: s.h,
        w: s.w,
        labels,
    }
}

/// Mean cross-entropy over all pixels and its gradient w.r.t. the logits.
pub fn ce_loss_grad<T: Scalar>(logits: &FeatureMap<T>, target: &LabelMask) -> Result<(T, FeatureMap<T>)> {
    let s = check_pair(logits, target)?;
    let n = s.plane();
    let count = T::from_usize_lossy(s.b * n);
    let src = logits.data();
    let mut grad = softmax(logits);
    let mut total = T::zero();
    for b in 0..s.b {
        let base = b * s.c * n;
        for i in 0..n {
            let at = |c: usize| base + c * n + i;
            let m = (0..s.c).map(|c| src[at(c)]).fold(T::neg_infinity(), T::max);
            let lse = m + (0..s.c).map(|c| (src[at(c)] - m).exp()).sum::<T>().ln();
            let t = target.labels[b * n + i] as usize;
            total = total + lse - src[at(t)];
            let g = grad.data_mut();
            g[at(t)] = g[at(t)] - T::one();
        }
    }
    grad.data_mut().iter_mut().for_each(|v| *v = *v / count);
    Ok((total / count, grad))
}

pub fn ce_loss<T: Scalar>(logits: &FeatureMap<T>, target: &LabelMask) -> Result<T> {
    ce_loss_grad(logits, target).map(|(l, _)| l)
}

/// Soft Dice loss over the whole batch and its gradient w.r.t. the logits.
pub fn dice_loss_grad<T: Scalar>(
    logits: &FeatureMap<T>,
    target: &LabelMask,
    cfg: &LossConfig,
) -> Result<(T, FeatureMap<T>)> {
    let s = check_pair(logits, target)?;
    let n = s.plane();
    let eps = T::lit(cfg.epsilon);
    let two = T::lit(2.0);
    let p = softmax(logits);
    let first = cfg.first_class(cfg.include_background_in_loss);
    let classes = s.c - first;
    let mut dp = FeatureMap::zeros(s);
    let mut dice_sum = T::zero();
    for c in first..s.c {
        let (mut inter, mut psum, mut gsum) = (T::zero(), T::zero(), T::zero());
        for b in 0..s.b {
            let plane = p.plane(b, c);
            for (i, &pv) in plane.iter().enumerate() {
                psum = psum + pv;
                if target.labels[b * n + i] as usize == c {
                    inter = inter + pv;
                    gsum = gsum + T::one();
                }
            }
        }
        let num = two * inter + eps;
        let den = psum + gsum + eps;
        dice_sum = dice_sum + num / den;
        // d(1 - mean d_c)/dp = -(2g·den - num) / (|C|·den²)
        let scale = -T::one() / (T::from_usize_lossy(classes) * den * den);
        for b in 0..s.b {
            let dplane = dp.plane_mut(b, c);
            for (i, d) in dplane.iter_mut().enumerate() {
                let g = if target.labels[b * n + i] as usize == c { T::one() } else { T::zero() };
                *d = scale * (two * g * den - num);
            }
        }
    }
    let loss = T::one() - dice_sum / T::from_usize_lossy(classes);
    Ok((loss, softmax_backward(&p, &dp)))
}

pub fn dice_loss<T: Scalar>(logits: &FeatureMap<T>, target: &LabelMask, cfg: &LossConfig) -> Result<T> {
    dice_loss_grad(logits, target, cfg).map(|(l, _)| l)
}

/// `dz_k = p_k (dp_k - Σ_j p_j dp_j)` per pixel.
pub fn softmax_backward<T: Scalar>(p: &FeatureMap<T>, dp: &FeatureMap<T>) -> FeatureMap<T> {
    let s = p.shape();
    let n = s.plane();
    let mut dz = FeatureMap::zeros(s);
    let (pv, dv) = (p.data(), dp.data());
    let out = dz.data_mut();
    for b in 0..s.b {
        let base = b * s.c * n;
        for i in 0..n {
            let dot = (0..s.c).map(|c| pv[base + c * n + i] * dv[base + c * n + i]).sum::<T>();
            for c in 0..s.c {
                let at = base + c * n + i;
                out[at] = pv[at] * (dv[at] - dot);
            }
        }
    }
    dz
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue<T> {
    pub total: T,
    pub dice: T,
    pub ce: T,
}

/// Weighted Dice + CE with the combined logit gradient.
pub fn total_loss_grad<T: Scalar>(
    logits: &FeatureMap<T>,
    target: &LabelMask,
    cfg: &LossConfig,
) -> Result<(LossValue<T>, FeatureMap<T>)> {
    cfg.validate()?;
    let (wd, wc) = (T::lit(cfg.dice_weight), T::lit(cfg.ce_weight));
    let (dice, gd) = dice_loss_grad(logits, target, cfg)?;
    let (ce, gc) = ce_loss_grad(logits, target)?;
    let grad = gd.zip_map(&gc, |a, b| wd * a + wc * b)?;
    let value = LossValue {
        total: wd * dice + wc * ce,
        dice,
        ce,
    };
    Ok((value, grad))
}

pub fn total_loss<T: Scalar>(logits: &FeatureMap<T>, target: &LabelMask, cfg: &LossConfig) -> Result<T> {
    total_loss_grad(logits, target, cfg).map(|(v, _)| v.total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DscReport {
    /// Hard DSC for every class `0..K`.
    pub per_class: Vec<f64>,
    /// Mean over the reported class set (foreground only by default).
    pub mean: f64,
}

/// Intersection, |P| and |G| per class.
pub fn overlap_counts(pred: &LabelMask, target: &LabelMask, num_classes: usize) -> Result<Vec<[usize; 3]>> {
    if (pred.b, pred.h, pred.w) != (target.b, target.h, target.w) {
        return Err(Error::Shape(format!(
            "prediction {}x{}x{} does not match target {}x{}x{}",
            pred.b, pred.h, pred.w, target.b, target.h, target.w
        )));
    }
    pred.check(num_classes)?;
    target.check(num_classes)?;
    let mut counts = vec![[0usize; 3]; num_classes];
    for (&p, &g) in pred.labels.iter().zip(&target.labels) {
        counts[p as usize][1] += 1;
        counts[g as usize][2] += 1;
        if p == g {
            counts[p as usize][0] += 1;
        }
    }
    Ok(counts)
}

impl DscReport {
    pub fn from_counts(counts: &[[usize; 3]], include_background: bool, absent: f64) -> Self {
        let per_class: Vec<f64> = counts
            .iter()
            .map(|&[i, p, g]| {
                if p + g == 0 {
                    absent
                } else {
                    2.0 * i as f64 / (p + g) as f64
                }
            })
            .collect();
        let first = usize::from(!include_background).min(per_class.len());
        let set = &per_class[first..];
        let mean = if set.is_empty() {
            0.0
        } else {
            set.iter().sum::<f64>() / set.len() as f64
        };
        DscReport { per_class, mean }
    }
}

/// Hard per-class DSC with foreground-mean under the given config.
pub fn dsc_metric_with(pred: &LabelMask, target: &LabelMask, num_classes: usize, cfg: &LossConfig) -> Result<DscReport> {
    let counts = overlap_counts(pred, target, num_classes)?;
    Ok(DscReport::from_counts(
        &counts,
        cfg.include_background_in_metric,
        cfg.absent_class_dsc,
    ))
}

pub fn dsc_metric(pred: &LabelMask, target: &LabelMask, num_classes: usize) -> Result<DscReport> {
    dsc_metric_with(pred, target, num_classes, &LossConfig::default())
}
