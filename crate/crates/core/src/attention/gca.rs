//! Grouped Coordinate Attention.
//!
//! Channels are split into `G` contiguous groups. For each group, average
//! and max pooling along each spatial axis give four directional
//! descriptors; the avg and max descriptors of each direction are summed
//! and passed through a bottleneck `1×1 conv → BN → ReLU → 1×1 conv →
//! sigmoid`. The same bottleneck weights serve both directions, producing
//! a horizontal map `A_h` (`B×C_g×H×1`) and a vertical map `A_w`
//! (`B×C_g×1×W`). The group output is `X_g ⊙ A_h ⊙ A_w`, and groups are
//! concatenated back in their original order.
//!
//! Each group owns its two 1×1 convolutions; a single BN of the hidden
//! width is shared by all groups and both directions, so its batch
//! statistics pool over every hidden activation of the instance.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{as_column, as_row, concat_last, slice_last, write_last};
use super::{apply_directional, apply_directional_backward};
use crate::error::{Error, Result};
use crate::numerics::{
    directional_avg_backward, directional_pool_with_argmax, scatter_argmax, sigmoid, Act, Axis, BatchNorm2d,
    Conv2d, ConvSpec, FeatureMap, PoolMode, Scalar, Shape,
};
use crate::params::{join, Mode, Module, Visitor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GcaConfig {
    pub channels: usize,
    pub groups: usize,
    pub reduction: usize,
    pub min_hidden: usize,
}

impl GcaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.channels == 0 || self.channels % self.groups != 0 {
            return Err(Error::Config(format!(
                "GCA channels {} not divisible by groups {}",
                self.channels, self.groups
            )));
        }
        if self.reduction == 0 {
            return Err(Error::Config("GCA reduction must be >= 1".into()));
        }
        if self.hidden() == 0 {
            return Err(Error::Config("GCA hidden width is 0; raise min_hidden".into()));
        }
        Ok(())
    }

    pub fn group_channels(&self) -> usize {
        self.channels / self.groups
    }

    /// `max(C_g / r, min_hidden)`
    pub fn hidden(&self) -> usize {
        (self.group_channels() / self.reduction.max(1)).max(self.min_hidden)
    }

    /// `G · 2 · C_g · hidden + 2 · hidden`
    pub fn num_params(&self) -> usize {
        let h = self.hidden();
        self.groups * 2 * self.group_channels() * h + 2 * h
    }
}

/// Pooled descriptors of one channel group.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionalDescriptors<T> {
    pub f_h_avg: FeatureMap<T>,
    pub f_h_max: FeatureMap<T>,
    pub f_w_avg: FeatureMap<T>,
    pub f_w_max: FeatureMap<T>,
    /// `f_h_avg + f_h_max`
    pub f_h: FeatureMap<T>,
    /// `f_w_avg + f_w_max`
    pub f_w: FeatureMap<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps<T> {
    /// `B×C_g×H×1`
    pub a_h: FeatureMap<T>,
    /// `B×C_g×1×W`
    pub a_w: FeatureMap<T>,
}

struct DescriptorArgmax {
    h: Vec<usize>,
    w: Vec<usize>,
}

fn descriptors_with_argmax<T: Scalar>(x_g: &FeatureMap<T>) -> (DirectionalDescriptors<T>, DescriptorArgmax) {
    let h_avg = directional_pool_with_argmax(x_g, Axis::Horizontal, PoolMode::Avg).out;
    let h_max = directional_pool_with_argmax(x_g, Axis::Horizontal, PoolMode::Max);
    let w_avg = directional_pool_with_argmax(x_g, Axis::Vertical, PoolMode::Avg).out;
    let w_max = directional_pool_with_argmax(x_g, Axis::Vertical, PoolMode::Max);
    let f_h = h_avg.zip_map(&h_max.out, |a, m| a + m).expect("same shape");
    let f_w = w_avg.zip_map(&w_max.out, |a, m| a + m).expect("same shape");
    (
        DirectionalDescriptors {
            f_h_avg: h_avg,
            f_h_max: h_max.out,
            f_w_avg: w_avg,
            f_w_max: w_max.out,
            f_h,
            f_w,
        },
        DescriptorArgmax {
            h: h_max.argmax,
            w: w_max.argmax,
        },
    )
}

/// Directional avg/max descriptors of one group and their fused sums.
pub fn gca_descriptors<T: Scalar>(x_g: &FeatureMap<T>) -> DirectionalDescriptors<T> {
    descriptors_with_argmax(x_g).0
}

/// `Y_g = X_g ⊙ A_h ⊙ A_w` with broadcasting over the collapsed axes.
pub fn gca_apply<T: Scalar>(x_g: &FeatureMap<T>, maps: &AttentionMaps<T>) -> Result<FeatureMap<T>> {
    apply_directional(x_g, &maps.a_h, &maps.a_w)
}

pub struct Gca<T> {
    pub cfg: GcaConfig,
    /// Per group: `C_g → hidden`, 1×1, no bias.
    pub reduce: Vec<Conv2d<T>>,
    /// Shared over groups and directions.
    pub bn: BatchNorm2d<T>,
    /// Per group: `hidden → C_g`, 1×1, no bias.
    pub expand: Vec<Conv2d<T>>,
    relu: Act<T>,
    cache: Option<GcaCache<T>>,
}

struct GcaCache<T> {
    input: FeatureMap<T>,
    argmax: Vec<DescriptorArgmax>,
    maps: Vec<AttentionMaps<T>>,
}

impl<T: Scalar> Gca<T> {
    pub fn new<R: Rng>(cfg: GcaConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (cg, h) = (cfg.group_channels(), cfg.hidden());
        let reduce = (0..cfg.groups)
            .map(|_| Conv2d::new(ConvSpec::new(cg, h, 1), rng))
            .collect();
        let expand = (0..cfg.groups)
            .map(|_| Conv2d::new(ConvSpec::new(h, cg, 1), rng))
            .collect();
        Ok(Gca {
            cfg,
            reduce,
            bn: BatchNorm2d::new(h),
            expand,
            relu: Act::relu(),
            cache: None,
        })
    }

    /// Shared excitation: one call covers every group so the BN statistics
    /// are taken jointly. `descriptors[g]` belongs to group `g`.
    pub fn excite(&mut self, descriptors: &[DirectionalDescriptors<T>], mode: Mode) -> Result<Vec<AttentionMaps<T>>> {
        if descriptors.len() != self.cfg.groups {
            return Err(Error::Shape(format!(
                "{} descriptor sets for {} groups",
                descriptors.len(),
                self.cfg.groups
            )));
        }
        let cg = self.cfg.group_channels();
        let hidden = self.cfg.hidden();
        let d0 = descriptors[0].f_h.shape();
        let (b, h, w) = (d0.b, d0.h, descriptors[0].f_w.shape().w);
        let len = h + w;
        let mut z = FeatureMap::zeros((b, hidden, 1, self.cfg.groups * len));
        for (g, d) in descriptors.iter().enumerate() {
            d.f_h.expect_shape(Shape::new(b, cg, h, 1), "f_h")?;
            d.f_w.expect_shape(Shape::new(b, cg, 1, w), "f_w")?;
            let f = concat_last(&as_row(d.f_h.clone()), &d.f_w);
            let zg = self.reduce[g].forward(&f)?;
            write_last(&mut z, g * len, &zg);
        }
        let z = self.bn.forward(&z, mode)?;
        let z = self.relu.forward_owned(z);
        let mut maps = Vec::with_capacity(self.cfg.groups);
        for g in 0..self.cfg.groups {
            let e = self.expand[g].forward(&slice_last(&z, g * len, len))?;
            let a = e.map(sigmoid);
            maps.push(AttentionMaps {
                a_h: as_column(slice_last(&a, 0, h)),
                a_w: slice_last(&a, h, w),
            });
        }
        Ok(maps)
    }

    pub fn forward(&mut self, x: &FeatureMap<T>, mode: Mode) -> Result<FeatureMap<T>> {
        let s = x.shape();
        if s.c != self.cfg.channels {
            return Err(Error::Shape(format!(
                "GCA configured for {} channels got {s}",
                self.cfg.channels
            )));
        }
        let cg = self.cfg.group_channels();
        let mut descs = Vec::with_capacity(self.cfg.groups);
        let mut argmax = Vec::with_capacity(self.cfg.groups);
        for g in 0..self.cfg.groups {
            let (d, a) = descriptors_with_argmax(&x.slice_channels(g * cg, cg)?);
            descs.push(d);
            argmax.push(a);
        }
        let maps = self.excite(&descs, mode)?;
        let mut y = FeatureMap::zeros(s);
        for (g, m) in maps.iter().enumerate() {
            y.write_channels(g * cg, &gca_apply(&x.slice_channels(g * cg, cg)?, m)?)?;
        }
        self.cache = Some(GcaCache {
            input: x.clone(),
            argmax,
            maps,
        });
        Ok(y)
    }

    /// Attention maps of the most recent forward pass, one entry per group.
    pub fn last_maps(&self) -> Option<&[AttentionMaps<T>]> {
        self.cache.as_ref().map(|c| c.maps.as_slice())
    }

    pub fn backward(&mut self, dy: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let GcaCache { input, argmax, maps } = self
            .cache
            .take()
            .ok_or_else(|| Error::State("GCA backward without forward".into()))?;
        let s = input.shape();
        dy.expect_shape(s, "GCA backward")?;
        let cg = self.cfg.group_channels();
        let hidden = self.cfg.hidden();
        let len = s.h + s.w;
        let gs = Shape::new(s.b, cg, s.h, s.w);
        let mut dx = FeatureMap::zeros(s);
        let mut dz = FeatureMap::zeros((s.b, hidden, 1, self.cfg.groups * len));
        let mut direct = Vec::with_capacity(self.cfg.groups);
        for (g, m) in maps.iter().enumerate() {
            let xg = input.slice_channels(g * cg, cg)?;
            let dyg = dy.slice_channels(g * cg, cg)?;
            let (dxg, dah, daw) = apply_directional_backward(&dyg, &xg, &m.a_h, &m.a_w);
            direct.push(dxg);
            let a = concat_last(&as_row(m.a_h.clone()), &m.a_w);
            let da = concat_last(&as_row(dah), &daw);
            let de = da.zip_map(&a, |d, a| d * a * (T::one() - a))?;
            let dzg = self.expand[g].backward(&de)?;
            write_last(&mut dz, g * len, &dzg);
        }
        let dz = self.relu.backward(&dz)?;
        let dz = self.bn.backward(&dz)?;
        for (g, dxg) in direct.into_iter().enumerate() {
            let df = self.reduce[g].backward(&slice_last(&dz, g * len, len))?;
            let df_h = as_column(slice_last(&df, 0, s.h));
            let df_w = slice_last(&df, s.h, s.w);
            let mut acc = dxg;
            acc.add_assign(&directional_avg_backward(&df_h, gs, Axis::Horizontal))?;
            acc.add_assign(&scatter_argmax(&df_h, &argmax[g].h, gs)?)?;
            acc.add_assign(&directional_avg_backward(&df_w, gs, Axis::Vertical))?;
            acc.add_assign(&scatter_argmax(&df_w, &argmax[g].w, gs)?)?;
            dx.write_channels(g * cg, &acc)?;
        }
        Ok(dx)
    }
}

impl<T: Scalar> Module<T> for Gca<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        for (g, c) in self.reduce.iter_mut().enumerate() {
            c.visit(&join(prefix, &format!("reduce.{g}")), v);
        }
        self.bn.visit(&join(prefix, "bn"), v);
        for (g, c) in self.expand.iter_mut().enumerate() {
            c.visit(&join(prefix, &format!("expand.{g}")), v);
        }
    }
}
