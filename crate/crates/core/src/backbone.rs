//! ResNet50-style encoder without its pooling/classification head.
//!
//! The 7×7 stem (conv → BN → ReLU) yields `feat1` at stride 2; after a 3×3
//! max-pool, four stages of bottleneck blocks yield `feat2..feat5` at
//! strides 4/8/16/32. The first block of stages 2–4 downsamples with a
//! stride-2 3×3 convolution. Each bottleneck applies its attention block
//! to the BN'd expansion output, before the residual addition.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{Attention, AttentionConfig};
use crate::error::{Error, Result};
use crate::numerics::{Act, BatchNorm2d, Conv2d, ConvSpec, FeatureMap, MaxPool2d, Scalar, Shape};
use crate::params::{join, Mode, Module, Visitor};

pub const EXPANSION: usize = 4;
/// Total downsampling factor of the encoder.
pub const OUTPUT_STRIDE: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stage_depths: Vec<usize>,
    pub stage_planes: Vec<usize>,
    pub attention: AttentionConfig,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 3,
            stem_channels: 64,
            stage_depths: vec![3, 4, 6, 3],
            stage_planes: vec![64, 128, 256, 512],
            attention: AttentionConfig::default(),
        }
    }
}

impl BackboneConfig {
    /// Two bottlenecks per stage; used for desk-scale experiments.
    pub fn mini() -> Self {
        BackboneConfig {
            stage_depths: vec![2, 2, 2, 2],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_depths.len() != 4 || self.stage_planes.len() != 4 {
            return Err(Error::Config("backbone needs exactly four stages".into()));
        }
        if self.stage_depths.iter().any(|&d| d == 0) || self.stage_planes.iter().any(|&p| p == 0) {
            return Err(Error::Config("stage depths and widths must be >= 1".into()));
        }
        if self.in_channels == 0 || self.stem_channels == 0 {
            return Err(Error::Config("channel counts must be >= 1".into()));
        }
        for spec in self.bottlenecks() {
            self.attention.validate(spec.out_channels())?;
        }
        Ok(())
    }

    /// Bottleneck specs in execution order.
    pub fn bottlenecks(&self) -> Vec<BottleneckSpec> {
        let mut specs = Vec::new();
        let mut in_channels = self.stem_channels;
        for (stage, (&depth, &planes)) in self.stage_depths.iter().zip(&self.stage_planes).enumerate() {
            for i in 0..depth {
                let stride = if i == 0 && stage > 0 { 2 } else { 1 };
                specs.push(BottleneckSpec::new(in_channels, planes, stride, self.attention));
                in_channels = planes * EXPANSION;
            }
        }
        specs
    }

    /// Channel widths of `feat1..feat5`.
    pub fn pyramid_channels(&self) -> [usize; 5] {
        let p = &self.stage_planes;
        [
            self.stem_channels,
            p[0] * EXPANSION,
            p[1] * EXPANSION,
            p[2] * EXPANSION,
            p[3] * EXPANSION,
        ]
    }

    pub fn stem_conv(&self) -> ConvSpec {
        ConvSpec::new(self.in_channels, self.stem_channels, 7).stride(2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BottleneckSpec {
    pub in_channels: usize,
    pub planes: usize,
    pub stride: usize,
    pub has_projection: bool,
    pub attention: AttentionConfig,
}

impl BottleneckSpec {
    pub fn new(in_channels: usize, planes: usize, stride: usize, attention: AttentionConfig) -> Self {
        BottleneckSpec {
            in_channels,
            planes,
            stride,
            has_projection: stride != 1 || in_channels != planes * EXPANSION,
            attention,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.planes * EXPANSION
    }

    /// `(conv1, conv2, conv3, projection)` specs, all bias-free.
    pub fn convs(&self) -> (ConvSpec, ConvSpec, ConvSpec, Option<ConvSpec>) {
        (
            ConvSpec::new(self.in_channels, self.planes, 1),
            ConvSpec::new(self.planes, self.planes, 3).stride(self.stride),
            ConvSpec::new(self.planes, self.out_channels(), 1),
            self.has_projection
                .then(|| ConvSpec::new(self.in_channels, self.out_channels(), 1).stride(self.stride)),
        )
    }
}

/// Projection shortcut `W_s`: strided 1×1 conv followed by BN.
pub struct Projection<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

pub struct Bottleneck<T> {
    pub spec: BottleneckSpec,
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
    pub conv3: Conv2d<T>,
    pub bn3: BatchNorm2d<T>,
    pub attn: Attention<T>,
    pub downsample: Option<Projection<T>>,
    relu1: Act<T>,
    relu2: Act<T>,
    relu_out: Act<T>,
}

impl<T: Scalar> Bottleneck<T> {
    pub fn new<R: Rng>(spec: BottleneckSpec, rng: &mut R) -> Result<Self> {
        let (c1, c2, c3, proj) = spec.convs();
        Ok(Bottleneck {
            spec,
            conv1: Conv2d::new(c1, rng),
            bn1: BatchNorm2d::new(spec.planes),
            conv2: Conv2d::new(c2, rng),
            bn2: BatchNorm2d::new(spec.planes),
            conv3: Conv2d::new(c3, rng),
            bn3: BatchNorm2d::new(spec.out_channels()),
            attn: Attention::new(&spec.attention, spec.out_channels(), rng)?,
            downsample: proj.map(|p| Projection {
                conv: Conv2d::new(p, rng),
                bn: BatchNorm2d::new(spec.out_channels()),
            }),
            relu1: Act::relu(),
            relu2: Act::relu(),
            relu_out: Act::relu(),
        })
    }

    pub fn forward(&mut self, x: &FeatureMap<T>, mode: Mode) -> Result<FeatureMap<T>> {
        if x.shape().c != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "bottleneck expects {} channels, got {}",
                self.spec.in_channels,
                x.shape()
            )));
        }
        let h = self.conv1.forward(x)?;
        let h = self.bn1.forward(&h, mode)?;
        let h = self.relu1.forward_owned(h);
        let h = self.conv2.forward(&h)?;
        let h = self.bn2.forward(&h, mode)?;
        let h = self.relu2.forward_owned(h);
        let h = self.conv3.forward(&h)?;
        let h = self.bn3.forward(&h, mode)?;
        let mut out = self.attn.forward(&h, mode)?;
        let shortcut = match self.downsample.as_mut() {
            Some(p) => {
                let s = p.conv.forward(x)?;
                p.bn.forward(&s, mode)?
            }
            None => x.clone(),
        };
        assert_eq!(out.shape(), shortcut.shape(), "residual branch shape mismatch");
        out.add_assign(&shortcut)?;
        Ok(self.relu_out.forward_owned(out))
    }

    pub fn backward(&mut self, dy: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let d = self.relu_out.backward(dy)?;
        let h = self.attn.backward(&d)?;
        let h = self.bn3.backward(&h)?;
        let h = self.conv3.backward(&h)?;
        let h = self.relu2.backward(&h)?;
        let h = self.bn2.backward(&h)?;
        let h = self.conv2.backward(&h)?;
        let h = self.relu1.backward(&h)?;
        let h = self.bn1.backward(&h)?;
        let mut dx = self.conv1.backward(&h)?;
        match self.downsample.as_mut() {
            Some(p) => {
                let s = p.bn.backward(&d)?;
                dx.add_assign(&p.conv.backward(&s)?)?;
            }
            None => dx.add_assign(&d)?,
        }
        Ok(dx)
    }
}

impl<T: Scalar> Module<T> for Bottleneck<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.conv1.visit(&join(prefix, "conv1"), v);
        self.bn1.visit(&join(prefix, "bn1"), v);
        self.conv2.visit(&join(prefix, "conv2"), v);
        self.bn2.visit(&join(prefix, "bn2"), v);
        self.conv3.visit(&join(prefix, "conv3"), v);
        self.bn3.visit(&join(prefix, "bn3"), v);
        self.attn.visit(&join(prefix, "attn"), v);
        if let Some(p) = self.downsample.as_mut() {
            p.conv.visit(&join(prefix, "downsample.conv"), v);
            p.bn.visit(&join(prefix, "downsample.bn"), v);
        }
    }
}

/// Encoder outputs at strides 2, 4, 8, 16, 32.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T> {
    pub feat1: FeatureMap<T>,
    pub feat2: FeatureMap<T>,
    pub feat3: FeatureMap<T>,
    pub feat4: FeatureMap<T>,
    pub feat5: FeatureMap<T>,
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn shapes(&self) -> [Shape; 5] {
        [
            self.feat1.shape(),
            self.feat2.shape(),
            self.feat3.shape(),
            self.feat4.shape(),
            self.feat5.shape(),
        ]
    }
}

/// Gradients flowing into each pyramid level; `None` means zero.
#[derive(Default)]
pub struct PyramidGrads<T> {
    pub levels: [Option<FeatureMap<T>>; 5],
}

pub struct Backbone<T> {
    pub cfg: BackboneConfig,
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    relu: Act<T>,
    pool: MaxPool2d,
    pub stages: Vec<Vec<Bottleneck<T>>>,
}

/// He-normal convolutions, unit BN, running statistics (0, 1).
pub fn init_backbone<T: Scalar, R: Rng>(cfg: &BackboneConfig, rng: &mut R) -> Result<Backbone<T>> {
    Backbone::new(cfg.clone(), rng)
}

pub fn check_input_dims(s: Shape, in_channels: usize) -> Result<()> {
    if s.c != in_channels {
        return Err(Error::Input(format!("expected {in_channels} input channels, got {s}")));
    }
    if s.h % OUTPUT_STRIDE != 0 || s.w % OUTPUT_STRIDE != 0 {
        let pad = |v: usize| (OUTPUT_STRIDE - v % OUTPUT_STRIDE) % OUTPUT_STRIDE;
        return Err(Error::Input(format!(
            "input {}x{} is not divisible by {OUTPUT_STRIDE}; pad by {}x{} to {}x{}",
            s.h,
            s.w,
            pad(s.h),
            pad(s.w),
            s.h + pad(s.h),
            s.w + pad(s.w)
        )));
    }
    Ok(())
}

impl<T: Scalar> Backbone<T> {
    pub fn new<R: Rng>(cfg: BackboneConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let conv1 = Conv2d::new(cfg.stem_conv(), rng);
        let specs = cfg.bottlenecks();
        let mut stages = Vec::with_capacity(4);
        let mut it = specs.into_iter();
        for &depth in &cfg.stage_depths {
            let blocks = it
                .by_ref()
                .take(depth)
                .map(|s| Bottleneck::new(s, rng))
                .collect::<Result<Vec<_>>>()?;
            stages.push(blocks);
        }
        Ok(Backbone {
            conv1,
            bn1: BatchNorm2d::new(cfg.stem_channels),
            relu: Act::relu(),
            pool: MaxPool2d::new(3, 2, 1),
            stages,
            cfg,
        })
    }

    pub fn forward(&mut self, x: &FeatureMap<T>, mode: Mode) -> Result<FeaturePyramid<T>> {
        check_input_dims(x.shape(), self.cfg.in_channels)?;
        let h = self.conv1.forward(x)?;
        let h = self.bn1.forward(&h, mode)?;
        let feat1 = self.relu.forward_owned(h);
        let mut h = self.pool.forward(&feat1)?;
        let mut outs = Vec::with_capacity(4);
        for stage in self.stages.iter_mut() {
            for block in stage.iter_mut() {
                h = block.forward(&h, mode)?;
            }
            outs.push(h.clone());
        }
        let mut outs = outs.into_iter();
        Ok(FeaturePyramid {
            feat1,
            feat2: outs.next().expect("4 stages"),
            feat3: outs.next().expect("4 stages"),
            feat4: outs.next().expect("4 stages"),
            feat5: outs.next().expect("4 stages"),
        })
    }

    /// Backpropagates pyramid gradients; returns the input gradient.
    pub fn backward(&mut self, grads: PyramidGrads<T>) -> Result<FeatureMap<T>> {
        let [g1, g2, g3, g4, g5] = grads.levels;
        let stage_grads = [g2, g3, g4, g5];
        let mut carry: Option<FeatureMap<T>> = None;
        for (stage, g) in self.stages.iter_mut().zip(stage_grads).rev() {
            let mut d = match (carry.take(), g) {
                (Some(mut c), Some(g)) => {
                    c.add_assign(&g)?;
                    c
                }
                (Some(c), None) | (None, Some(c)) => c,
                (None, None) => return Err(Error::State("no gradient reaches the backbone".into())),
            };
            for block in stage.iter_mut().rev() {
                d = block.backward(&d)?;
            }
            carry = Some(d);
        }
        let mut d1 = self.pool.backward(&carry.expect("four stages"))?;
        if let Some(g1) = g1 {
            d1.add_assign(&g1)?;
        }
        let d = self.relu.backward(&d1)?;
        let d = self.bn1.backward(&d)?;
        self.conv1.backward(&d)
    }
}

impl<T: Scalar> Module<T> for Backbone<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.conv1.visit(&join(prefix, "conv1"), v);
        self.bn1.visit(&join(prefix, "bn1"), v);
        for (s, stage) in self.stages.iter_mut().enumerate() {
            for (i, block) in stage.iter_mut().enumerate() {
                block.visit(&join(prefix, &format!("layer{}.{i}", s + 1)), v);
            }
        }
    }
}
