//! U-Net decoder over the encoder pyramid.
//!
//! `up4(feat5, feat4) → up3(·, feat3) → up2(·, feat2) → up1(·, feat1)`,
//! each block being ×2 bilinear upsampling, channel concatenation
//! `[skip, upsampled]`, and two 3×3 conv + ReLU layers. Since `feat1` sits
//! at stride 2, a final ×2 upsample and one 3×3 conv + ReLU refinement
//! restore the input resolution before the 1×1 class head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{FeaturePyramid, PyramidGrads};
use crate::error::{Error, Result};
use crate::numerics::{Act, Conv2d, ConvSpec, FeatureMap, Scalar, Upsample};
use crate::params::{join, Module, Visitor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Output widths of up-blocks 1..4 (finest to coarsest).
    pub out_filters: Vec<usize>,
    pub num_classes: usize,
    /// Width of the full-resolution refinement conv.
    pub refine_channels: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            out_filters: vec![64, 128, 256, 512],
            num_classes: 9,
            refine_channels: 64,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.out_filters.len() != 4 || self.out_filters.iter().any(|&f| f == 0) || self.refine_channels == 0 {
            return Err(Error::Config("decoder needs four positive up-block widths".into()));
        }
        Ok(())
    }

    /// Up-block specs for blocks 1..4 given the pyramid channel widths.
    pub fn up_blocks(&self, pyramid: [usize; 5]) -> [UpBlockSpec; 4] {
        let f = &self.out_filters;
        let block = |i: usize, low: usize| UpBlockSpec {
            in_channels: pyramid[i] + low,
            out_channels: f[i],
        };
        [
            block(0, f[1]),
            block(1, f[2]),
            block(2, f[3]),
            block(3, pyramid[4]),
        ]
    }

    pub fn refine_conv(&self) -> ConvSpec {
        ConvSpec::new(self.out_filters[0], self.refine_channels, 3).with_bias(true)
    }

    pub fn head_conv(&self) -> ConvSpec {
        ConvSpec::new(self.refine_channels, self.num_classes, 1).with_bias(true)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UpBlockSpec {
    /// skip channels + upsampled channels
    pub in_channels: usize,
    pub out_channels: usize,
}

impl UpBlockSpec {
    pub fn convs(&self) -> (ConvSpec, ConvSpec) {
        (
            ConvSpec::new(self.in_channels, self.out_channels, 3).with_bias(true),
            ConvSpec::new(self.out_channels, self.out_channels, 3).with_bias(true),
        )
    }
}

pub struct UpBlock<T> {
    pub spec: UpBlockSpec,
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    up: Upsample,
    relu1: Act<T>,
    relu2: Act<T>,
    skip_channels: usize,
}

impl<T: Scalar> UpBlock<T> {
    pub fn new<R: Rng>(spec: UpBlockSpec, rng: &mut R) -> Self {
        let (c1, c2) = spec.convs();
        UpBlock {
            spec,
            conv1: Conv2d::new(c1, rng),
            conv2: Conv2d::new(c2, rng),
            up: Upsample::new(2),
            relu1: Act::relu(),
            relu2: Act::relu(),
            skip_channels: 0,
        }
    }

    pub fn forward(&mut self, low: &FeatureMap<T>, skip: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let up = self.up.forward(low)?;
        let (us, ss) = (up.shape(), skip.shape());
        if us.h != ss.h || us.w != ss.w || us.b != ss.b {
            return Err(Error::Shape(format!(
                "upsampled {us} does not match skip {ss}"
            )));
        }
        if us.c + ss.c != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "up-block expects {} concatenated channels, got {} + {}",
                self.spec.in_channels, ss.c, us.c
            )));
        }
        self.skip_channels = ss.c;
        let cat = FeatureMap::concat_channels(&[skip, &up])?;
        let h = self.conv1.forward(&cat)?;
        let h = self.relu1.forward_owned(h);
        let h = self.conv2.forward(&h)?;
        Ok(self.relu2.forward_owned(h))
    }

    /// Returns `(d_low, d_skip)`.
    pub fn backward(&mut self, dy: &FeatureMap<T>) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
        let d = self.relu2.backward(dy)?;
        let d = self.conv2.backward(&d)?;
        let d = self.relu1.backward(&d)?;
        let dcat = self.conv1.backward(&d)?;
        let sc = self.skip_channels;
        let d_skip = dcat.slice_channels(0, sc)?;
        let d_up = dcat.slice_channels(sc, dcat.shape().c - sc)?;
        Ok((self.up.backward(&d_up)?, d_skip))
    }
}

impl<T: Scalar> Module<T> for UpBlock<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.conv1.visit(&join(prefix, "conv1"), v);
        self.conv2.visit(&join(prefix, "conv2"), v);
    }
}

pub struct Decoder<T> {
    pub cfg: DecoderConfig,
    /// Index 0 is `up1` (finest).
    pub ups: Vec<UpBlock<T>>,
    pub refine: Conv2d<T>,
    pub head: Conv2d<T>,
    final_up: Upsample,
    refine_relu: Act<T>,
}

impl<T: Scalar> Decoder<T> {
    pub fn new<R: Rng>(cfg: DecoderConfig, pyramid_channels: [usize; 5], rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let ups = cfg
            .up_blocks(pyramid_channels)
            .into_iter()
            .map(|s| UpBlock::new(s, rng))
            .collect();
        Ok(Decoder {
            ups,
            refine: Conv2d::new(cfg.refine_conv(), rng),
            head: Conv2d::new(cfg.head_conv(), rng),
            final_up: Upsample::new(2),
            refine_relu: Act::relu(),
            cfg,
        })
    }

    /// Raw class scores `B×K×H×W` (no softmax).
    pub fn forward(&mut self, p: &FeaturePyramid<T>) -> Result<FeatureMap<T>> {
        let h = self.ups[3].forward(&p.feat5, &p.feat4)?;
        let h = self.ups[2].forward(&h, &p.feat3)?;
        let h = self.ups[1].forward(&h, &p.feat2)?;
        let h = self.ups[0].forward(&h, &p.feat1)?;
        let h = self.final_up.forward(&h)?;
        let h = self.refine.forward(&h)?;
        let h = self.refine_relu.forward_owned(h);
        self.head.forward(&h)
    }

    pub fn backward(&mut self, dlogits: &FeatureMap<T>) -> Result<PyramidGrads<T>> {
        let d = self.head.backward(dlogits)?;
        let d = self.refine_relu.backward(&d)?;
        let d = self.refine.backward(&d)?;
        let d = self.final_up.backward(&d)?;
        let (d, g1) = self.ups[0].backward(&d)?;
        let (d, g2) = self.ups[1].backward(&d)?;
        let (d, g3) = self.ups[2].backward(&d)?;
        let (g5, g4) = self.ups[3].backward(&d)?;
        Ok(PyramidGrads {
            levels: [Some(g1), Some(g2), Some(g3), Some(g4), Some(g5)],
        })
    }
}

impl<T: Scalar> Module<T> for Decoder<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        for (i, up) in self.ups.iter_mut().enumerate() {
            up.visit(&join(prefix, &format!("up{}", i + 1)), v);
        }
        self.refine.visit(&join(prefix, "refine"), v);
        self.head.visit(&join(prefix, "head"), v);
    }
}
