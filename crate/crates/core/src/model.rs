//! GCA-ResUNet: backbone + decoder.

use std::hash::Hasher;

use fnv::FnvHasher;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionKind;
use crate::backbone::{Backbone, BackboneConfig, FeaturePyramid, OUTPUT_STRIDE};
use crate::decoder::{Decoder, DecoderConfig};
use crate::error::{Error, Result};
use crate::numerics::{FeatureMap, Scalar};
use crate::params::{self, join, Mode, Module, Visitor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub decoder: DecoderConfig,
    pub input_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            decoder: DecoderConfig::default(),
            input_size: 224,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Two bottlenecks per stage at 64×64 input.
    pub fn mini(num_classes: usize) -> Self {
        ModelConfig {
            backbone: BackboneConfig::mini(),
            decoder: DecoderConfig {
                num_classes,
                ..DecoderConfig::default()
            },
            input_size: 64,
            seed: 0,
        }
    }

    pub fn with_attention(mut self, kind: AttentionKind) -> Self {
        self.backbone.attention.kind = kind;
        self
    }

    pub fn num_classes(&self) -> usize {
        self.decoder.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % OUTPUT_STRIDE != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of {OUTPUT_STRIDE}",
                self.input_size
            )));
        }
        self.backbone.validate()?;
        self.decoder.validate()
    }

    /// Canonical text form: compact JSON in declaration order.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// 64-bit FNV-1a over [`Self::canonical_json`].
    pub fn digest(&self) -> u64 {
        fnv1a(self.canonical_json().as_bytes())
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

pub struct Model<T> {
    pub cfg: ModelConfig,
    pub backbone: Backbone<T>,
    pub decoder: Decoder<T>,
}

/// Repeats a single-channel image across three channels.
pub fn replicate_channels<T: Scalar>(x: &FeatureMap<T>, channels: usize) -> FeatureMap<T> {
    let s = x.shape();
    if s.c == channels {
        return x.clone();
    }
    assert_eq!(s.c, 1, "only single-channel images are replicated");
    FeatureMap::from_fn(s.with_c(channels), |b, _, y, xx| x.at(b, 0, y, xx))
}

impl<T: Scalar> Model<T> {
    /// Deterministic initialization from `cfg.seed`.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let backbone = Backbone::new(cfg.backbone.clone(), &mut rng)?;
        let decoder = Decoder::new(cfg.decoder.clone(), cfg.backbone.pyramid_channels(), &mut rng)?;
        Ok(Model { cfg, backbone, decoder })
    }

    pub fn encode(&mut self, image: &FeatureMap<T>, mode: Mode) -> Result<FeaturePyramid<T>> {
        let s = image.shape();
        let want = self.cfg.backbone.in_channels;
        let x = if s.c == 1 && want != 1 {
            replicate_channels(image, want)
        } else {
            image.clone()
        };
        self.backbone.forward(&x, mode)
    }

    /// Logits `B×K×H×W`. Single-channel input is replicated to the
    /// backbone's input width.
    pub fn forward(&mut self, image: &FeatureMap<T>, mode: Mode) -> Result<FeatureMap<T>> {
        let pyramid = self.encode(image, mode)?;
        self.decoder.forward(&pyramid)
    }

    /// Accumulates parameter gradients; returns the gradient w.r.t. the
    /// (replicated) input image.
    pub fn backward(&mut self, dlogits: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let grads = self.decoder.backward(dlogits)?;
        self.backbone.backward(grads)
    }

    pub fn num_params(&mut self) -> usize {
        params::count_params(self)
    }

    pub fn zero_grads(&mut self) {
        params::zero_grads(self)
    }
}

impl<T: Scalar> Module<T> for Model<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.backbone.visit(&join(prefix, "backbone"), v);
        self.decoder.visit(&join(prefix, "decoder"), v);
    }
}
