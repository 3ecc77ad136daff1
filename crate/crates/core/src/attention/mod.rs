//! Channel/spatial attention blocks that plug into a bottleneck before the
//! residual addition. Every variant maps `B×C×H×W` to the same shape.

mod cbam;
mod coordatt;
mod gca;
mod se;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use cbam::Cbam;
pub use coordatt::CoordAtt;
pub use gca::{gca_apply, gca_descriptors, AttentionMaps, DirectionalDescriptors, Gca, GcaConfig};
pub use se::Se;

use crate::error::{Error, Result};
use crate::numerics::{FeatureMap, Scalar, Shape};
use crate::params::{Mode, Module, Visitor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    None,
    Se,
    Cbam,
    #[serde(rename = "coordatt")]
    CoordAtt,
    Gca,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 5] = [
        AttentionKind::None,
        AttentionKind::Se,
        AttentionKind::Cbam,
        AttentionKind::CoordAtt,
        AttentionKind::Gca,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            AttentionKind::None => "none",
            AttentionKind::Se => "se",
            AttentionKind::Cbam => "cbam",
            AttentionKind::CoordAtt => "coordatt",
            AttentionKind::Gca => "gca",
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttentionKind::ALL
            .into_iter()
            .find(|k| k.tag() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown attention variant {s:?}; valid tags: none, se, cbam, coordatt, gca"
                ))
            })
    }
}

/// Network-wide attention settings; each bottleneck derives its own
/// per-instance config from its channel count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    pub kind: AttentionKind,
    pub groups: usize,
    pub reduction: usize,
    pub min_hidden: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            kind: AttentionKind::Gca,
            groups: 4,
            reduction: 16,
            min_hidden: 4,
        }
    }
}

impl AttentionConfig {
    pub fn with_kind(self, kind: AttentionKind) -> Self {
        AttentionConfig { kind, ..self }
    }

    pub fn gca(&self, channels: usize) -> GcaConfig {
        GcaConfig {
            channels,
            groups: self.groups,
            reduction: self.reduction,
            min_hidden: self.min_hidden,
        }
    }

    /// Hidden width of the SE / CBAM channel MLP.
    pub fn mlp_hidden(&self, channels: usize) -> usize {
        (channels / self.reduction.max(1)).max(1)
    }

    /// Hidden width of the coordinate-attention bottleneck.
    pub fn coord_hidden(&self, channels: usize) -> usize {
        (channels / self.reduction.max(1)).max(8)
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.reduction == 0 {
            return Err(Error::Config("attention reduction must be >= 1".into()));
        }
        if self.kind == AttentionKind::Gca {
            self.gca(channels).validate()?;
        }
        Ok(())
    }
}

pub const CBAM_KERNEL: usize = 7;

pub enum Attention<T> {
    None,
    Se(Se<T>),
    Cbam(Cbam<T>),
    CoordAtt(CoordAtt<T>),
    Gca(Gca<T>),
}

impl<T: Scalar> Attention<T> {
    pub fn new<R: Rng>(cfg: &AttentionConfig, channels: usize, rng: &mut R) -> Result<Self> {
        cfg.validate(channels)?;
        Ok(match cfg.kind {
            AttentionKind::None => Attention::None,
            AttentionKind::Se => Attention::Se(Se::new(channels, cfg.mlp_hidden(channels), rng)),
            AttentionKind::Cbam => Attention::Cbam(Cbam::new(channels, cfg.mlp_hidden(channels), rng)),
            AttentionKind::CoordAtt => Attention::CoordAtt(CoordAtt::new(channels, cfg.coord_hidden(channels), rng)),
            AttentionKind::Gca => Attention::Gca(Gca::new(cfg.gca(channels), rng)?),
        })
    }

    pub fn kind(&self) -> AttentionKind {
        match self {
            Attention::None => AttentionKind::None,
            Attention::Se(_) => AttentionKind::Se,
            Attention::Cbam(_) => AttentionKind::Cbam,
            Attention::CoordAtt(_) => AttentionKind::CoordAtt,
            Attention::Gca(_) => AttentionKind::Gca,
        }
    }

    pub fn forward(&mut self, x: &FeatureMap<T>, mode: Mode) -> Result<FeatureMap<T>> {
        match self {
            Attention::None => Ok(x.clone()),
            Attention::Se(m) => m.forward(x),
            Attention::Cbam(m) => m.forward(x),
            Attention::CoordAtt(m) => m.forward(x, mode),
            Attention::Gca(m) => m.forward(x, mode),
        }
    }

    pub fn backward(&mut self, dy: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        match self {
            Attention::None => Ok(dy.clone()),
            Attention::Se(m) => m.backward(dy),
            Attention::Cbam(m) => m.backward(dy),
            Attention::CoordAtt(m) => m.backward(dy),
            Attention::Gca(m) => m.backward(dy),
        }
    }
}

impl<T: Scalar> Module<T> for Attention<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        match self {
            Attention::None => {}
            Attention::Se(m) => m.visit(prefix, v),
            Attention::Cbam(m) => m.visit(prefix, v),
            Attention::CoordAtt(m) => m.visit(prefix, v),
            Attention::Gca(m) => m.visit(prefix, v),
        }
    }
}

/// Joins `B×C×1×La` and `B×C×1×Lb` along the last axis. Directional
/// descriptors `B×C×H×1` share the memory layout of `B×C×1×H`, so both
/// kinds can be passed after [`as_row`].
pub(crate) fn concat_last<T: Scalar>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> FeatureMap<T> {
    let (sa, sb) = (a.shape(), b.shape());
    debug_assert!(sa.b == sb.b && sa.c == sb.c && sa.h == 1 && sb.h == 1);
    let (la, lb) = (sa.w, sb.w);
    let mut data = Vec::with_capacity(sa.b * sa.c * (la + lb));
    for r in 0..sa.b * sa.c {
        data.extend_from_slice(&a.data()[r * la..(r + 1) * la]);
        data.extend_from_slice(&b.data()[r * lb..(r + 1) * lb]);
    }
    FeatureMap::from_vec((sa.b, sa.c, 1, la + lb), data).expect("concat shape")
}

/// Columns `[start, start+len)` of a `B×C×1×L` map.
pub(crate) fn slice_last<T: Scalar>(x: &FeatureMap<T>, start: usize, len: usize) -> FeatureMap<T> {
    let s = x.shape();
    debug_assert!(s.h == 1 && start + len <= s.w);
    let mut data = Vec::with_capacity(s.b * s.c * len);
    for r in 0..s.b * s.c {
        data.extend_from_slice(&x.data()[r * s.w + start..r * s.w + start + len]);
    }
    FeatureMap::from_vec((s.b, s.c, 1, len), data).expect("slice shape")
}

pub(crate) fn write_last<T: Scalar>(dst: &mut FeatureMap<T>, start: usize, src: &FeatureMap<T>) {
    let (sd, ss) = (dst.shape(), src.shape());
    debug_assert!(sd.b == ss.b && sd.c == ss.c && ss.h == 1 && sd.h == 1);
    for r in 0..ss.b * ss.c {
        dst.data_mut()[r * sd.w + start..r * sd.w + start + ss.w]
            .copy_from_slice(&src.data()[r * ss.w..(r + 1) * ss.w]);
    }
}

/// Reinterprets `B×C×H×1` as `B×C×1×H` (identical memory layout).
pub(crate) fn as_row<T: Scalar>(x: FeatureMap<T>) -> FeatureMap<T> {
    let s = x.shape();
    let (len, h) = if s.w == 1 { (s.h, 1) } else { (s.w, s.h) };
    debug_assert_eq!(h, 1);
    FeatureMap::from_vec((s.b, s.c, 1, len), x.into_vec()).expect("same numel")
}

/// Reinterprets `B×C×1×H` as `B×C×H×1`.
pub(crate) fn as_column<T: Scalar>(x: FeatureMap<T>) -> FeatureMap<T> {
    let s = x.shape();
    debug_assert_eq!(s.h, 1);
    FeatureMap::from_vec((s.b, s.c, s.w, 1), x.into_vec()).expect("same numel")
}

/// `y = x ⊙ a_h ⊙ a_w` with `a_h: B×C×H×1`, `a_w: B×C×1×W`.
pub(crate) fn apply_directional<T: Scalar>(
    x: &FeatureMap<T>,
    a_h: &FeatureMap<T>,
    a_w: &FeatureMap<T>,
) -> Result<FeatureMap<T>> {
    let s = x.shape();
    a_h.expect_shape(Shape::new(s.b, s.c, s.h, 1), "horizontal attention map")?;
    a_w.expect_shape(Shape::new(s.b, s.c, 1, s.w), "vertical attention map")?;
    let mut y = FeatureMap::zeros(s);
    for r in 0..s.b * s.c {
        let ah = &a_h.data()[r * s.h..(r + 1) * s.h];
        let aw = &a_w.data()[r * s.w..(r + 1) * s.w];
        let xs = &x.data()[r * s.plane()..(r + 1) * s.plane()];
        let ys = &mut y.data_mut()[r * s.plane()..(r + 1) * s.plane()];
        for i in 0..s.h {
            for j in 0..s.w {
                ys[i * s.w + j] = xs[i * s.w + j] * ah[i] * aw[j];
            }
        }
    }
    Ok(y)
}

/// Returns `(dx, da_h, da_w)` for [`apply_directional`].
pub(crate) fn apply_directional_backward<T: Scalar>(
    dy: &FeatureMap<T>,
    x: &FeatureMap<T>,
    a_h: &FeatureMap<T>,
    a_w: &FeatureMap<T>,
) -> (FeatureMap<T>, FeatureMap<T>, FeatureMap<T>) {
    let s = x.shape();
    let mut dx = FeatureMap::zeros(s);
    let mut dah = FeatureMap::zeros(a_h.shape());
    let mut daw = FeatureMap::zeros(a_w.shape());
    for r in 0..s.b * s.c {
        let ah = &a_h.data()[r * s.h..(r + 1) * s.h];
        let aw = &a_w.data()[r * s.w..(r + 1) * s.w];
        let xs = &x.data()[r * s.plane()..(r + 1) * s.plane()];
        let ds = &dy.data()[r * s.plane()..(r + 1) * s.plane()];
        let dxs = &mut dx.data_mut()[r * s.plane()..(r + 1) * s.plane()];
        let mut dah_r = vec![T::zero(); s.h];
        let mut daw_r = vec![T::zero(); s.w];
        for i in 0..s.h {
            for j in 0..s.w {
                let k = i * s.w + j;
                dxs[k] = ds[k] * ah[i] * aw[j];
                let g = ds[k] * xs[k];
                dah_r[i] += g * aw[j];
                daw_r[j] += g * ah[i];
            }
        }
        dah.data_mut()[r * s.h..(r + 1) * s.h].copy_from_slice(&dah_r);
        daw.data_mut()[r * s.w..(r + 1) * s.w].copy_from_slice(&daw_r);
    }
    (dx, dah, daw)
}

/// `y[b,c,:,:] = x[b,c,:,:] · s[b,c]` for `s: B×C×1×1`.
pub(crate) fn scale_channels<T: Scalar>(x: &FeatureMap<T>, s: &FeatureMap<T>) -> FeatureMap<T> {
    let sh = x.shape();
    let mut y = x.clone();
    for r in 0..sh.b * sh.c {
        let f = s.data()[r];
        y.data_mut()[r * sh.plane()..(r + 1) * sh.plane()]
            .iter_mut()
            .for_each(|v| *v *= f);
    }
    y
}

/// `(dx, ds)` for [`scale_channels`].
pub(crate) fn scale_channels_backward<T: Scalar>(
    dy: &FeatureMap<T>,
    x: &FeatureMap<T>,
    s: &FeatureMap<T>,
) -> (FeatureMap<T>, FeatureMap<T>) {
    let sh = x.shape();
    let dx = scale_channels(dy, s);
    let mut ds = FeatureMap::zeros(s.shape());
    for r in 0..sh.b * sh.c {
        let p = sh.plane();
        ds.data_mut()[r] = dy.data()[r * p..(r + 1) * p]
            .iter()
            .zip(&x.data()[r * p..(r + 1) * p])
            .map(|(&d, &v)| d * v)
            .sum();
    }
    (dx, ds)
}

/// Gradient of a global average pool.
pub(crate) fn global_avg_backward<T: Scalar>(dpooled: &FeatureMap<T>, input: Shape) -> FeatureMap<T> {
    let inv = T::one() / T::from_usize_lossy(input.plane());
    FeatureMap::from_fn(input, |b, c, _, _| dpooled.data()[b * input.c + c] * inv)
}
