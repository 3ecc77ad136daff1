//! Analytic parameter and MAC accounting, derived from configs alone.
//!
//! Row names mirror parameter paths (`backbone.layer1.0.conv1`, ...), so a
//! row's parameter count equals the values stored under that prefix in a
//! checkpoint. Conv MACs are `oh·ow·Cout·(Cin/groups)·kh·kw`. Attention
//! pooling reductions are counted as attention MACs. Everything else that
//! touches each element once (BN, activations, pooling outside attention,
//! resizing, residual adds, attention reweighting) goes in the separate
//! `elementwise` column at one op per element.

use std::fmt::Write as _;

use serde::Serialize;

use crate::attention::{AttentionConfig, AttentionKind, CBAM_KERNEL};
use crate::backbone::{check_input_dims, BottleneckSpec, OUTPUT_STRIDE};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::{ConvSpec, Shape};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CostRow {
    pub name: String,
    pub params: u64,
    pub macs: u64,
    pub elementwise: u64,
    /// Part of an attention block.
    pub attention: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CostReport {
    /// Input side length, if MACs were evaluated.
    pub input_size: Option<usize>,
    pub batch: usize,
    pub rows: Vec<CostRow>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Totals {
    pub params: u64,
    pub macs: u64,
    pub elementwise: u64,
}

impl Totals {
    pub fn flops(&self) -> u64 {
        2 * self.macs
    }
}

impl CostReport {
    pub fn empty() -> Self {
        CostReport::default()
    }

    fn sum(&self, keep: impl Fn(&CostRow) -> bool) -> Totals {
        self.rows.iter().filter(|r| keep(r)).fold(Totals::default(), |t, r| Totals {
            params: t.params + r.params,
            macs: t.macs + r.macs,
            elementwise: t.elementwise + r.elementwise,
        })
    }

    pub fn totals(&self) -> Totals {
        self.sum(|_| true)
    }

    pub fn attention_totals(&self) -> Totals {
        self.sum(|r| r.attention)
    }

    /// Totals of every row equal to `prefix` or nested below it.
    pub fn subtotal(&self, prefix: &str) -> Totals {
        self.sum(|r| r.name == prefix || r.name.starts_with(&format!("{prefix}.")))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,params,macs,flops,elementwise,attention\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.name,
                r.params,
                r.macs,
                2 * r.macs,
                r.elementwise,
                r.attention
            );
        }
        let t = self.totals();
        let _ = writeln!(s, "total,{},{},{},{},", t.params, t.macs, t.flops(), t.elementwise);
        s
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(5);
        let mut s = format!(
            "{:<width$}  {:>12}  {:>16}  {:>16}  {:>14}\n",
            "layer", "params", "MACs", "FLOPs", "elementwise"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<width$}  {:>12}  {:>16}  {:>16}  {:>14}{}",
                r.name,
                r.params,
                r.macs,
                2 * r.macs,
                r.elementwise,
                if r.attention { "  *" } else { "" }
            );
        }
        let t = self.totals();
        let a = self.attention_totals();
        let _ = writeln!(
            s,
            "{:<width$}  {:>12}  {:>16}  {:>16}  {:>14}",
            "total", t.params, t.macs, t.flops(), t.elementwise
        );
        let _ = writeln!(
            s,
            "{:<width$}  {:>12}  {:>16}  {:>16}  {:>14}",
            "attention (*)",
            a.params,
            a.macs,
            a.flops(),
            a.elementwise
        );
        s
    }
}

pub fn conv_params(spec: &ConvSpec) -> u64 {
    spec.num_params() as u64
}

/// Per-sample MACs of a conv on an `h×w` input.
pub fn conv_macs(spec: &ConvSpec, h: usize, w: usize) -> Result<u64> {
    let (oh, ow) = spec.output_hw(h, w)?;
    Ok((oh * ow * spec.out_channels * (spec.in_channels / spec.groups) * spec.kernel.0 * spec.kernel.1) as u64)
}

/// Accumulates rows while tracking the spatial size (`None` = params only).
struct Builder {
    batch: u64,
    rows: Vec<CostRow>,
    spatial: bool,
    attention: bool,
}

impl Builder {
    fn push(&mut self, name: String, params: u64, macs: u64, elementwise: u64) {
        let (m, e) = if self.spatial {
            (macs * self.batch, elementwise * self.batch)
        } else {
            (0, 0)
        };
        self.rows.push(CostRow {
            name,
            params,
            macs: m,
            elementwise: e,
            attention: self.attention,
        });
    }

    /// Conv row; returns the output size.
    fn conv(&mut self, name: String, spec: &ConvSpec, h: usize, w: usize) -> Result<(usize, usize)> {
        let macs = if self.spatial { conv_macs(spec, h, w)? } else { 0 };
        self.push(name, conv_params(spec), macs, 0);
        if self.spatial {
            spec.output_hw(h, w)
        } else {
            Ok((h, w))
        }
    }

    /// BN row; `extra` elementwise ops ride along (e.g. a following ReLU).
    fn bn(&mut self, name: String, c: usize, h: usize, w: usize, extra: u64) {
        let n = (c * h * w) as u64;
        self.push(name, 2 * c as u64, 0, n + extra);
    }
}

fn attention_rows(b: &mut Builder, prefix: &str, cfg: &AttentionConfig, c: usize, h: usize, w: usize) -> Result<()> {
    let chw = (c * h * w) as u64;
    let pw = |cin: usize, cout: usize, bias: bool| ConvSpec::new(cin, cout, 1).with_bias(bias);
    b.attention = true;
    match cfg.kind {
        AttentionKind::None => {}
        AttentionKind::Se => {
            let hid = cfg.mlp_hidden(c);
            // global average pool
            b.push(format!("{prefix}.pool"), 0, chw, 0);
            b.conv(format!("{prefix}.fc1"), &pw(c, hid, false), 1, 1)?;
            b.push(format!("{prefix}.relu"), 0, 0, hid as u64);
            b.conv(format!("{prefix}.fc2"), &pw(hid, c, false), 1, 1)?;
            // sigmoid + channel reweighting
            b.push(format!("{prefix}.scale"), 0, 0, c as u64 + chw);
        }
        AttentionKind::Cbam => {
            let hid = cfg.mlp_hidden(c);
            // global avg + max pools
            b.push(format!("{prefix}.pool"), 0, 2 * chw, 0);
            b.conv(format!("{prefix}.fc1"), &pw(c, hid, false), 1, 2)?;
            b.push(format!("{prefix}.relu"), 0, 0, 2 * hid as u64);
            b.conv(format!("{prefix}.fc2"), &pw(hid, c, false), 1, 2)?;
            // avg + max over channels for the spatial map
            b.push(format!("{prefix}.channel_pool"), 0, 2 * chw, 0);
            let sp = ConvSpec::new(2, 1, CBAM_KERNEL);
            b.conv(format!("{prefix}.spatial"), &sp, h, w)?;
            // branch sum + sigmoid, channel reweighting, spatial sigmoid + reweighting
            b.push(format!("{prefix}.scale"), 0, 0, 2 * c as u64 + chw + (h * w) as u64 + chw);
        }
        AttentionKind::CoordAtt => {
            let mip = cfg.coord_hidden(c);
            let l = h + w;
            b.push(format!("{prefix}.pool"), 0, 2 * chw, 0);
            b.conv(format!("{prefix}.conv1"), &pw(c, mip, false), 1, l)?;
            b.bn(format!("{prefix}.bn"), mip, 1, l, (mip * l) as u64);
            b.conv(format!("{prefix}.conv_h"), &pw(mip, c, true), 1, h)?;
            b.conv(format!("{prefix}.conv_w"), &pw(mip, c, true), 1, w)?;
            b.push(format!("{prefix}.scale"), 0, 0, (c * l) as u64 + 2 * chw);
        }
        AttentionKind::Gca => {
            let g = cfg.gca(c);
            g.validate()?;
            let (cg, hid, groups, l) = (g.group_channels(), g.hidden(), g.groups, h + w);
            // avg + max along each axis, then the avg+max fusion
            b.push(format!("{prefix}.pool"), 0, 4 * chw, (c * l) as u64);
            for gi in 0..groups {
                b.conv(format!("{prefix}.reduce.{gi}"), &pw(cg, hid, false), 1, l)?;
            }
            let hidden_elems = (groups * hid * l) as u64;
            b.bn(format!("{prefix}.bn"), hid, 1, groups * l, hidden_elems);
            for gi in 0..groups {
                b.conv(format!("{prefix}.expand.{gi}"), &pw(hid, cg, false), 1, l)?;
            }
            // sigmoids, then x · a_h · a_w
            b.push(format!("{prefix}.scale"), 0, 0, (c * l) as u64 + 2 * chw);
        }
    }
    b.attention = false;
    Ok(())
}

fn bottleneck_rows(b: &mut Builder, prefix: &str, spec: &BottleneckSpec, h: usize, w: usize) -> Result<(usize, usize)> {
    let (c1, c2, c3, proj) = spec.convs();
    let p = spec.planes;
    let out = spec.out_channels();
    let (h1, w1) = b.conv(format!("{prefix}.conv1"), &c1, h, w)?;
    b.bn(format!("{prefix}.bn1"), p, h1, w1, (p * h1 * w1) as u64);
    let (h2, w2) = b.conv(format!("{prefix}.conv2"), &c2, h1, w1)?;
    b.bn(format!("{prefix}.bn2"), p, h2, w2, (p * h2 * w2) as u64);
    let (h3, w3) = b.conv(format!("{prefix}.conv3"), &c3, h2, w2)?;
    b.bn(format!("{prefix}.bn3"), out, h3, w3, 0);
    attention_rows(b, &format!("{prefix}.attn"), &spec.attention, out, h3, w3)?;
    if let Some(pc) = proj {
        b.conv(format!("{prefix}.downsample.conv"), &pc, h, w)?;
        b.bn(format!("{prefix}.downsample.bn"), out, h3, w3, 0);
    }
    // residual add + ReLU
    b.push(format!("{prefix}.residual"), 0, 0, 2 * (out * h3 * w3) as u64);
    Ok((h3, w3))
}

/// Cost rows of a single bottleneck at `h×w` input (`None` = params only).
pub fn bottleneck_cost(spec: &BottleneckSpec, hw: Option<(usize, usize)>) -> Result<CostReport> {
    let mut b = Builder {
        batch: 1,
        rows: Vec::new(),
        spatial: hw.is_some(),
        attention: false,
    };
    let (h, w) = hw.unwrap_or((1, 1));
    bottleneck_rows(&mut b, "block", spec, h, w)?;
    Ok(CostReport {
        input_size: hw.map(|p| p.0),
        batch: 1,
        rows: b.rows,
    })
}

/// Cost rows of a standalone attention block on a `C×h×w` feature map.
pub fn attention_cost(cfg: &AttentionConfig, channels: usize, h: usize, w: usize) -> Result<CostReport> {
    let mut b = Builder {
        batch: 1,
        rows: Vec::new(),
        spatial: true,
        attention: false,
    };
    attention_rows(&mut b, "attn", cfg, channels, h, w)?;
    Ok(CostReport {
        input_size: Some(h),
        batch: 1,
        rows: b.rows,
    })
}

fn model_rows(cfg: &ModelConfig, input: Option<usize>, batch: usize) -> Result<CostReport> {
    cfg.backbone.validate()?;
    cfg.decoder.validate()?;
    if let Some(s) = input {
        if s == 0 {
            return Err(Error::Config("input size must be positive".into()));
        }
        check_input_dims(Shape::from((batch.max(1), cfg.backbone.in_channels, s, s)), cfg.backbone.in_channels)?;
    }
    let mut b = Builder {
        batch: batch as u64,
        rows: Vec::new(),
        spatial: input.is_some(),
        attention: false,
    };
    let s = input.unwrap_or(OUTPUT_STRIDE);
    let bb = &cfg.backbone;
    let stem = bb.stem_conv();
    let (h, w) = b.conv("backbone.conv1".into(), &stem, s, s)?;
    let sc = bb.stem_channels;
    b.bn("backbone.bn1".into(), sc, h, w, (sc * h * w) as u64);
    // 3×3 stride-2 max pool: one op per output element per window tap
    let (mut h, mut w) = ((h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1);
    b.push("backbone.maxpool".into(), 0, 0, (9 * sc * h * w) as u64);
    let mut sizes = vec![(s / 2, s / 2)];
    let specs = bb.bottlenecks();
    let mut idx = 0;
    for (stage, &depth) in bb.stage_depths.iter().enumerate() {
        for i in 0..depth {
            (h, w) = bottleneck_rows(&mut b, &format!("backbone.layer{}.{i}", stage + 1), &specs[idx], h, w)?;
            idx += 1;
        }
        sizes.push((h, w));
    }
    let pyr = bb.pyramid_channels();
    let ups = cfg.decoder.up_blocks(pyr);
    let mut low_c = pyr[4];
    for level in (0..4).rev() {
        let (sh, sw) = sizes[level];
        let up = &ups[level];
        let name = format!("decoder.up{}", level + 1);
        let (c1, c2) = up.convs();
        // bilinear resize (4 taps per output) + concatenation copy
        b.push(
            format!("{name}.upsample"),
            0,
            0,
            (4 * low_c * sh * sw + up.in_channels * sh * sw) as u64,
        );
        let (h1, w1) = b.conv(format!("{name}.conv1"), &c1, sh, sw)?;
        b.push(format!("{name}.relu1"), 0, 0, (up.out_channels * h1 * w1) as u64);
        let (h2, w2) = b.conv(format!("{name}.conv2"), &c2, h1, w1)?;
        b.push(format!("{name}.relu2"), 0, 0, (up.out_channels * h2 * w2) as u64);
        low_c = up.out_channels;
    }
    let rc = cfg.decoder.refine_channels;
    b.push("decoder.upsample".into(), 0, 0, (4 * low_c * s * s) as u64);
    b.conv("decoder.refine".into(), &cfg.decoder.refine_conv(), s, s)?;
    b.push("decoder.refine_relu".into(), 0, 0, (rc * s * s) as u64);
    b.conv("decoder.head".into(), &cfg.decoder.head_conv(), s, s)?;
    Ok(CostReport {
        input_size: input,
        batch,
        rows: b.rows,
    })
}

/// Parameter counts per layer (MAC columns zero).
pub fn count_params(cfg: &ModelConfig) -> Result<CostReport> {
    model_rows(cfg, None, 1)
}

/// Parameters and MACs per layer for a batch of `size×size` inputs.
pub fn count_macs(cfg: &ModelConfig, size: usize, batch: usize) -> Result<CostReport> {
    model_rows(cfg, Some(size), batch)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct VariantCost {
    pub variant: AttentionKind,
    pub totals: Totals,
    pub attention: Totals,
    pub param_delta: i64,
    pub mac_delta: i64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Comparison {
    pub input_size: usize,
    pub baseline: Totals,
    pub variants: Vec<VariantCost>,
}

/// Totals per attention variant and deltas against `attention = none`.
pub fn compare_attention(cfg: &ModelConfig, variants: &[AttentionKind], size: usize) -> Result<Comparison> {
    if variants.len() < 2 {
        return Err(Error::Config(format!(
            "compare needs at least 2 variants, got {}",
            variants.len()
        )));
    }
    let baseline = count_macs(&cfg.clone().with_attention(AttentionKind::None), size, 1)?.totals();
    let variants = variants
        .iter()
        .map(|&k| {
            let r = count_macs(&cfg.clone().with_attention(k), size, 1)?;
            let t = r.totals();
            Ok(VariantCost {
                variant: k,
                totals: t,
                attention: r.attention_totals(),
                param_delta: t.params as i64 - baseline.params as i64,
                mac_delta: t.macs as i64 - baseline.macs as i64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Comparison {
        input_size: size,
        baseline,
        variants,
    })
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,params,param_delta,macs,mac_delta,flops,attention_params,attention_macs,attention_mac_share\n");
        for v in &self.variants {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{:.6}",
                v.variant,
                v.totals.params,
                v.param_delta,
                v.totals.macs,
                v.mac_delta,
                v.totals.flops(),
                v.attention.params,
                v.attention.macs,
                v.attention.macs as f64 / v.totals.macs.max(1) as f64
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<9} {:>12} {:>10} {:>16} {:>14} {:>9}\n",
            "variant", "params", "Δparams", "MACs", "ΔMACs", "attn MAC%"
        );
        for v in &self.variants {
            let _ = writeln!(
                s,
                "{:<9} {:>12} {:>10} {:>16} {:>14} {:>8.4}%",
                v.variant.tag(),
                v.totals.params,
                v.param_delta,
                v.totals.macs,
                v.mac_delta,
                100.0 * v.attention.macs as f64 / v.totals.macs.max(1) as f64
            );
        }
        s
    }
}
