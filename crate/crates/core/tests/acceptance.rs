//! Acceptance runner: one PASS/FAIL line per criterion.
//!
//! `cargo test -p gca-resunet --test acceptance` runs everything; numeric
//! arguments select criteria (`-- 1 4 7`), other words filter by slug.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::suite::{bypass_is_exact, fd_checks, gca_map_bounds, gca_sweep, group_locality_holds, primitive_sweeps};
use common::*;
use gca_resunet::checkpoint::Checkpoint;
use gca_resunet::data::SynthConfig;
use gca_resunet::profiler::{attention_cost, compare_attention, count_macs};
use gca_resunet::training::{ablate, TrainConfig, Trainer, LAST_CHECKPOINT};
use gca_resunet::{
    load_checkpoint, save_checkpoint, AttentionConfig, AttentionKind, BackboneConfig, DecoderConfig, FeatureMap, Mode,
    Model, ModelConfig, Shape,
};

type Check = fn() -> Result<String, String>;

struct Criterion {
    id: usize,
    slug: &'static str,
    budget: Duration,
    run: Check,
}

const fn crit(id: usize, slug: &'static str, secs: u64, run: Check) -> Criterion {
    Criterion {
        id,
        slug,
        budget: Duration::from_secs(secs),
        run,
    }
}

const CRITERIA: [Criterion; 9] = [
    crit(1, "oracles", 60, oracles),
    crit(2, "gradients", 120, gradients),
    crit(3, "shapes", 300, shapes),
    crit(4, "attention_maps", 60, attention_maps),
    crit(5, "overfit", 1800, overfit),
    crit(6, "efficiency", 60, efficiency),
    crit(7, "checkpoint", 300, checkpoint),
    crit(8, "ablation", 1800, ablation),
    crit(9, "determinism", 600, determinism),
];

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn oracles() -> Result<String, String> {
    let mut sweeps = primitive_sweeps();
    sweeps.push(gca_sweep(21));
    let gca = sweeps.last().unwrap();
    ensure(gca.cases >= 100, || format!("only {} gca configs", gca.cases))?;
    let bad: Vec<String> = sweeps
        .iter()
        .filter(|s| !s.ok())
        .map(|s| format!("{} err {:.2e} > {:.0e}", s.name, s.max_err, s.tol))
        .collect();
    ensure(bad.is_empty(), || bad.join("; "))?;
    let worst = sweeps.iter().map(|s| s.max_err).fold(0.0, f64::max);
    Ok(format!(
        "{} sweeps, {} gca configs, worst abs err {worst:.2e}",
        sweeps.len(),
        gca.cases
    ))
}

fn gradients() -> Result<String, String> {
    let checks = fd_checks();
    let bad: Vec<String> = checks
        .iter()
        .filter(|c| !c.ok())
        .map(|c| format!("{}: dx {:.2e} dθ {:.2e}", c.name, c.input_err, c.param_err))
        .collect();
    ensure(bad.is_empty(), || bad.join("; "))?;
    let worst = checks.iter().map(|c| c.input_err.max(c.param_err)).fold(0.0, f64::max);
    Ok(format!("{} checks, worst rel err {worst:.2e}", checks.len()))
}

fn shapes() -> Result<String, String> {
    let cfg = ModelConfig::default();
    let k = cfg.num_classes();
    let mut m = Model::<f32>::new(cfg).map_err(|e| e.to_string())?;
    let x: FeatureMap<f32> = rand_map((2, 3, 224, 224), &mut rng(3)).cast();
    let p = m.encode(&x, Mode::Eval).map_err(|e| e.to_string())?;
    let want = [(64, 112), (256, 56), (512, 28), (1024, 14), (2048, 7)].map(|(c, s)| Shape::new(2, c, s, s));
    ensure(p.shapes() == want, || format!("pyramid {:?}", p.shapes()))?;
    let y = m.decoder.forward(&p).map_err(|e| e.to_string())?;
    ensure(y.shape() == Shape::new(2, k, 224, 224), || format!("logits {}", y.shape()))?;
    ensure(y.is_finite(), || "non-finite logits".into())?;
    Ok(format!("pyramid ok, logits {}", y.shape()))
}

fn attention_maps() -> Result<String, String> {
    let b = gca_map_bounds(41);
    ensure(b.open_violations == 0 && b.closed_violations == 0, || format!("{b:?}"))?;
    for g in [2, 4] {
        ensure(group_locality_holds(g, 40 + g as u64), || format!("group locality broken at G={g}"))?;
    }
    for (cin, planes, stride) in [(16, 4, 1), (8, 4, 2), (64, 16, 1)] {
        ensure(bypass_is_exact(cin, planes, stride, 43), || {
            format!("bypass differs for {cin}->{} stride {stride}", planes * 4)
        })?;
    }
    Ok(format!("{} map values in (0,1), locality G=2,4, bypass bitwise", b.seen))
}

fn overfit() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ds = synth(dir.path(), &SynthConfig::new(7, 8, 64, 4).train_only());
    let cfg = TrainConfig {
        batch_size: 8,
        eval_every: 10,
        ..TrainConfig::mini(4, 300)
    };
    ensure(cfg.optimizer.lr == 1e-4 && cfg.loss.dice_weight == 0.5 && cfg.loss.ce_weight == 0.5, || {
        "unexpected defaults".into()
    })?;
    let mut t = Trainer::new(cfg, &ds).map_err(|e| e.to_string())?;
    let mut best = 0.0f64;
    while t.epochs_done() < 300 {
        let rec = t.run_epoch().map_err(|e| e.to_string())?;
        if let Some(dsc) = rec.val_mean {
            best = best.max(dsc);
            if dsc >= 0.95 {
                return Ok(format!(
                    "train fg DSC {dsc:.4} at epoch {}, loss {:.4}",
                    rec.epoch, rec.train_loss
                ));
            }
        }
    }
    Err(format!("best train fg DSC {best:.4} after 300 epochs"))
}

fn efficiency() -> Result<String, String> {
    let base = AttentionConfig::default();
    let mut rows = Vec::new();
    for c in [256, 512, 1024, 2048] {
        let p = |k: AttentionKind| attention_cost(&base.with_kind(k), c, 7, 7).map(|r| r.totals().params);
        let (g, s, b) = (p(AttentionKind::Gca), p(AttentionKind::Se), p(AttentionKind::Cbam));
        let (g, s, b) = (g.map_err(|e| e.to_string())?, s.map_err(|e| e.to_string())?, b.map_err(|e| e.to_string())?);
        ensure(g < s && s < b, || format!("C={c}: gca {g}, se {s}, cbam {b}"))?;
        rows.push(format!("C={c} {g}<{s}<{b}"));
    }
    let cfg = ModelConfig::default();
    let r = count_macs(&cfg, 224, 1).map_err(|e| e.to_string())?;
    let (t, a) = (r.totals(), r.attention_totals());
    let share = a.macs as f64 / t.macs as f64;
    ensure(share < 0.01, || format!("GCA MAC share {:.3}%", 100.0 * share))?;
    ensure((t.params, t.macs) == (44_525_601, 15_712_198_656), || {
        format!("goldens moved: {} params, {} MACs", t.params, t.macs)
    })?;
    let cmp = compare_attention(&cfg, &AttentionKind::ALL, 224).map_err(|e| e.to_string())?;
    let deltas_ok = cmp.variants.iter().all(|v| {
        v.param_delta == v.totals.params as i64 - cmp.baseline.params as i64 && v.attention.params as i64 == v.param_delta
    });
    ensure(deltas_ok, || "comparison deltas inconsistent with attention subtotals".into())?;
    Ok(format!("{}; GCA MAC share {:.3}%", rows.join(", "), 100.0 * share))
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            in_channels: 3,
            stem_channels: 8,
            stage_depths: vec![1, 1, 1, 1],
            stage_planes: vec![2, 2, 4, 4],
            attention: AttentionConfig {
                groups: 2,
                reduction: 2,
                min_hidden: 2,
                ..AttentionConfig::default()
            },
        },
        decoder: DecoderConfig {
            out_filters: vec![2, 2, 4, 4],
            num_classes: 3,
            refine_channels: 2,
        },
        input_size: 32,
        seed: 1,
    }
}

fn corruption_escapes(bytes: &[u8], positions: impl Iterator<Item = usize>) -> Vec<usize> {
    positions
        .filter(|&i| {
            let mut bad = bytes.to_vec();
            bad[i] ^= 0x01;
            Checkpoint::from_bytes(&bad).is_ok()
        })
        .collect()
}

fn checkpoint() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("mini.ckpt");
    let mut m = Model::<f32>::new(ModelConfig::mini(4)).map_err(|e| e.to_string())?;
    let warm: FeatureMap<f32> = rand_map((2, 3, 64, 64), &mut rng(5)).cast();
    m.forward(&warm, Mode::Train).map_err(|e| e.to_string())?;
    save_checkpoint(&mut m, &path).map_err(|e| e.to_string())?;
    let mut back = load_checkpoint::<f32>(&path).map_err(|e| e.to_string())?;
    let x: FeatureMap<f32> = rand_map((2, 3, 64, 64), &mut rng(6)).cast();
    let (a, b) = (m.forward(&x, Mode::Eval).unwrap(), back.forward(&x, Mode::Eval).unwrap());
    ensure(bits_eq(&a, &b), || "reloaded forward differs".into())?;
    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    ensure(Checkpoint::from_model(&mut back).to_bytes() == bytes, || "re-save differs".into())?;

    let mut r = rng(7);
    let sample: Vec<usize> = (0..24)
        .map(|_| rand::Rng::random_range(&mut r, 0..bytes.len()))
        .chain([0, 4, 8, bytes.len() / 2, bytes.len() - 1])
        .collect();
    let escaped = corruption_escapes(&bytes, sample.iter().copied());
    ensure(escaped.is_empty(), || format!("mini corruption accepted at {escaped:?}"))?;

    let mut tiny = Model::<f32>::new(tiny_config()).map_err(|e| e.to_string())?;
    let tb = Checkpoint::from_model(&mut tiny).to_bytes();
    let escaped = corruption_escapes(&tb, 0..tb.len());
    ensure(escaped.is_empty(), || format!("tiny corruption accepted at {:?}", &escaped[..escaped.len().min(8)]))?;
    Ok(format!(
        "mini {} MB bitwise round trip, {} + {} single-byte corruptions rejected",
        bytes.len() / 1_000_000,
        sample.len(),
        tb.len()
    ))
}

fn ablation() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ds = synth(dir.path(), &SynthConfig::new(8, 10, 64, 4));
    let base = TrainConfig {
        batch_size: 8,
        eval_every: 10,
        ..TrainConfig::mini(4, 300)
    };
    let kinds = AttentionKind::ALL;
    let table = ablate(&base, &kinds, &ds, Some(100)).map_err(|e| e.to_string())?;
    ensure(table.rows.len() == kinds.len(), || format!("{} rows", table.rows.len()))?;
    let cmp = compare_attention(&base.model, &kinds, base.model.input_size).map_err(|e| e.to_string())?;
    for (row, v) in table.rows.iter().zip(&cmp.variants) {
        ensure(row.variant == v.variant, || format!("row order {} vs {}", row.variant, v.variant))?;
        ensure(row.param_delta == v.param_delta && row.mac_delta == v.mac_delta, || {
            format!("{}: table delta {} vs profiler {}", row.variant, row.param_delta, v.param_delta)
        })?;
        ensure(row.reduced_budget && row.epochs == 100, || format!("{} budget not flagged", row.variant))?;
        ensure(row.per_class.len() == 4 && row.per_class.iter().all(|v| (0.0..=1.0).contains(v)), || {
            format!("{} per-class {:?}", row.variant, row.per_class)
        })?;
        ensure((0.0..=1.0).contains(&row.mean_dsc), || format!("{} mean {}", row.variant, row.mean_dsc))?;
    }
    let csv = table.to_csv();
    let widths: Vec<usize> = csv.lines().map(|l| l.split(',').count()).collect();
    ensure(widths.len() == 6 && widths.iter().all(|&w| w == widths[0]), || "ragged csv".into())?;
    print!("{}", table.to_text());
    let summary: Vec<String> = table
        .rows
        .iter()
        .map(|r| format!("{} {:.3} ({:+})", r.variant, r.mean_dsc, r.param_delta))
        .collect();
    Ok(format!("reduced budget (100 epochs): {}", summary.join(", ")))
}

fn run_once(data: &Path, out: &Path) -> Result<(Vec<u64>, Vec<u8>), String> {
    let ds = gca_resunet::data::load_dataset(data).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        batch_size: 4,
        checkpoint_dir: Some(out.to_path_buf()),
        ..TrainConfig::mini(4, 3)
    };
    let outcome = Trainer::new(cfg, &ds).and_then(Trainer::run).map_err(|e| e.to_string())?;
    outcome.check().map_err(|e| e.to_string())?;
    let bytes = std::fs::read(out.join(LAST_CHECKPOINT)).map_err(|e| e.to_string())?;
    Ok((outcome.history.loss_bits(), bytes))
}

fn determinism() -> Result<String, String> {
    let data = tempfile::tempdir().map_err(|e| e.to_string())?;
    synth(data.path(), &SynthConfig::new(9, 8, 64, 4).train_only());
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (la, ca) = run_once(data.path(), a.path())?;
    let (lb, cb) = run_once(data.path(), b.path())?;
    ensure(la == lb, || format!("loss histories differ: {la:?} vs {lb:?}"))?;
    ensure(ca == cb, || "final checkpoints differ".into())?;
    Ok(format!("{} epochs, losses and {} byte checkpoints identical", la.len(), ca.len()))
}

fn main() -> ExitCode {
    let words: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected = |c: &Criterion| {
        words.is_empty() || words.iter().any(|w| w.parse() == Ok(c.id) || c.slug.contains(w.as_str()))
    };
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for c in CRITERIA.iter().filter(|c| selected(c)) {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let took = start.elapsed();
        let result = match result {
            Ok(d) if took > c.budget => Err(format!("over budget: {d}")),
            r => r,
        };
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        failed += usize::from(result.is_err());
        println!(
            "criterion {} {tag} {} [{:.1}s / {}s] {detail}",
            c.id,
            c.slug,
            took.as_secs_f64(),
            c.budget.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
