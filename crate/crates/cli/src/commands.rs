use std::path::Path;

use gca_resunet::data::{gen_synthetic, load_dataset, resize_mask_nearest, Split, SynthConfig};
use gca_resunet::losses::{argmax, LossConfig};
use gca_resunet::numerics::resize_bilinear;
use gca_resunet::profiler::{compare_attention, count_macs, count_params};
use gca_resunet::training::{ablate as run_ablation, evaluate_checkpoint, EvalReport, Trainer, TrainConfig};
use gca_resunet::{AttentionKind, Checkpoint, Error, FeatureMap, Mode, ModelConfig};
use image::{GrayImage, Rgb, RgbImage};
use serde_json::json;

use crate::config::{ConfigArgs, Resolved};
use crate::plot::{self, PALETTE};
use crate::rundir::{test_mode, write_json, write_text, DirLock, CONFIG_FILE, SUMMARY_FILE};
use crate::CliError;

fn valid_tags() -> String {
    AttentionKind::ALL.iter().map(|k| k.tag()).collect::<Vec<_>>().join(", ")
}

/// Parses a comma-separated variant list; needs at least two entries.
fn parse_variants(list: &str) -> Result<Vec<AttentionKind>, CliError> {
    let kinds = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<Result<Vec<AttentionKind>, Error>>()?;
    if kinds.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 variants, got {}; valid tags: {}",
            kinds.len(),
            valid_tags()
        ))
        .into());
    }
    Ok(kinds)
}

/// Per-run facts that are not part of the config: costs and dataset identity.
fn summary(cfg: &ModelConfig, data: Option<(&Path, &str)>) -> Result<serde_json::Value, CliError> {
    let report = count_macs(cfg, cfg.input_size, 1)?;
    let (t, a) = (report.totals(), report.attention_totals());
    Ok(json!({
        "attention": cfg.backbone.attention.kind.tag(),
        "num_classes": cfg.num_classes(),
        "input_size": cfg.input_size,
        "params": t.params,
        "macs": t.macs,
        "attention_params": a.params,
        "attention_macs": a.macs,
        "config_digest": format!("{:016x}", cfg.digest()),
        "dataset": data.map(|(p, _)| p.display().to_string()),
        "dataset_digest": data.map(|(_, d)| d.to_string()),
        "test_mode": test_mode(),
    }))
}

fn print_costs(cfg: &ModelConfig) -> Result<(), CliError> {
    let t = count_params(cfg)?;
    println!(
        "params: {} (attention {}) for attention={}",
        t.totals().params,
        t.attention_totals().params,
        cfg.backbone.attention.kind
    );
    Ok(())
}

pub fn gen_data(
    seed: u64,
    n: usize,
    size: usize,
    classes: usize,
    val_fraction: f64,
    test_fraction: f64,
    out: &Path,
) -> Result<(), CliError> {
    let cfg = SynthConfig {
        val_fraction,
        test_fraction,
        ..SynthConfig::new(seed, n, size, classes)
    };
    cfg.validate()?;
    let _lock = DirLock::acquire(out)?;
    let m = gen_synthetic(&cfg, out)?;
    println!(
        "wrote {} samples ({} train / {} val / {} test), {} classes at {size}x{size} to {}",
        m.samples.len(),
        m.splits.train.len(),
        m.splits.val.len(),
        m.splits.test.len(),
        m.num_classes,
        out.display()
    );
    println!("digest: {}", m.digest);
    Ok(())
}

fn bind_dataset(args: &ConfigArgs, data: &Path) -> Result<(Resolved, gca_resunet::data::Dataset), CliError> {
    let mut r = args.resolve()?;
    let ds = load_dataset(data)?;
    r.bind_classes(ds.num_classes())?;
    r.cfg.validate()?;
    Ok((r, ds))
}

pub fn train(args: &ConfigArgs, data: &Path, out: &Path) -> Result<(), CliError> {
    let (mut r, ds) = bind_dataset(args, data)?;
    let _lock = DirLock::acquire(out)?;
    r.cfg.checkpoint_dir = Some(out.to_path_buf());
    let cfg = r.cfg;
    write_json(&out.join(CONFIG_FILE), &cfg)?;
    write_json(
        &out.join(SUMMARY_FILE),
        &summary(&cfg.model, Some((data, &ds.manifest.digest)))?,
    )?;
    print_costs(&cfg.model)?;

    let quiet = test_mode();
    let mut trainer = Trainer::new(cfg.clone(), &ds)?;
    let mut failure = None;
    while trainer.epochs_done() < cfg.epochs {
        match trainer.run_epoch() {
            Ok(e) => {
                if !quiet {
                    let val = e.val_mean.map(|v| format!("  val DSC {v:.4}")).unwrap_or_default();
                    println!(
                        "epoch {:>4}/{}  loss {:.5} (dice {:.5}, ce {:.5}){val}",
                        e.epoch, cfg.epochs, e.train_loss, e.train_dice, e.train_ce
                    );
                }
            }
            Err(e @ Error::Numeric(_)) => {
                failure = Some(e);
                break;
            }
            Err(e) => return Err(e.into()),
        }
    }
    let split = trainer.selection_split().0;
    let outcome = trainer.finish()?;
    plot::loss_curve(&outcome.history, &out.join("loss_curve.png"))?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    let last = outcome.history.epochs.iter().rev().find_map(|e| e.val_mean);
    if let Some(v) = last {
        println!("final DSC ({split}): {v:.4}");
    }
    if let Some(t) = &outcome.history.final_metrics {
        println!("final DSC (test): {:.4}", t.mean);
    }
    Ok(())
}

fn eval_csv(r: &EvalReport) -> String {
    let mut s = String::from("class,dsc\n");
    for (c, v) in r.per_class.iter().enumerate() {
        s += &format!("{c},{v:.6}\n");
    }
    s + &format!("mean,{:.6}\n", r.mean)
}

fn eval_text(r: &EvalReport, include_background: bool) -> String {
    let mut s = format!(
        "{} samples of split {}\n",
        r.samples,
        r.split.map(|s| s.tag()).unwrap_or("?")
    );
    for (c, v) in r.per_class.iter().enumerate() {
        let note = if c == 0 && !include_background { "  (not in mean)" } else { "" };
        s += &format!("  class {c:>2}  {v:.4}{note}\n");
    }
    s + &format!("  mean      {:.4}\n", r.mean)
}

pub fn eval(ckpt: &Path, data: &Path, split: &str, batch_size: usize, out: Option<&Path>) -> Result<(), CliError> {
    let split: Split = split.parse()?;
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()).into());
    }
    let ds = load_dataset(data)?;
    let loss = LossConfig::default();
    let r = evaluate_checkpoint(ckpt, &ds, split, &loss, batch_size)?;
    let csv = eval_csv(&r);
    print!("{csv}\n{}", eval_text(&r, loss.include_background_in_metric));
    if let Some(dir) = out {
        let _lock = DirLock::acquire(dir)?;
        write_text(&dir.join(format!("eval_{split}.csv")), &csv)?;
    }
    Ok(())
}

pub fn predict(ckpt: &Path, image_path: &Path, out: &Path) -> Result<(), CliError> {
    let ck = Checkpoint::read(ckpt)?;
    let mut model = ck.into_model::<f32>()?;
    let img = image::open(image_path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => CliError::io(image_path, io),
            other => Error::Input(format!("{}: {other}", image_path.display())).into(),
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let x = FeatureMap::from_vec((1, 1, h, w), img.as_raw().iter().map(|&v| v as f32 / 255.0).collect())?;
    let size = model.cfg.input_size;
    let x = resize_bilinear(&x, size, size)?;
    let logits = model.forward(&x, Mode::Eval)?;
    if !logits.is_finite() {
        return Err(Error::Numeric("non-finite logits".into()).into());
    }
    let mask = resize_mask_nearest(&argmax(&logits), h, w);

    let _lock = DirLock::acquire(out)?;
    let stem = image_path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let mask_img = GrayImage::from_raw(w as u32, h as u32, mask.labels.clone()).expect("mask sized");
    let overlay = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let g = img.get_pixel(x, y).0[0];
        let label = mask.at(0, y as usize, x as usize) as usize;
        if label == 0 {
            Rgb([g, g, g])
        } else {
            let c = PALETTE[(label - 1) % PALETTE.len()].0;
            Rgb(std::array::from_fn(|i| ((g as u16 + c[i] as u16) / 2) as u8))
        }
    });
    let mask_path = out.join(format!("{stem}_mask.png"));
    let overlay_path = out.join(format!("{stem}_overlay.png"));
    save_png(|p| mask_img.save(p), &mask_path)?;
    save_png(|p| overlay.save(p), &overlay_path)?;
    let counts = mask.counts(model.cfg.num_classes());
    println!("{}x{} mask: {}", w, h, mask_path.display());
    println!("overlay: {}", overlay_path.display());
    println!(
        "pixels per class: {}",
        counts.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
    );
    Ok(())
}

fn save_png(f: impl FnOnce(&Path) -> image::ImageResult<()>, path: &Path) -> Result<(), CliError> {
    f(path).map_err(|e| CliError::io(path, std::io::Error::other(e.to_string())))
}

pub fn ablate(
    args: &ConfigArgs,
    data: &Path,
    variants: &str,
    reduced_epochs: Option<usize>,
    out: &Path,
) -> Result<(), CliError> {
    let kinds = parse_variants(variants)?;
    if reduced_epochs == Some(0) {
        return Err(Error::Config("--reduced-epochs must be >= 1".into()).into());
    }
    let (mut r, ds) = bind_dataset(args, data)?;
    let _lock = DirLock::acquire(out)?;
    r.cfg.checkpoint_dir = Some(out.join("runs"));
    let cfg: TrainConfig = r.cfg;
    write_json(&out.join(CONFIG_FILE), &cfg)?;
    let mut s = summary(&cfg.model, Some((data, &ds.manifest.digest)))?;
    s["variants"] = json!(kinds.iter().map(|k| k.tag()).collect::<Vec<_>>());
    s["reduced_epochs"] = json!(reduced_epochs);
    write_json(&out.join(SUMMARY_FILE), &s)?;

    let table = run_ablation(&cfg, &kinds, &ds, reduced_epochs)?;
    write_text(&out.join("ablation.csv"), &table.to_csv())?;
    write_text(&out.join("ablation.txt"), &table.to_text())?;
    plot::ablation_bars(&table, &out.join("ablation.png"))?;
    println!("evaluated on {} at {}x{}", table.eval_split, table.input_size, table.input_size);
    print!("{}", table.to_text());
    if reduced_epochs.is_some() {
        println!("budget reduced to {} epochs", table.rows[0].epochs);
    }
    Ok(())
}

pub fn profile(
    args: &ConfigArgs,
    input: usize,
    batch: usize,
    compare: Option<&str>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let kinds = compare.map(parse_variants).transpose()?;
    let cfg = args.resolve()?.cfg;
    cfg.model.validate()?;
    if batch == 0 {
        return Err(Error::Config("batch must be >= 1".into()).into());
    }
    let lock = out.map(DirLock::acquire).transpose()?;
    match kinds {
        Some(kinds) => {
            let c = compare_attention(&cfg.model, &kinds, input)?;
            print!("{}", c.to_text());
            if let Some(dir) = out {
                write_text(&dir.join("compare.csv"), &c.to_csv())?;
            }
        }
        None => {
            let r = count_macs(&cfg.model, input, batch)?;
            let (t, a) = (r.totals(), r.attention_totals());
            print!("{}", r.to_text());
            println!("total params: {}", t.params);
            println!("total MACs: {} (input {input}x{input}, batch {batch})", t.macs);
            println!(
                "attention: {} params, {} MACs ({:.4}% of MACs)",
                a.params,
                a.macs,
                100.0 * a.macs as f64 / t.macs.max(1) as f64
            );
            if let Some(dir) = out {
                write_text(&dir.join("profile.csv"), &r.to_csv())?;
            }
        }
    }
    drop(lock);
    Ok(())
}

pub fn show_config(args: &ConfigArgs) -> Result<(), CliError> {
    let cfg = args.resolve()?.cfg;
    cfg.validate()?;
    println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
    let t = count_params(&cfg.model)?.totals();
    eprintln!("params: {}", t.params);
    Ok(())
}
