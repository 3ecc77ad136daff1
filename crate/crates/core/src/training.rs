//! Adam, the training and evaluation loops, and the attention ablation.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionKind;
use crate::checkpoint::{Checkpoint, save_checkpoint};
use crate::data::{batch_indices, collate, Batch, Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::losses::{argmax, overlap_counts, total_loss_grad, DscReport, LossConfig, LossValue};
use crate::model::{Model, ModelConfig};
use crate::numerics::Scalar;
use crate::params::{Mode, Module, Param, Visitor};
use crate::profiler;

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const HISTORY_FILE: &str = "history.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !unit(self.beta1) || !unit(self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// First/second moments per parameter tensor, in visit order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub cfg: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        AdamState {
            cfg,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

/// One bias-corrected Adam update on a single tensor at step `t >= 1`.
pub fn adam_update<T: Scalar>(cfg: &AdamConfig, t: u64, p: &mut [T], g: &[T], m: &mut [T], v: &mut [T]) {
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    let c1 = T::lit(1.0 - cfg.beta1.powi(t as i32));
    let c2 = T::lit(1.0 - cfg.beta2.powi(t as i32));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    for i in 0..p.len() {
        m[i] = b1 * m[i] + one_b1 * g[i];
        v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

struct GradScan {
    bad: Option<String>,
    sq_norm: f64,
}

impl<T: Scalar> Visitor<T> for GradScan {
    fn param(&mut self, name: &str, p: &mut Param<T>) {
        for g in &p.grad {
            let g = g.to_f64().unwrap_or(f64::NAN);
            if !g.is_finite() && self.bad.is_none() {
                self.bad = Some(name.to_string());
            }
            self.sq_norm += g * g;
        }
    }
    fn buffer(&mut self, _: &str, _: &[usize], _: &mut Vec<T>) {}
}

struct AdamVisit<'a, T> {
    st: &'a mut AdamState<T>,
    index: usize,
    grad_scale: T,
}

impl<T: Scalar> Visitor<T> for AdamVisit<'_, T> {
    fn param(&mut self, _: &str, p: &mut Param<T>) {
        let i = self.index;
        self.index += 1;
        if self.st.m.len() <= i {
            self.st.m.push(vec![T::zero(); p.len()]);
            self.st.v.push(vec![T::zero(); p.len()]);
        }
        assert_eq!(self.st.m[i].len(), p.len(), "optimizer state does not match parameter {i}");
        let scaled;
        let g: &[T] = if self.grad_scale == T::one() {
            &p.grad
        } else {
            scaled = p.grad.iter().map(|&g| g * self.grad_scale).collect::<Vec<_>>();
            &scaled
        };
        let (m, v) = (&mut self.st.m[i], &mut self.st.v[i]);
        adam_update(&self.st.cfg, self.st.t, &mut p.value, g, m, v);
    }
    fn buffer(&mut self, _: &str, _: &[usize], _: &mut Vec<T>) {}
}

/// Applies one Adam step to every parameter of `module` using its
/// accumulated gradients. Optionally rescales gradients to a maximum
/// global L2 norm first. Fails, without touching any parameter, if a
/// gradient is non-finite.
pub fn adam_step<T: Scalar, M: Module<T> + ?Sized>(
    module: &mut M,
    st: &mut AdamState<T>,
    clip_norm: Option<f64>,
) -> Result<()> {
    let mut scan = GradScan { bad: None, sq_norm: 0.0 };
    module.visit("", &mut scan);
    if let Some(name) = scan.bad {
        return Err(Error::Numeric(format!("non-finite gradient in parameter {name}")));
    }
    let norm = scan.sq_norm.sqrt();
    let grad_scale = match clip_norm {
        Some(max) if norm > max && norm > 0.0 => T::lit(max / norm),
        _ => T::one(),
    };
    st.t += 1;
    let mut v = AdamVisit {
        st,
        index: 0,
        grad_scale,
    };
    module.visit("", &mut v);
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds batch shuffling; the model has its own `model.seed`.
    pub seed: u64,
    pub loss: LossConfig,
    pub optimizer: AdamConfig,
    /// Validate every this many epochs (and always after the last one).
    pub eval_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub model: ModelConfig,
    /// Global gradient-norm clipping; off unless set.
    pub clip_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 8,
            seed: 0,
            loss: LossConfig::default(),
            optimizer: AdamConfig::default(),
            eval_every: 1,
            checkpoint_dir: None,
            model: ModelConfig::default(),
            clip_grad_norm: None,
        }
    }
}

impl TrainConfig {
    /// Desk-scale setup: mini backbone at 64×64.
    pub fn mini(num_classes: usize, epochs: usize) -> Self {
        TrainConfig {
            epochs,
            model: ModelConfig::mini(num_classes),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("epochs, batch_size and eval_every must be >= 1".into()));
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("clip_grad_norm must be > 0, got {c}")));
            }
        }
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.model.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_dice: f64,
    pub train_ce: f64,
    /// Split used for validation (`train` when the val split is empty).
    pub val_split: Option<Split>,
    pub val_dsc: Option<Vec<f64>>,
    pub val_mean: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbortRecord {
    pub epoch: usize,
    pub batch: usize,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Option<Split>,
    pub samples: usize,
    /// Per-class DSC averaged over samples.
    pub per_class: Vec<f64>,
    /// Mean over samples of each sample's reported-class mean.
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum HistoryLine {
    Epoch(EpochRecord),
    Abort(AbortRecord),
    Final(EvalReport),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub epochs: Vec<EpochRecord>,
    pub abort: Option<AbortRecord>,
    pub final_metrics: Option<EvalReport>,
}

impl RunHistory {
    pub fn lines(&self) -> Vec<HistoryLine> {
        let mut out: Vec<HistoryLine> = self.epochs.iter().cloned().map(HistoryLine::Epoch).collect();
        out.extend(self.abort.clone().map(HistoryLine::Abort));
        out.extend(self.final_metrics.clone().map(HistoryLine::Final));
        out
    }

    pub fn to_jsonl(&self) -> String {
        self.lines()
            .iter()
            .map(|l| serde_json::to_string(l).expect("history serializes") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut h = RunHistory::default();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: HistoryLine =
                serde_json::from_str(line).map_err(|e| Error::Input(format!("history line {}: {e}", i + 1)))?;
            match rec {
                HistoryLine::Epoch(e) => h.epochs.push(e),
                HistoryLine::Abort(a) => h.abort = Some(a),
                HistoryLine::Final(f) => h.final_metrics = Some(f),
            }
        }
        Ok(h)
    }

    /// Training losses as raw bits, for exact comparisons.
    pub fn loss_bits(&self) -> Vec<u64> {
        self.epochs.iter().map(|e| e.train_loss.to_bits()).collect()
    }
}

/// Eval-mode per-class DSC over `samples`, aggregated per sample first.
pub fn evaluate<T: Scalar>(
    model: &mut Model<T>,
    samples: &[Sample],
    batch_size: usize,
    loss: &LossConfig,
) -> Result<EvalReport> {
    let k = model.cfg.num_classes();
    let mut per_class = vec![0.0; k];
    let mut mean = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = collate::<T>(&chunk.iter().collect::<Vec<_>>())?;
        let logits = model.forward(&batch.images, Mode::Eval)?;
        let pred = argmax(&logits);
        for b in 0..chunk.len() {
            let counts = overlap_counts(&pred.sample(b), &batch.masks.sample(b), k)?;
            let r = DscReport::from_counts(&counts, loss.include_background_in_metric, loss.absent_class_dsc);
            per_class.iter_mut().zip(&r.per_class).for_each(|(a, v)| *a += v);
            mean += r.mean;
        }
    }
    let n = samples.len().max(1) as f64;
    Ok(EvalReport {
        split: None,
        samples: samples.len(),
        per_class: per_class.into_iter().map(|v| v / n).collect(),
        mean: mean / n,
    })
}

/// Loads a checkpoint and evaluates it on one split of `dataset`.
pub fn evaluate_checkpoint(
    path: impl AsRef<Path>,
    dataset: &Dataset,
    split: Split,
    loss: &LossConfig,
    batch_size: usize,
) -> Result<EvalReport> {
    let ckpt = Checkpoint::read(path)?;
    if ckpt.config.num_classes() != dataset.num_classes() {
        return Err(Error::Config(format!(
            "checkpoint predicts {} classes but the dataset has {}",
            ckpt.config.num_classes(),
            dataset.num_classes()
        )));
    }
    let mut model = ckpt.into_model::<f32>()?;
    let samples = dataset.load_split(split, model.cfg.input_size)?;
    if samples.is_empty() {
        return Err(Error::Input(format!("split {split} is empty")));
    }
    let mut r = evaluate(&mut model, &samples, batch_size, loss)?;
    r.split = Some(split);
    Ok(r)
}

pub struct TrainOutcome {
    pub history: RunHistory,
    pub model: Model<f32>,
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: Option<PathBuf>,
}

impl TrainOutcome {
    pub fn aborted(&self) -> bool {
        self.history.abort.is_some()
    }

    /// `Err(Numeric)` if the run was aborted.
    pub fn check(&self) -> Result<()> {
        match &self.history.abort {
            Some(a) => Err(Error::Numeric(format!(
                "training aborted at epoch {} batch {}: {}",
                a.epoch, a.batch, a.message
            ))),
            None => Ok(()),
        }
    }
}

/// Epoch-at-a-time driver behind [`train`].
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
    pub history: RunHistory,
    train: Vec<Sample>,
    val: Vec<Sample>,
    test: Vec<Sample>,
    best: Option<f64>,
    started: Instant,
}

fn fail_io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

impl Trainer {
    pub fn new(cfg: TrainConfig, dataset: &Dataset) -> Result<Self> {
        cfg.validate()?;
        if cfg.model.num_classes() != dataset.num_classes() {
            return Err(Error::Config(format!(
                "model has {} classes but the dataset has {}",
                cfg.model.num_classes(),
                dataset.num_classes()
            )));
        }
        let size = cfg.model.input_size;
        let train = dataset.load_split(Split::Train, size)?;
        let val = dataset.load_split(Split::Val, size)?;
        let test = dataset.load_split(Split::Test, size)?;
        Self::from_samples(cfg, train, val, test)
    }

    pub fn from_samples(cfg: TrainConfig, train: Vec<Sample>, val: Vec<Sample>, test: Vec<Sample>) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::Input("training split is empty".into()));
        }
        let k = cfg.model.num_classes();
        for s in train.iter().chain(&val).chain(&test) {
            s.mask.check(k)?;
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            fs::create_dir_all(dir).map_err(fail_io(dir))?;
            let hist = dir.join(HISTORY_FILE);
            fs::write(&hist, b"").map_err(fail_io(&hist))?;
        }
        Ok(Trainer {
            model: Model::new(cfg.model.clone())?,
            adam: AdamState::new(cfg.optimizer),
            history: RunHistory::default(),
            train,
            val,
            test,
            best: None,
            started: Instant::now(),
            cfg,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.history.epochs.len()
    }

    /// Split used for model selection: val, or train when val is empty.
    pub fn selection_split(&self) -> (Split, &[Sample]) {
        if self.val.is_empty() {
            (Split::Train, &self.train)
        } else {
            (Split::Val, &self.val)
        }
    }

    pub fn evaluate_split(&mut self, split: Split) -> Result<EvalReport> {
        let samples = match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        };
        let mut r = evaluate(&mut self.model, samples, self.cfg.batch_size, &self.cfg.loss)?;
        r.split = Some(split);
        Ok(r)
    }

    fn append_history(&self, line: &HistoryLine) -> Result<()> {
        if let Some(dir) = &self.cfg.checkpoint_dir {
            let path = dir.join(HISTORY_FILE);
            let mut f = fs::OpenOptions::new().append(true).open(&path).map_err(fail_io(&path))?;
            let text = serde_json::to_string(line).expect("history serializes");
            writeln!(f, "{text}").map_err(fail_io(&path))?;
        }
        Ok(())
    }

    /// One optimizer step on one batch.
    fn step(&mut self, batch_index: usize, batch: &Batch<f32>) -> Result<LossValue<f32>> {
        self.model.zero_grads();
        let logits = self.model.forward(&batch.images, Mode::Train)?;
        if !logits.is_finite() {
            return Err(Error::Numeric(format!("non-finite logits in batch {batch_index}")));
        }
        let (loss, grad) = total_loss_grad(&logits, &batch.masks, &self.cfg.loss)?;
        if !loss.total.is_finite() {
            return Err(Error::Numeric(format!("loss became {} in batch {batch_index}", loss.total)));
        }
        self.model.backward(&grad)?;
        adam_step(&mut self.model, &mut self.adam, self.cfg.clip_grad_norm)?;
        Ok(loss)
    }

    fn abort(&mut self, batch: usize, err: &Error) -> Result<()> {
        let rec = AbortRecord {
            epoch: self.epochs_done() + 1,
            batch,
            message: err.to_string(),
        };
        self.append_history(&HistoryLine::Abort(rec.clone()))?;
        self.history.abort = Some(rec);
        Ok(())
    }

    /// Trains one epoch and, when due, validates and updates `best.ckpt`.
    /// A numeric failure records an abort and is returned as the error.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        if self.history.abort.is_some() {
            return Err(Error::State("run already aborted".into()));
        }
        let epoch = self.epochs_done() + 1;
        let order = batch_indices(self.train.len(), self.cfg.batch_size, self.cfg.seed, epoch - 1);
        let (mut tot, mut dice, mut ce) = (0.0, 0.0, 0.0);
        for (bi, idx) in order.iter().enumerate() {
            let batch = collate::<f32>(&idx.iter().map(|&i| &self.train[i]).collect::<Vec<_>>())?;
            match self.step(bi, &batch) {
                Ok(l) => {
                    let w = idx.len() as f64;
                    tot += l.total as f64 * w;
                    dice += l.dice as f64 * w;
                    ce += l.ce as f64 * w;
                }
                Err(e @ Error::Numeric(_)) => {
                    self.abort(bi, &e)?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }
        let n = self.train.len() as f64;
        let mut rec = EpochRecord {
            epoch,
            train_loss: tot / n,
            train_dice: dice / n,
            train_ce: ce / n,
            val_split: None,
            val_dsc: None,
            val_mean: None,
            wall_time_s: 0.0,
        };
        if epoch % self.cfg.eval_every == 0 || epoch == self.cfg.epochs {
            let (split, _) = self.selection_split();
            let r = self.evaluate_split(split)?;
            if self.best.is_none_or(|b| r.mean > b) {
                self.best = Some(r.mean);
                if let Some(dir) = &self.cfg.checkpoint_dir {
                    save_checkpoint(&mut self.model, dir.join(BEST_CHECKPOINT))?;
                }
            }
            rec.val_split = Some(split);
            rec.val_mean = Some(r.mean);
            rec.val_dsc = Some(r.per_class);
        }
        rec.wall_time_s = self.started.elapsed().as_secs_f64();
        self.append_history(&HistoryLine::Epoch(rec.clone()))?;
        self.history.epochs.push(rec.clone());
        Ok(rec)
    }

    /// Writes `last.ckpt`, evaluates the test split if present, and
    /// returns the outcome.
    pub fn finish(mut self) -> Result<TrainOutcome> {
        let mut last = None;
        let mut best = None;
        if let Some(dir) = self.cfg.checkpoint_dir.clone() {
            if self.history.abort.is_none() {
                let p = dir.join(LAST_CHECKPOINT);
                save_checkpoint(&mut self.model, &p)?;
                last = Some(p);
            }
            let b = dir.join(BEST_CHECKPOINT);
            best = b.exists().then_some(b);
        }
        if self.history.abort.is_none() && !self.test.is_empty() {
            let r = self.evaluate_split(Split::Test)?;
            self.append_history(&HistoryLine::Final(r.clone()))?;
            self.history.final_metrics = Some(r);
        }
        Ok(TrainOutcome {
            history: self.history,
            model: self.model,
            best_checkpoint: best,
            last_checkpoint: last,
        })
    }

    /// Runs the remaining epochs, stopping early only on a numeric abort.
    pub fn run(mut self) -> Result<TrainOutcome> {
        while self.epochs_done() < self.cfg.epochs {
            match self.run_epoch() {
                Ok(_) => {}
                Err(Error::Numeric(_)) => break,
                Err(e) => return Err(e),
            }
        }
        self.finish()
    }
}

/// Trains from scratch. A non-finite loss or gradient ends the run with an
/// abort record in the history (see [`TrainOutcome::check`]).
pub fn train(cfg: TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    Trainer::new(cfg, dataset)?.run()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AttentionKind,
    pub mean_dsc: f64,
    /// DSC for every class `0..K`.
    pub per_class: Vec<f64>,
    pub params: u64,
    pub param_delta: i64,
    pub macs: u64,
    pub mac_delta: i64,
    pub epochs: usize,
    pub reduced_budget: bool,
    pub wall_time_s: f64,
}

impl AblationRow {
    /// Equality on everything except wall time.
    pub fn same_result(&self, other: &AblationRow) -> bool {
        AblationRow {
            wall_time_s: 0.0,
            ..self.clone()
        } == AblationRow {
            wall_time_s: 0.0,
            ..other.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub num_classes: usize,
    pub input_size: usize,
    pub eval_split: Split,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    fn header(&self) -> Vec<String> {
        let mut h = vec!["variant".to_string(), "mean_dsc".to_string()];
        h.extend((1..self.num_classes).map(|c| format!("dsc_c{c}")));
        h.extend(
            ["params", "param_delta", "macs", "mac_delta", "epochs", "budget", "wall_time_s"]
                .iter()
                .map(|s| s.to_string()),
        );
        h
    }

    fn cells(&self, r: &AblationRow) -> Vec<String> {
        let mut c = vec![r.variant.tag().to_string(), format!("{:.4}", r.mean_dsc)];
        c.extend(r.per_class.iter().skip(1).map(|v| format!("{v:.4}")));
        c.extend([
            r.params.to_string(),
            format!("{:+}", r.param_delta),
            r.macs.to_string(),
            format!("{:+}", r.mac_delta),
            r.epochs.to_string(),
            if r.reduced_budget { "reduced" } else { "full" }.to_string(),
            format!("{:.1}", r.wall_time_s),
        ]);
        c
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header().join(",") + "\n";
        for r in &self.rows {
            s += &(self.cells(r).join(",") + "\n");
        }
        s
    }

    pub fn to_text(&self) -> String {
        let header = self.header();
        let cells: Vec<Vec<String>> = self.rows.iter().map(|r| self.cells(r)).collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| cells.iter().map(|c| c[i].len()).chain([header[i].len()]).max().unwrap_or(0))
            .collect();
        let fmt_row = |row: &[String]| {
            let mut line = String::new();
            for (i, cell) in row.iter().enumerate() {
                if i == 0 {
                    let _ = write!(line, "{cell:<w$}", w = widths[i]);
                } else {
                    let _ = write!(line, "  {cell:>w$}", w = widths[i]);
                }
            }
            line + "\n"
        };
        let mut s = fmt_row(&header);
        for c in &cells {
            s += &fmt_row(c);
        }
        s
    }
}

/// Trains one model per attention variant under otherwise identical
/// settings. `reduced_epochs` overrides the epoch budget and flags the rows.
pub fn ablate(
    base: &TrainConfig,
    variants: &[AttentionKind],
    dataset: &Dataset,
    reduced_epochs: Option<usize>,
) -> Result<AblationTable> {
    if variants.len() < 2 {
        return Err(Error::Config(format!(
            "ablation needs at least 2 variants, got {}",
            variants.len()
        )));
    }
    let size = base.model.input_size;
    let baseline = profiler::count_macs(&base.model.clone().with_attention(AttentionKind::None), size, 1)?.totals();
    let mut rows = Vec::new();
    let mut eval_split = Split::Val;
    for (i, &kind) in variants.iter().enumerate() {
        let mut cfg = base.clone();
        cfg.model = cfg.model.with_attention(kind);
        if let Some(e) = reduced_epochs {
            cfg.epochs = e;
        }
        cfg.checkpoint_dir = base.checkpoint_dir.as_ref().map(|d| d.join(format!("{i:02}-{}", kind.tag())));
        let cost = profiler::count_macs(&cfg.model, size, 1)?.totals();
        let start = Instant::now();
        let mut trainer = Trainer::new(cfg.clone(), dataset)?;
        while trainer.epochs_done() < cfg.epochs {
            trainer.run_epoch()?;
        }
        let (split, _) = trainer.selection_split();
        eval_split = split;
        let report = trainer.evaluate_split(split)?;
        let mut outcome = trainer.finish()?;
        let params = outcome.model.num_params() as u64;
        rows.push(AblationRow {
            variant: kind,
            mean_dsc: report.mean,
            per_class: report.per_class,
            params,
            param_delta: params as i64 - baseline.params as i64,
            macs: cost.macs,
            mac_delta: cost.macs as i64 - baseline.macs as i64,
            epochs: cfg.epochs,
            reduced_budget: reduced_epochs.is_some(),
            wall_time_s: start.elapsed().as_secs_f64(),
        });
    }
    Ok(AblationTable {
        num_classes: base.model.num_classes(),
        input_size: size,
        eval_split,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct One(Param<f64>);
    impl Module<f64> for One {
        fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<f64>) {
            v.param(&crate::params::join(prefix, "w"), &mut self.0);
        }
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut m = One(Param::filled(&[3], 0.7));
        let mut st = AdamState::new(AdamConfig::default());
        adam_step(&mut m, &mut st, None).unwrap();
        assert_eq!(m.0.value, vec![0.7; 3]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_is_lr_sign() {
        let mut m = One(Param::zeros(&[3]));
        m.0.grad = vec![3.0, -0.2, 1e-3];
        let mut st = AdamState::new(AdamConfig::default());
        adam_step(&mut m, &mut st, None).unwrap();
        for (v, s) in m.0.value.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((v - s * 1e-4).abs() < 1e-8, "{v}");
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut m = One(Param::zeros(&[2]));
        m.0.grad = vec![0.0, f64::NAN];
        let mut st = AdamState::new(AdamConfig::default());
        let err = adam_step(&mut m, &mut st, None).unwrap_err().to_string();
        assert!(err.contains("w"), "{err}");
        assert_eq!(st.t, 0);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut a = One(Param::zeros(&[2]));
        a.0.grad = vec![30.0, 40.0];
        let mut b = One(Param::zeros(&[2]));
        b.0.grad = vec![0.3, 0.4];
        let (mut sa, mut sb) = (AdamState::new(AdamConfig::default()), AdamState::new(AdamConfig::default()));
        adam_step(&mut a, &mut sa, Some(0.5)).unwrap();
        adam_step(&mut b, &mut sb, None).unwrap();
        assert_eq!(sa.m, sb.m);
    }

    #[test]
    fn history_jsonl_roundtrip() {
        let h = RunHistory {
            epochs: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                train_dice: 0.4,
                train_ce: 0.6,
                val_split: Some(Split::Train),
                val_dsc: Some(vec![1.0, 0.25]),
                val_mean: Some(0.25),
                wall_time_s: 1.5,
            }],
            abort: Some(AbortRecord {
                epoch: 2,
                batch: 0,
                message: "x".into(),
            }),
            final_metrics: None,
        };
        assert_eq!(RunHistory::from_jsonl(&h.to_jsonl()).unwrap(), h);
    }
}
