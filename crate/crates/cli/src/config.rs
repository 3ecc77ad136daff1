//! Effective run configuration: built-in defaults, then the JSON config
//! file, then `--set path=value` overrides, then dedicated flags.

use std::fs;
use std::path::Path;

use gca_resunet::training::TrainConfig;
use gca_resunet::{AttentionKind, Error};
use serde_json::Value;

use crate::CliError;

/// Flags shared by every command that builds a model.
#[derive(clap::Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// JSON run config (a TrainConfig document; unknown keys are rejected)
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    /// Start from the mini setup (two bottlenecks per stage, 64×64 input)
    #[arg(long)]
    pub mini: bool,
    /// Attention variant: none, se, cbam, coordatt or gca
    #[arg(long)]
    pub attn: Option<String>,
    /// Override any config field, e.g. `--set optimizer.lr=3e-4` or
    /// `--set model.backbone.stage_depths=[1,1,1,1]`; repeatable
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Shuffle seed
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
}

fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    Error::Config(msg.into()).into()
}

/// Parses `a.b.c=value`; the value is JSON when it parses, else a string.
fn parse_set(spec: &str) -> Result<Value, CliError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| config_err(format!("--set expects PATH=VALUE, got {spec:?}")))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(config_err(format!("--set has an empty path segment in {spec:?}")));
    }
    let mut v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    for key in path.rsplit('.') {
        let mut obj = serde_json::Map::new();
        obj.insert(key.to_string(), v);
        v = Value::Object(obj);
    }
    Ok(v)
}

pub struct Resolved {
    pub cfg: TrainConfig,
    /// Everything the user supplied (file and `--set`), merged.
    pub user: Value,
}

impl ConfigArgs {
    pub fn attention(&self) -> Result<Option<AttentionKind>, CliError> {
        self.attn.as_deref().map(str::parse).transpose().map_err(CliError::from)
    }

    pub fn resolve(&self) -> Result<Resolved, CliError> {
        let base = if self.mini {
            TrainConfig::mini(4, TrainConfig::default().epochs)
        } else {
            TrainConfig::default()
        };
        let mut user = Value::Object(Default::default());
        if let Some(path) = &self.config {
            let text = read_text(path)?;
            let v: Value = serde_json::from_str(&text)
                .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
            if !v.is_object() {
                return Err(config_err(format!("{}: expected a JSON object", path.display())));
            }
            merge(&mut user, v);
        }
        for s in &self.set {
            merge(&mut user, parse_set(s)?);
        }
        let mut v = serde_json::to_value(&base).expect("config serializes");
        merge(&mut v, user.clone());
        let mut cfg: TrainConfig = serde_json::from_value(v).map_err(|e| config_err(format!("run config: {e}")))?;
        if let Some(k) = self.attention()? {
            cfg.model = cfg.model.with_attention(k);
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(lr) = self.lr {
            cfg.optimizer.lr = lr;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = self.eval_every {
            cfg.eval_every = e;
        }
        Ok(Resolved { cfg, user })
    }
}

impl Resolved {
    /// Takes the class count from the dataset unless the user pinned a
    /// different one.
    pub fn bind_classes(&mut self, num_classes: usize) -> Result<(), CliError> {
        let pinned = self
            .user
            .pointer("/model/decoder/num_classes")
            .and_then(Value::as_u64);
        match pinned {
            Some(k) if k as usize != num_classes => Err(config_err(format!(
                "config sets model.decoder.num_classes = {k} but the dataset has {num_classes} classes"
            ))),
            _ => {
                self.cfg.model.decoder.num_classes = num_classes;
                Ok(())
            }
        }
    }
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}
