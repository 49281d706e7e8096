//! Flat `key = value` run configuration. One assignment per line, `#`
//! starts a full-line comment, unknown and duplicate keys are rejected.
//! Every field has a default, and `canonical()` always emits the complete
//! key set in a fixed order, so the echoed text is a total snapshot of the
//! run: checkpoints embed it and resume compares it byte for byte.

use crate::dataset::SplitRatios;
use crate::embed::EmbedSpec;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::network::{Activation, NetworkConfig, Pool, BLOCKS};
use crate::srm::Constraint;
use crate::trainer::OptimConfig;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub ratios: SplitRatios,
    pub payload_bpp: f64,
    pub embed_seed: u64,
    pub pairs_per_batch: usize,
    /// Trailing train-accuracy window for early stopping; 0 disables.
    pub early_stop_window: usize,
    pub early_stop_delta: f64,
    pub covers_dir: PathBuf,
    pub out_dir: PathBuf,
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            network: NetworkConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            ratios: SplitRatios::default(),
            payload_bpp: 1.0,
            embed_seed: 1,
            pairs_per_batch: 16,
            early_stop_window: 0,
            early_stop_delta: 0.001,
            covers_dir: PathBuf::from("covers"),
            out_dir: PathBuf::from("out"),
            deterministic: true,
        }
    }
}

/// Canonical key order. `canonical()` emits exactly these, and the parser
/// accepts nothing else.
const KEYS: &[&str] = &[
    "constraint",
    "block_channels",
    "kernel_size",
    "pool_schedule",
    "activation_schedule",
    "tlu_t",
    "use_batch_norm",
    "feature_dim",
    "margin",
    "lambda",
    "rho",
    "eps",
    "weight_decay",
    "lr_scale",
    "step_epochs",
    "step_factor",
    "epochs",
    "seed",
    "pairs_per_batch",
    "early_stop_window",
    "early_stop_delta",
    "payload_bpp",
    "embed_seed",
    "train_ratio",
    "val_ratio",
    "test_ratio",
    "covers_dir",
    "out_dir",
    "deterministic",
];

fn bad(line_no: usize, key: &str, detail: impl std::fmt::Display) -> Error {
    Error::Config(format!("line {line_no}: {key}: {detail}"))
}

fn parse_num<T: std::str::FromStr>(line_no: usize, key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| bad(line_no, key, format!("invalid value '{v}'")))
}

fn parse_bool(line_no: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(bad(line_no, key, format!("expected true or false, got '{other}'"))),
    }
}

fn parse_schedule<T>(
    line_no: usize,
    key: &str,
    v: &str,
    elem: impl Fn(&str) -> Result<T>,
) -> Result<[T; BLOCKS]> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != BLOCKS {
        return Err(bad(
            line_no,
            key,
            format!("expected {BLOCKS} comma-separated entries, got {}", parts.len()),
        ));
    }
    let mut out = Vec::with_capacity(BLOCKS);
    for part in parts {
        out.push(elem(part).map_err(|e| bad(line_no, key, e))?);
    }
    Ok(out.try_into().map_err(|_| ()).expect("length checked above"))
}

fn join<T, F: Fn(&T) -> String>(items: &[T], f: F) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn seed(&self) -> u64 {
        self.optim.seed
    }

    pub fn embed_spec(&self) -> EmbedSpec {
        EmbedSpec {
            payload_bpp: self.payload_bpp,
            seed: self.embed_seed,
        }
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<&str> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {line_no}: expected 'key = value', got '{line}'"))
            })?;
            let (key, v) = (key.trim(), value.trim());
            let canon = KEYS
                .iter()
                .find(|k| **k == key)
                .ok_or_else(|| Error::Config(format!("line {line_no}: unknown key '{key}'")))?;
            if seen.contains(canon) {
                return Err(Error::Config(format!("line {line_no}: duplicate key '{key}'")));
            }
            seen.push(canon);
            cfg.set(line_no, key, v)?;
        }
        Ok(cfg)
    }

    fn set(&mut self, n: usize, key: &str, v: &str) -> Result<()> {
        match key {
            "constraint" => self.network.constraint = Constraint::parse(v).map_err(|e| bad(n, key, e))?,
            "block_channels" => {
                self.network.block_channels = parse_schedule(n, key, v, |s| {
                    s.parse::<usize>()
                        .map_err(|_| Error::Config(format!("invalid channel count '{s}'")))
                })?
            }
            "kernel_size" => self.network.kernel_size = parse_num(n, key, v)?,
            "pool_schedule" => self.network.pool_schedule = parse_schedule(n, key, v, Pool::parse)?,
            "activation_schedule" => {
                self.network.activation_schedule = parse_schedule(n, key, v, Activation::parse)?
            }
            "tlu_t" => self.network.tlu_t = parse_num(n, key, v)?,
            "use_batch_norm" => self.network.use_batch_norm = parse_bool(n, key, v)?,
            "feature_dim" => self.network.feature_dim = parse_num(n, key, v)?,
            "margin" => self.loss.margin = parse_num(n, key, v)?,
            "lambda" => self.loss.lambda = parse_num(n, key, v)?,
            "rho" => self.optim.rho = parse_num(n, key, v)?,
            "eps" => self.optim.eps = parse_num(n, key, v)?,
            "weight_decay" => self.optim.weight_decay = parse_num(n, key, v)?,
            "lr_scale" => self.optim.lr_scale = parse_num(n, key, v)?,
            "step_epochs" => self.optim.step_epochs = parse_num(n, key, v)?,
            "step_factor" => self.optim.step_factor = parse_num(n, key, v)?,
            "epochs" => self.optim.epochs = parse_num(n, key, v)?,
            "seed" => self.optim.seed = parse_num(n, key, v)?,
            "pairs_per_batch" => self.pairs_per_batch = parse_num(n, key, v)?,
            "early_stop_window" => self.early_stop_window = parse_num(n, key, v)?,
            "early_stop_delta" => self.early_stop_delta = parse_num(n, key, v)?,
            "payload_bpp" => self.payload_bpp = parse_num(n, key, v)?,
            "embed_seed" => self.embed_seed = parse_num(n, key, v)?,
            "train_ratio" => self.ratios.train = parse_num(n, key, v)?,
            "val_ratio" => self.ratios.val = parse_num(n, key, v)?,
            "test_ratio" => self.ratios.test = parse_num(n, key, v)?,
            "covers_dir" => self.covers_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "deterministic" => self.deterministic = parse_bool(n, key, v)?,
            _ => unreachable!("key vetted against KEYS"),
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        RunConfig::parse(&text)
    }

    /// Complete `key = value` snapshot in canonical order. Floats print in
    /// shortest round-trip form, so parse(canonical(c)) == c.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        for &key in KEYS {
            let value = match key {
                "constraint" => self.network.constraint.name().to_string(),
                "block_channels" => join(&self.network.block_channels, usize::to_string),
                "kernel_size" => self.network.kernel_size.to_string(),
                "pool_schedule" => join(&self.network.pool_schedule, |p| p.name().to_string()),
                "activation_schedule" => {
                    join(&self.network.activation_schedule, |a| a.name().to_string())
                }
                "tlu_t" => self.network.tlu_t.to_string(),
                "use_batch_norm" => self.network.use_batch_norm.to_string(),
                "feature_dim" => self.network.feature_dim.to_string(),
                "margin" => self.loss.margin.to_string(),
                "lambda" => self.loss.lambda.to_string(),
                "rho" => self.optim.rho.to_string(),
                "eps" => self.optim.eps.to_string(),
                "weight_decay" => self.optim.weight_decay.to_string(),
                "lr_scale" => self.optim.lr_scale.to_string(),
                "step_epochs" => self.optim.step_epochs.to_string(),
                "step_factor" => self.optim.step_factor.to_string(),
                "epochs" => self.optim.epochs.to_string(),
                "seed" => self.optim.seed.to_string(),
                "pairs_per_batch" => self.pairs_per_batch.to_string(),
                "early_stop_window" => self.early_stop_window.to_string(),
                "early_stop_delta" => self.early_stop_delta.to_string(),
                "payload_bpp" => self.payload_bpp.to_string(),
                "embed_seed" => self.embed_seed.to_string(),
                "train_ratio" => self.ratios.train.to_string(),
                "val_ratio" => self.ratios.val.to_string(),
                "test_ratio" => self.ratios.test.to_string(),
                "covers_dir" => self.covers_dir.display().to_string(),
                "out_dir" => self.out_dir.display().to_string(),
                "deterministic" => self.deterministic.to_string(),
                _ => unreachable!(),
            };
            writeln!(s, "{key} = {value}").expect("string writes cannot fail");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        self.ratios.validate()?;
        if !(self.payload_bpp > 0.0 && self.payload_bpp <= 1.0) {
            return Err(Error::Config(format!(
                "payload_bpp {} outside (0, 1]",
                self.payload_bpp
            )));
        }
        if self.pairs_per_batch == 0 {
            return Err(Error::Config("pairs_per_batch must be at least 1".into()));
        }
        if !(self.early_stop_delta >= 0.0) {
            return Err(Error::Config(format!(
                "early_stop_delta {} must be nonnegative",
                self.early_stop_delta
            )));
        }
        Ok(())
    }
}
