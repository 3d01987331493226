use std::fmt::Write as _;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::simnet::{format_module_specs, parse_module_specs, ModelConfig, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    /// Every module steps once per batch.
    Parallel,
    /// Module 1 for all epochs, then module 2, and so on.
    Sequential,
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(Schedule::Parallel),
            "sequential" => Ok(Schedule::Sequential),
            _ => Err(Error::Config(format!("unknown schedule `{s}`"))),
        }
    }
}

impl Schedule {
    pub fn as_str(self) -> &'static str {
        match self {
            Schedule::Parallel => "parallel",
            Schedule::Sequential => "sequential",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub kl_collapse_threshold: f64,
}

pub const KEYS: [&str; 12] = [
    "variant",
    "channels",
    "gru_dim",
    "module_specs",
    "K",
    "beta",
    "seed",
    "epochs",
    "lr",
    "batch_size",
    "schedule",
    "kl_collapse_threshold",
];

impl Default for TrainConfig {
    fn default() -> Self {
        Self::full(Variant::Sim)
    }
}

impl TrainConfig {
    pub fn full(variant: Variant) -> Self {
        Self {
            model: ModelConfig::full(variant),
            epochs: 1000,
            lr: 2e-4,
            batch_size: 8,
            schedule: Schedule::Parallel,
            kl_collapse_threshold: 1e-3,
        }
    }

    /// 64 channels, 64-unit GRU, 60 epochs.
    pub fn reduced(variant: Variant) -> Self {
        Self {
            model: ModelConfig::reduced(variant),
            epochs: 60,
            ..Self::full(variant)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    /// Apply `key=value` lines on top of `self`. `#` starts a comment.
    pub fn apply(mut self, text: &str) -> Result<Self> {
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", n + 1)));
            }
            seen.push(key.to_string());
            self.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("`{key}` has invalid value `{v}`")))
        }
        match key {
            "variant" => self.model.variant = value.parse()?,
            "channels" => self.model.channels = num(key, value)?,
            "gru_dim" => self.model.gru_dim = num(key, value)?,
            "module_specs" => self.model.modules = parse_module_specs(value)?,
            "K" => self.model.k = num(key, value)?,
            "beta" => self.model.beta = num(key, value)?,
            "seed" => self.model.seed = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "schedule" => self.schedule = value.parse()?,
            "kl_collapse_threshold" => self.kl_collapse_threshold = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Canonical `key=value` text, one line per key in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k}={v}").expect("write to String");
        put("variant", m.variant.to_string());
        put("channels", m.channels.to_string());
        put("gru_dim", m.gru_dim.to_string());
        put("module_specs", format_module_specs(&m.modules));
        put("K", m.k.to_string());
        put("beta", m.beta.to_string());
        put("seed", m.seed.to_string());
        put("epochs", self.epochs.to_string());
        put("lr", self.lr.to_string());
        put("batch_size", self.batch_size.to_string());
        put("schedule", self.schedule.as_str().to_string());
        put("kl_collapse_threshold", self.kl_collapse_threshold.to_string());
        s
    }

    /// First 16 hex digits of the SHA-256 of [`Self::to_text`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
