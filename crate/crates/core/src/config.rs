//! Training configuration and seed derivation.
//!
//! Config files are flat UTF-8 `key = value` lines. `#` starts a comment.
//! Unknown keys are rejected so typos do not silently fall back to defaults.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Additive combine `f(D_e e + D_r r + b_c)`.
    ProjE,
    /// Bilinear-biased combine `f((D_e e + b_pe)(D_r r + b_qr)^T) r`.
    ProjB,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Pointwise,
    Listwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Candidate,
    Weighted,
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterUpdate {
    None,
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Directions {
    /// Every triple yields a tail-prediction and a head-prediction instance.
    Both,
    TailOnly,
}

/// How engineered count features are turned into diagonal weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureScale {
    Raw,
    Log1p,
    /// Each row divided by its maximum, so weights lie in [0, 1].
    RowMax,
}

macro_rules! string_enum {
    ($ty:ty { $($name:literal => $variant:expr),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($name => Ok($variant),)+
                    other => Err(Error::Config(format!(
                        "invalid {} '{}'", stringify!($ty), other
                    ))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let s = match self { $(v if *v == $variant => $name,)+ _ => unreachable!() };
                f.write_str(s)
            }
        }
    };
}

string_enum!(Mode { "proje" => Mode::ProjE, "projb" => Mode::ProjB });
string_enum!(LossKind { "pointwise" => LossKind::Pointwise, "listwise" => LossKind::Listwise });
string_enum!(SamplerKind {
    "candidate" => SamplerKind::Candidate,
    "weighted" => SamplerKind::Weighted,
    "adaptive" => SamplerKind::Adaptive,
});
string_enum!(ClusterUpdate { "none" => ClusterUpdate::None, "adaptive" => ClusterUpdate::Adaptive });
string_enum!(Activation { "sigmoid" => Activation::Sigmoid, "tanh" => Activation::Tanh });
string_enum!(Directions { "both" => Directions::Both, "tail" => Directions::TailOnly });
string_enum!(FeatureScale {
    "raw" => FeatureScale::Raw,
    "log1p" => FeatureScale::Log1p,
    "rowmax" => FeatureScale::RowMax,
});

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub loss: LossKind,
    pub sampler: SamplerKind,
    /// Negative candidate sampling rate.
    pub p_y: f64,
    /// Weight of the cluster-variance regularizer.
    pub delta: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dims_entity: usize,
    pub dims_relation: usize,
    pub seed: u64,
    pub cluster_update: ClusterUpdate,
    pub activation: Activation,
    pub directions: Directions,
    pub feature_scale: FeatureScale,
    pub ema_decay: f64,
    pub ema_floor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::ProjB,
            loss: LossKind::Listwise,
            sampler: SamplerKind::Candidate,
            p_y: 0.5,
            delta: 0.001,
            lr: 0.01,
            weight_decay: 1e-5,
            beta1: 0.8,
            beta2: 0.99,
            eps: 1e-8,
            batch_size: 30,
            epochs: 100,
            dims_entity: 100,
            dims_relation: 75,
            seed: 42,
            cluster_update: ClusterUpdate::None,
            activation: Activation::Sigmoid,
            directions: Directions::TailOnly,
            feature_scale: FeatureScale::RowMax,
            ema_decay: 0.9,
            ema_floor: 0.05,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
}

impl TrainConfig {
    /// Sets one key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key.trim() {
            "mode" => self.mode = value.parse()?,
            "loss" => self.loss = value.parse()?,
            "sampler" => self.sampler = value.parse()?,
            "p_y" => self.p_y = parse_num(key, value)?,
            "delta" => self.delta = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "beta1" => self.beta1 = parse_num(key, value)?,
            "beta2" => self.beta2 = parse_num(key, value)?,
            "eps" => self.eps = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "dims_entity" => self.dims_entity = parse_num(key, value)?,
            "dims_relation" => self.dims_relation = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "cluster_update" => self.cluster_update = value.parse()?,
            "activation" => self.activation = value.parse()?,
            "directions" => self.directions = value.parse()?,
            "feature_scale" => self.feature_scale = value.parse()?,
            "ema_decay" => self.ema_decay = parse_num(key, value)?,
            "ema_floor" => self.ema_floor = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", idx + 1))
            })?;
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", idx + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_y > 0.0 && self.p_y <= 1.0) {
            return Err(Error::Config(format!(
                "p_y must be in (0, 1], got {}",
                self.p_y
            )));
        }
        if self.delta < 0.0 || !self.delta.is_finite() {
            return Err(Error::Config("delta must be >= 0".into()));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config("lr must be > 0".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("beta1 and beta2 must be in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.dims_entity == 0 || self.dims_relation == 0 {
            return Err(Error::Config("dims must be >= 1".into()));
        }
        if self.mode == Mode::ProjE && self.dims_entity != self.dims_relation {
            return Err(Error::Config(
                "proje mode needs dims_entity == dims_relation".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.ema_decay) || self.ema_floor < 0.0 {
            return Err(Error::Config(
                "ema_decay must be in [0,1), ema_floor >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Canonical `key = value` rendering; parsing it back yields `self`.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut push = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        push("mode", self.mode.to_string());
        push("loss", self.loss.to_string());
        push("sampler", self.sampler.to_string());
        push("p_y", format!("{:?}", self.p_y));
        push("delta", format!("{:?}", self.delta));
        push("lr", format!("{:?}", self.lr));
        push("weight_decay", format!("{:?}", self.weight_decay));
        push("beta1", format!("{:?}", self.beta1));
        push("beta2", format!("{:?}", self.beta2));
        push("eps", format!("{:?}", self.eps));
        push("batch_size", self.batch_size.to_string());
        push("epochs", self.epochs.to_string());
        push("dims_entity", self.dims_entity.to_string());
        push("dims_relation", self.dims_relation.to_string());
        push("seed", self.seed.to_string());
        push("cluster_update", self.cluster_update.to_string());
        push("activation", self.activation.to_string());
        push("directions", self.directions.to_string());
        push("feature_scale", self.feature_scale.to_string());
        push("ema_decay", format!("{:?}", self.ema_decay));
        push("ema_floor", format!("{:?}", self.ema_floor));
        s
    }

    /// Short hex digest of the canonical rendering.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_kv().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Derives an independent seed for one subsystem from the root seed.
pub fn derive_seed(root: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}
