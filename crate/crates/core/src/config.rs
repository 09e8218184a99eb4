//! Flat `key=value` run configuration.
//!
//! Values come from three layers, later ones winning: built-in defaults, a
//! config file, and command-line flags named exactly like the keys.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::attention::AggregationParams;
use crate::cut::{CutParams, CutTerms, TauMode};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected key=value, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}: {message}")]
    BadValue {
        key: String,
        value: String,
        message: String,
    },
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("missing required key {0}")]
    Missing(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    AttentionCut,
    Decoder,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "attentioncut" => Ok(Self::AttentionCut),
            "decoder" => Ok(Self::Decoder),
            other => Err(format!("unknown mode {other:?} (expected attentioncut or decoder)")),
        }
    }
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::AttentionCut => "attentioncut",
            Self::Decoder => "decoder",
        }
    }
}

/// Named energy-term presets.
pub fn terms_from_str(s: &str) -> Result<CutTerms, String> {
    Ok(match s {
        "full" => CutTerms::FULL,
        "cross" => CutTerms::CROSS_ONLY,
        "refine" => CutTerms::REFINE_ONLY,
        "objectness" => CutTerms::OBJECTNESS,
        "spatial" => CutTerms::SPATIAL,
        "semantic" => CutTerms::SEMANTIC,
        other => {
            return Err(format!(
                "unknown terms {other:?} (expected full, cross, refine, objectness, spatial or semantic)"
            ))
        }
    })
}

fn terms_name(t: CutTerms) -> &'static str {
    match t {
        CutTerms::CROSS_ONLY => "cross",
        CutTerms::REFINE_ONLY => "refine",
        CutTerms::OBJECTNESS => "objectness",
        CutTerms::SPATIAL => "spatial",
        CutTerms::SEMANTIC => "semantic",
        _ => "full",
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub manifest: Option<PathBuf>,
    pub out: PathBuf,
    pub mode: Mode,
    /// Decoder checkpoint directory (decoder mode).
    pub checkpoint: Option<PathBuf>,
    /// Worker threads; 0 uses every logical core.
    pub workers: usize,
    pub cut: CutParams,
    pub aggregation: AggregationParams,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            manifest: None,
            out: PathBuf::from("out"),
            mode: Mode::AttentionCut,
            checkpoint: None,
            workers: 0,
            cut: CutParams::default(),
            aggregation: AggregationParams::default(),
        }
    }
}

/// Every recognised key, in the order `to_text` writes them.
pub const KEYS: [&str; 17] = [
    "manifest",
    "out",
    "mode",
    "checkpoint",
    "workers",
    "tau_mode",
    "tau",
    "n_seeds",
    "rng_seed",
    "lambda_phi",
    "lambda_psi",
    "lambda",
    "long_range_k",
    "terms",
    "top_k",
    "r",
    "r_s",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        message: e.to_string(),
    })
}

/// `key=value` lines; blank lines and `#` comments are ignored.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            text: raw.to_string(),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |message: String| ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            message,
        };
        match key {
            "manifest" => self.manifest = Some(PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            "mode" => self.mode = value.parse().map_err(bad)?,
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "workers" => self.workers = parse(key, value)?,
            "tau_mode" => {
                let mode: TauMode = value.parse().map_err(bad)?;
                // keep an explicitly configured tau when switching to fixed
                self.cut.tau_mode = match (mode, self.cut.tau_mode) {
                    (TauMode::Fixed(_), TauMode::Fixed(t)) => TauMode::Fixed(t),
                    (m, _) => m,
                };
            }
            "tau" => {
                let t: f64 = parse(key, value)?;
                if !(0.0..=1.0).contains(&t) {
                    return Err(bad("tau must lie in [0, 1]".into()));
                }
                self.cut.tau_mode = TauMode::Fixed(t);
            }
            "n_seeds" => {
                self.cut.n_seeds = parse(key, value)?;
                if self.cut.n_seeds == 0 {
                    return Err(bad("need at least one seed".into()));
                }
            }
            "rng_seed" => self.cut.rng_seed = parse(key, value)?,
            "lambda_phi" => self.cut.lambda_phi = non_negative(key, value)?,
            "lambda_psi" => self.cut.lambda_psi = non_negative(key, value)?,
            "lambda" => self.cut.lambda = non_negative(key, value)?,
            "long_range_k" => self.cut.long_range_k = parse(key, value)?,
            "terms" => self.cut.terms = terms_from_str(value).map_err(bad)?,
            "top_k" => self.aggregation.k = positive(key, value)?,
            "r" => self.aggregation.r = positive(key, value)?,
            "r_s" => self.aggregation.r_s = positive(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Apply pairs in order.
    pub fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<(), ConfigError> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        let pairs = parse_pairs(text)?;
        self.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    /// Defaults, then the file (if any), then flag overrides.
    pub fn resolve<'a>(
        file: Option<&Path>,
        flags: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
            cfg.apply_text(&text)?;
        }
        cfg.apply(flags)?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").unwrap();
        if let Some(m) = &self.manifest {
            kv("manifest", m.display().to_string());
        }
        kv("out", self.out.display().to_string());
        kv("mode", self.mode.as_str().into());
        if let Some(c) = &self.checkpoint {
            kv("checkpoint", c.display().to_string());
        }
        kv("workers", self.workers.to_string());
        match self.cut.tau_mode {
            TauMode::Otsu => kv("tau_mode", "otsu".into()),
            TauMode::Fixed(t) => {
                kv("tau_mode", "fixed".into());
                kv("tau", t.to_string());
            }
        }
        kv("n_seeds", self.cut.n_seeds.to_string());
        kv("rng_seed", self.cut.rng_seed.to_string());
        kv("lambda_phi", self.cut.lambda_phi.to_string());
        kv("lambda_psi", self.cut.lambda_psi.to_string());
        kv("lambda", self.cut.lambda.to_string());
        kv("long_range_k", self.cut.long_range_k.to_string());
        kv("terms", terms_name(self.cut.terms).into());
        kv("top_k", self.aggregation.k.to_string());
        kv("r", self.aggregation.r.to_string());
        kv("r_s", self.aggregation.r_s.to_string());
        s
    }

    pub fn manifest(&self) -> Result<&Path, ConfigError> {
        self.manifest.as_deref().ok_or(ConfigError::Missing("manifest"))
    }
}

fn non_negative(key: &str, value: &str) -> Result<f64, ConfigError> {
    let v: f64 = parse(key, value)?;
    if !(v >= 0.0 && v.is_finite()) {
        return Err(ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            message: "must be a finite non-negative number".into(),
        });
    }
    Ok(v)
}

fn positive(key: &str, value: &str) -> Result<usize, ConfigError> {
    let v: usize = parse(key, value)?;
    if v == 0 {
        return Err(ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            message: "must be at least 1".into(),
        });
    }
    Ok(v)
}
