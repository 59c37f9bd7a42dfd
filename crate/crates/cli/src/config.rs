//! Flat `key = value` run configuration.
//!
//! Keys mirror the `EngineConfig` and `StreamSpec` field names, plus
//! `eval_samples`. `#` starts a comment. `seed` drives both the stream and
//! the engine; `batch_size` and `samples_per_batch` are aliases and must
//! agree when both are given.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use cliptta::datagen::{Shift, StreamSpec};
use cliptta::engine::{EngineConfig, Method};
use cliptta::losses::ScontMode;
use serde::Serialize;

pub const DEFAULT_EVAL_SAMPLES: usize = 2000;

/// Every accepted key, in the order `to_text` writes them.
pub const KEYS: [&str; 23] = [
    "method",
    "seed",
    "batch_size",
    "samples_per_batch",
    "inner_iterations",
    "learning_rate",
    "lambda_reg",
    "lambda_oce",
    "open_set",
    "alpha_init",
    "tau",
    "scont_mode",
    "memory_enabled",
    "episodic",
    "n_classes",
    "d_in",
    "d_emb",
    "n_batches",
    "cluster_spread",
    "shift",
    "ood_fraction",
    "prototype_margin",
    "eval_samples",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub key: Option<String>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(l) = self.line {
            write!(f, "line {l}: ")?;
        }
        if let Some(k) = &self.key {
            write!(f, "key '{k}': ")?;
        }
        f.write_str(&self.message)
    }
}

impl std::error::Error for ConfigError {}

fn fail(line: Option<usize>, key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError { line, key: Some(key.to_string()), message: message.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub engine: EngineConfig,
    pub stream: StreamSpec,
    pub eval_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let engine = EngineConfig::default();
        let stream = StreamSpec { samples_per_batch: engine.batch_size, seed: engine.seed, ..StreamSpec::default() };
        Self { engine, stream, eval_samples: DEFAULT_EVAL_SAMPLES }
    }
}

fn parse_num<T: FromStr>(line: Option<usize>, key: &str, v: &str, what: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| fail(line, key, format!("expected {what}, got '{v}'")))
}

fn parse_bool(line: Option<usize>, key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(fail(line, key, format!("expected true or false, got '{v}'"))),
    }
}

impl RunConfig {
    /// Parses a whole config file over the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut seen = BTreeMap::new();
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lno = Some(n + 1);
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError {
                line: lno,
                key: None,
                message: format!("expected 'key = value', got '{line}'"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if let Some(prev) = seen.insert(k.to_string(), n + 1) {
                return Err(fail(lno, k, format!("duplicate key (first set on line {prev})")));
            }
            cfg.set_at(lno, k, v)?;
        }
        cfg.finish(seen.contains_key("batch_size"), seen.contains_key("samples_per_batch"))?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides (from the command line) on top.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), ConfigError> {
        let mut bs = false;
        let mut spb = false;
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError {
                line: None,
                key: None,
                message: format!("override '{o}' is not key=value"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            bs |= k == "batch_size";
            spb |= k == "samples_per_batch";
            self.set_at(None, k, v)?;
        }
        // a lone alias override moves both
        if bs && !spb {
            self.stream.samples_per_batch = self.engine.batch_size;
        }
        if spb && !bs {
            self.engine.batch_size = self.stream.samples_per_batch;
        }
        self.validate()
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.engine.seed = seed;
        self.stream.seed = seed;
    }

    fn set_at(&mut self, line: Option<usize>, k: &str, v: &str) -> Result<(), ConfigError> {
        let e = &mut self.engine;
        let s = &mut self.stream;
        match k {
            "method" => e.method = v.parse::<Method>().map_err(|err| fail(line, k, err.to_string()))?,
            "seed" => {
                let seed = parse_num(line, k, v, "an unsigned 64-bit integer")?;
                e.seed = seed;
                s.seed = seed;
            }
            "batch_size" => e.batch_size = parse_num(line, k, v, "a positive integer")?,
            "samples_per_batch" => s.samples_per_batch = parse_num(line, k, v, "a positive integer")?,
            "inner_iterations" => e.inner_iterations = parse_num(line, k, v, "a positive integer")?,
            "learning_rate" => e.learning_rate = parse_num(line, k, v, "a number")?,
            "lambda_reg" => e.lambda_reg = parse_num(line, k, v, "a number")?,
            "lambda_oce" => e.lambda_oce = parse_num(line, k, v, "a number")?,
            "open_set" => e.open_set = parse_bool(line, k, v)?,
            "alpha_init" => e.alpha_init = parse_num(line, k, v, "a number")?,
            "tau" => e.tau = parse_num(line, k, v, "a positive number")?,
            "scont_mode" => e.scont_mode = v.parse::<ScontMode>().map_err(|err| fail(line, k, err.to_string()))?,
            "memory_enabled" => e.memory_enabled = parse_bool(line, k, v)?,
            "episodic" => e.episodic = parse_bool(line, k, v)?,
            "n_classes" => s.n_classes = parse_num(line, k, v, "an integer >= 2")?,
            "d_in" => s.d_in = parse_num(line, k, v, "a positive integer")?,
            "d_emb" => s.d_emb = parse_num(line, k, v, "a positive integer")?,
            "n_batches" => s.n_batches = parse_num(line, k, v, "a positive integer")?,
            "cluster_spread" => s.cluster_spread = parse_num(line, k, v, "a number")?,
            "shift" => s.shift = v.parse::<Shift>().map_err(|err| fail(line, k, err.to_string()))?,
            "ood_fraction" => s.ood_fraction = parse_num(line, k, v, "a number in [0, 1)")?,
            "prototype_margin" => s.prototype_margin = parse_num(line, k, v, "a number in (0, 2)")?,
            "eval_samples" => self.eval_samples = parse_num(line, k, v, "a non-negative integer")?,
            _ => return Err(fail(line, k, format!("unknown key (accepted: {})", KEYS.join(", ")))),
        }
        Ok(())
    }

    fn finish(&mut self, has_bs: bool, has_spb: bool) -> Result<(), ConfigError> {
        match (has_bs, has_spb) {
            (true, false) => self.stream.samples_per_batch = self.engine.batch_size,
            (false, true) => self.engine.batch_size = self.stream.samples_per_batch,
            _ => {}
        }
        self.validate()
    }

    /// Cross-field checks, reported against the offending key.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.engine.batch_size != self.stream.samples_per_batch {
            return Err(fail(
                None,
                "samples_per_batch",
                format!("{} disagrees with batch_size {}", self.stream.samples_per_batch, self.engine.batch_size),
            ));
        }
        if self.stream.ood_fraction > 0.0 && !self.engine.open_set {
            return Err(fail(None, "ood_fraction", "OOD contamination requires open_set = true"));
        }
        self.engine.validate().map_err(|e| fail(None, engine_key(&e.to_string()), e.to_string()))?;
        self.stream.validate().map_err(|e| fail(None, stream_key(&e.to_string()), e.to_string()))?;
        Ok(())
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        let e = &self.engine;
        let s = &self.stream;
        let values: [String; 23] = [
            e.method.to_string(),
            e.seed.to_string(),
            e.batch_size.to_string(),
            s.samples_per_batch.to_string(),
            e.inner_iterations.to_string(),
            e.learning_rate.to_string(),
            e.lambda_reg.to_string(),
            e.lambda_oce.to_string(),
            e.open_set.to_string(),
            e.alpha_init.to_string(),
            e.tau.to_string(),
            e.scont_mode.to_string(),
            e.memory_enabled.to_string(),
            e.episodic.to_string(),
            s.n_classes.to_string(),
            s.d_in.to_string(),
            s.d_emb.to_string(),
            s.n_batches.to_string(),
            s.cluster_spread.to_string(),
            s.shift.to_string(),
            s.ood_fraction.to_string(),
            s.prototype_margin.to_string(),
            self.eval_samples.to_string(),
        ];
        KEYS.iter().zip(values).map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Best-effort mapping of a core validation message to its key.
fn engine_key(msg: &str) -> &'static str {
    ["learning_rate", "inner_iterations", "batch_size", "lambda_reg", "lambda_oce", "alpha_init"]
        .into_iter()
        .find(|k| msg.contains(k))
        .unwrap_or("tau")
}

fn stream_key(msg: &str) -> &'static str {
    ["n_classes", "d_emb", "samples_per_batch", "cluster_spread", "ood_fraction", "prototype_margin"]
        .into_iter()
        .find(|k| msg.contains(k))
        .unwrap_or("n_batches")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn comments_blank_lines_and_aliases() {
        let c = RunConfig::parse("# hi\n\nbatch_size = 32  # trailing\nshift = rotation:0.5\nseed=7\n").unwrap();
        assert_eq!(c.stream.samples_per_batch, 32);
        assert_eq!(c.stream.shift, Shift::Rotation(0.5));
        assert_eq!((c.engine.seed, c.stream.seed), (7, 7));
    }

    #[test]
    fn errors_name_the_key_and_line() {
        let e = RunConfig::parse("tau = 0.1\nlearning_rat = 1\n").unwrap_err();
        assert_eq!((e.line, e.key.as_deref()), (Some(2), Some("learning_rat")));
        let e = RunConfig::parse("learning_rate = fast\n").unwrap_err();
        assert!(e.to_string().contains("learning_rate") && e.to_string().contains("fast"));
        let e = RunConfig::parse("tau = -1\n").unwrap_err();
        assert_eq!(e.key.as_deref(), Some("tau"));
        let e = RunConfig::parse("seed = 1\nseed = 2\n").unwrap_err();
        assert!(e.message.contains("duplicate"));
        let e = RunConfig::parse("batch_size = 8\nsamples_per_batch = 9\n").unwrap_err();
        assert_eq!(e.key.as_deref(), Some("samples_per_batch"));
        let e = RunConfig::parse("ood_fraction = 0.2\n").unwrap_err();
        assert_eq!(e.key.as_deref(), Some("ood_fraction"));
        let e = RunConfig::parse("n_classes = 1\n").unwrap_err();
        assert_eq!(e.key.as_deref(), Some("n_classes"));
        assert!(RunConfig::parse("just words\n").unwrap_err().key.is_none());
    }

    #[test]
    fn overrides_apply_on_top() {
        let mut c = RunConfig::default();
        c.apply_overrides(&["batch_size=16".into(), "method=tent".into()]).unwrap();
        assert_eq!((c.engine.batch_size, c.stream.samples_per_batch), (16, 16));
        assert_eq!(c.engine.method, Method::Tent);
        assert!(c.apply_overrides(&["bogus=1".into()]).is_err());
    }
}
