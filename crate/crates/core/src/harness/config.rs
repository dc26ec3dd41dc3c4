//! Flat `key=value` configuration.
//!
//! One assignment per line, `#` starts a comment, lists are comma-separated.
//! Every key is optional; missing keys keep their defaults. [`HarnessConfig::to_text`]
//! writes every key, and parsing that text yields the same config.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::cs4a::{Cs4aConfig, MappingMode};
use crate::csla::{CslaConfig, IntermediatePolicy};
use crate::error::{Error, Result};
use crate::geometry::{parse_sides, ScaleSchedule, INFINITY_1K_SIDES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WorkloadMode {
    Random,
    #[default]
    SelfSimilar,
}

impl fmt::Display for WorkloadMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WorkloadMode::Random => "random",
            WorkloadMode::SelfSimilar => "self_similar",
        })
    }
}

impl FromStr for WorkloadMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "random" => Ok(WorkloadMode::Random),
            "self_similar" => Ok(WorkloadMode::SelfSimilar),
            other => Err(Error::Config(format!("unknown workload '{other}' (expected random|self_similar)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarnessConfig {
    pub schedule: Vec<usize>,
    pub target_scale: usize,
    pub batch: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub seed: u64,
    pub workload: WorkloadMode,
    pub sigma: f64,
    pub cs4a: Cs4aConfig,
    pub csla: CslaConfig,
    /// Fraction of layers that run CS⁴A; the rest run CSLA. Only used to
    /// blend per-kernel speedups into one figure.
    pub layer_split: f64,
    pub bench_runs: usize,
    pub bench_warmups: usize,
    /// Largest scale whose full probability maps `analyze` materialises
    /// (capped at the target scale).
    pub analyze_max_scale: usize,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            schedule: INFINITY_1K_SIDES.to_vec(),
            target_scale: 13,
            batch: 1,
            heads: 2,
            head_dim: 64,
            seed: 0,
            workload: WorkloadMode::SelfSimilar,
            sigma: 0.1,
            cs4a: Cs4aConfig::default(),
            csla: CslaConfig::default(),
            layer_split: 0.6,
            bench_runs: 5,
            bench_warmups: 2,
            analyze_max_scale: 9,
        }
    }
}

/// Named shape presets selectable from the command line.
pub const PRESETS: &[&str] = &["infinity-1k-last"];

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true|false, got '{value}'"))),
    }
}

impl HarnessConfig {
    pub fn schedule(&self) -> Result<ScaleSchedule> {
        ScaleSchedule::new(&self.schedule)
    }

    /// Applies a named preset on top of `self`.
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        match name {
            "infinity-1k-last" => {
                self.schedule = INFINITY_1K_SIDES.to_vec();
                self.target_scale = 13;
                self.batch = 1;
                self.heads = 24;
                self.head_dim = 128;
                Ok(())
            }
            other => Err(Error::Config(format!("unknown preset '{other}' (known: {})", PRESETS.join(", ")))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sched = self.schedule()?;
        sched.check_scale(self.target_scale)?;
        if self.batch == 0 || self.heads == 0 || self.head_dim == 0 {
            return Err(Error::Config("batch, heads and head_dim must be ≥ 1".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma {} must be finite and ≥ 0", self.sigma)));
        }
        if !(0.0..=1.0).contains(&self.layer_split) {
            return Err(Error::Config(format!("layer_split {} not in [0, 1]", self.layer_split)));
        }
        if self.bench_runs == 0 {
            return Err(Error::Config("bench_runs must be ≥ 1".into()));
        }
        self.cs4a.validate()?;
        self.csla.validate()?;
        if self.cs4a.decision_scale >= self.target_scale {
            return Err(Error::Config(format!(
                "decision_scale {} must be below target_scale {}",
                self.cs4a.decision_scale, self.target_scale
            )));
        }
        if self.cs4a.sink_scales > self.cs4a.decision_scale {
            return Err(Error::Config(format!(
                "sink_scales {} exceeds decision_scale {}",
                self.cs4a.sink_scales, self.cs4a.decision_scale
            )));
        }
        if self.cs4a.sink_scales != self.csla.sink_scales {
            return Err(Error::Config("CS⁴A and CSLA must share one sink_scales value".into()));
        }
        if self.analyze_max_scale < 2 {
            return Err(Error::Config("analyze_max_scale must be ≥ 2".into()));
        }
        Ok(())
    }

    /// Every key with its serialized value, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("schedule", join(&self.schedule)),
            ("target_scale", self.target_scale.to_string()),
            ("batch", self.batch.to_string()),
            ("heads", self.heads.to_string()),
            ("head_dim", self.head_dim.to_string()),
            ("seed", self.seed.to_string()),
            ("workload", self.workload.to_string()),
            ("sigma", self.sigma.to_string()),
            ("decision_scale", self.cs4a.decision_scale.to_string()),
            ("topk_fraction", self.cs4a.topk_fraction.to_string()),
            ("query_block", self.cs4a.query_block.to_string()),
            ("sink_scales", self.cs4a.sink_scales.to_string()),
            ("mapping_mode", self.cs4a.mapping_mode.to_string()),
            ("use_cache", self.cs4a.use_cache.to_string()),
            ("windows", join(&self.csla.windows)),
            ("block", self.csla.block.to_string()),
            ("intermediate_policy", self.csla.intermediate.to_string()),
            ("layer_split", self.layer_split.to_string()),
            ("bench_runs", self.bench_runs.to_string()),
            ("bench_warmups", self.bench_warmups.to_string()),
            ("analyze_max_scale", self.analyze_max_scale.to_string()),
        ]
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        self.to_pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "schedule" => self.schedule = parse_sides(value)?,
            "target_scale" => self.target_scale = parse_num(key, value)?,
            "batch" => self.batch = parse_num(key, value)?,
            "heads" => self.heads = parse_num(key, value)?,
            "head_dim" => self.head_dim = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "workload" => self.workload = value.parse()?,
            "sigma" => self.sigma = parse_num(key, value)?,
            "decision_scale" => self.cs4a.decision_scale = parse_num(key, value)?,
            "topk_fraction" => self.cs4a.topk_fraction = parse_num(key, value)?,
            "query_block" => self.cs4a.query_block = parse_num(key, value)?,
            "sink_scales" => {
                let n = parse_num(key, value)?;
                self.cs4a.sink_scales = n;
                self.csla.sink_scales = n;
            }
            "mapping_mode" => self.cs4a.mapping_mode = value.parse::<MappingMode>()?,
            "use_cache" => self.cs4a.use_cache = parse_bool(key, value)?,
            "windows" => {
                self.csla.windows = value
                    .split(',')
                    .map(str::trim)
                    .filter(|t| !t.is_empty())
                    .map(|t| parse_num(key, t))
                    .collect::<Result<_>>()?
            }
            "block" => self.csla.block = parse_num(key, value)?,
            "intermediate_policy" => self.csla.intermediate = value.parse::<IntermediatePolicy>()?,
            "layer_split" => self.layer_split = parse_num(key, value)?,
            "bench_runs" => self.bench_runs = parse_num(key, value)?,
            "bench_warmups" => self.bench_warmups = parse_num(key, value)?,
            "analyze_max_scale" => self.analyze_max_scale = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Parses config text over the defaults. Does not validate cross-key constraints.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{line}'", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", n + 1)));
            }
            cfg.set(key, value.trim()).map_err(|e| match e {
                Error::Config(m) | Error::Schedule(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in map {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}
