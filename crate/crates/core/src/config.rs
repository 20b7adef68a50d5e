//! Pipeline configuration in a flat `key = value` format.
//!
//! `[section]` headers prefix the keys that follow with `section.`, so
//! `[forest]` then `n_trees = 100` is the key `forest.n_trees`. Lists are
//! comma-separated, ranges are written `lo:hi` (`-inf`/`inf` allowed), and
//! `#` or `;` start a comment line. Unknown and repeated keys are errors.
//!
//! ```text
//! seed = 7
//! train_fraction = 0.7
//!
//! [synth]
//! n_patients = 3000
//! intraop_weight.hypotension = 0.9
//!
//! [forest]
//! n_trees = 100, 300
//! max_features = sqrt, 0.3
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::cohort::default_signal_ranges;
use crate::error::{Error, Result};
use crate::evaluation::MIN_RESAMPLES;
use crate::features::FeatureConfig;
use crate::forest::MaxFeatures;
use crate::outcome::Outcome;
use crate::preop::PreopConfig;
use crate::stacking::ForestGrid;
use crate::synth::{SynthConfig, INTRAOP_DRIVERS, PREOP_DRIVERS};

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synth,
    Csv {
        patients: PathBuf,
        timeseries: PathBuf,
        labs: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub train_fraction: f64,
    pub out_dir: PathBuf,
    pub outcomes: Vec<Outcome>,
    pub data: DataSource,
    pub synth: SynthConfig,
    pub signal_ranges: BTreeMap<String, (f64, f64)>,
    pub features: FeatureConfig,
    pub preop: PreopConfig,
    pub grid: ForestGrid,
    pub cv_folds: usize,
    pub bootstrap_resamples: usize,
    /// Write fitted forests to the run directory.
    pub write_models: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            train_fraction: 0.70,
            out_dir: PathBuf::from("runs"),
            outcomes: Outcome::ALL.to_vec(),
            data: DataSource::Synth,
            synth: SynthConfig::default(),
            signal_ranges: default_signal_ranges(),
            features: FeatureConfig::default(),
            preop: PreopConfig::default(),
            grid: ForestGrid::default(),
            cv_folds: 5,
            bootstrap_resamples: 1000,
            write_models: true,
        }
    }
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Parses `key = value` lines into dotted keys.
pub fn parse_entries(text: &str) -> Result<BTreeMap<String, (usize, String)>> {
    let mut out = BTreeMap::new();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| cfg_err(format!("line {line_no}: unterminated section header")))?
                .trim();
            if name.is_empty() {
                return Err(cfg_err(format!("line {line_no}: empty section name")));
            }
            section = name.to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| cfg_err(format!("line {line_no}: expected `key = value`")))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(cfg_err(format!("line {line_no}: empty key")));
        }
        let key = if section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
        if out.insert(key.clone(), (line_no, v.trim().to_string())).is_some() {
            return Err(cfg_err(format!("line {line_no}: duplicate key `{key}`")));
        }
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| cfg_err(format!("`{key}`: cannot parse `{v}`")))
}

fn bound(key: &str, s: &str) -> Result<f64> {
    match s.trim() {
        "-inf" => Ok(f64::NEG_INFINITY),
        "inf" | "+inf" => Ok(f64::INFINITY),
        other => {
            let v: f64 = num(key, other)?;
            if v.is_nan() {
                return Err(cfg_err(format!("`{key}`: NaN bound")));
            }
            Ok(v)
        }
    }
}

fn range(key: &str, s: &str) -> Result<(f64, f64)> {
    let (lo, hi) = s
        .split_once(':')
        .ok_or_else(|| cfg_err(format!("`{key}`: expected `lo:hi`, got `{s}`")))?;
    let (lo, hi) = (bound(key, lo)?, bound(key, hi)?);
    if lo >= hi {
        return Err(cfg_err(format!("`{key}`: empty range {lo}:{hi}")));
    }
    Ok((lo, hi))
}

fn list<T>(key: &str, v: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    let items: Vec<T> = v.split(',').map(|s| f(s.trim())).collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(cfg_err(format!("`{key}`: empty list")));
    }
    Ok(items)
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(cfg_err(format!("`{key}`: expected true/false, got `{v}`"))),
    }
}

impl PipelineConfig {
    /// Reads a config file; relative data paths resolve against its directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        let mut csv_paths: BTreeMap<&str, PathBuf> = BTreeMap::new();
        let mut source = "synth".to_string();
        let mut synth_seed = None;
        let resolve = |v: &str| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base_dir.join(p)
            }
        };
        for (key, (line, v)) in parse_entries(text)? {
            let v = v.as_str();
            let k = key.as_str();
            let at = |e: Error| match e {
                Error::Config(m) => cfg_err(format!("line {line}: {m}")),
                other => other,
            };
            (|| -> Result<()> {
                match k {
                    "seed" => cfg.seed = num(k, v)?,
                    "train_fraction" => cfg.train_fraction = num(k, v)?,
                    "out_dir" => cfg.out_dir = resolve(v),
                    "outcomes" => {
                        cfg.outcomes = list(k, v, |s| {
                            Outcome::from_name(s).ok_or_else(|| cfg_err(format!("`{k}`: unknown outcome `{s}`")))
                        })?
                    }
                    "write_models" => cfg.write_models = boolean(k, v)?,
                    "data.source" => source = v.to_string(),
                    "data.patients" => {
                        csv_paths.insert("patients", resolve(v));
                    }
                    "data.timeseries" => {
                        csv_paths.insert("timeseries", resolve(v));
                    }
                    "data.labs" => {
                        csv_paths.insert("labs", resolve(v));
                    }
                    "synth.n_patients" => cfg.synth.n_patients = num(k, v)?,
                    "synth.seed" => synth_seed = Some(num(k, v)?),
                    "synth.target_prevalence_7day" => cfg.synth.target_prevalence_7day = num(k, v)?,
                    "synth.sampling_interval_min" => cfg.synth.sampling_interval_min = num(k, v)?,
                    "cleaning.window_w" => cfg.features.cleaning.window_w = num(k, v)?,
                    "cleaning.extreme_sd" => cfg.features.cleaning.extreme_sd = num(k, v)?,
                    "cleaning.peak_sd" => cfg.features.cleaning.peak_sd = num(k, v)?,
                    "cleaning.tail_fraction" => cfg.features.cleaning.tail_fraction = num(k, v)?,
                    "cleaning.min_samples" => cfg.features.cleaning.min_samples = num(k, v)?,
                    "features.encoder_alpha" => cfg.features.encoder_alpha = num(k, v)?,
                    "features.max_missing_fraction" => cfg.features.max_missing_fraction = num(k, v)?,
                    "preop.lambda_grid" => cfg.preop.lambda_grid = list(k, v, |s| num(k, s))?,
                    "preop.df" => cfg.preop.df = num(k, v)?,
                    "preop.folds" => cfg.preop.folds = num(k, v)?,
                    "forest.n_trees" => cfg.grid.n_trees = list(k, v, |s| num(k, s))?,
                    "forest.max_features" => {
                        cfg.grid.max_features = list(k, v, |s| {
                            MaxFeatures::parse(s).ok_or_else(|| cfg_err(format!("`{k}`: invalid value `{s}`")))
                        })?
                    }
                    "forest.min_samples_leaf" => cfg.grid.min_samples_leaf = list(k, v, |s| num(k, s))?,
                    "forest.max_depth" => {
                        cfg.grid.max_depth = list(k, v, |s| match s {
                            "none" => Ok(None),
                            _ => num(k, s).map(Some),
                        })?
                    }
                    "forest.alpha" => cfg.grid.alpha = list(k, v, |s| num(k, s))?,
                    "forest.folds" => cfg.cv_folds = num(k, v)?,
                    "bootstrap.n_resamples" => cfg.bootstrap_resamples = num(k, v)?,
                    _ => {
                        if let Some(name) = k.strip_prefix("synth.preop_weight.") {
                            cfg.synth.preop_effect_weights.insert(name.to_string(), num(k, v)?);
                        } else if let Some(name) = k.strip_prefix("synth.intraop_weight.") {
                            cfg.synth.intraop_effect_weights.insert(name.to_string(), num(k, v)?);
                        } else if let Some(signal) = k.strip_prefix("signals.") {
                            cfg.signal_ranges.insert(signal.to_string(), range(k, v)?);
                        } else if let Some(signal) = k.strip_prefix("features.occupancy.") {
                            let ranges = if v == "none" { Vec::new() } else { list(k, v, |s| range(k, s))? };
                            cfg.features.occupancy_ranges.insert(signal.to_string(), ranges);
                        } else if let Some(lab) = k.strip_prefix("features.lab_normal.") {
                            cfg.features.lab_normal_ranges.insert(lab.to_string(), range(k, v)?);
                        } else {
                            return Err(cfg_err(format!("unknown key `{k}`")));
                        }
                    }
                }
                Ok(())
            })()
            .map_err(at)?;
        }
        cfg.data = match source.as_str() {
            "synth" => DataSource::Synth,
            "csv" => {
                let mut take = |name: &str| {
                    csv_paths
                        .remove(name)
                        .ok_or_else(|| cfg_err(format!("data.source = csv requires `data.{name}`")))
                };
                DataSource::Csv {
                    patients: take("patients")?,
                    timeseries: take("timeseries")?,
                    labs: take("labs")?,
                }
            }
            other => return Err(cfg_err(format!("`data.source`: expected synth or csv, got `{other}`"))),
        };
        cfg.synth.seed = synth_seed.unwrap_or(cfg.seed);
        cfg.sync_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies a new master seed (e.g. from the command line).
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = seed;
        self.sync_seeds();
        self
    }

    fn sync_seeds(&mut self) {
        self.features.seed = crate::stats::derive_seed(self.seed, "features");
        self.preop.seed = crate::stats::derive_seed(self.seed, "preop");
        self.preop.folds = self.preop.folds.max(2);
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.train_fraction;
        if !(t > 0.0 && t < 1.0) {
            return Err(cfg_err(format!("train_fraction must lie in (0, 1), got {t}")));
        }
        if self.outcomes.is_empty() {
            return Err(cfg_err("at least one outcome is required"));
        }
        if self.cv_folds < 2 || self.preop.folds < 2 {
            return Err(cfg_err("cross-validation needs at least 2 folds"));
        }
        if self.bootstrap_resamples < MIN_RESAMPLES {
            return Err(cfg_err(format!(
                "bootstrap.n_resamples must be >= {MIN_RESAMPLES}, got {}",
                self.bootstrap_resamples
            )));
        }
        if self.preop.lambda_grid.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(cfg_err("preop.lambda_grid values must be finite and >= 0"));
        }
        if self.preop.df < 1 {
            return Err(cfg_err("preop.df must be >= 1"));
        }
        let g = &self.grid;
        if g.n_trees.contains(&0) || g.min_samples_leaf.contains(&0) || g.max_depth.contains(&Some(0)) {
            return Err(cfg_err("forest sizes must be >= 1"));
        }
        if g.alpha.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(cfg_err("forest.alpha values must lie in (0, 1]"));
        }
        let c = &self.features.cleaning;
        if c.window_w < 1 || c.min_samples < 1 {
            return Err(cfg_err("cleaning.window_w and cleaning.min_samples must be >= 1"));
        }
        if !(c.extreme_sd > 0.0 && c.peak_sd > 0.0) || !(0.0..0.5).contains(&c.tail_fraction) {
            return Err(cfg_err("cleaning thresholds out of range"));
        }
        let f = &self.features;
        if f.encoder_alpha.is_nan() || f.encoder_alpha <= 0.0 || !(0.0..=1.0).contains(&f.max_missing_fraction) {
            return Err(cfg_err("features.encoder_alpha must be > 0 and max_missing_fraction in [0, 1]"));
        }
        for k in self.synth.preop_effect_weights.keys() {
            if !PREOP_DRIVERS.contains(&k.as_str()) {
                return Err(cfg_err(format!("unknown key `synth.preop_weight.{k}`")));
            }
        }
        for k in self.synth.intraop_effect_weights.keys() {
            if !INTRAOP_DRIVERS.contains(&k.as_str()) {
                return Err(cfg_err(format!("unknown key `synth.intraop_weight.{k}`")));
            }
        }
        self.synth.validate().map_err(|e| cfg_err(e.to_string()))
    }

    /// Canonical `key = value` rendering; parsing it back yields the same
    /// configuration (paths aside, which are written as given).
    pub fn to_ini(&self) -> String {
        let mut s = String::new();
        let join = |v: Vec<String>| v.join(", ");
        let b = |x: f64| {
            if x == f64::INFINITY {
                "inf".to_string()
            } else if x == f64::NEG_INFINITY {
                "-inf".to_string()
            } else {
                x.to_string()
            }
        };
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "train_fraction = {}", self.train_fraction);
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        let _ = writeln!(s, "outcomes = {}", join(self.outcomes.iter().map(|o| o.name().to_string()).collect()));
        let _ = writeln!(s, "write_models = {}", self.write_models);
        let _ = writeln!(s, "\n[data]");
        match &self.data {
            DataSource::Synth => {
                let _ = writeln!(s, "source = synth");
            }
            DataSource::Csv {
                patients,
                timeseries,
                labs,
            } => {
                let _ = writeln!(s, "source = csv");
                let _ = writeln!(s, "patients = {}", patients.display());
                let _ = writeln!(s, "timeseries = {}", timeseries.display());
                let _ = writeln!(s, "labs = {}", labs.display());
            }
        }
        let sy = &self.synth;
        let _ = writeln!(s, "\n[synth]");
        let _ = writeln!(s, "n_patients = {}", sy.n_patients);
        let _ = writeln!(s, "seed = {}", sy.seed);
        let _ = writeln!(s, "target_prevalence_7day = {}", sy.target_prevalence_7day);
        let _ = writeln!(s, "sampling_interval_min = {}", sy.sampling_interval_min);
        for (k, w) in &sy.preop_effect_weights {
            let _ = writeln!(s, "preop_weight.{k} = {w}");
        }
        for (k, w) in &sy.intraop_effect_weights {
            let _ = writeln!(s, "intraop_weight.{k} = {w}");
        }
        let _ = writeln!(s, "\n[signals]");
        for (k, (lo, hi)) in &self.signal_ranges {
            let _ = writeln!(s, "{k} = {}:{}", b(*lo), b(*hi));
        }
        let c = &self.features.cleaning;
        let _ = writeln!(s, "\n[cleaning]");
        let _ = writeln!(s, "window_w = {}", c.window_w);
        let _ = writeln!(s, "extreme_sd = {}", c.extreme_sd);
        let _ = writeln!(s, "peak_sd = {}", c.peak_sd);
        let _ = writeln!(s, "tail_fraction = {}", c.tail_fraction);
        let _ = writeln!(s, "min_samples = {}", c.min_samples);
        let f = &self.features;
        let _ = writeln!(s, "\n[features]");
        let _ = writeln!(s, "encoder_alpha = {}", f.encoder_alpha);
        let _ = writeln!(s, "max_missing_fraction = {}", f.max_missing_fraction);
        for (k, ranges) in &f.occupancy_ranges {
            let r = if ranges.is_empty() {
                "none".to_string()
            } else {
                join(ranges.iter().map(|(lo, hi)| format!("{}:{}", b(*lo), b(*hi))).collect())
            };
            let _ = writeln!(s, "occupancy.{k} = {r}");
        }
        for (k, (lo, hi)) in &f.lab_normal_ranges {
            let _ = writeln!(s, "lab_normal.{k} = {}:{}", b(*lo), b(*hi));
        }
        let p = &self.preop;
        let _ = writeln!(s, "\n[preop]");
        let _ = writeln!(s, "lambda_grid = {}", join(p.lambda_grid.iter().map(f64::to_string).collect()));
        let _ = writeln!(s, "df = {}", p.df);
        let _ = writeln!(s, "folds = {}", p.folds);
        let g = &self.grid;
        let _ = writeln!(s, "\n[forest]");
        let _ = writeln!(s, "n_trees = {}", join(g.n_trees.iter().map(usize::to_string).collect()));
        let _ = writeln!(s, "max_features = {}", join(g.max_features.iter().map(MaxFeatures::to_string).collect()));
        let _ = writeln!(s, "min_samples_leaf = {}", join(g.min_samples_leaf.iter().map(usize::to_string).collect()));
        let depth = g.max_depth.iter().map(|d| d.map_or("none".to_string(), |d| d.to_string())).collect();
        let _ = writeln!(s, "max_depth = {}", join(depth));
        let _ = writeln!(s, "alpha = {}", join(g.alpha.iter().map(f64::to_string).collect()));
        let _ = writeln!(s, "folds = {}", self.cv_folds);
        let _ = writeln!(s, "\n[bootstrap]");
        let _ = writeln!(s, "n_resamples = {}", self.bootstrap_resamples);
        s
    }

    /// Short SHA-256 digest of the canonical rendering, excluding the output
    /// directory.
    pub fn hash(&self) -> String {
        let text: String = self
            .to_ini()
            .lines()
            .filter(|l| !l.starts_with("out_dir ="))
            .map(|l| format!("{l}\n"))
            .collect();
        let digest = Sha256::digest(text.as_bytes());
        hex::encode(digest)[..12].to_string()
    }

    /// `<out_dir>/run-<hash>`.
    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(format!("run-{}", self.hash()))
    }
}
