//! Flat `key = value` experiment configuration with dotted namespaces.
//!
//! Every key has a default; a file only lists what it changes. `#` starts a
//! comment. Unknown keys are rejected. [`ExperimentConfig::to_text`] writes
//! every key, so its output fully determines a run.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augment::AugmentConfig;
use crate::data::DataSource;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossKind};
use crate::nn::Arch;

#[derive(Clone, Debug, PartialEq)]
pub struct Phase1Config {
    pub epochs: usize,
    pub base_lr: f64,
    pub decay_every: usize,
    pub factor: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Zero padding before the random crop, in pixels.
    pub pad: usize,
    pub flip: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phase2Config {
    pub lr: f64,
    pub iterations: usize,
    pub momentum: f64,
    pub eval_every: usize,
    pub h_r: f64,
    pub augment: AugmentConfig,
    /// Write every batch's provenance records to `batches.jsonl`.
    pub dump_batches: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Empty means `<output_dir>/data`.
    pub data_dir: PathBuf,
    pub data_source: DataSource,
    pub cifar_dir: PathBuf,
    pub n_classes: usize,
    pub imbalance: f64,
    pub n_max: usize,
    pub test_per_class: usize,
    pub channels: Vec<usize>,
    pub loss: LossKind,
    pub focal_exponent: f64,
    pub cb_beta: f64,
    pub phase1: Phase1Config,
    pub phase2: Phase2Config,
    /// Line each key was last set on; 0 for command-line overrides.
    origins: BTreeMap<String, usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/desk"),
            data_dir: PathBuf::new(),
            data_source: DataSource::Synthetic,
            cifar_dir: PathBuf::new(),
            n_classes: 10,
            imbalance: 100.0,
            n_max: 500,
            test_per_class: 100,
            channels: vec![16, 32, 64],
            loss: LossKind::CrossEntropy,
            focal_exponent: 2.0,
            cb_beta: 0.999,
            phase1: Phase1Config {
                epochs: 40,
                base_lr: 0.1,
                decay_every: 20,
                factor: 0.1,
                batch_size: 128,
                momentum: 0.9,
                weight_decay: 0.0,
                pad: 4,
                flip: true,
            },
            phase2: Phase2Config {
                lr: 0.001,
                iterations: 800,
                momentum: 0.9,
                eval_every: 50,
                h_r: 0.9,
                augment: AugmentConfig::default(),
                dump_batches: false,
            },
            origins: BTreeMap::new(),
        }
    }
}

fn parse<T: FromStr>(value: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| format!("cannot parse {value:?}: {e}"))
}

fn parse_source(value: &str) -> std::result::Result<DataSource, String> {
    match value {
        "synthetic" => Ok(DataSource::Synthetic),
        "cifar_binary" => Ok(DataSource::CifarBinary),
        _ => Err(format!("unknown data source {value:?} (synthetic, cifar_binary)")),
    }
}

fn source_name(s: DataSource) -> &'static str {
    match s {
        DataSource::Synthetic => "synthetic",
        DataSource::CifarBinary => "cifar_binary",
    }
}

fn path_text(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

impl ExperimentConfig {
    /// Keys in canonical order.
    pub fn keys() -> Vec<&'static str> {
        Self::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let p1 = &self.phase1;
        let p2 = &self.phase2;
        let a = &p2.augment;
        let channels: Vec<String> = self.channels.iter().map(|c| c.to_string()).collect();
        vec![
            ("seed", self.seed.to_string()),
            ("output.dir", path_text(&self.output_dir)),
            ("data.dir", path_text(&self.data_dir)),
            ("data.source", source_name(self.data_source).to_string()),
            ("data.cifar_dir", path_text(&self.cifar_dir)),
            ("data.classes", self.n_classes.to_string()),
            ("data.imbalance", self.imbalance.to_string()),
            ("data.n_max", self.n_max.to_string()),
            ("data.test_per_class", self.test_per_class.to_string()),
            ("model.channels", channels.join(",")),
            ("loss.kind", self.loss.as_str().to_string()),
            ("loss.focal_exponent", self.focal_exponent.to_string()),
            ("loss.cb_beta", self.cb_beta.to_string()),
            ("phase1.epochs", p1.epochs.to_string()),
            ("phase1.base_lr", p1.base_lr.to_string()),
            ("phase1.decay_every", p1.decay_every.to_string()),
            ("phase1.factor", p1.factor.to_string()),
            ("phase1.batch_size", p1.batch_size.to_string()),
            ("phase1.momentum", p1.momentum.to_string()),
            ("phase1.weight_decay", p1.weight_decay.to_string()),
            ("phase1.pad", p1.pad.to_string()),
            ("phase1.flip", p1.flip.to_string()),
            ("phase2.lr", p2.lr.to_string()),
            ("phase2.iterations", p2.iterations.to_string()),
            ("phase2.momentum", p2.momentum.to_string()),
            ("phase2.eval_every", p2.eval_every.to_string()),
            ("phase2.h_r", p2.h_r.to_string()),
            ("phase2.n_t", a.n_t.to_string()),
            ("phase2.n_a", a.n_a.to_string()),
            ("phase2.n_f", a.n_f.to_string()),
            ("phase2.tau_s", a.tau_s.to_string()),
            ("phase2.tau_g", a.tau_g.to_string()),
            ("phase2.gamma_min", a.gamma_min.to_string()),
            ("phase2.gamma_max", a.gamma_max.to_string()),
            ("phase2.dump_batches", p2.dump_batches.to_string()),
        ]
    }

    fn assign(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let p1 = &mut self.phase1;
        let p2 = &mut self.phase2;
        match key {
            "seed" => self.seed = parse(value)?,
            "output.dir" => self.output_dir = PathBuf::from(value),
            "data.dir" => self.data_dir = PathBuf::from(value),
            "data.source" => self.data_source = parse_source(value)?,
            "data.cifar_dir" => self.cifar_dir = PathBuf::from(value),
            "data.classes" => self.n_classes = parse(value)?,
            "data.imbalance" => self.imbalance = parse(value)?,
            "data.n_max" => self.n_max = parse(value)?,
            "data.test_per_class" => self.test_per_class = parse(value)?,
            "model.channels" => {
                self.channels = value.split(',').map(|c| parse(c.trim())).collect::<std::result::Result<_, _>>()?
            }
            "loss.kind" => self.loss = parse(value)?,
            "loss.focal_exponent" => self.focal_exponent = parse(value)?,
            "loss.cb_beta" => self.cb_beta = parse(value)?,
            "phase1.epochs" => p1.epochs = parse(value)?,
            "phase1.base_lr" => p1.base_lr = parse(value)?,
            "phase1.decay_every" => p1.decay_every = parse(value)?,
            "phase1.factor" => p1.factor = parse(value)?,
            "phase1.batch_size" => p1.batch_size = parse(value)?,
            "phase1.momentum" => p1.momentum = parse(value)?,
            "phase1.weight_decay" => p1.weight_decay = parse(value)?,
            "phase1.pad" => p1.pad = parse(value)?,
            "phase1.flip" => p1.flip = parse(value)?,
            "phase2.lr" => p2.lr = parse(value)?,
            "phase2.iterations" => p2.iterations = parse(value)?,
            "phase2.momentum" => p2.momentum = parse(value)?,
            "phase2.eval_every" => p2.eval_every = parse(value)?,
            "phase2.h_r" => p2.h_r = parse(value)?,
            "phase2.n_t" => p2.augment.n_t = parse(value)?,
            "phase2.n_a" => p2.augment.n_a = parse(value)?,
            "phase2.n_f" => p2.augment.n_f = parse(value)?,
            "phase2.tau_s" => p2.augment.tau_s = parse(value)?,
            "phase2.tau_g" => p2.augment.tau_g = parse(value)?,
            "phase2.gamma_min" => p2.augment.gamma_min = parse(value)?,
            "phase2.gamma_max" => p2.augment.gamma_max = parse(value)?,
            "phase2.dump_batches" => p2.dump_batches = parse(value)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Set one key; `line` is reported in errors (0 for overrides).
    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        self.assign(key, value).map_err(|reason| Error::Config {
            line,
            key: key.to_string(),
            reason,
        })?;
        self.origins.insert(key.to_string(), line);
        Ok(())
    }

    /// Whether `key` was set by a file or an override.
    pub fn is_set(&self, key: &str) -> bool {
        self.origins.contains_key(key)
    }

    /// Apply a `key=value` override.
    pub fn apply_override(&mut self, text: &str) -> Result<()> {
        let (k, v) = text.split_once('=').ok_or_else(|| Error::Config {
            line: 0,
            key: text.to_string(),
            reason: "override must look like key=value".into(),
        })?;
        self.set(k.trim(), v.trim(), 0)
    }

    /// Parse a config file body on top of the defaults. Does not validate.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                key: line.to_string(),
                reason: "expected key = value".into(),
            })?;
            cfg.set(k.trim(), v.trim(), i + 1)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Config {
                line: 0,
                key: "config".into(),
                reason: format!("{} does not exist", path.display()),
            });
        }
        Self::parse_text(&std::fs::read_to_string(path)?)
    }

    /// Every key with its value, one per line, in canonical order.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    fn reject(&self, key: &str, reason: impl Into<String>) -> Error {
        Error::Config {
            line: self.origins.get(key).copied().unwrap_or(0),
            key: key.to_string(),
            reason: reason.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit_open = |v: f64| v > 0.0 && v < 1.0;
        let p1 = &self.phase1;
        let p2 = &self.phase2;
        let a = &p2.augment;
        let checks: [(&str, bool, &str); 26] = [
            ("data.classes", self.n_classes >= 2, "need at least 2 classes"),
            ("data.imbalance", self.imbalance.is_finite() && self.imbalance >= 1.0, "must be >= 1"),
            ("data.n_max", self.n_max >= 1, "must be positive"),
            ("data.test_per_class", self.test_per_class >= 1, "must be positive"),
            ("model.channels", !self.channels.is_empty() && !self.channels.contains(&0), "need positive channel counts"),
            ("loss.focal_exponent", self.focal_exponent.is_finite() && self.focal_exponent >= 0.0, "must be >= 0"),
            ("loss.cb_beta", self.cb_beta >= 0.0 && self.cb_beta < 1.0, "must lie in [0, 1)"),
            ("phase1.epochs", p1.epochs >= 1, "must be positive"),
            ("phase1.base_lr", p1.base_lr > 0.0 && p1.base_lr.is_finite(), "must be positive"),
            ("phase1.decay_every", p1.decay_every >= 1, "must be positive"),
            ("phase1.factor", p1.factor > 0.0 && p1.factor <= 1.0, "must lie in (0, 1]"),
            ("phase1.batch_size", p1.batch_size >= 1, "must be positive"),
            ("phase1.momentum", (0.0..1.0).contains(&p1.momentum), "must lie in [0, 1)"),
            ("phase1.weight_decay", p1.weight_decay >= 0.0, "must be >= 0"),
            ("phase1.pad", p1.pad <= 16, "must be at most 16"),
            ("phase2.lr", p2.lr > 0.0 && p2.lr.is_finite(), "must be positive"),
            ("phase2.iterations", p2.iterations >= 1, "must be positive"),
            ("phase2.momentum", (0.0..1.0).contains(&p2.momentum), "must lie in [0, 1)"),
            ("phase2.eval_every", p2.eval_every >= 1, "must be positive"),
            ("phase2.h_r", unit_open(p2.h_r), "must lie in (0, 1)"),
            ("phase2.n_t", a.n_t >= 1, "must be positive"),
            ("phase2.n_f", a.n_f >= 1, "must be positive"),
            ("phase2.tau_s", unit_open(a.tau_s), "must lie in (0, 1)"),
            ("phase2.tau_g", unit_open(a.tau_g), "must lie in (0, 1)"),
            ("phase2.gamma_min", a.gamma_min > 0.0 && a.gamma_min <= a.gamma_max, "need 0 < gamma_min <= gamma_max"),
            ("phase2.gamma_max", a.gamma_max < 1.0, "must be below 1"),
        ];
        for (key, ok, reason) in checks {
            if !ok {
                return Err(self.reject(key, reason));
            }
        }
        if self.data_source == DataSource::CifarBinary && self.cifar_dir.as_os_str().is_empty() {
            return Err(self.reject("data.cifar_dir", "required when data.source = cifar_binary"));
        }
        self.arch().validate().map_err(|e| self.reject("model.channels", e.to_string()))
    }

    pub fn data_dir(&self) -> PathBuf {
        if self.data_dir.as_os_str().is_empty() {
            self.output_dir.join("data")
        } else {
            self.data_dir.clone()
        }
    }

    pub fn arch(&self) -> Arch {
        Arch {
            channels: self.channels.clone(),
            ..Arch::desk(self.n_classes)
        }
    }

    /// The Phase-I loss; class-balanced weights come from `counts`.
    pub fn loss_config(&self, counts: &[usize]) -> LossConfig {
        match self.loss {
            LossKind::CrossEntropy => LossConfig::cross_entropy(),
            LossKind::Focal => LossConfig::focal(self.focal_exponent),
            LossKind::ClassBalanced => LossConfig::class_balanced(counts.to_vec(), self.cb_beta),
        }
    }

    /// `aug` when samples are synthesized, `noaug` for plain re-balancing.
    pub fn phase2_arm(&self) -> &'static str {
        if self.phase2.augment.n_a > 0 {
            "aug"
        } else {
            "noaug"
        }
    }
}
