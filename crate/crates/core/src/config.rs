//! Flat `key = value` run configuration and the named dataset profiles.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::codec::sha256_hex;
use crate::error::{Error, Result};
use crate::eval::Task;
use crate::model::{DecayInput, ModelConfig};
use crate::sampler::{WalkConfig, WindowConfig};
use crate::time::TimeScale;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub enum InitMode {
    Random,
    File(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Transaction,
    Hyperlink,
    Discussion,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transaction" => Ok(Profile::Transaction),
            "hyperlink" => Ok(Profile::Hyperlink),
            "discussion" => Ok(Profile::Discussion),
            _ => Err(Error::Config(format!(
                "unknown profile {s:?} (expected transaction, hyperlink or discussion)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub walk: WalkConfig,
    pub test_fraction: f64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub init: InitMode,
    pub threads: usize,
    pub tasks: Vec<Task>,
    pub label_test_fraction: f64,
    pub ridge_lambda: f64,
    /// Static-edge candidate subsample size; 0 scores every vertex.
    pub candidates: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 0,
            walk: WalkConfig::default(),
            test_fraction: 0.2,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            init: InitMode::Random,
            threads: 0,
            tasks: Task::ALL.to_vec(),
            label_test_fraction: 0.2,
            ridge_lambda: 1.0,
            candidates: 0,
        };
        c.sync();
        c
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "num_starts",
    "max_len",
    "min_len",
    "test_fraction",
    "k",
    "heads",
    "blocks",
    "dropout",
    "decay",
    "structure",
    "time_unit",
    "batch_size",
    "lr",
    "epochs",
    "neg_samples",
    "edge_negatives",
    "window_len",
    "window_step",
    "loss_v",
    "loss_s",
    "loss_edg",
    "loss_toe",
    "checkpoint_every",
    "init",
    "threads",
    "tasks",
    "label_test_fraction",
    "ridge_lambda",
    "candidates",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for key {key}")))
}

fn time_unit_seconds(value: &str) -> Result<f64> {
    match value {
        "days" => Ok(86_400.0),
        "hours" => Ok(3_600.0),
        "seconds" => Ok(1.0),
        _ => parse("time_unit", value),
    }
}

impl RunConfig {
    pub fn profile(p: Profile) -> Self {
        let mut c = Self::default();
        let (m, max, heads, blocks, batch) = match p {
            Profile::Transaction => (10_000, 5, 4, 3, 200),
            Profile::Hyperlink => (200_000, 5, 8, 6, 500),
            Profile::Discussion => (300_000, 10, 8, 6, 300),
        };
        c.walk.num_starts = m;
        c.walk.max_len = max;
        c.walk.min_len = 3;
        c.model.heads = heads;
        c.model.blocks = blocks;
        c.train.batch_size = batch;
        c.sync();
        c
    }

    /// Propagates shared settings into the per-module configs.
    fn sync(&mut self) {
        self.walk.seed = self.seed;
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self.model.max_len = self.walk.max_len;
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "num_starts" => self.walk.num_starts = parse(key, v)?,
            "max_len" => self.walk.max_len = parse(key, v)?,
            "min_len" => self.walk.min_len = parse(key, v)?,
            "test_fraction" => self.test_fraction = parse(key, v)?,
            "k" => self.model.k = parse(key, v)?,
            "heads" => self.model.heads = parse(key, v)?,
            "blocks" => self.model.blocks = parse(key, v)?,
            "dropout" => self.model.dropout = parse(key, v)?,
            "decay" => {
                self.model.decay = match v {
                    "normalized" => DecayInput::Normalized,
                    "raw" => DecayInput::RawSeconds,
                    _ => return Err(Error::Config(format!("decay must be normalized or raw, got {v:?}"))),
                }
            }
            "structure" => self.model.structure = parse(key, v)?,
            "time_unit" => self.model.time_scale = TimeScale { seconds_per_unit: time_unit_seconds(v)? },
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "lr" => self.train.lr = parse(key, v)?,
            "epochs" => self.train.epochs = parse(key, v)?,
            "neg_samples" => self.train.neg_samples = parse(key, v)?,
            "edge_negatives" => self.train.edge_negatives = parse(key, v)?,
            "window_len" => self.train.window.len = parse(key, v)?,
            "window_step" => self.train.window.step = parse(key, v)?,
            "loss_v" => self.train.losses.v = parse(key, v)?,
            "loss_s" => self.train.losses.s = parse(key, v)?,
            "loss_edg" => self.train.losses.edg = parse(key, v)?,
            "loss_toe" => self.train.losses.toe = parse(key, v)?,
            "checkpoint_every" => self.train.checkpoint_every = parse(key, v)?,
            "init" => {
                self.init = if v == "random" {
                    InitMode::Random
                } else {
                    InitMode::File(PathBuf::from(v))
                }
            }
            "threads" => self.threads = parse(key, v)?,
            "tasks" => self.tasks = Task::parse_list(v)?,
            "label_test_fraction" => self.label_test_fraction = parse(key, v)?,
            "ridge_lambda" => self.ridge_lambda = parse(key, v)?,
            "candidates" => self.candidates = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        self.sync();
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.walk.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        for (name, f) in [("test_fraction", self.test_fraction), ("label_test_fraction", self.label_test_fraction)] {
            if !(0.0..1.0).contains(&f) || f <= 0.0 {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {f}")));
            }
        }
        if self.ridge_lambda < 0.0 {
            return Err(Error::Config("ridge_lambda must be non-negative".into()));
        }
        Ok(())
    }

    /// Canonical text form: every key, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let b = |x: bool| if x { "true" } else { "false" };
        let l = self.train.losses;
        let tasks: Vec<&str> = self.tasks.iter().map(|t| t.name()).collect();
        let values: Vec<String> = vec![
            self.seed.to_string(),
            self.walk.num_starts.to_string(),
            self.walk.max_len.to_string(),
            self.walk.min_len.to_string(),
            self.test_fraction.to_string(),
            self.model.k.to_string(),
            self.model.heads.to_string(),
            self.model.blocks.to_string(),
            self.model.dropout.to_string(),
            match self.model.decay {
                DecayInput::Normalized => "normalized".into(),
                DecayInput::RawSeconds => "raw".into(),
            },
            b(self.model.structure).into(),
            self.model.time_scale.seconds_per_unit.to_string(),
            self.train.batch_size.to_string(),
            self.train.lr.to_string(),
            self.train.epochs.to_string(),
            self.train.neg_samples.to_string(),
            self.train.edge_negatives.to_string(),
            self.train.window.len.to_string(),
            self.train.window.step.to_string(),
            b(l.v).into(),
            b(l.s).into(),
            b(l.edg).into(),
            b(l.toe).into(),
            self.train.checkpoint_every.to_string(),
            match &self.init {
                InitMode::Random => "random".into(),
                InitMode::File(p) => p.display().to_string(),
            },
            self.threads.to_string(),
            tasks.join(","),
            self.label_test_fraction.to_string(),
            self.ridge_lambda.to_string(),
            self.candidates.to_string(),
        ];
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }

    pub fn window(&self) -> &WindowConfig {
        &self.train.window
    }
}
