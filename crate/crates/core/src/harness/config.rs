use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::selection::Strategy;
use crate::training::{LossWeights, TrainConfig};

/// Everything that defines one experiment. Stored on disk as flat
/// `key = value` lines; every key is also a command-line flag.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// I/Q capture to use instead of the simulator.
    pub data_file: Option<PathBuf>,
    pub num_emitters: usize,
    pub per_emitter: usize,
    pub length: usize,
    pub snr_db: f64,
    pub multipath: bool,
    pub test_fraction: f64,
    pub initial_labeled: usize,
    pub rounds: usize,
    pub budget: usize,
    pub strategy: Strategy,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub tau: f64,
    pub queue_depth: usize,
    pub momentum: f64,
    pub alpha: f64,
    pub mc_passes: usize,
    pub seed: Option<u64>,
    pub conv_channels: Vec<usize>,
    pub pretrain: bool,
    pub contrastive: bool,
    pub pretrain_every_round: bool,
    pub cold_start: bool,
    /// Plain CNN reference: no pretraining, cross-entropy only, random picks.
    pub baseline: bool,
    pub save_checkpoints: bool,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data_file: None,
            num_emitters: 4,
            per_emitter: 64,
            length: 256,
            snr_db: 10.0,
            multipath: false,
            test_fraction: 0.25,
            initial_labeled: 16,
            rounds: 4,
            budget: 16,
            strategy: Strategy::KCenter,
            stage1_epochs: 50,
            stage2_epochs: 100,
            lr: 1e-3,
            batch_size: 64,
            tau: 0.2,
            queue_depth: 512,
            momentum: 0.99,
            alpha: 0.1,
            mc_passes: 16,
            seed: None,
            conv_channels: vec![32, 64, 128],
            pretrain: true,
            contrastive: true,
            pretrain_every_round: false,
            cold_start: false,
            baseline: false,
            save_checkpoints: true,
            out_dir: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::config(format!("invalid boolean {value:?} for {key}"))),
    }
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

impl ExperimentConfig {
    pub const KEYS: &'static [&'static str] = &[
        "data_file",
        "num_emitters",
        "per_emitter",
        "length",
        "snr_db",
        "multipath",
        "test_fraction",
        "initial_labeled",
        "rounds",
        "budget",
        "strategy",
        "stage1_epochs",
        "stage2_epochs",
        "lr",
        "batch_size",
        "tau",
        "queue_depth",
        "momentum",
        "alpha",
        "mc_passes",
        "seed",
        "conv_channels",
        "pretrain",
        "contrastive",
        "pretrain_every_round",
        "cold_start",
        "baseline",
        "save_checkpoints",
        "out_dir",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "data_file" => self.data_file = optional_path(value),
            "num_emitters" => self.num_emitters = parse(key, value)?,
            "per_emitter" => self.per_emitter = parse(key, value)?,
            "length" => self.length = parse(key, value)?,
            "snr_db" => self.snr_db = parse(key, value)?,
            "multipath" => self.multipath = parse_bool(key, value)?,
            "test_fraction" => self.test_fraction = parse(key, value)?,
            "initial_labeled" => self.initial_labeled = parse(key, value)?,
            "rounds" => self.rounds = parse(key, value)?,
            "budget" => self.budget = parse(key, value)?,
            "strategy" => self.strategy = value.parse()?,
            "stage1_epochs" => self.stage1_epochs = parse(key, value)?,
            "stage2_epochs" => self.stage2_epochs = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "queue_depth" => self.queue_depth = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "mc_passes" => self.mc_passes = parse(key, value)?,
            "seed" => self.seed = if value == "none" { None } else { Some(parse(key, value)?) },
            "conv_channels" => {
                self.conv_channels = value
                    .split(',')
                    .map(|c| parse(key, c.trim()))
                    .collect::<Result<_>>()?
            }
            "pretrain" => self.pretrain = parse_bool(key, value)?,
            "contrastive" => self.contrastive = parse_bool(key, value)?,
            "pretrain_every_round" => self.pretrain_every_round = parse_bool(key, value)?,
            "cold_start" => self.cold_start = parse_bool(key, value)?,
            "baseline" => self.baseline = parse_bool(key, value)?,
            "save_checkpoints" => self.save_checkpoints = parse_bool(key, value)?,
            "out_dir" => self.out_dir = optional_path(value),
            other => return Err(Error::config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let channels: Vec<String> = self.conv_channels.iter().map(usize::to_string).collect();
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("data_file", path(&self.data_file));
        put("num_emitters", self.num_emitters.to_string());
        put("per_emitter", self.per_emitter.to_string());
        put("length", self.length.to_string());
        put("snr_db", self.snr_db.to_string());
        put("multipath", self.multipath.to_string());
        put("test_fraction", self.test_fraction.to_string());
        put("initial_labeled", self.initial_labeled.to_string());
        put("rounds", self.rounds.to_string());
        put("budget", self.budget.to_string());
        put("strategy", self.strategy.to_string());
        put("stage1_epochs", self.stage1_epochs.to_string());
        put("stage2_epochs", self.stage2_epochs.to_string());
        put("lr", self.lr.to_string());
        put("batch_size", self.batch_size.to_string());
        put("tau", self.tau.to_string());
        put("queue_depth", self.queue_depth.to_string());
        put("momentum", self.momentum.to_string());
        put("alpha", self.alpha.to_string());
        put("mc_passes", self.mc_passes.to_string());
        put("seed", self.seed.map_or("none".to_string(), |s| s.to_string()));
        put("conv_channels", channels.join(","));
        put("pretrain", self.pretrain.to_string());
        put("contrastive", self.contrastive.to_string());
        put("pretrain_every_round", self.pretrain_every_round.to_string());
        put("cold_start", self.cold_start.to_string());
        put("baseline", self.baseline.to_string());
        put("save_checkpoints", self.save_checkpoints.to_string());
        put("out_dir", path(&self.out_dir));
        out
    }

    /// Same experiment in its plain-CNN form.
    pub fn as_baseline(&self) -> Self {
        Self {
            strategy: Strategy::Random,
            alpha: 0.0,
            pretrain: false,
            contrastive: false,
            pretrain_every_round: false,
            baseline: true,
            ..self.clone()
        }
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::config("a seed is required"))
    }

    /// Curve label used in reports.
    pub fn label(&self) -> String {
        if self.baseline {
            "baseline_cnn".to_string()
        } else {
            self.strategy.to_string()
        }
    }

    pub fn validate(&self) -> Result<()> {
        LossWeights::new(self.alpha, self.tau)?;
        if self.budget == 0 && self.rounds > 0 {
            return Err(Error::config("per-round budget must be positive"));
        }
        if self.initial_labeled == 0 {
            return Err(Error::config("initial labeled count must be positive"));
        }
        if self.mc_passes < 2 {
            return Err(Error::config(format!("mc_passes must be at least 2, got {}", self.mc_passes)));
        }
        if self.batch_size == 0 || self.queue_depth == 0 {
            return Err(Error::config("batch size and queue depth must be positive"));
        }
        if self.initial_labeled < self.num_emitters && self.data_file.is_none() {
            log::warn!(
                "initial labeled count {} is below the number of emitters {}",
                self.initial_labeled,
                self.num_emitters
            );
        }
        if self.baseline && (self.pretrain || self.contrastive || self.alpha != 0.0) {
            return Err(Error::config("baseline runs use alpha = 0 without pretraining or contrastive loss"));
        }
        Ok(())
    }

    pub fn model_config(&self, num_classes: usize, length: usize) -> ModelConfig {
        ModelConfig::new(num_classes, length).with_conv_channels(self.conv_channels.clone())
    }

    pub fn train_config(&self, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            weights: LossWeights {
                alpha: self.alpha,
                tau: self.tau,
            },
            contrastive: self.contrastive,
        }
    }
}
