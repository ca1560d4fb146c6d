//! Run configuration: UTF-8 JSON, fully resolved and echoed per run so any
//! output can be reproduced from its recorded config alone.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelDims {
    pub d_in: usize,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "H")]
    pub h: usize,
    pub blocks: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FadingConfig {
    pub start_epoch: usize,
    pub end_epoch: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct QrConfig {
    /// EMA momentum `m` for the knowledge bank.
    pub momentum: f64,
    /// Floor applied to per-task CE before taking the reciprocal weight.
    pub weight_clamp: f64,
    /// First epoch at which the distillation term is active (None = 0).
    #[serde(default)]
    pub enabled_after_epoch: Option<usize>,
    /// Track a running EMA of per-task CE instead of the batch-local mean.
    #[serde(default)]
    pub use_ce_ema: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SyntheticTask {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SyntheticSpec {
    pub tasks: Vec<SyntheticTask>,
    pub mean_scale: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CsvTask {
    pub classes: usize,
    pub train: String,
    pub test: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CsvSpec {
    pub tasks: Vec<CsvTask>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub enum DataSource {
    #[serde(rename = "synthetic")]
    Synthetic(SyntheticSpec),
    #[serde(rename = "csv")]
    Csv(CsvSpec),
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DataConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(flatten)]
    pub source: DataSource,
}

fn default_batch_size() -> usize {
    32
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub model: ModelDims,
    #[serde(rename = "K")]
    pub k: usize,
    pub rank: usize,
    pub tau: f64,
    /// Router fade window; omitted, it resolves to `[epochs/2, epochs]`.
    #[serde(default)]
    pub fading: Option<FadingConfig>,
    pub qr: QrConfig,
    pub optimizer: OptimizerConfig,
    pub data: DataConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelDims {
                d_in: 32,
                d: 64,
                h: 256,
                blocks: 2,
            },
            k: 16,
            rank: 4,
            tau: 5.0,
            fading: Some(FadingConfig {
                start_epoch: 50,
                end_epoch: 100,
            }),
            qr: QrConfig {
                momentum: 0.9,
                weight_clamp: 0.05,
                enabled_after_epoch: None,
                use_ce_ema: false,
            },
            optimizer: OptimizerConfig {
                lr: 1e-3,
                betas: (0.9, 0.999),
                weight_decay: 0.01,
                epochs: 100,
                warmup_epochs: 10,
            },
            data: DataConfig {
                batch_size: 32,
                source: DataSource::Synthetic(default_benchmark()),
            },
            seed: 42,
        }
    }
}

/// The default desk benchmark: four tasks with matched class counts and a
/// spread of noise scales, giving the tasks distinctly different difficulty.
/// At mean scale 1 every task is learnable to high accuracy; the difficulty
/// spread shows up as convergence speed rather than an accuracy ceiling.
pub fn default_benchmark() -> SyntheticSpec {
    let noise = [0.3, 0.6, 1.0, 1.5];
    let classes = [8usize, 8, 6, 6];
    SyntheticSpec {
        tasks: classes
            .iter()
            .zip(noise)
            .map(|(&classes, noise)| SyntheticTask {
                classes,
                train_per_class: 25,
                test_per_class: 40,
                noise,
            })
            .collect(),
        mean_scale: 1.0,
    }
}

/// Named configurations differing only in the adapter rank.
pub fn preset(name: &str) -> Option<RunConfig> {
    let rank = match name.to_ascii_lowercase().as_str() {
        "emtal-1" => 1,
        "emtal-2" => 2,
        "emtal-4" => 4,
        _ => return None,
    };
    Some(RunConfig {
        rank,
        ..RunConfig::default()
    })
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config json: {e}")))?;
        cfg.fading = Some(cfg.fading());
        cfg.validate()?;
        Ok(cfg)
    }

    /// The fade window, falling back to the second half of the run.
    pub fn fading(&self) -> FadingConfig {
        self.fading.clone().unwrap_or(FadingConfig {
            start_epoch: self.optimizer.epochs / 2,
            end_epoch: self.optimizer.epochs,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Epoch from which the QR term applies (default: from the start).
    pub fn qr_enabled_after(&self) -> usize {
        self.qr.enabled_after_epoch.unwrap_or(0)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        match &self.data.source {
            DataSource::Synthetic(s) => s.tasks.iter().map(|t| t.classes).collect(),
            DataSource::Csv(s) => s.tasks.iter().map(|t| t.classes).collect(),
        }
    }

    pub fn n_class(&self) -> usize {
        self.class_counts().iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.d_in == 0 || m.d == 0 || m.h == 0 {
            return Err(Error::Config("model dims must be positive".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("K must be >= 1".into()));
        }
        if self.model.h % self.k != 0 {
            return Err(Error::Config(format!(
                "K = {} must divide H = {}",
                self.k, self.model.h
            )));
        }
        if self.rank == 0 {
            return Err(Error::Config("rank must be >= 1".into()));
        }
        let per_expert = self.model.h / self.k;
        if self.rank > m.d.min(per_expert) {
            return Err(Error::Config(format!(
                "rank = {} exceeds min(D, H/K) = {}",
                self.rank,
                m.d.min(per_expert)
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be > 0".into()));
        }
        let fading = self.fading();
        if fading.start_epoch >= fading.end_epoch {
            return Err(Error::Config(
                "fading.start_epoch must be < fading.end_epoch".into(),
            ));
        }
        if !(self.qr.momentum > 0.0 && self.qr.momentum < 1.0) {
            return Err(Error::Config("qr.momentum must lie in (0, 1)".into()));
        }
        if !(self.qr.weight_clamp > 0.0) {
            return Err(Error::Config("qr.weight_clamp must be > 0".into()));
        }
        if self.optimizer.warmup_epochs >= self.optimizer.epochs {
            return Err(Error::Config(
                "optimizer.warmup_epochs must be < optimizer.epochs".into(),
            ));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config("optimizer.lr must be > 0".into()));
        }
        if self.data.batch_size == 0 {
            return Err(Error::Config("data.batch_size must be >= 1".into()));
        }
        match &self.data.source {
            DataSource::Synthetic(s) => {
                if s.tasks.is_empty() {
                    return Err(Error::Config("data.synthetic.tasks is empty".into()));
                }
                for (i, t) in s.tasks.iter().enumerate() {
                    if t.classes == 0 || t.train_per_class == 0 || t.test_per_class == 0 {
                        return Err(Error::Config(format!(
                            "data.synthetic.tasks[{i}]: counts must be >= 1"
                        )));
                    }
                    if !(t.noise > 0.0) {
                        return Err(Error::Config(format!(
                            "data.synthetic.tasks[{i}].noise must be > 0"
                        )));
                    }
                }
            }
            DataSource::Csv(s) => {
                if s.tasks.is_empty() {
                    return Err(Error::Config("data.csv.tasks is empty".into()));
                }
                for (i, t) in s.tasks.iter().enumerate() {
                    if t.classes == 0 {
                        return Err(Error::Config(format!(
                            "data.csv.tasks[{i}].classes must be >= 1"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}
