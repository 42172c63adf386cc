//! Model and run configuration with a flat `key=value` text format.
//!
//! Values are layered: preset defaults, then the config file, then
//! command-line overrides. Unknown keys are rejected.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::regularization::SpecAugmentConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncodingMode {
    Gap,
    Sap,
    MlaSap,
    Mcsae,
}

impl EncodingMode {
    pub const ALL: [EncodingMode; 4] = [Self::Gap, Self::Sap, Self::MlaSap, Self::Mcsae];
}

impl FromStr for EncodingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gap" => Ok(Self::Gap),
            "sap" => Ok(Self::Sap),
            "mla-sap" | "mla_sap" => Ok(Self::MlaSap),
            "mcsae" => Ok(Self::Mcsae),
            other => Err(Error::Config(format!(
                "unknown encoding mode {other:?} (expected gap, sap, mla-sap or mcsae)"
            ))),
        }
    }
}

impl fmt::Display for EncodingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gap => "gap",
            Self::Sap => "sap",
            Self::MlaSap => "mla-sap",
            Self::Mcsae => "mcsae",
        })
    }
}

/// Architecture hyperparameters of the residual backbone and its encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub mel_bins: usize,
    pub frames: usize,
    pub widths: [usize; 4],
    pub blocks: [usize; 4],
    pub mode: EncodingMode,
    pub head_hidden: usize,
    pub embedding_dim: usize,
    pub speakers: usize,
    /// Leaky ReLU slope, shared by the backbone and the MCSAE transform layers.
    pub slope: f64,
    pub mask_initial_factor: f64,
}

impl ModelConfig {
    /// Half-width ResNet-34 on 64 mel bins × 1200 frames.
    pub fn full(speakers: usize) -> Self {
        Self {
            mel_bins: 64,
            frames: 1200,
            widths: [32, 64, 128, 256],
            blocks: [3, 4, 6, 3],
            mode: EncodingMode::Mcsae,
            head_hidden: 512,
            embedding_dim: 512,
            speakers,
            slope: 0.01,
            mask_initial_factor: 0.5,
        }
    }

    /// Small preset that keeps every structural property and trains in seconds.
    pub fn desk() -> Self {
        Self {
            mel_bins: 16,
            frames: 64,
            widths: [4, 8, 16, 32],
            blocks: [1, 1, 1, 1],
            speakers: 8,
            ..Self::full(8)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.mel_bins == 0 || self.frames == 0 || self.mel_bins % 8 != 0 || self.frames % 8 != 0 {
            return bad(format!(
                "model.mel_bins ({}) and model.frames ({}) must be positive multiples of 8",
                self.mel_bins, self.frames
            ));
        }
        if self.widths[0] == 0 || self.widths.windows(2).any(|w| w[1] != 2 * w[0]) {
            return bad(format!("model.widths {:?} must double from stage to stage", self.widths));
        }
        if self.blocks.contains(&0) {
            return bad(format!("model.blocks {:?} must all be at least 1", self.blocks));
        }
        if self.speakers < 2 {
            return bad(format!("model.speakers must be at least 2, got {}", self.speakers));
        }
        if self.embedding_dim == 0 || self.head_hidden == 0 {
            return bad("model.embedding_dim and model.head_hidden must be positive".into());
        }
        if !(self.slope > 0.0 && self.slope < 1.0) {
            return bad(format!("model.slope must lie in (0, 1), got {}", self.slope));
        }
        if !(0.0..=1.0).contains(&self.mask_initial_factor) {
            return bad(format!("mask.initial_factor must lie in [0, 1], got {}", self.mask_initial_factor));
        }
        Ok(())
    }

    /// Widths of the pooled taps P1..P5.
    pub fn tap_widths(&self) -> [usize; 5] {
        let [c1, c2, c3, c4] = self.widths;
        [c1, c1, c2, c3, c4]
    }

    /// Width of the vector handed to the fully connected head.
    pub fn pre_head_width(&self) -> usize {
        match self.mode {
            EncodingMode::Gap | EncodingMode::Sap => self.widths[3],
            EncodingMode::MlaSap => self.tap_widths().iter().sum(),
            EncodingMode::Mcsae => 2 * self.widths[3],
        }
    }

    /// Spatial extents (frequency, time) of feature maps F0..F4.
    pub fn map_extents(&self) -> [(usize, usize); 5] {
        let (d, l) = (self.mel_bins, self.frames);
        [(d, l), (d, l), (d / 2, l / 2), (d / 4, l / 4), (d / 8, l / 8)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Global gradient L2-norm cap applied before each step; 0 disables.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            max_epochs: 200,
            clip_norm: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SchedConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub min_lr: f64,
    /// Stop after this many epochs without improvement; 0 disables.
    pub early_stop_patience: usize,
}

impl Default for SchedConfig {
    fn default() -> Self {
        Self {
            factor: 0.1,
            patience: 5,
            min_delta: 1e-3,
            min_lr: 1e-6,
            early_stop_patience: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// `synthetic`, or a directory holding one subdirectory of feature files per speaker.
    pub source: String,
    pub batch_size: usize,
    pub utterances_per_speaker: usize,
    pub noise: f64,
    /// Stop once an epoch reaches this training loss with perfect accuracy; 0 disables.
    pub target_loss: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: "synthetic".into(),
            batch_size: 96,
            utterances_per_speaker: 20,
            noise: 0.5,
            target_loss: 0.0,
        }
    }
}

/// Everything a `train` run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub sched: SchedConfig,
    pub data: DataConfig,
    pub specaug: SpecAugmentConfig,
}

pub const KEYS: &[&str] = &[
    "model.preset",
    "model.mode",
    "model.mel_bins",
    "model.frames",
    "model.widths",
    "model.blocks",
    "model.embedding_dim",
    "model.head_hidden",
    "model.speakers",
    "model.slope",
    "optim.lr",
    "optim.momentum",
    "optim.weight_decay",
    "optim.max_epochs",
    "optim.clip_norm",
    "sched.factor",
    "sched.patience",
    "sched.min_delta",
    "sched.min_lr",
    "sched.early_stop_patience",
    "data.source",
    "data.batch_size",
    "data.utterances_per_speaker",
    "data.noise",
    "data.target_loss",
    "mask.initial_factor",
    "specaug.F",
    "specaug.T",
    "specaug.mF",
    "specaug.mT",
];

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_four(key: &str, value: &str) -> Result<[usize; 4]> {
    let items = value
        .split(',')
        .map(|v| parse_num::<usize>(key, v))
        .collect::<Result<Vec<_>>>()?;
    items
        .try_into()
        .map_err(|_| Error::Config(format!("{key}: expected four comma-separated values, got {value:?}")))
}

/// Splits `key=value` lines, skipping blanks and `#` comments.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, got {line:?}"),
            });
        };
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

impl RunConfig {
    /// Desk-scale run: batch 16, small SpecAugment masks.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            optim: OptimConfig {
                clip_norm: 1.0,
                ..OptimConfig::default()
            },
            sched: SchedConfig::default(),
            data: DataConfig {
                batch_size: 16,
                ..DataConfig::default()
            },
            specaug: SpecAugmentConfig {
                max_freq_width: 2,
                max_time_width: 8,
                freq_masks: 1,
                time_masks: 1,
            },
        }
    }

    pub fn full(speakers: usize) -> Self {
        Self {
            model: ModelConfig::full(speakers),
            optim: OptimConfig::default(),
            sched: SchedConfig::default(),
            data: DataConfig::default(),
            specaug: SpecAugmentConfig::default(),
        }
    }

    /// Builds a config from layered `key=value` pairs. A `model.preset` key in
    /// any layer selects the base; later layers win.
    pub fn from_layers(layers: &[Vec<(String, String)>]) -> Result<Self> {
        for (k, _) in layers.iter().flatten() {
            if !KEYS.contains(&k.as_str()) {
                return Err(Error::Config(format!("unknown key {k:?}")));
            }
        }
        let preset = layers
            .iter()
            .flatten()
            .filter(|(k, _)| k == "model.preset")
            .last()
            .map(|(_, v)| v.as_str())
            .unwrap_or("desk");
        let mut cfg = match preset {
            "desk" => Self::desk(),
            "full" => Self::full(8),
            other => return Err(Error::Config(format!("model.preset: unknown preset {other:?}"))),
        };
        for (k, v) in layers.iter().flatten() {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "model.preset" => {}
            "model.mode" => m.mode = value.parse()?,
            "model.mel_bins" => m.mel_bins = parse_num(key, value)?,
            "model.frames" => m.frames = parse_num(key, value)?,
            "model.widths" => m.widths = parse_four(key, value)?,
            "model.blocks" => m.blocks = parse_four(key, value)?,
            "model.embedding_dim" => m.embedding_dim = parse_num(key, value)?,
            "model.head_hidden" => m.head_hidden = parse_num(key, value)?,
            "model.speakers" => m.speakers = parse_num(key, value)?,
            "model.slope" => m.slope = parse_num(key, value)?,
            "mask.initial_factor" => m.mask_initial_factor = parse_num(key, value)?,
            "optim.lr" => self.optim.lr = parse_num(key, value)?,
            "optim.momentum" => self.optim.momentum = parse_num(key, value)?,
            "optim.weight_decay" => self.optim.weight_decay = parse_num(key, value)?,
            "optim.max_epochs" => self.optim.max_epochs = parse_num(key, value)?,
            "optim.clip_norm" => self.optim.clip_norm = parse_num(key, value)?,
            "sched.factor" => self.sched.factor = parse_num(key, value)?,
            "sched.patience" => self.sched.patience = parse_num(key, value)?,
            "sched.min_delta" => self.sched.min_delta = parse_num(key, value)?,
            "sched.min_lr" => self.sched.min_lr = parse_num(key, value)?,
            "sched.early_stop_patience" => self.sched.early_stop_patience = parse_num(key, value)?,
            "data.source" => self.data.source = value.to_string(),
            "data.batch_size" => self.data.batch_size = parse_num(key, value)?,
            "data.utterances_per_speaker" => self.data.utterances_per_speaker = parse_num(key, value)?,
            "data.noise" => self.data.noise = parse_num(key, value)?,
            "data.target_loss" => self.data.target_loss = parse_num(key, value)?,
            "specaug.F" => self.specaug.max_freq_width = parse_num(key, value)?,
            "specaug.T" => self.specaug.max_time_width = parse_num(key, value)?,
            "specaug.mF" => self.specaug.freq_masks = parse_num(key, value)?,
            "specaug.mT" => self.specaug.time_masks = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.specaug.validate(self.model.mel_bins, self.model.frames)?;
        if self.data.batch_size < 2 {
            return Err(Error::Config("data.batch_size must be at least 2 (batch normalization)".into()));
        }
        if !(self.optim.lr >= 0.0) || !(0.0..1.0).contains(&self.optim.momentum) || self.optim.weight_decay < 0.0 || !(self.optim.clip_norm >= 0.0) {
            return Err(Error::Config("optim.lr, optim.momentum, optim.weight_decay or optim.clip_norm out of range".into()));
        }
        if !(self.sched.factor > 0.0 && self.sched.factor < 1.0) {
            return Err(Error::Config(format!("sched.factor must lie in (0, 1), got {}", self.sched.factor)));
        }
        Ok(())
    }
}
