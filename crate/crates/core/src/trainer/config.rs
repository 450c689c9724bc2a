use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossWeights, Schedule};
use crate::model::{ArchConfig, BlockKind};
use crate::rigidity::{RigidityThresholds, DEFAULT_BANK_CAPACITY};

/// Flat training configuration, read from and written to TOML.
///
/// The architecture's point count is taken from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Per-epoch learning-rate factor: epoch `e` uses `lr·decay^e`.
    pub decay: f64,
    pub batch: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    pub xi: f64,
    pub bank: usize,
    /// Alternation block length in epochs.
    pub block: usize,
    pub contrast: bool,
    pub consist: bool,
    pub joint: bool,
    pub random_rotation: bool,
    pub channels: Vec<usize>,
    pub recursion: usize,
    pub rot_layers: Vec<usize>,
    pub layer: BlockKind,
    pub seed: u64,
    /// Checkpoint period in epochs (0 disables periodic checkpoints).
    pub checkpoint_every: usize,
    /// e3D logging period in epochs (0 disables it); the last epoch is
    /// always evaluated.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let arch = ArchConfig::default();
        let weights = LossWeights::default();
        let th = RigidityThresholds::default();
        let schedule = Schedule::default();
        TrainConfig {
            epochs: 700,
            lr: 0.001,
            decay: 0.95,
            batch: 64,
            lambda1: weights.lambda1,
            lambda2: weights.lambda2,
            tau: th.tau,
            xi: th.xi,
            bank: DEFAULT_BANK_CAPACITY,
            block: schedule.block,
            contrast: schedule.contrast,
            consist: schedule.consist,
            joint: schedule.joint,
            random_rotation: false,
            channels: arch.channels,
            recursion: arch.recursion,
            rot_layers: arch.rot_layers,
            layer: arch.block,
            seed: 0,
            checkpoint_every: 50,
            eval_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string() + &span_hint(&e, text)))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
        }
    }

    pub fn thresholds(&self) -> RigidityThresholds {
        RigidityThresholds {
            tau: self.tau,
            xi: self.xi,
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            contrast: self.contrast,
            consist: self.consist,
            joint: self.joint,
            block: self.block,
        }
    }

    pub fn arch(&self, points: usize) -> ArchConfig {
        ArchConfig {
            points,
            channels: self.channels.clone(),
            recursion: self.recursion,
            rot_layers: self.rot_layers.clone(),
            block: self.layer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} must be positive")))
            }
        };
        positive("lr", self.lr)?;
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("decay = {} not in (0, 1]", self.decay)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if self.bank == 0 {
            return Err(Error::Config("bank must be positive".into()));
        }
        self.weights().validate()?;
        self.thresholds().validate()?;
        self.schedule().validate()?;
        if self.consist && self.batch < 2 {
            return Err(Error::Config("consistency needs batch >= 2".into()));
        }
        self.arch(4).validate()
    }

    /// Learning rate of epoch `e`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay.powi(epoch as i32)
    }
}

fn span_hint(e: &toml::de::Error, text: &str) -> String {
    let Some(span) = e.span() else {
        return String::new();
    };
    let start = span.start.min(text.len());
    let line = text[..start].matches('\n').count() + 1;
    let key = text
        .lines()
        .nth(line - 1)
        .and_then(|l| l.split_once('='))
        .map(|(k, _)| k.trim())
        .filter(|k| !k.is_empty() && !e.message().contains(k));
    match key {
        Some(k) => format!(" (line {line}, key `{k}`)"),
        None => format!(" (line {line})"),
    }
}

/// Model variants compared in the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Residual-recursive networks, reprojection loss only.
    Rrn,
    RrnContrast,
    RrnConsist,
    /// Both regularizers, alternating.
    Full,
    /// Non-recursive layers, reprojection loss only.
    Vanilla,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Rrn,
        Ablation::RrnContrast,
        Ablation::RrnConsist,
        Ablation::Full,
        Ablation::Vanilla,
    ];

    pub fn apply(self, cfg: &mut TrainConfig) {
        let (contrast, consist, layer) = match self {
            Ablation::Rrn => (false, false, BlockKind::Recursive),
            Ablation::RrnContrast => (true, false, BlockKind::Recursive),
            Ablation::RrnConsist => (false, true, BlockKind::Recursive),
            Ablation::Full => (true, true, BlockKind::Recursive),
            Ablation::Vanilla => (false, false, BlockKind::Plain),
        };
        cfg.contrast = contrast;
        cfg.consist = consist;
        cfg.layer = layer;
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown ablation {s:?} (expected rrn, rrn-contrast, rrn-consist, full or vanilla)"
                ))
            })
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Rrn => "rrn",
            Ablation::RrnContrast => "rrn-contrast",
            Ablation::RrnConsist => "rrn-consist",
            Ablation::Full => "full",
            Ablation::Vanilla => "vanilla",
        })
    }
}
