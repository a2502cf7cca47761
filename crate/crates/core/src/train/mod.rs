//! Losses, optimization and the staged training procedure.

pub mod checkpoint;
pub mod loss;
pub mod optim;
pub mod schedule;
mod stage;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::params::Group;

pub use checkpoint::{load_checkpoint, load_into, save_checkpoint};
pub use loss::{diversity_loss, LossConfig};
pub use optim::Adam;
pub use schedule::{annealed_lr, cosine_warm_restarts_lr};
pub use stage::{apply_freezing, run_strategy, train_stage, EpochLog, StageBudgets, StrategyOutcome, TrainingLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Unimodal,
    Mapper,
    Finetune,
    EndToEndOnly,
    MapperOnly,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Unimodal => "unimodal",
            Stage::Mapper => "mapper",
            Stage::Finetune => "finetune",
            Stage::EndToEndOnly => "end_to_end_only",
            Stage::MapperOnly => "mapper_only",
        }
    }

    /// Groups held fixed while this stage trains the multimodal model.
    pub fn frozen_groups(self) -> &'static [Group] {
        match self {
            Stage::Mapper | Stage::MapperOnly => &[Group::Encoder, Group::Decoder, Group::TextEmbed],
            Stage::Finetune | Stage::EndToEndOnly => &[],
            Stage::Unimodal => &[Group::ImageProj, Group::TextProj, Group::CrossProj, Group::TextEmbed],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [
            Stage::Unimodal,
            Stage::Mapper,
            Stage::Finetune,
            Stage::EndToEndOnly,
            Stage::MapperOnly,
        ]
        .into_iter()
        .find(|st| st.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    MapperOnly,
    EndToEnd,
    MapperThenFinetune,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::MapperOnly, Strategy::EndToEnd, Strategy::MapperThenFinetune];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::MapperOnly => "mapper_only",
            Strategy::EndToEnd => "end_to_end",
            Strategy::MapperThenFinetune => "mapper_then_finetune",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    pub lr_min: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Steps per cosine cycle; `None` means one epoch.
    pub restart_period: Option<usize>,
    pub warmup_steps: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults per stage: Adam at 1e-4 for the mapper, 1e-5 with warmup for
    /// end-to-end finetuning, batch 64, 30 epochs.
    pub fn for_stage(stage: Stage) -> Self {
        let (lr, lr_min, warmup_steps) = match stage {
            Stage::Unimodal => (1e-3, 1e-5, 0),
            Stage::Mapper | Stage::MapperOnly | Stage::EndToEndOnly => (1e-4, 1e-6, 0),
            Stage::Finetune => (1e-5, 1e-7, 100),
        };
        Self {
            stage,
            lr,
            lr_min,
            epochs: 30,
            batch_size: 64,
            restart_period: None,
            warmup_steps,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr {
            return Err(Error::Config(format!(
                "{} stage needs 0 <= lr_min <= lr with lr > 0 (lr={}, lr_min={})",
                self.stage, self.lr, self.lr_min
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config(format!("{} stage batch_size must be positive", self.stage)));
        }
        if self.restart_period == Some(0) {
            return Err(Error::Config("restart_period must be positive".into()));
        }
        Ok(())
    }
}
