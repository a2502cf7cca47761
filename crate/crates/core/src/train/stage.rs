//! Stage-wise training of the assembled model and the strategy compositions.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{cosine_warm_restarts_lr, Adam, LossConfig, Stage, Strategy, TrainConfig};
use crate::decoder::EpochAccumulator;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_model, MetricReport};
use crate::model::{batch_loss, Example, VerLM};
use crate::params::{Ctx, Group};
use crate::text::Vocab;

/// One line of the training log. `lr` is the largest rate used during the
/// epoch, and the loss terms are token-weighted epoch means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: Stage,
    pub loss: f64,
    pub ce: f64,
    pub entropy: f64,
    pub lr: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} stage={} loss={:e} ce={:e} entropy={:e} lr={:e}",
            self.epoch, self.stage, self.loss, self.ce, self.entropy, self.lr
        )
    }
}

impl FromStr for EpochLog {
    type Err = Error;
    fn from_str(line: &str) -> Result<Self> {
        let mut fields = std::collections::BTreeMap::new();
        for kv in line.split_whitespace() {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad log field {kv:?}")))?;
            fields.insert(k, v);
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| Error::Format(format!("log line missing {k}")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("log field {k} is not a number")))
        };
        Ok(Self {
            epoch: get("epoch")?
                .parse()
                .map_err(|_| Error::Format("log epoch is not an integer".into()))?,
            stage: get("stage")?.parse()?,
            loss: num("loss")?,
            ce: num("ce")?,
            entropy: num("entropy")?,
            lr: num("lr")?,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub entries: Vec<EpochLog>,
}

impl TrainingLog {
    pub fn extend(&mut self, other: TrainingLog) {
        self.entries.extend(other.entries);
    }

    pub fn last(&self) -> Option<&EpochLog> {
        self.entries.last()
    }

    pub fn stage_entries(&self, stage: Stage) -> impl Iterator<Item = &EpochLog> {
        self.entries.iter().filter(move |e| e.stage == stage)
    }

    /// Line-delimited text form, one record per epoch.
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|e| format!("{e}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(Self {
            entries: text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(str::parse)
                .collect::<Result<_>>()?,
        })
    }
}

/// Sets each group's freeze flag for `stage`.
pub fn apply_freezing(model: &mut VerLM, stage: Stage) {
    let frozen = stage.frozen_groups();
    for g in Group::ALL {
        model.params.set_frozen(g, frozen.contains(&g));
    }
}

/// Trains `model` on `data` for one stage: freezes per stage, shuffles with
/// the stage seed, takes one Adam step per batch.
pub fn train_stage(model: &mut VerLM, data: &[Example], cfg: &TrainConfig, loss_cfg: &LossConfig) -> Result<TrainingLog> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input(format!("{} stage has no training examples", cfg.stage)));
    }
    apply_freezing(model, cfg.stage);
    model.params.zero_grad();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let mut adam = Adam::new();
    let mut step = 0;
    let mut log = TrainingLog::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = EpochAccumulator::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &data[i]).collect();
            let grads = {
                let mut ctx = Ctx::new(&model.params, true);
                let (loss, parts, tokens) = batch_loss(&mut ctx, &model.config, &batch, loss_cfg)?;
                acc.add(&parts, tokens);
                ctx.backward(loss)?
            };
            model.params.accumulate(&grads)?;
            let lr = cosine_warm_restarts_lr(step, cfg, steps_per_epoch);
            acc.lr = acc.lr.max(lr);
            adam.step(&mut model.params, lr)?;
            step += 1;
        }
        log.entries.push(acc.finish(epoch + 1, cfg.stage));
    }
    Ok(log)
}

/// Per-stage configs for the strategies. Single-stage strategies run for
/// `mapper.epochs + finetune.epochs` so every strategy gets the same number
/// of optimizer steps.
#[derive(Debug, Clone, PartialEq)]
pub struct StageBudgets {
    pub mapper: TrainConfig,
    pub finetune: TrainConfig,
    pub end_to_end: TrainConfig,
}

impl Default for StageBudgets {
    fn default() -> Self {
        Self {
            mapper: TrainConfig::for_stage(Stage::Mapper),
            finetune: TrainConfig::for_stage(Stage::Finetune),
            end_to_end: TrainConfig::for_stage(Stage::EndToEndOnly),
        }
    }
}

impl StageBudgets {
    pub fn total_epochs(&self) -> usize {
        self.mapper.epochs + self.finetune.epochs
    }

    /// Stage configs a strategy runs, in order.
    pub fn plan(&self, strategy: Strategy) -> Vec<TrainConfig> {
        let total = self.total_epochs();
        match strategy {
            Strategy::MapperOnly => vec![TrainConfig {
                stage: Stage::MapperOnly,
                epochs: total,
                ..self.mapper.clone()
            }],
            Strategy::EndToEnd => vec![TrainConfig {
                stage: Stage::EndToEndOnly,
                epochs: total,
                ..self.end_to_end.clone()
            }],
            Strategy::MapperThenFinetune => vec![self.mapper.clone(), self.finetune.clone()],
        }
    }

    /// Total optimizer steps a strategy takes on `n` examples.
    pub fn steps(&self, strategy: Strategy, n: usize) -> usize {
        self.plan(strategy)
            .iter()
            .map(|c| c.epochs * n.div_ceil(c.batch_size))
            .sum()
    }
}

#[derive(Debug, Clone)]
pub struct StrategyOutcome {
    pub strategy: Strategy,
    pub log: TrainingLog,
    pub report: MetricReport,
}

/// Runs the stage composition named by `strategy` and evaluates the result.
pub fn run_strategy(
    strategy: Strategy,
    model: &mut VerLM,
    train: &[Example],
    eval: &[Example],
    vocab: &Vocab,
    budgets: &StageBudgets,
    loss_cfg: &LossConfig,
) -> Result<StrategyOutcome> {
    let mut log = TrainingLog::default();
    for cfg in budgets.plan(strategy) {
        log.extend(train_stage(model, train, &cfg, loss_cfg)?);
    }
    let report = evaluate_model(model, eval, vocab, loss_cfg)?;
    Ok(StrategyOutcome { strategy, log, report })
}
