//! Run configuration, the end-to-end training pipeline and the ablation
//! runner.
//!
//! Configs are flat `key = value` files. `#` starts a comment. Every key is
//! optional and unknown keys are rejected.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{self, noise_seed, Dataset, SplitSpec, Tier};
use crate::decoder::lm_pretrain;
use crate::encoder::{pretrain_encoder, EncoderEpoch, EncoderKind, EncoderSpec};
use crate::error::{Error, Result};
use crate::mapper::{ClipMode, FusionConfig, ModelDims};
use crate::metrics::{reports_csv, MetricReport};
use crate::autograd::{GradCheckOptions, GradCheckReport};
use crate::model::{Example, ModelConfig, VerLM};
use crate::params::Group;
use crate::tensor::Tensor;
use crate::text::{Vocab, PROMPT_LEN};
use crate::train::{run_strategy, EpochLog, LossConfig, Stage, StageBudgets, Strategy, TrainConfig, TrainingLog};

/// Decoder presets: `(d, decoder_layers, heads)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LmSize {
    Small,
    Medium,
    Large,
}

impl LmSize {
    pub const ALL: [LmSize; 3] = [LmSize::Small, LmSize::Medium, LmSize::Large];

    pub fn name(self) -> &'static str {
        match self {
            LmSize::Small => "small",
            LmSize::Medium => "medium",
            LmSize::Large => "large",
        }
    }

    pub fn shape(self) -> (usize, usize, usize) {
        match self {
            LmSize::Small => (32, 2, 4),
            LmSize::Medium => (64, 4, 4),
            LmSize::Large => (96, 6, 6),
        }
    }

    fn apply(self, dims: &mut ModelDims) {
        (dims.d, dims.decoder_layers, dims.heads) = self.shape();
    }
}

impl fmt::Display for LmSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LmSize {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        LmSize::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown lm_size {s:?} (expected small, medium or large)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Directory holding `train.txt` and `test.txt`. `None` generates the
    /// splits in memory from `dataset_seed` and `split`.
    pub dataset: Option<PathBuf>,
    pub dataset_seed: u64,
    pub split: SplitSpec,
    pub out_dir: PathBuf,
    pub tier: Tier,
    pub strategy: Strategy,
    pub lm_size: Option<LmSize>,
    /// `t` is fixed by the prompt and `vocab` comes from the data.
    pub dims: ModelDims,
    pub max_target: usize,
    pub fusion: FusionConfig,
    pub encoder: EncoderSpec,
    pub loss: LossConfig,
    pub encoder_pretrain: TrainConfig,
    pub lm_pretrain: TrainConfig,
    pub budgets: StageBudgets,
}

impl Default for RunConfig {
    fn default() -> Self {
        let dims = ModelDims::default();
        let mut budgets = StageBudgets::default();
        for c in [&mut budgets.mapper, &mut budgets.finetune, &mut budgets.end_to_end] {
            c.epochs = 10;
            c.batch_size = 32;
        }
        budgets.finetune.warmup_steps = 16;
        let mut encoder_pretrain = TrainConfig::for_stage(Stage::Unimodal);
        encoder_pretrain.epochs = 20;
        let mut lm = TrainConfig::for_stage(Stage::Unimodal);
        lm.epochs = 10;
        lm.batch_size = 32;
        Self {
            seed: 0,
            dataset: None,
            dataset_seed: 0,
            split: SplitSpec::default(),
            out_dir: PathBuf::from("runs/default"),
            tier: Tier::Concise,
            strategy: Strategy::MapperThenFinetune,
            lm_size: None,
            dims,
            max_target: 96,
            fusion: FusionConfig::default(),
            encoder: EncoderSpec::variant(EncoderKind::A, dims.h),
            loss: LossConfig::default(),
            encoder_pretrain,
            lm_pretrain: lm,
            budgets,
        }
    }
}

const STAGE_KEYS: [&str; 5] = ["encoder_pretrain", "lm_pretrain", "mapper", "finetune", "end_to_end"];
const STAGE_FIELDS: [&str; 6] = ["lr", "lr_min", "epochs", "batch_size", "restart_period", "warmup_steps"];

/// Keys accepted by [`RunConfig::parse`], in the order they are written.
pub fn config_keys() -> Vec<String> {
    let mut keys: Vec<String> = [
        "seed",
        "dataset",
        "dataset_seed",
        "train_pairs",
        "test_pairs",
        "identities",
        "match_fraction",
        "out_dir",
        "tier",
        "strategy",
        "lm_size",
        "h",
        "s",
        "c",
        "d",
        "heads",
        "proj_layers",
        "fusion_layers",
        "decoder_layers",
        "max_len",
        "max_target",
        "lambda",
        "epsilon",
        "encoder",
        "encoder_layers",
        "encoder_hidden",
        "use_sep",
        "use_cross_projection",
        "use_text_projection",
        "clip",
        "share_image_projection",
    ]
    .into_iter()
    .map(String::from)
    .collect();
    for s in STAGE_KEYS {
        keys.extend(STAGE_FIELDS.iter().map(|f| format!("{s}.{f}")));
    }
    keys
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {raw:?} as {}", std::any::type_name::<T>())))
}

fn flag(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {raw:?}"))),
    }
}

fn clip_name(c: ClipMode) -> &'static str {
    match c {
        ClipMode::KeepContent => "keep_content",
        ClipMode::KeepConstants => "keep_constants",
    }
}

impl RunConfig {
    pub fn stage(&self, name: &str) -> Option<&TrainConfig> {
        match name {
            "encoder_pretrain" => Some(&self.encoder_pretrain),
            "lm_pretrain" => Some(&self.lm_pretrain),
            "mapper" => Some(&self.budgets.mapper),
            "finetune" => Some(&self.budgets.finetune),
            "end_to_end" => Some(&self.budgets.end_to_end),
            _ => None,
        }
    }

    fn stage_mut(&mut self, name: &str) -> Option<&mut TrainConfig> {
        match name {
            "encoder_pretrain" => Some(&mut self.encoder_pretrain),
            "lm_pretrain" => Some(&mut self.lm_pretrain),
            "mapper" => Some(&mut self.budgets.mapper),
            "finetune" => Some(&mut self.budgets.finetune),
            "end_to_end" => Some(&mut self.budgets.end_to_end),
            _ => None,
        }
    }

    /// Sets one key. `lm_size` and `encoder` reset the fields they imply, so
    /// [`RunConfig::parse`] applies them before everything else.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let raw = raw.trim();
        match key {
            "seed" => self.seed = value(key, raw)?,
            "dataset" => self.dataset = (!raw.is_empty()).then(|| PathBuf::from(raw)),
            "dataset_seed" => self.dataset_seed = value(key, raw)?,
            "train_pairs" => self.split.train_pairs = value(key, raw)?,
            "test_pairs" => self.split.test_pairs = value(key, raw)?,
            "identities" => self.split.identities = value(key, raw)?,
            "match_fraction" => self.split.match_fraction = value(key, raw)?,
            "out_dir" => self.out_dir = PathBuf::from(raw),
            "tier" => self.tier = value(key, raw)?,
            "strategy" => self.strategy = value(key, raw)?,
            "lm_size" => {
                let size: LmSize = raw.parse()?;
                size.apply(&mut self.dims);
                self.lm_size = Some(size);
            }
            "h" => {
                self.dims.h = value(key, raw)?;
                self.encoder.h = self.dims.h;
            }
            "s" => self.dims.s = value(key, raw)?,
            "c" => self.dims.c = value(key, raw)?,
            "d" => self.dims.d = value(key, raw)?,
            "heads" => self.dims.heads = value(key, raw)?,
            "proj_layers" => self.dims.proj_layers = value(key, raw)?,
            "fusion_layers" => self.dims.fusion_layers = value(key, raw)?,
            "decoder_layers" => self.dims.decoder_layers = value(key, raw)?,
            "max_len" => self.dims.max_len = value(key, raw)?,
            "max_target" => self.max_target = value(key, raw)?,
            "lambda" => self.loss.lambda = value(key, raw)?,
            "epsilon" => self.loss.epsilon = value(key, raw)?,
            "encoder" => self.encoder = EncoderSpec::variant(raw.parse()?, self.dims.h),
            "encoder_layers" => self.encoder.layers = value(key, raw)?,
            "encoder_hidden" => self.encoder.hidden = value(key, raw)?,
            "use_sep" => self.fusion.use_sep = flag(key, raw)?,
            "use_cross_projection" => self.fusion.use_cross_projection = flag(key, raw)?,
            "use_text_projection" => self.fusion.use_text_projection = flag(key, raw)?,
            "share_image_projection" => self.fusion.share_image_projection = flag(key, raw)?,
            "clip" => {
                self.fusion.clip = match raw {
                    "keep_content" => ClipMode::KeepContent,
                    "keep_constants" => ClipMode::KeepConstants,
                    _ => return Err(Error::Config(format!("clip: expected keep_content or keep_constants, got {raw:?}"))),
                }
            }
            _ => {
                let (stage, field) = key
                    .split_once('.')
                    .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
                let cfg = self
                    .stage_mut(stage)
                    .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
                match field {
                    "lr" => cfg.lr = value(key, raw)?,
                    "lr_min" => cfg.lr_min = value(key, raw)?,
                    "epochs" => cfg.epochs = value(key, raw)?,
                    "batch_size" => cfg.batch_size = value(key, raw)?,
                    "warmup_steps" => cfg.warmup_steps = value(key, raw)?,
                    "restart_period" => {
                        cfg.restart_period = if raw == "epoch" { None } else { Some(value(key, raw)?) }
                    }
                    _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
                }
            }
        }
        Ok(())
    }

    /// Parses a config file body, applies defaults and validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: BTreeMap<String, String> = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim().to_string();
            if pairs.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
        }
        Self::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    /// Builds a config from defaults plus `pairs`, in the same precedence as
    /// a config file.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let pairs: Vec<(&str, &str)> = pairs.into_iter().collect();
        let mut cfg = RunConfig::default();
        cfg.apply_pairs(&pairs)?;
        Ok(cfg)
    }

    /// Overrides keys on top of this config, then validates.
    pub fn apply_pairs(&mut self, pairs: &[(&str, &str)]) -> Result<()> {
        // h first, then presets, then everything else
        for pass in 0..3 {
            for &(k, v) in pairs {
                let rank = match k {
                    "h" => 0,
                    "lm_size" | "encoder" => 1,
                    _ => 2,
                };
                if rank == pass {
                    self.set(k, v)?;
                }
            }
        }
        self.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        let mut dims = self.dims;
        dims.t = PROMPT_LEN;
        dims.validate()?;
        self.fusion.validate()?;
        self.loss.validate()?;
        if self.encoder.h != self.dims.h {
            return Err(Error::Config("encoder width must equal h".into()));
        }
        if self.encoder.layers == 0 || self.encoder.hidden == 0 {
            return Err(Error::Config("encoder_layers and encoder_hidden must be positive".into()));
        }
        let room = self.dims.max_len.saturating_sub(self.dims.prefix_len(&self.fusion));
        if self.max_target == 0 || self.max_target >= room {
            return Err(Error::Config(format!(
                "max_target must be in 1..{room} so prefix, target and end token fit in max_len={}",
                self.dims.max_len
            )));
        }
        if self.dataset.is_none() && !(self.split.train_pairs > 0 && self.split.test_pairs > 0) {
            return Err(Error::Config("train_pairs and test_pairs must be positive".into()));
        }
        for s in STAGE_KEYS {
            self.stage(s).expect("known stage").validate()?;
        }
        Ok(())
    }

    /// Every key in documented order. `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        put("seed", self.seed.to_string());
        put(
            "dataset",
            self.dataset.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        put("dataset_seed", self.dataset_seed.to_string());
        put("train_pairs", self.split.train_pairs.to_string());
        put("test_pairs", self.split.test_pairs.to_string());
        put("identities", self.split.identities.to_string());
        put("match_fraction", self.split.match_fraction.to_string());
        put("out_dir", self.out_dir.display().to_string());
        put("tier", self.tier.to_string());
        put("strategy", self.strategy.to_string());
        if let Some(size) = self.lm_size {
            put("lm_size", size.to_string());
        }
        let d = &self.dims;
        for (k, v) in [
            ("h", d.h),
            ("s", d.s),
            ("c", d.c),
            ("d", d.d),
            ("heads", d.heads),
            ("proj_layers", d.proj_layers),
            ("fusion_layers", d.fusion_layers),
            ("decoder_layers", d.decoder_layers),
            ("max_len", d.max_len),
            ("max_target", self.max_target),
        ] {
            put(k, v.to_string());
        }
        put("lambda", self.loss.lambda.to_string());
        put("epsilon", self.loss.epsilon.to_string());
        put("encoder", self.encoder.kind.to_string());
        put("encoder_layers", self.encoder.layers.to_string());
        put("encoder_hidden", self.encoder.hidden.to_string());
        let f = &self.fusion;
        put("use_sep", f.use_sep.to_string());
        put("use_cross_projection", f.use_cross_projection.to_string());
        put("use_text_projection", f.use_text_projection.to_string());
        put("clip", clip_name(f.clip).to_string());
        put("share_image_projection", f.share_image_projection.to_string());
        for s in STAGE_KEYS {
            let c = self.stage(s).expect("known stage");
            put(&format!("{s}.lr"), c.lr.to_string());
            put(&format!("{s}.lr_min"), c.lr_min.to_string());
            put(&format!("{s}.epochs"), c.epochs.to_string());
            put(&format!("{s}.batch_size"), c.batch_size.to_string());
            put(
                &format!("{s}.restart_period"),
                c.restart_period.map_or("epoch".to_string(), |p| p.to_string()),
            );
            put(&format!("{s}.warmup_steps"), c.warmup_steps.to_string());
        }
        out
    }

    /// Model config for a vocabulary of `vocab` tokens.
    pub fn model_config(&self, vocab: usize) -> ModelConfig {
        ModelConfig {
            dims: ModelDims {
                t: PROMPT_LEN,
                vocab,
                ..self.dims
            },
            fusion: self.fusion,
            encoder: self.encoder,
            attr_dim: data::ATTR_DIM,
        }
    }

    /// Stage budgets with per-stage seeds derived from `seed`.
    pub fn seeded_budgets(&self) -> StageBudgets {
        let mut b = self.budgets.clone();
        b.mapper.seed = derive_seed(self.seed, 3);
        b.finetune.seed = derive_seed(self.seed, 4);
        b.end_to_end.seed = derive_seed(self.seed, 5);
        b
    }
}

fn derive_seed(seed: u64, k: usize) -> u64 {
    noise_seed(seed, k, 11)
}

/// Train and test splits plus the vocabulary built from the training split.
#[derive(Debug, Clone)]
pub struct RunData {
    pub train: Dataset,
    pub test: Dataset,
    pub vocab: Vocab,
}

pub const TRAIN_FILE: &str = "train.txt";
pub const TEST_FILE: &str = "test.txt";

pub fn load_data(cfg: &RunConfig) -> Result<RunData> {
    let (train, test) = match &cfg.dataset {
        Some(dir) => (Dataset::read(&dir.join(TRAIN_FILE))?, Dataset::read(&dir.join(TEST_FILE))?),
        None => data::gen_splits(&cfg.split, cfg.dataset_seed)?,
    };
    if train.records.is_empty() || test.records.is_empty() {
        return Err(Error::Input("train and test splits must both be non-empty".into()));
    }
    let vocab = data::build_vocab(&train.records)?;
    Ok(RunData { train, test, vocab })
}

/// Pretrained encoder and decoder weights, keyed by everything that
/// determines them. Lets ablation variants that share a component skip
/// retraining it.
#[derive(Debug, Default)]
pub struct PretrainCache {
    groups: HashMap<String, (Vec<(String, Tensor)>, Vec<EpochLog>, Vec<EncoderEpoch>)>,
}

impl PretrainCache {
    fn restore(&self, key: &str, model: &mut VerLM) -> Option<(Vec<EpochLog>, Vec<EncoderEpoch>)> {
        let (tensors, lm, enc) = self.groups.get(key)?;
        for (name, t) in tensors {
            *model.params.get_mut(name)? = t.clone();
        }
        Some((lm.clone(), enc.clone()))
    }

    fn store(&mut self, key: String, model: &VerLM, group: Group, lm: &[EpochLog], enc: &[EncoderEpoch]) {
        let tensors = model
            .params
            .group(group)
            .map(|g| g.iter().map(|(n, t)| (n.to_string(), t.clone())).collect())
            .unwrap_or_default();
        self.groups.insert(key, (tensors, lm.to_vec(), enc.to_vec()));
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: VerLM,
    pub encoder_log: Vec<EncoderEpoch>,
    /// Language-model pretraining epochs followed by the strategy's stages.
    pub log: TrainingLog,
    pub report: MetricReport,
    /// Optimizer steps the strategy took (pretraining excluded).
    pub steps: usize,
}

/// Builds the model, pretrains the encoder and the language model, then
/// trains and evaluates with the configured strategy.
pub fn run_pipeline(cfg: &RunConfig, data: &RunData, cache: &mut PretrainCache) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut model = VerLM::new(cfg.model_config(data.vocab.len()), cfg.seed)?;
    let train = data::to_examples(&data.train.records, &data.vocab, cfg.tier, cfg.max_target);
    let test = data::to_examples(&data.test.records, &data.vocab, cfg.tier, cfg.max_target);

    let enc_cfg = TrainConfig {
        seed: derive_seed(cfg.seed, 1),
        ..cfg.encoder_pretrain.clone()
    };
    let enc_key = format!("encoder {:?} {:?} {} {}", cfg.encoder, enc_cfg, cfg.seed, data.train.seed);
    let encoder_log = match cache.restore(&enc_key, &mut model) {
        Some((_, log)) => log,
        None => {
            let log = pretrain_encoder(&mut model.params, &cfg.encoder, &data::faces(&data.train.records), &enc_cfg)?;
            cache.store(enc_key, &model, Group::Encoder, &[], &log);
            log
        }
    };

    let lm_cfg = TrainConfig {
        seed: derive_seed(cfg.seed, 2),
        ..cfg.lm_pretrain.clone()
    };
    let dims = model.config.dims;
    let lm_key = format!(
        "decoder {} {} {} {} {} {:?} {} {} {:?}",
        dims.d, dims.heads, dims.decoder_layers, dims.max_len, dims.vocab, lm_cfg, cfg.seed, data.train.seed, cfg.tier
    );
    let mut log = TrainingLog::default();
    match cache.restore(&lm_key, &mut model) {
        Some((entries, _)) => log.entries = entries,
        None => {
            let corpus: Vec<Vec<usize>> = train.iter().map(|e| e.target.clone()).collect();
            log.entries = lm_pretrain(&mut model.params, &dims, &corpus, &lm_cfg)?;
            cache.store(lm_key, &model, Group::Decoder, &log.entries, &[]);
        }
    }
    model.sync_text_embed()?;

    let budgets = cfg.seeded_budgets();
    let steps = budgets.steps(cfg.strategy, train.len());
    let outcome = run_strategy(cfg.strategy, &mut model, &train, &test, &data.vocab, &budgets, &cfg.loss)?;
    log.extend(outcome.log);
    Ok(RunOutcome {
        model,
        encoder_log,
        log,
        report: outcome.report,
        steps,
    })
}

/// Jitter added to every parameter before a model-level gradient check.
/// At the small init scale most gradients sit near the rounding floor of
/// central differences.
pub const GRADCHECK_JITTER: f64 = 0.3;

/// Gradient checks of the batch loss with respect to every parameter group
/// of a small model: b=2, h=32, s=4, c=4, t=5, d=16, V=200.
pub fn model_grad_suite(seed: u64, opts: GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    let dims = ModelDims {
        h: 32,
        s: 4,
        c: 4,
        t: 5,
        d: 16,
        vocab: 200,
        heads: 2,
        max_len: 48,
        ..ModelDims::default()
    };
    let config = ModelConfig {
        dims,
        fusion: FusionConfig::default(),
        encoder: EncoderSpec::variant(EncoderKind::A, dims.h),
        attr_dim: data::ATTR_DIM,
    };
    let examples: Vec<Example> = (0..2)
        .map(|i| Example {
            face_a: (0..data::ATTR_DIM).map(|j| ((i * 7 + j) as f64 * 0.37).sin()).collect(),
            face_b: (0..data::ATTR_DIM).map(|j| ((i * 5 + j) as f64 * 0.61).cos()).collect(),
            prompt: vec![4, 5, 6, 7, 8],
            target: (0..12 + i).map(|j| 9 + (i * 31 + j * 17) % 190).collect(),
        })
        .collect();
    let mut model = VerLM::new(config, seed)?;
    model.params.jitter(GRADCHECK_JITTER, seed + 100);
    model.grad_check_groups(&examples, &LossConfig::default(), opts)
}

pub const AXES: [&str; 7] = [
    "sep",
    "cross_projection",
    "text_projection",
    "encoder",
    "decoder_layers",
    "strategy",
    "lm_size",
];

pub const DECODER_LAYER_SWEEP: [usize; 4] = [2, 4, 8, 16];

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub axis: &'static str,
    pub config: RunConfig,
}

/// Named variants of a base config, one group per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationMatrix {
    pub base: RunConfig,
    pub variants: Vec<Variant>,
}

fn axis_variants(base: &RunConfig, axis: &'static str) -> Result<Vec<Variant>> {
    let with = |name: String, edit: &dyn Fn(&mut RunConfig)| {
        let mut config = base.clone();
        edit(&mut config);
        Variant { name, axis, config }
    };
    let variants = match axis {
        "sep" => vec![
            with("with_sep".into(), &|c| {
                c.fusion.use_sep = true;
                c.fusion.use_cross_projection = true;
            }),
            with("without_sep".into(), &|c| {
                c.fusion.use_sep = false;
                c.fusion.use_cross_projection = true;
            }),
        ],
        // SEP only exists inside the cross projection, so dropping the
        // projection drops SEP too.
        "cross_projection" => vec![
            with("with_cross_projection".into(), &|c| c.fusion.use_cross_projection = true),
            with("without_cross_projection".into(), &|c| {
                c.fusion.use_cross_projection = false;
                c.fusion.use_sep = false;
            }),
        ],
        "text_projection" => vec![
            with("with_text_projection".into(), &|c| c.fusion.use_text_projection = true),
            with("without_text_projection".into(), &|c| c.fusion.use_text_projection = false),
        ],
        "encoder" => [EncoderKind::A, EncoderKind::B]
            .into_iter()
            .map(|k| with(format!("encoder_{k}"), &|c| c.encoder = EncoderSpec::variant(k, c.dims.h)))
            .collect(),
        "decoder_layers" => DECODER_LAYER_SWEEP
            .into_iter()
            .map(|n| with(format!("decoder_layers_{n}"), &|c| c.dims.decoder_layers = n))
            .collect(),
        "strategy" => Strategy::ALL
            .into_iter()
            .map(|s| with(s.to_string(), &|c| c.strategy = s))
            .collect(),
        "lm_size" => LmSize::ALL
            .into_iter()
            .map(|l| {
                with(format!("lm_{l}"), &|c| {
                    l.apply(&mut c.dims);
                    c.lm_size = Some(l);
                })
            })
            .collect(),
        _ => {
            return Err(Error::Config(format!(
                "unknown ablation axis {axis:?} (expected one of {})",
                AXES.join(", ")
            )))
        }
    };
    Ok(variants)
}

impl AblationMatrix {
    pub fn new(base: &RunConfig, axes: &[&str]) -> Result<Self> {
        base.validate()?;
        let mut variants = Vec::new();
        for (i, axis) in axes.iter().enumerate() {
            if axes[..i].contains(axis) {
                return Err(Error::Config(format!("ablation axis {axis:?} listed twice")));
            }
            let name = AXES
                .into_iter()
                .find(|a| a == axis)
                .ok_or_else(|| Error::Config(format!("unknown ablation axis {axis:?} (expected one of {})", AXES.join(", "))))?;
            for v in axis_variants(base, name)? {
                v.config.validate()?;
                variants.push(v);
            }
        }
        Ok(Self {
            base: base.clone(),
            variants,
        })
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub name: String,
    pub axis: &'static str,
    pub report: MetricReport,
    pub steps: usize,
    /// True when an identical config earlier in the matrix supplied the result.
    pub reused: bool,
}

/// Trains and evaluates every variant on the same data with the same seeds.
/// Variants whose configs coincide are run once. `progress` sees each row as
/// it completes.
pub fn run_ablation(
    base: &RunConfig,
    axes: &[&str],
    mut progress: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let matrix = AblationMatrix::new(base, axes)?;
    let data = load_data(base)?;
    let mut cache = PretrainCache::default();
    let mut done: HashMap<String, (MetricReport, usize)> = HashMap::new();
    let mut rows = Vec::new();
    for v in &matrix.variants {
        let key = v.config.to_text();
        let (report, steps, reused) = match done.get(&key) {
            Some((r, s)) => (r.clone(), *s, true),
            None => {
                let out = run_pipeline(&v.config, &data, &mut cache)?;
                done.insert(key, (out.report.clone(), out.steps));
                (out.report, out.steps, false)
            }
        };
        let row = AblationRow {
            name: v.name.clone(),
            axis: v.axis,
            report,
            steps,
            reused,
        };
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    reports_csv(rows.iter().map(|r| (r.name.as_str(), &r.report)))
}
