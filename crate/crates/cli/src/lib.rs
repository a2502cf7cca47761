//! `verlm` subcommands. [`cli_main`] is the whole program; `main` only
//! forwards the process arguments and exit code.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use verlm_core::autograd::suite::op_suite;
use verlm_core::data::{self, corpus_stats, gen_splits, CorpusStats, Dataset, SplitSpec, DEFAULT_MATCH_FRACTION};
use verlm_core::harness::{
    ablation_csv, load_data, model_grad_suite, run_ablation, run_pipeline, PretrainCache, RunConfig, TEST_FILE,
    TRAIN_FILE, AXES,
};
use verlm_core::metrics::{evaluate_model, reports_csv};
use verlm_core::text::Vocab;
use verlm_core::train::{load_into, save_checkpoint};
use verlm_core::{Error, GradCheckOptions, Tier, VerLM};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.txt";
pub const ENCODER_LOG_FILE: &str = "encoder_log.txt";
pub const REPORT_FILE: &str = "report.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const CONFIG_FILE: &str = "config.txt";
pub const ABLATION_FILE: &str = "ablation.csv";

#[derive(Debug, Parser)]
#[command(name = "verlm", about = "Train and evaluate two-face verification explainers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate train and test splits into a directory.
    GenData(GenDataArgs),
    /// Pretrain, train with the configured strategy and evaluate.
    Train(RunArgs),
    /// Evaluate a saved checkpoint on the test split.
    Eval(EvalArgs),
    /// Train and evaluate every variant along the chosen axes.
    Ablate(AblateArgs),
    /// Finite-difference checks for every op and every parameter group.
    Gradcheck(GradcheckArgs),
    /// Description length statistics for a dataset file or directory.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Training pairs.
    #[arg(long, default_value_t = 512)]
    pairs: usize,
    #[arg(long, default_value_t = 128)]
    test_pairs: usize,
    #[arg(long, default_value_t = 400)]
    identities: usize,
    #[arg(long, default_value_t = DEFAULT_MATCH_FRACTION)]
    match_fraction: f64,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a config key, e.g. `--set mapper.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Defaults to `model.ckpt` in the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated axis names.
    #[arg(long, value_delimiter = ',', default_value = "sep,cross_projection,text_projection,encoder,decoder_layers")]
    axes: Vec<String>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Coordinates checked per tensor; 0 checks all.
    #[arg(long, default_value_t = 8)]
    max_coords: usize,
}

#[derive(Debug, Args)]
struct StatsArgs {
    /// A dataset file, or a directory holding `train.txt`.
    data: PathBuf,
}

/// Runs the command line `argv` (program name first) and returns the exit
/// code: 0 success, 1 usage, 2 config, 3 runtime.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => EXIT_CONFIG,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

fn dispatch(cmd: Command) -> verlm_core::Result<i32> {
    match cmd {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Ablate(a) => ablate(&a),
        Command::Gradcheck(a) => gradcheck(&a),
        Command::Stats(a) => stats(&a),
    }
}

fn write(path: &Path, text: &str) -> verlm_core::Result<()> {
    fs::write(path, text).map_err(|e| Error::Input(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> verlm_core::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Input(format!("cannot create {}: {e}", dir.display())))
}

/// Config file (or defaults), then `--set` overrides, then `--seed` and
/// `--out`.
pub fn resolve_config(
    path: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
    out: Option<&Path>,
) -> verlm_core::Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut pairs = Vec::new();
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {o:?}")))?;
        pairs.push((k.trim(), v.trim()));
    }
    cfg.apply_pairs(&pairs)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o.to_path_buf();
    }
    Ok(cfg)
}

fn run_config(a: &RunArgs) -> verlm_core::Result<RunConfig> {
    resolve_config(a.config.as_deref(), &a.overrides, a.seed, a.out.as_deref())
}

fn gen_data(a: &GenDataArgs) -> verlm_core::Result<i32> {
    let spec = SplitSpec {
        identities: a.identities,
        train_pairs: a.pairs,
        test_pairs: a.test_pairs,
        match_fraction: a.match_fraction,
    };
    let (train, test) = gen_splits(&spec, a.seed)?;
    create_dir(&a.out)?;
    train.write(&a.out.join(TRAIN_FILE))?;
    test.write(&a.out.join(TEST_FILE))?;
    println!(
        "wrote {} train and {} test pairs to {}",
        train.records.len(),
        test.records.len(),
        a.out.display()
    );
    Ok(EXIT_OK)
}

fn train(a: &RunArgs) -> verlm_core::Result<i32> {
    let cfg = run_config(a)?;
    let data = load_data(&cfg)?;
    let out = run_pipeline(&cfg, &data, &mut PretrainCache::default())?;
    let dir = &cfg.out_dir;
    create_dir(dir)?;
    write(&dir.join(CONFIG_FILE), &cfg.to_text())?;
    save_checkpoint(&out.model.params, &dir.join(CHECKPOINT_FILE))?;
    data.vocab.save(&dir.join(VOCAB_FILE))?;
    write(&dir.join(LOG_FILE), &out.log.to_text())?;
    let enc: String = out
        .encoder_log
        .iter()
        .map(|e| format!("epoch={} loss={} lr={}\n", e.epoch, e.loss, e.lr))
        .collect();
    write(&dir.join(ENCODER_LOG_FILE), &enc)?;
    let csv = reports_csv([(cfg.strategy.name(), &out.report)]);
    write(&dir.join(REPORT_FILE), &csv)?;
    print!("{csv}");
    Ok(EXIT_OK)
}

fn eval(a: &EvalArgs) -> verlm_core::Result<i32> {
    let cfg = run_config(&a.run)?;
    let data = load_data(&cfg)?;
    let vocab_path = cfg.out_dir.join(VOCAB_FILE);
    let vocab = if vocab_path.exists() { Vocab::load(&vocab_path)? } else { data.vocab.clone() };
    let mut model = VerLM::new(cfg.model_config(vocab.len()), cfg.seed)?;
    let ckpt = a.checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE));
    load_into(&mut model.params, &ckpt)?;
    let test = data::to_examples(&data.test.records, &vocab, cfg.tier, cfg.max_target);
    let report = evaluate_model(&model, &test, &vocab, &cfg.loss)?;
    let csv = reports_csv([(cfg.strategy.name(), &report)]);
    create_dir(&cfg.out_dir)?;
    write(&cfg.out_dir.join(EVAL_FILE), &csv)?;
    print!("{csv}");
    Ok(EXIT_OK)
}

fn ablate(a: &AblateArgs) -> verlm_core::Result<i32> {
    let cfg = run_config(&a.run)?;
    let axes: Vec<&str> = a.axes.iter().map(|s| s.trim()).filter(|s| !s.is_empty()).collect();
    if axes.is_empty() {
        return Err(Error::Config(format!("--axes needs at least one of {}", AXES.join(", "))));
    }
    let rows = run_ablation(&cfg, &axes, |r| {
        eprintln!(
            "{:<28} meteor={:.4} bleu={:.4} semscore={:.4} ce={:.4} steps={}{}",
            r.name,
            r.report.meteor_lite,
            r.report.bleu,
            r.report.semscore,
            r.report.ce_loss,
            r.steps,
            if r.reused { " (same config as an earlier row)" } else { "" }
        );
    })?;
    let csv = ablation_csv(&rows);
    create_dir(&cfg.out_dir)?;
    write(&cfg.out_dir.join(ABLATION_FILE), &csv)?;
    print!("{csv}");
    Ok(EXIT_OK)
}

fn gradcheck(a: &GradcheckArgs) -> verlm_core::Result<i32> {
    let opts = GradCheckOptions {
        max_coords: (a.max_coords > 0).then_some(a.max_coords),
        ..GradCheckOptions::default()
    };
    let mut reports = op_suite(opts)?;
    reports.extend(model_grad_suite(a.seed, opts)?);
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed", reports.len());
    Ok(if failed == 0 { EXIT_OK } else { EXIT_RUNTIME })
}

fn stats(a: &StatsArgs) -> verlm_core::Result<i32> {
    let path = if a.data.is_dir() { a.data.join(TRAIN_FILE) } else { a.data.clone() };
    let ds = Dataset::read(&path)?;
    println!("{:<14} {}", "tier", CorpusStats::HEADER);
    for tier in [Tier::Concise, Tier::Comprehensive] {
        let descs: Vec<&str> = ds.records.iter().map(|r| r.description(tier)).collect();
        println!("{:<14} {}", tier.to_string(), corpus_stats(&descs)?);
    }
    Ok(EXIT_OK)
}
