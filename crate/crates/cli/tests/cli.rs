use std::fs;
use std::path::Path;

use verlm_cli::{cli_main, resolve_config, EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};

const SMALL: [&str; 17] = [
    "h=8", "s=2", "c=2", "d=16", "heads=2", "proj_layers=1", "fusion_layers=1", "decoder_layers=1", "max_len=96",
    "max_target=60", "encoder_pretrain.epochs=1", "lm_pretrain.epochs=1", "mapper.epochs=1", "finetune.epochs=1",
    "mapper.batch_size=8", "finetune.batch_size=8", "lm_pretrain.batch_size=8",
];

fn s(p: &Path) -> String {
    p.display().to_string()
}

fn gen(dir: &Path) {
    let code = cli_main(["verlm", "gen-data", "--seed", "3", "--pairs", "16", "--test-pairs", "4", "--identities", "20", "--out", &s(dir)]);
    assert_eq!(code, EXIT_OK);
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(cli_main(["verlm", "frobnicate"]), EXIT_USAGE);
    assert_eq!(cli_main(["verlm", "train", "--no-such-flag"]), EXIT_USAGE);
}

#[test]
fn help_exits_cleanly() {
    assert_eq!(cli_main(["verlm", "--help"]), EXIT_OK);
}

#[test]
fn bad_config_values_exit_with_config_code() {
    assert_eq!(cli_main(["verlm", "train", "--set", "nonsense_key=1"]), EXIT_CONFIG);
    assert_eq!(cli_main(["verlm", "train", "--set", "d=abc"]), EXIT_CONFIG);
    assert_eq!(cli_main(["verlm", "train", "--set", "novalue"]), EXIT_CONFIG);
    assert_eq!(cli_main(["verlm", "ablate", "--axes", "colour"]), EXIT_CONFIG);

    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "seed = 1\nseed = 2\n").unwrap();
    assert_eq!(cli_main(["verlm", "train", "--config", &s(&cfg)]), EXIT_CONFIG);
}

#[test]
fn missing_dataset_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = format!("dataset={}", s(&tmp.path().join("nope")));
    assert_eq!(cli_main(["verlm", "train", "--set", &missing]), EXIT_RUNTIME);
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("run.cfg");
    fs::write(&path, "# base\nseed = 4\nmapper.epochs = 3\n").unwrap();
    let cfg = resolve_config(Some(&path), &["mapper.epochs=5".into()], Some(11), Some(tmp.path())).unwrap();
    assert_eq!(cfg.seed, 11);
    assert_eq!(cfg.budgets.mapper.epochs, 5);
    assert_eq!(cfg.out_dir, tmp.path());
}

#[test]
fn gradcheck_passes() {
    assert_eq!(cli_main(["verlm", "gradcheck", "--max-coords", "4"]), EXIT_OK);
}

#[test]
fn gen_data_then_stats() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data);
    assert!(data.join("train.txt").is_file());
    assert!(data.join("test.txt").is_file());
    assert_eq!(cli_main(["verlm", "stats", &s(&data)]), EXIT_OK);
    assert_eq!(cli_main(["verlm", "stats", &s(&tmp.path().join("absent"))]), EXIT_RUNTIME);
}

#[test]
fn train_eval_smoke_writes_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("run");
    gen(&data);
    let mut argv: Vec<String> = ["verlm", "train", "--seed", "2", "--out", &s(&out)].map(String::from).to_vec();
    argv.extend(["--set".to_string(), format!("dataset={}", s(&data))]);
    for kv in SMALL {
        argv.extend(["--set".to_string(), kv.to_string()]);
    }
    assert_eq!(cli_main(argv.clone()), EXIT_OK);
    for f in ["model.ckpt", "train_log.txt", "encoder_log.txt", "report.csv", "vocab.txt", "config.txt"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 2, "{report}");

    argv[1] = "eval".into();
    assert_eq!(cli_main(argv.clone()), EXIT_OK);
    let eval = fs::read_to_string(out.join("eval.csv")).unwrap();
    // evaluating the saved weights reproduces the report written at train time
    assert_eq!(eval, report);

    argv.extend(["--checkpoint".to_string(), s(&tmp.path().join("absent.ckpt"))]);
    assert_eq!(cli_main(argv), EXIT_RUNTIME);
}
