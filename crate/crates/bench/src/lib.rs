//! Shared fixtures for the criterion benches.

use verlm_core::data::{build_vocab, gen_splits, to_examples, SplitSpec};
use verlm_core::harness::RunConfig;
use verlm_core::text::Vocab;
use verlm_core::{Example, Tier, VerLM};

/// A default-sized model with its vocabulary and `n` concise-tier training
/// examples from the synthetic generator.
pub fn model_and_examples(n: usize) -> (VerLM, Vocab, Vec<Example>) {
    let cfg = RunConfig::default();
    let spec = SplitSpec {
        identities: 64,
        train_pairs: n,
        test_pairs: 1,
        ..SplitSpec::default()
    };
    let (train, _) = gen_splits(&spec, 1).expect("valid split spec");
    let vocab = build_vocab(&train.records).expect("non-empty corpus");
    let examples = to_examples(&train.records, &vocab, Tier::Concise, cfg.max_target);
    let model = VerLM::new(cfg.model_config(vocab.len()), 1).expect("default config is valid");
    (model, vocab, examples)
}
