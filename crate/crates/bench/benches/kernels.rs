use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;
use verlm_bench::model_and_examples;
use verlm_core::metrics::{bleu, meteor_lite};
use verlm_core::model::batch_loss;
use verlm_core::params::Ctx;
use verlm_core::{AttnMask, Graph, LossConfig, Tensor};

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("matmul");
    for n in [32usize, 64, 128] {
        let a = Tensor::randn(&[n, n], 1.0, &mut rng);
        let b = Tensor::randn(&[n, n], 1.0, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (x, y) = (g.leaf(&a), g.leaf(&b));
                black_box(g.matmul(x, y).unwrap());
            })
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let q = Tensor::randn(&[4, 96, 64], 1.0, &mut rng);
    c.bench_function("attention_fwd_bwd_b4_t96_d64", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let x = g.leaf_with(&q, true);
            let y = g.attention(x, x, x, 4, AttnMask::Causal { prefix: 28 }).unwrap();
            let s = g.sum(y);
            black_box(g.backward(s).unwrap());
        })
    });
}

fn training_step(c: &mut Criterion) {
    let (model, _, examples) = model_and_examples(32);
    let batch: Vec<_> = examples.iter().collect();
    c.bench_function("loss_and_grads_batch32", |bench| {
        bench.iter(|| {
            let mut ctx = Ctx::new(&model.params, true);
            let (loss, _, _) = batch_loss(&mut ctx, &model.config, &batch, &LossConfig::default()).unwrap();
            black_box(ctx.backward(loss).unwrap());
        })
    });
}

fn generation(c: &mut Criterion) {
    let (model, _, examples) = model_and_examples(8);
    c.bench_function("greedy_generate_8x32", |bench| {
        bench.iter(|| black_box(model.generate(&examples, 32, 8).unwrap()))
    });
}

fn metrics(c: &mut Criterion) {
    let (_, vocab, examples) = model_and_examples(16);
    let texts: Vec<String> = examples.iter().map(|e| vocab.detokenize(&e.target)).collect();
    c.bench_function("bleu_meteor_16_pairs", |bench| {
        bench.iter(|| {
            let mut total = 0.0;
            for (a, b) in texts.iter().zip(texts.iter().rev()) {
                total += bleu(a, &[b]) + meteor_lite(a, b);
            }
            black_box(total)
        })
    });
}

criterion_group!(benches, matmul, attention, training_step, generation, metrics);
criterion_main!(benches);
