use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pgen::exec::ExecMode;
use pgen::generator::Generator;
use pgen::model::{Transformer, TransformerConfig, Variant};
use pgen::pipeline::{build_vocab, BpeModel, Tokenizer};
use pgen::search::Greedy;
use pgen::tensor::kernels;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, ExecMode); 2] = [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)];

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("matmul");
    for n in [64usize, 256] {
        let a: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut out = vec![0.0; n * n];
        for (name, mode) in MODES {
            group.bench_with_input(BenchmarkId::new(name, n), &n, |bench, &n| {
                bench.iter(|| {
                    kernels::matmul(mode, black_box(&a), black_box(&b), &mut out, n, n, n);
                })
            });
        }
    }
    group.finish();
}

fn batch_decode(c: &mut Criterion) {
    let mut tokens: Vec<String> = Vec::new();
    for ch in 'a'..='z' {
        tokens.push(ch.to_string());
        tokens.push(format!("{ch}</w>"));
    }
    let tok = Arc::new(Tokenizer::new(BpeModel::from_merges(Vec::new()), build_vocab(tokens, 1)));
    let cfg = TransformerConfig {
        vocab_size: tok.vocab.len(),
        d_model: 32,
        n_heads: 4,
        enc_layers: 2,
        dec_layers: 2,
        d_ff: 64,
        max_positions: 64,
        dropout: 0.0,
        seed: 2,
    };
    let model = Transformer::new(cfg, Variant::Autoregressive).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let srcs: Vec<Vec<u32>> = (0..32)
        .map(|_| (0..12).map(|_| rng.gen_range(5..tok.vocab.len() as u32)).collect())
        .collect();
    let mut group = c.benchmark_group("greedy_decode_32");
    group.sample_size(10);
    for (name, mode) in MODES {
        let g = Generator::new(Arc::new(Greedy::new(16).unwrap()), Arc::clone(&tok)).with_mode(mode);
        group.bench_function(name, |bench| bench.iter(|| g.decode_ids(&model, black_box(&srcs)).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, matmul, batch_decode);
criterion_main!(benches);
