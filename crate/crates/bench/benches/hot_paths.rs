use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use langmix::eval::edit_distance;
use langmix::langembed::{corpus_ws_embedding, train_predictor, PredictorConfig};
use langmix::model::LanguageInput;
use langmix::numerics::Graph;
use langmix_bench::*;

fn numerics(c: &mut Criterion) {
    let a = random_matrix(32, 64, 1);
    let b = random_matrix(64, 64, 2);
    c.bench_function("graph_matmul_gelu_backward_32x64x64", |bench| {
        bench.iter(|| {
            let mut g = Graph::standalone();
            let x = g.input(a.clone());
            let w = g.input(b.clone());
            let y = g.matmul(x, w).unwrap();
            let y = g.gelu(y);
            let loss = g.sum(y);
            black_box(g.backward(loss).unwrap());
        })
    });
}

fn model(c: &mut Criterion) {
    let (benchmark, model) = default_setup(3);
    let utt = first_test_utterance(&benchmark);
    c.bench_function("language_distribution", |bench| {
        bench.iter(|| black_box(model.language_distribution(&utt.features).unwrap()))
    });
    c.bench_function("greedy_decode", |bench| {
        bench.iter(|| black_box(model.greedy_decode(&utt.features, &LanguageInput::Tag(0)).unwrap()))
    });
    let dists = random_distributions(100, model.tag_range().count, 4);
    let table = model.embedding_table();
    c.bench_function("corpus_ws_embedding_100", |bench| {
        bench.iter(|| black_box(corpus_ws_embedding(&dists, &table).unwrap()))
    });
    let examples = loo_examples(&benchmark, &model);
    let cfg = PredictorConfig {
        epochs: 10,
        patience: 0,
        ..PredictorConfig::default()
    };
    c.bench_function("train_predictor_10_epochs", |bench| {
        bench.iter(|| black_box(train_predictor(&examples, &[], &cfg, 5).unwrap()))
    });
}

fn metrics(c: &mut Criterion) {
    let r = random_tokens(200, 16, 6);
    let h = random_tokens(200, 16, 7);
    c.bench_function("edit_distance_200", |bench| bench.iter(|| black_box(edit_distance(&r, &h))));
}

criterion_group!(benches, numerics, model, metrics);
criterion_main!(benches);
