//! Fixtures shared by the criterion benches.

use rand::Rng;

use langmix::config::RunConfig;
use langmix::corpus::{Benchmark, SplitKind, Utterance};
use langmix::langembed::{LangDistribution, LooMode, MaskedExample};
use langmix::model::TinyAsr;
use langmix::pipeline::build_benchmark;
use langmix::{seeds, Tensor};

/// Default-sized benchmark and an untrained model over its seen languages.
pub fn default_setup(seed: u64) -> (Benchmark, TinyAsr) {
    let cfg = RunConfig::with_seed(seed);
    let benchmark = build_benchmark(&cfg).expect("benchmark");
    let model = TinyAsr::new(cfg.model_config().expect("model config"), benchmark.seen_ids(), seed).expect("model");
    (benchmark, model)
}

pub fn first_test_utterance(benchmark: &Benchmark) -> Utterance {
    let id = &benchmark.unseen_ids()[0];
    benchmark.split(id, SplitKind::Test)[0].clone()
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = seeds::rng(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

pub fn random_distributions(count: usize, tags: usize, seed: u64) -> Vec<LangDistribution> {
    let mut rng = seeds::rng(seed);
    (0..count)
        .map(|_| {
            let w: Vec<f64> = (0..tags).map(|_| rng.random_range(0.0..1.0)).collect();
            let s: f64 = w.iter().sum();
            let mut p: Vec<f64> = w.iter().map(|x| x / s).collect();
            let rest: f64 = p[1..].iter().sum();
            p[0] = 1.0 - rest;
            LangDistribution::new(p).expect("distribution")
        })
        .collect()
}

pub fn random_tokens(len: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = seeds::rng(seed);
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}

/// Corpus-wise leave-one-out examples from an untrained model.
pub fn loo_examples(benchmark: &Benchmark, model: &TinyAsr) -> Vec<MaskedExample> {
    let corpora = benchmark.corpora(&benchmark.seen_ids(), SplitKind::Train);
    langmix::langembed::build_loo_dataset(model, &corpora, LooMode::CorpusWise).expect("loo dataset")
}
