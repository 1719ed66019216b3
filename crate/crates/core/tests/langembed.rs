mod common;

use common::{golden, normal_vec, random_distribution, softmax_direct};
use langmix::corpus::{generate_benchmark, BenchmarkConfig, SplitKind};
use langmix::langembed::{
    build_loo_dataset, corpus_distribution, corpus_ws_embedding, masked_distribution, predict_embedding,
    utterance_ws_embedding, Activation, EmbeddingTable, LangDistribution, LooMode, PredictorParams, Provenance,
    WeightedEmbedding,
};
use langmix::model::{ModelConfig, TagRange, TinyAsr};
use langmix::{seeds, Tensor};
use proptest::prelude::*;
use rand_chacha::ChaCha8Rng;

fn table(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    let rows: Vec<Vec<f32>> = (0..n)
        .map(|_| normal_vec(rng, d, 1.0).into_iter().map(|v| v as f32).collect())
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

fn all_tags(n: usize) -> TagRange {
    TagRange { first: 0, count: n }
}

fn dot_oracle(w: &[f64], m: &Tensor) -> Vec<f64> {
    (0..m.cols())
        .map(|c| w.iter().enumerate().map(|(k, p)| p * m.row(k)[c] as f64).sum())
        .collect()
}

proptest! {
    #[test]
    fn ws_embedding_properties(seed in any::<u64>(), n in 2usize..10, d in 1usize..12) {
        let mut rng = seeds::rng(seed);
        let m = table(&mut rng, n, d);
        let t = EmbeddingTable::new(&m, all_tags(n)).unwrap();
        let w = random_distribution(&mut rng, n);
        let ws = utterance_ws_embedding(&LangDistribution::new(w.clone()).unwrap(), &t).unwrap();
        prop_assert_eq!(ws.provenance, Provenance::UtteranceWs);

        for (c, (&v, o)) in ws.vector.iter().zip(dot_oracle(&w, &m)).enumerate() {
            prop_assert!((v as f64 - o).abs() < 1e-6);
            let lo = (0..n).map(|k| m.row(k)[c]).fold(f32::INFINITY, f32::min);
            let hi = (0..n).map(|k| m.row(k)[c]).fold(f32::NEG_INFINITY, f32::max);
            prop_assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
        }

        let k = (seed % n as u64) as usize;
        let mut one = vec![0.0; n];
        one[k] = 1.0;
        let vertex = utterance_ws_embedding(&LangDistribution::new(one).unwrap(), &t).unwrap();
        prop_assert_eq!(vertex.vector.as_slice(), m.row(k));

        let mean = utterance_ws_embedding(&LangDistribution::uniform(n).unwrap(), &t).unwrap();
        for c in 0..d {
            let o = (0..n).map(|k| m.row(k)[c] as f64).sum::<f64>() / n as f64;
            prop_assert!((mean.vector[c] as f64 - o).abs() < 1e-6);
        }

        let mut perm: Vec<usize> = (0..n).collect();
        perm.rotate_left(k);
        let pm = Tensor::from_rows(&perm.iter().map(|&i| m.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let pw: Vec<f64> = perm.iter().map(|&i| w[i]).collect();
        let pt = EmbeddingTable::new(&pm, all_tags(n)).unwrap();
        let pws = utterance_ws_embedding(&LangDistribution::new(pw).unwrap(), &pt).unwrap();
        for (a, b) in pws.vector.iter().zip(&ws.vector) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn corpus_ws_is_mean_of_utterance_ws(seed in any::<u64>(), n in 2usize..8, count in 1usize..25) {
        let mut rng = seeds::rng(seed);
        let m = table(&mut rng, n, 6);
        let t = EmbeddingTable::new(&m, all_tags(n)).unwrap();
        let dists: Vec<LangDistribution> = (0..count)
            .map(|_| LangDistribution::new(random_distribution(&mut rng, n)).unwrap())
            .collect();
        let corpus = corpus_ws_embedding(&dists, &t).unwrap();
        prop_assert_eq!(corpus.provenance, Provenance::CorpusWs);
        let mut mean = [0.0f64; 6];
        for dist in &dists {
            for (a, v) in mean.iter_mut().zip(utterance_ws_embedding(dist, &t).unwrap().vector) {
                *a += v as f64 / count as f64;
            }
        }
        for (a, b) in corpus.vector.iter().zip(mean) {
            prop_assert!((*a as f64 - b).abs() < 1e-6);
        }
    }
}

#[test]
fn corpus_distribution_is_the_coordinate_mean() {
    let mut rng = seeds::rng(31);
    let dists: Vec<Vec<f64>> = (0..100).map(|_| random_distribution(&mut rng, 7)).collect();
    let avg = corpus_distribution(
        &dists.iter().map(|d| LangDistribution::new(d.clone()).unwrap()).collect::<Vec<_>>(),
    )
    .unwrap();
    for c in 0..7 {
        let mut s = 0.0;
        for d in &dists {
            s += d[c];
        }
        assert!((avg.probs()[c] - s / 100.0).abs() < 1e-12);
    }
}

#[test]
fn masked_distribution_excludes_the_masked_logit() {
    assert_eq!(masked_distribution(&[0.3, 0.3, 0.3], 2).unwrap(), vec![0.5, 0.5, 0.0]);
    let mut rng = seeds::rng(9);
    for _ in 0..50 {
        let logits = normal_vec(&mut rng, 6, 3.0);
        for masked in 0..6 {
            let p = masked_distribution(&logits, masked).unwrap();
            assert_eq!(p[masked], 0.0);
            let rest: Vec<f64> = logits.iter().enumerate().filter(|(i, _)| *i != masked).map(|(_, v)| *v).collect();
            let oracle = softmax_direct(&rest);
            let got: Vec<f64> = p.iter().enumerate().filter(|(i, _)| *i != masked).map(|(_, v)| *v).collect();
            for (a, b) in got.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
    assert!(masked_distribution(&[1.0], 0).is_err());
    assert!(masked_distribution(&[1.0, 2.0], 2).is_err());
}

fn small_setup() -> (langmix::corpus::Benchmark, TinyAsr) {
    let cfg = BenchmarkConfig {
        num_families: 2,
        seen_per_family: 3,
        utterances_per_split: 4,
        traits_per_family: 2,
        ..BenchmarkConfig::default()
    };
    let b = generate_benchmark(&cfg, 3).unwrap();
    let model_cfg = ModelConfig {
        d_model: 16,
        ffn_hidden: 32,
        feature_dim: cfg.feature_dim,
        transcript_vocab: cfg.transcript_vocab,
        num_language_tags: b.seen_ids().len(),
        ..ModelConfig::default()
    };
    let m = TinyAsr::new(model_cfg, b.seen_ids(), 4).unwrap();
    (b, m)
}

#[test]
fn leave_one_out_dataset_shape() {
    let (b, model) = small_setup();
    let seen = b.seen_ids();
    let corpora = b.corpora(&seen, SplitKind::Train);
    let table = model.embedding_table();

    let corpus = build_loo_dataset(&model, &corpora, LooMode::CorpusWise).unwrap();
    assert_eq!(corpus.len(), seen.len());
    let mut masked: Vec<usize> = corpus.iter().map(|e| e.masked_lang).collect();
    masked.sort();
    assert_eq!(masked, (0..seen.len()).collect::<Vec<_>>());
    for e in &corpus {
        assert_eq!(e.weights[e.masked_lang], 0.0);
        assert!((e.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(e.target.as_slice(), table.tag_row(e.masked_lang));
        for (a, o) in e.input.vector.iter().zip(dot_oracle(&e.weights, &model.embedding_matrix_tags())) {
            assert!((*a as f64 - o).abs() < 1e-6);
        }
    }

    let utt = build_loo_dataset(&model, &corpora, LooMode::UtteranceWise).unwrap();
    assert_eq!(utt.len(), corpora.iter().map(|c| c.1.len()).sum::<usize>());
    assert!(utt.iter().all(|e| e.weights[e.masked_lang] == 0.0));

    assert!(build_loo_dataset(&model, &corpora[..1], LooMode::CorpusWise).is_err());
}

trait TagRows {
    fn embedding_matrix_tags(&self) -> Tensor;
}

impl TagRows for TinyAsr {
    fn embedding_matrix_tags(&self) -> Tensor {
        let t = self.embedding_table();
        Tensor::from_rows(&(0..t.tag_count()).map(|k| t.tag_row(k).to_vec()).collect::<Vec<_>>()).unwrap()
    }
}

#[test]
fn frozen_predictor_output() {
    let mut rng = seeds::rng(77);
    let p = PredictorParams::random(8, 8, Activation::Gelu, &mut rng);
    let input: Vec<f32> = (0..8).map(|i| (i as f32 * 0.37).cos()).collect();
    let out = predict_embedding(&p, &WeightedEmbedding::new(input, Provenance::CorpusWs)).unwrap();
    assert_eq!(out.provenance, Provenance::Predicted);
    assert_eq!(out.dim(), 8);
    let frozen = golden("predictor_output.json", &out.vector);
    for (a, b) in out.vector.iter().zip(&frozen) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}
