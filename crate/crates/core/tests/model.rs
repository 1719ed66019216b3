mod common;

use common::{golden, normal_vec, softmax_direct};
use langmix::langembed::{Provenance, WeightedEmbedding};
use langmix::model::{LanguageInput, ModelConfig, TinyAsr, SOT};
use langmix::trainer::AdapterConfig;
use langmix::{seeds, Tensor};

fn config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        feature_dim: 6,
        transcript_vocab: 5,
        num_language_tags: 4,
        ffn_hidden: 24,
        max_frames: 12,
        max_decode_len: 6,
        ..ModelConfig::default()
    }
}

fn labels(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("l{i}")).collect()
}

fn features(seed: u64, rows: usize) -> Tensor {
    let mut rng = seeds::rng(seed);
    Tensor::matrix(rows, 6, normal_vec(&mut rng, rows * 6, 1.0).into_iter().map(|v| v as f32).collect()).unwrap()
}

fn sot_prefix(m: &TinyAsr) -> Tensor {
    Tensor::from_rows(&[m.embedding_matrix().row(SOT).to_vec()]).unwrap()
}

#[test]
fn fresh_model_logits_are_frozen() {
    let m = TinyAsr::new(config(), labels(4), 42).unwrap();
    let logits = m.next_token_logits(&features(1, 5), &sot_prefix(&m)).unwrap();
    assert_eq!(logits.len(), config().total_vocab());
    let frozen = golden("fresh_model_logits.json", &logits);
    for (a, b) in logits.iter().zip(&frozen) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn language_distribution_is_the_renormalized_tag_slice() {
    let m = TinyAsr::new(config(), labels(4), 8).unwrap();
    let r = m.tag_range();
    for seed in 0..20 {
        let x = features(100 + seed, 3 + seed as usize % 6);
        let full: Vec<f64> = m
            .next_token_logits(&x, &sot_prefix(&m))
            .unwrap()
            .iter()
            .map(|&v| v as f64)
            .collect();
        let p = softmax_direct(&full);
        let mass: f64 = p[r.first..r.end()].iter().sum();
        let dist = m.language_distribution(&x).unwrap();
        assert_eq!(dist.len(), 4);
        for (a, b) in dist.probs().iter().zip(&p[r.first..r.end()]) {
            assert!((a - b / mass).abs() < 1e-9);
        }
    }
}

#[test]
fn tag_and_equal_vector_prefixes_decode_identically() {
    let m = TinyAsr::new(config(), labels(4), 8).unwrap();
    let x = features(3, 6);
    let row = m.embedding_table().tag_row(2).to_vec();
    let by_vec = LanguageInput::Embedding(WeightedEmbedding::new(row, Provenance::CorpusWs));
    assert_eq!(
        m.embed_prefix(&LanguageInput::Tag(2)).unwrap(),
        m.embed_prefix(&by_vec).unwrap()
    );
    assert_eq!(
        m.greedy_decode(&x, &LanguageInput::Tag(2)).unwrap(),
        m.greedy_decode(&x, &by_vec).unwrap()
    );
}

/// Two transcript tokens, one tag, `d_model = 4`. Every decoder block writes
/// zero, so the output at position `p` is `layer_norm(embed[token] + pos[p])`
/// projected on the embedding rows; the positions steer the sequence.
fn rigged(step_targets: [usize; 3]) -> TinyAsr {
    let cfg = ModelConfig {
        d_model: 4,
        feature_dim: 2,
        transcript_vocab: 2,
        num_language_tags: 1,
        ffn_hidden: 4,
        max_frames: 4,
        max_decode_len: 5,
        ..ModelConfig::default()
    };
    let mut m = TinyAsr::new(cfg, labels(1), 1).unwrap();
    let axis = |i: usize| {
        let mut v = vec![0.0f32; 4];
        v[i] = 1.0;
        v
    };
    // Vocabulary: sot, transcribe, eot, a, b, tag.
    let embed = [axis(3), axis(3), axis(0), axis(1), axis(2), axis(3)];
    let set = |m: &mut TinyAsr, name: &str, f: &dyn Fn(&mut [f32])| {
        let id = m.params().expect_id(name).unwrap();
        f(m.params_mut().get_mut(id).value.data_mut());
    };
    set(&mut m, "embed", &|d| {
        for (r, row) in embed.iter().enumerate() {
            d[r * 4..(r + 1) * 4].copy_from_slice(row);
        }
    });
    for name in ["dec.0.self.o.w", "dec.0.cross.o.w", "dec.0.ffn.down.w", "dec.0.ffn.down.b"] {
        set(&mut m, name, &|d| d.fill(0.0));
    }
    // Axis of each vocabulary row: eot 0, a 1, b 2.
    set(&mut m, "dec.pos", &|d| {
        d.fill(0.0);
        for (step, &axis) in step_targets.iter().enumerate() {
            d[(2 + step) * 4 + axis] = 10.0;
        }
    });
    m
}

#[test]
fn hand_set_weights_force_the_sequence() {
    let m = rigged([1, 2, 0]);
    let x = Tensor::matrix(2, 2, vec![0.1, -0.2, 0.3, 0.0]).unwrap();
    assert_eq!(m.greedy_decode(&x, &LanguageInput::Tag(0)).unwrap(), vec![0, 1]);
    let eot_first = rigged([0, 1, 2]);
    assert!(eot_first.greedy_decode(&x, &LanguageInput::Tag(0)).unwrap().is_empty());
}

#[test]
fn decoding_respects_the_length_bound() {
    let m = TinyAsr::new(config(), labels(4), 13).unwrap();
    for seed in 0..10 {
        let out = m.greedy_decode(&features(seed, 5), &LanguageInput::Tag(seed as usize % 4)).unwrap();
        assert!(out.len() <= config().max_decode_len);
        assert!(out.iter().all(|&t| t < config().transcript_vocab));
    }
}

#[test]
fn fresh_adapters_change_nothing() {
    let base = TinyAsr::new(config(), labels(4), 21).unwrap();
    let mut adapted = base.clone();
    adapted.apply_adapters(&AdapterConfig::default(), 5).unwrap();
    assert!(adapted.adapter_parameter_count() > 0);
    for seed in 0..5 {
        let x = features(seed, 4);
        let prefix = base.embed_prefix(&LanguageInput::Tag(1)).unwrap();
        let a = base.next_token_logits(&x, &prefix).unwrap();
        let b = adapted.next_token_logits(&x, &prefix).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}

#[test]
fn merged_adapters_reproduce_the_adapted_model() {
    let mut m = TinyAsr::new(config(), labels(4), 21).unwrap();
    m.apply_adapters(&AdapterConfig::default(), 5).unwrap();
    let mut rng = seeds::rng(99);
    let ups: Vec<String> = m
        .params()
        .iter()
        .map(|(_, p)| p.name.clone())
        .filter(|n| n.ends_with("lora_up"))
        .collect();
    assert!(!ups.is_empty());
    for name in ups {
        let id = m.params().expect_id(&name).unwrap();
        let v = &mut m.params_mut().get_mut(id).value;
        let noise = normal_vec(&mut rng, v.len(), 0.1);
        for (w, z) in v.data_mut().iter_mut().zip(noise) {
            *w = z as f32;
        }
    }
    let merged = m.merge_adapters().unwrap();
    assert!(!merged.has_adapters());
    for seed in 0..5 {
        let x = features(seed, 5);
        let prefix = m.embed_prefix(&LanguageInput::Tag(seed as usize % 4)).unwrap();
        let a = m.next_token_logits(&x, &prefix).unwrap();
        let b = merged.next_token_logits(&x, &prefix).unwrap();
        let moved = a.iter().zip(&base_logits(&x, &prefix)).any(|(p, q)| (p - q).abs() > 1e-3);
        assert!(moved, "adapters should matter after perturbation");
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-5, "{p} vs {q}");
        }
    }
}

fn base_logits(x: &Tensor, prefix: &Tensor) -> Vec<f32> {
    TinyAsr::new(config(), labels(4), 21).unwrap().next_token_logits(x, prefix).unwrap()
}
