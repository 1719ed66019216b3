use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "seed": 5,
  "benchmark": {"num_families": 2, "seen_per_family": 2, "unseen_per_family": 1,
                "utterances_per_split": 6, "traits_per_family": 2},
  "model": {"d_model": 16, "ffn_hidden": 32},
  "pretrain": {"epochs": 2},
  "finetune": {"train": {"epochs": 1}},
  "predictor": {"epochs": 3},
  "eval": {"seeds": [1]}
}"#;

fn langmix(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_langmix"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("spawn langmix")
}

fn ok(args: &[&str], out: &Path) -> String {
    let o = langmix(args, out);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.json");
    fs::write(&p, TINY).unwrap();
    p.display().to_string()
}

fn jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn prepared(tmp: &Path) -> (std::path::PathBuf, String) {
    let cfg = tiny_config(tmp);
    let out = tmp.join("run");
    ok(&["gen-data", "--config", &cfg], &out);
    ok(&["pretrain"], &out);
    (out, cfg)
}

#[test]
fn pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let (out, _) = prepared(tmp.path());
    ok(&["langdist"], &out);
    ok(&["embed", "--mode", "utterance"], &out);
    ok(&["embed", "--mode", "corpus"], &out);
    ok(&["train-predictor"], &out);
    ok(&["finetune", "--method", "predictor_corpus_ws"], &out);
    let eval = ok(&["evaluate", "--method", "predictor_corpus_ws"], &out);
    assert!(eval.contains("CER"));
    ok(&["evaluate", "--method", "zero_shot:corpus_ws"], &out);
    ok(&["report", "--seeds", "1,2"], &out);

    for p in [
        "config.json",
        "benchmark/benchmark.json",
        "benchmark/train.jsonl",
        "pretrained/model.json",
        "pretrain_metrics.jsonl",
        "langdist.jsonl",
        "embed_utterance.jsonl",
        "embed_corpus.jsonl",
        "predictor/predictor.json",
        "predictor/heldout.json",
        "finetune/predictor_corpus_ws/finetune.json",
        "finetune/predictor_corpus_ws/metrics.jsonl",
        "eval/fine_tuning-predictor_corpus_ws.json",
        "eval/zero_shot-corpus_ws.json",
        "report.csv",
        "report.md",
    ] {
        assert!(out.join(p).exists(), "{p} missing");
    }
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "setting,method,trainable_embedding,predictor,applied_ft,applied_inf,cer_mean,cer_std,wer_mean,wer_std"
    );
    assert_eq!(csv.lines().count(), 12);
    let dists = jsonl(&out.join("langdist.jsonl"));
    // 2 families × 3 languages × 2 splits × 6 utterances.
    assert_eq!(dists.len(), 72);
    assert_eq!(dists[0]["probs"].as_array().unwrap().len(), 4);
}

#[test]
fn corpus_embedding_is_mean_of_utterance_embeddings() {
    let tmp = tempfile::tempdir().unwrap();
    let (out, _) = prepared(tmp.path());
    ok(&["langdist"], &out);
    ok(&["embed", "--mode", "utterance"], &out);
    ok(&["embed", "--mode", "corpus"], &out);

    let mut sums: BTreeMap<(String, String), (Vec<f64>, usize)> = BTreeMap::new();
    for r in jsonl(&out.join("embed_utterance.jsonl")) {
        let key = (r["lang_id"].as_str().unwrap().to_string(), r["split"].as_str().unwrap().to_string());
        let v: Vec<f64> = r["vector"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        let e = sums.entry(key).or_insert_with(|| (vec![0.0; v.len()], 0));
        for (s, x) in e.0.iter_mut().zip(&v) {
            *s += x;
        }
        e.1 += 1;
    }
    let corpus = jsonl(&out.join("embed_corpus.jsonl"));
    assert_eq!(corpus.len(), sums.len());
    for r in corpus {
        let key = (r["lang_id"].as_str().unwrap().to_string(), r["split"].as_str().unwrap().to_string());
        let (sum, n) = &sums[&key];
        assert_eq!(r["n_utterances"].as_u64().unwrap() as usize, *n);
        for (c, s) in r["vector"].as_array().unwrap().iter().zip(sum) {
            assert!((c.as_f64().unwrap() - s / *n as f64).abs() < 1e-6);
        }
    }
}

#[test]
fn reruns_reproduce_outputs_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let runs: Vec<_> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = tmp.path().join(name);
            ok(&["gen-data", "--config", &cfg], &out);
            ok(&["pretrain"], &out);
            ok(&["train-predictor"], &out);
            ok(&["report"], &out);
            out
        })
        .collect();
    for f in [
        "benchmark/test.jsonl",
        "pretrained/embed.lbt",
        "pretrain_metrics.jsonl",
        "predictor/layer1.w.lbt",
        "report.csv",
    ] {
        assert_eq!(fs::read(runs[0].join(f)).unwrap(), fs::read(runs[1].join(f)).unwrap(), "{f}");
    }
    // Re-executing from the recorded config alone gives the same table.
    ok(&["report", "--config", runs[0].join("config.json").to_str().unwrap()], &runs[0]);
    assert_eq!(
        fs::read(runs[0].join("report.csv")).unwrap(),
        fs::read(runs[1].join("report.csv")).unwrap()
    );
}

#[test]
fn missing_artifact_names_its_producer() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("run");
    let o = langmix(&["pretrain", "--config", &cfg], &out);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("langmix gen-data"));

    ok(&["gen-data"], &out);
    ok(&["pretrain"], &out);
    let o = langmix(&["embed", "--mode", "corpus"], &out);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("langmix langdist"));
    let o = langmix(&["evaluate", "--method", "param_corpus_ws"], &out);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("finetune --method param_corpus_ws"));
}

#[test]
fn validation_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("run");
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"seed": 1, "modle": {}}"#).unwrap();
    let noseed = tmp.path().join("noseed.json");
    fs::write(&noseed, "{}").unwrap();

    for args in [
        vec!["gen-data", "--config", bad.to_str().unwrap()],
        vec!["gen-data", "--config", noseed.to_str().unwrap()],
        vec!["gen-data", "--config", &cfg, "--set", "model.d_model"],
        vec!["gen-data", "--config", &cfg, "--set", "eval.seeds=[]"],
        vec!["finetune", "--config", &cfg, "--method", "default"],
        vec!["finetune", "--config", &cfg, "--method", "nope"],
        vec!["evaluate", "--config", &cfg, "--method", "zero_shot:baseline"],
        vec!["embed", "--config", &cfg, "--mode", "sideways"],
        vec!["frobnicate"],
    ] {
        let o = langmix(&args, &out);
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(!out.join("benchmark").exists());
}

#[test]
fn run_directory_keeps_one_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("run");
    ok(&["gen-data", "--config", &cfg], &out);
    let o = langmix(&["pretrain", "--set", "pretrain.epochs=3"], &out);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("differs"));
    let recorded: Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(recorded["pretrain"]["epochs"], 2);
    assert_eq!(recorded["model"]["decoder_layers"], 1, "defaults are filled in");
}

#[test]
fn corrupt_artifact_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("run");
    ok(&["gen-data", "--config", &cfg], &out);
    fs::write(out.join("benchmark/benchmark.json"), "{ not json").unwrap();
    let o = langmix(&["pretrain"], &out);
    assert_eq!(o.status.code(), Some(2));
}
