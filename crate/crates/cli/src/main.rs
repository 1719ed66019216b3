//! `langmix`: generate a synthetic benchmark, pretrain, model unseen-language
//! embeddings and produce the method table, one subcommand per stage.

mod rundir;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use langmix::config::RunConfig;
use langmix::corpus::{family_similarity, load_benchmark, save_benchmark, Benchmark, SplitKind};
use langmix::eval::{emit_report, evaluate, parse_matrix_entry, run_seed, zero_shot_eval, ReportFormat};
use langmix::langembed::{
    corpus_ws_embedding, utterance_ws_embedding, LangDistribution, PredictorParams, WeightedEmbedding,
};
use langmix::model::TinyAsr;
use langmix::pipeline::{build_benchmark, experiment_report, fit_predictor, predictor_heldout, pretrain_model};
use langmix::trainer::{finetune, write_metrics_jsonl, FineTuneMethod, FineTuned, Setting, TrainConfig};

use rundir::{invalid, Invalid, RunDir};

#[derive(Parser)]
#[command(name = "langmix", version, about = "Language-embedding experiments for unseen languages")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; defaults to the one recorded in --out.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Dotted override such as `finetune.train.epochs=4`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run directory holding every artifact.
    #[arg(long, value_name = "DIR", default_value = "run")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbedMode {
    Utterance,
    Corpus,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic language families and their utterances.
    GenData(Common),
    /// Pretrain the recognizer on the seen languages.
    Pretrain(Common),
    /// Per-utterance language distributions from the pretrained model.
    Langdist(Common),
    /// Weighted-sum language embeddings per utterance or per corpus.
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: EmbedMode,
    },
    /// Train the embedding predictor by leave-one-language-out masking.
    TrainPredictor(Common),
    /// Fine-tune on the unseen languages with one method.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "NAME")]
        method: String,
    },
    /// Score one method on the unseen test split (`setting:method` or a bare name).
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "NAME")]
        method: String,
    },
    /// Run the full method table and write CSV and markdown reports.
    Report {
        #[command(flatten)]
        common: Common,
        /// Comma-separated fine-tuning seeds; defaults to eval.seeds.
        #[arg(long, value_delimiter = ',', value_name = "LIST")]
        seeds: Option<Vec<u64>>,
    },
}

#[derive(Serialize, Deserialize)]
struct LangDistRecord {
    utterance_id: String,
    lang_id: String,
    split: SplitKind,
    probs: Vec<f64>,
}

#[derive(Serialize)]
struct UtteranceEmbedding<'a> {
    utterance_id: &'a str,
    lang_id: &'a str,
    split: SplitKind,
    vector: &'a [f32],
}

#[derive(Serialize)]
struct CorpusEmbedding<'a> {
    lang_id: &'a str,
    split: SplitKind,
    n_utterances: usize,
    vector: &'a [f32],
}

#[derive(Serialize)]
struct EvalRecord {
    setting: Setting,
    method: FineTuneMethod,
    cer: f64,
    wer: f64,
    n_utterances: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if e.downcast_ref::<Invalid>().is_some() { 1 } else { 2 })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(c) => gen_data(&c),
        Command::Pretrain(c) => pretrain(&c),
        Command::Langdist(c) => langdist(&c),
        Command::Embed { common, mode } => embed(&common, mode),
        Command::TrainPredictor(c) => train_predictor(&c),
        Command::Finetune { common, method } => finetune_cmd(&common, &method),
        Command::Evaluate { common, method } => evaluate_cmd(&common, &method),
        Command::Report { common, seeds } => report(&common, seeds),
    }
}

fn open(c: &Common) -> Result<(RunDir, RunConfig)> {
    let dir = RunDir::new(&c.out);
    let cfg = dir.resolve_config(c.config.as_deref(), &c.set)?;
    Ok((dir, cfg))
}

fn load_bench(dir: &RunDir) -> Result<Benchmark> {
    let p = dir.benchmark();
    dir.require(&p.join("benchmark.json"), "gen-data")?;
    load_benchmark(&p).with_context(|| format!("loading {}", p.display()))
}

fn load_pretrained(dir: &RunDir) -> Result<TinyAsr> {
    let p = dir.pretrained();
    dir.require(&p.join("model.json"), "pretrain")?;
    TinyAsr::load(&p).with_context(|| format!("loading {}", p.display()))
}

fn load_predictor(dir: &RunDir) -> Result<PredictorParams> {
    let p = dir.predictor();
    dir.require(&p.join("predictor.json"), "train-predictor")?;
    Ok(PredictorParams::load(&p).with_context(|| format!("loading {}", p.display()))?.0)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(&r)?);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(c: &Common) -> Result<()> {
    let (dir, cfg) = open(c)?;
    let benchmark = build_benchmark(&cfg)?;
    save_benchmark(&benchmark, dir.benchmark())?;
    let (within, across) = family_similarity(&benchmark);
    println!(
        "{} seen, {} unseen languages; basis cosine within families {within:.3}, across {across:.3}",
        benchmark.seen_languages.len(),
        benchmark.unseen_languages.len()
    );
    Ok(())
}

fn pretrain(c: &Common) -> Result<()> {
    let (dir, cfg) = open(c)?;
    let benchmark = load_bench(&dir)?;
    let (model, report) = pretrain_model(&cfg, &benchmark)?;
    model.save(dir.pretrained())?;
    write_metrics_jsonl(&report.history, dir.pretrain_metrics())?;
    write_json(&dir.pretrain_report(), &report)?;
    println!(
        "seen-language tag accuracy {:.3}, CER {:.2}%",
        report.tag_accuracy,
        100.0 * report.metrics.cer
    );
    Ok(())
}

fn langdist(c: &Common) -> Result<()> {
    let (dir, _) = open(c)?;
    let benchmark = load_bench(&dir)?;
    let model = load_pretrained(&dir)?;
    let mut records = Vec::new();
    for spec in benchmark.seen_languages.iter().chain(&benchmark.unseen_languages) {
        for kind in [SplitKind::Train, SplitKind::Test] {
            for u in benchmark.split(&spec.lang_id, kind) {
                records.push(LangDistRecord {
                    utterance_id: u.id.clone(),
                    lang_id: u.lang_id.clone(),
                    split: kind,
                    probs: model.language_distribution(&u.features)?.probs().to_vec(),
                });
            }
        }
    }
    write_jsonl(&dir.langdist(), &records)?;
    println!("{} distributions over {} tags", records.len(), model.tag_range().count);
    Ok(())
}

fn read_langdist(dir: &RunDir) -> Result<Vec<LangDistRecord>> {
    let p = dir.langdist();
    dir.require(&p, "langdist")?;
    let text = fs::read_to_string(&p)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", p.display(), i + 1)))
        .collect()
}

fn embed(c: &Common, mode: EmbedMode) -> Result<()> {
    let (dir, _) = open(c)?;
    let model = load_pretrained(&dir)?;
    let records = read_langdist(&dir)?;
    let table = model.embedding_table();
    let dists = records
        .iter()
        .map(|r| LangDistribution::new(r.probs.clone()))
        .collect::<langmix::Result<Vec<_>>>()?;
    match mode {
        EmbedMode::Utterance => {
            let vectors = dists
                .iter()
                .map(|d| utterance_ws_embedding(d, &table))
                .collect::<langmix::Result<Vec<WeightedEmbedding>>>()?;
            write_jsonl(
                &dir.embeddings("utterance"),
                records.iter().zip(&vectors).map(|(r, v)| UtteranceEmbedding {
                    utterance_id: &r.utterance_id,
                    lang_id: &r.lang_id,
                    split: r.split,
                    vector: &v.vector,
                }),
            )?;
            println!("{} utterance embeddings", vectors.len());
        }
        EmbedMode::Corpus => {
            let mut groups: BTreeMap<(String, &str), (SplitKind, Vec<LangDistribution>)> = BTreeMap::new();
            for (r, d) in records.iter().zip(dists) {
                groups
                    .entry((r.lang_id.clone(), r.split.as_str()))
                    .or_insert_with(|| (r.split, Vec::new()))
                    .1
                    .push(d);
            }
            let mut rows = Vec::new();
            for ((lang, _), (split, ds)) in &groups {
                rows.push((lang, *split, ds.len(), corpus_ws_embedding(ds, &table)?));
            }
            write_jsonl(
                &dir.embeddings("corpus"),
                rows.iter().map(|(lang, split, n, v)| CorpusEmbedding {
                    lang_id: lang,
                    split: *split,
                    n_utterances: *n,
                    vector: &v.vector,
                }),
            )?;
            println!("{} corpus embeddings", rows.len());
        }
    }
    Ok(())
}

fn train_predictor(c: &Common) -> Result<()> {
    let (dir, cfg) = open(c)?;
    let benchmark = load_bench(&dir)?;
    let model = load_pretrained(&dir)?;
    let trained = fit_predictor(&cfg, &model, &benchmark)?;
    let heldout = predictor_heldout(&cfg, &model, &benchmark)?;
    let p = dir.predictor();
    trained.params.save(&p, &trained.meta)?;
    write_json(&p.join("history.json"), &trained.history)?;
    write_json(&p.join("heldout.json"), &heldout)?;
    println!(
        "best epoch {} (val MSE {:.5}); held-out MSE predictor {:.5}, weighted sum {:.5}, mean of tags {:.5}",
        trained.history.best_epoch,
        trained.history.best_val_mse,
        heldout.predictor_mse,
        heldout.ws_input_mse,
        heldout.mean_of_tags_mse
    );
    Ok(())
}

fn fine_tuning_method(name: &str) -> Result<FineTuneMethod> {
    let method: FineTuneMethod = name.parse().map_err(|e| invalid(format!("{e}")))?;
    if !method.supports(Setting::FineTuning) {
        return Err(invalid(format!("method {method} has no fine-tuning form")));
    }
    Ok(method)
}

fn finetune_cmd(c: &Common, name: &str) -> Result<()> {
    let method = fine_tuning_method(name)?;
    let (dir, cfg) = open(c)?;
    let benchmark = load_bench(&dir)?;
    let pretrained = load_pretrained(&dir)?;
    let predictor = if method.uses_predictor() { Some(load_predictor(&dir)?) } else { None };
    let base = cfg.finetune_config();
    let train_cfg = TrainConfig {
        seed: run_seed(base.seed, method, cfg.eval.seeds[0]),
        ..base
    };
    let unseen = benchmark.corpora(&benchmark.unseen_ids(), SplitKind::Train);
    let ft = finetune(
        &pretrained,
        &unseen,
        method,
        &train_cfg,
        &cfg.finetune.adapters,
        predictor.as_ref(),
        cfg.finetune.new_tag_init,
    )?;
    ft.save(dir.finetuned(method))?;
    if let Some(last) = ft.history.last() {
        println!("{method}: {} epochs, final loss {:.4}", last.epoch, last.loss);
    }
    Ok(())
}

fn evaluate_cmd(c: &Common, entry: &str) -> Result<()> {
    let (setting, method) = parse_matrix_entry(entry).map_err(|e| invalid(format!("{e}")))?;
    let (dir, _) = open(c)?;
    let benchmark = load_bench(&dir)?;
    let pretrained = load_pretrained(&dir)?;
    let test = benchmark.corpora(&benchmark.unseen_ids(), SplitKind::Test);
    let metrics = match setting {
        Setting::ZeroShot => zero_shot_eval(&pretrained, &test, method)?,
        Setting::FineTuning => {
            let p = dir.finetuned(method);
            dir.require(&p.join("finetune.json"), &format!("finetune --method {}", method.name()))?;
            let ft = FineTuned::load(&p, pretrained).with_context(|| format!("loading {}", p.display()))?;
            evaluate(&ft, &test)?
        }
    };
    write_json(
        &dir.evaluation(setting.as_str(), method),
        &EvalRecord {
            setting,
            method,
            cer: metrics.cer,
            wer: metrics.wer,
            n_utterances: metrics.n_utterances,
        },
    )?;
    println!(
        "{} {method}: CER {:.2}%, WER {:.2}% over {} utterances",
        setting.as_str(),
        100.0 * metrics.cer,
        100.0 * metrics.wer,
        metrics.n_utterances
    );
    Ok(())
}

fn report(c: &Common, seeds: Option<Vec<u64>>) -> Result<()> {
    let (dir, cfg) = open(c)?;
    let seeds = seeds.unwrap_or_else(|| cfg.eval.seeds.clone());
    if seeds.is_empty() {
        return Err(invalid("--seeds must list at least one seed"));
    }
    let matrix = cfg.eval.matrix().map_err(|e| invalid(format!("{e}")))?;
    let benchmark = load_bench(&dir)?;
    let pretrained = load_pretrained(&dir)?;
    let predictor = if matrix.iter().any(|(_, m)| m.uses_predictor()) {
        Some(load_predictor(&dir)?)
    } else {
        None
    };
    let table = experiment_report(&cfg, &benchmark, &pretrained, predictor.as_ref(), &seeds)?;
    emit_report(&table, ReportFormat::Csv, dir.report("csv"))?;
    emit_report(&table, ReportFormat::Markdown, dir.report("md"))?;
    write_json(&dir.report("json"), &table)?;
    print!("{}", table.to_markdown());
    Ok(())
}
