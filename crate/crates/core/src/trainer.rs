//! Pretraining on seen languages and adapter fine-tuning on unseen ones.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{shuffled, Utterance};
use crate::error::{Error, Result};
use crate::eval::{corpus_metrics, MetricsResult};
use crate::langembed::{
    argmax_language, corpus_ws_embedding, predict_embedding, utterance_ws_embedding, Activation,
    PredictorParams, WeightedEmbedding,
};
use crate::model::{LanguageInput, TagInit, TinyAsr, EOT, PREFIX_LEN};
use crate::numerics::{clip_grad_norm, AdamW, AdamWConfig, Graph};
use crate::seeds;

/// Low-rank adapter hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f32,
    pub dropout: f32,
}

impl Default for AdapterConfig {
    /// Desk-scale values.
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 8.0,
            dropout: 0.05,
        }
    }
}

impl AdapterConfig {
    /// Full-scale values (rank 32, alpha 64, dropout 0.05).
    pub fn paper() -> Self {
        Self {
            rank: 32,
            alpha: 64.0,
            dropout: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::invalid("adapter rank must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("adapter dropout must lie in [0, 1)"));
        }
        if !self.alpha.is_finite() {
            return Err(Error::invalid("adapter alpha must be finite"));
        }
        Ok(())
    }

    pub fn scale(&self) -> f32 {
        self.alpha / self.rank as f32
    }
}

/// Fine-tuning optimization settings. `Default` holds the full-scale recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_grad_norm: Option<f64>,
    /// Set from the run's derived seeds, not from configuration files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 4.7e-5,
            weight_decay: 0.02,
            epochs: 5,
            batch_size: 8,
            max_grad_norm: Some(1.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings sized for the synthetic benchmark.
    pub fn desk() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        AdamWConfig::new(self.learning_rate, self.weight_decay).validate()?;
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if matches!(self.max_grad_norm, Some(n) if !(n > 0.0)) {
            return Err(Error::invalid("max_grad_norm must be positive"));
        }
        Ok(())
    }
}

/// Pretraining settings for the seen-language recognizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_grad_norm: Option<f64>,
    /// Weight of the language-tag loss relative to the transcript loss.
    pub tag_loss_weight: f32,
    /// Share of each seen training split repeated with a sibling's accent and the
    /// true tag, without tag loss. Forces the decoder to read the tag.
    pub accent_swap_fraction: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            weight_decay: 0.01,
            epochs: 30,
            batch_size: 8,
            max_grad_norm: Some(1.0),
            tag_loss_weight: 1.0,
            accent_swap_fraction: 0.5,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    fn as_train(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
            max_grad_norm: self.max_grad_norm,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FineTuneMethod {
    Default,
    CorpusWs,
    UtteranceWs,
    Baseline,
    BaselineThenCorpusWs,
    BaselineThenUtteranceWs,
    ParamCorpusWs,
    PredictorCorpusWs,
    PredictorUtteranceWs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    ZeroShot,
    FineTuning,
}

impl Setting {
    pub fn as_str(self) -> &'static str {
        match self {
            Setting::ZeroShot => "zero_shot",
            Setting::FineTuning => "fine_tuning",
        }
    }
}

/// Stages in which an embedding substitution is active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppliedStage {
    pub fine_tuning: bool,
    pub inference: bool,
}

impl FineTuneMethod {
    pub const ALL: [FineTuneMethod; 9] = [
        FineTuneMethod::Default,
        FineTuneMethod::CorpusWs,
        FineTuneMethod::UtteranceWs,
        FineTuneMethod::Baseline,
        FineTuneMethod::BaselineThenCorpusWs,
        FineTuneMethod::BaselineThenUtteranceWs,
        FineTuneMethod::ParamCorpusWs,
        FineTuneMethod::PredictorCorpusWs,
        FineTuneMethod::PredictorUtteranceWs,
    ];

    pub const ZERO_SHOT: [FineTuneMethod; 3] = [
        FineTuneMethod::Default,
        FineTuneMethod::CorpusWs,
        FineTuneMethod::UtteranceWs,
    ];

    pub const FINE_TUNING: [FineTuneMethod; 8] = [
        FineTuneMethod::Baseline,
        FineTuneMethod::CorpusWs,
        FineTuneMethod::UtteranceWs,
        FineTuneMethod::BaselineThenCorpusWs,
        FineTuneMethod::BaselineThenUtteranceWs,
        FineTuneMethod::ParamCorpusWs,
        FineTuneMethod::PredictorCorpusWs,
        FineTuneMethod::PredictorUtteranceWs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FineTuneMethod::Default => "default",
            FineTuneMethod::CorpusWs => "corpus_ws",
            FineTuneMethod::UtteranceWs => "utterance_ws",
            FineTuneMethod::Baseline => "baseline",
            FineTuneMethod::BaselineThenCorpusWs => "baseline_then_corpus_ws",
            FineTuneMethod::BaselineThenUtteranceWs => "baseline_then_utterance_ws",
            FineTuneMethod::ParamCorpusWs => "param_corpus_ws",
            FineTuneMethod::PredictorCorpusWs => "predictor_corpus_ws",
            FineTuneMethod::PredictorUtteranceWs => "predictor_utterance_ws",
        }
    }

    pub fn supports(self, setting: Setting) -> bool {
        match setting {
            Setting::ZeroShot => Self::ZERO_SHOT.contains(&self),
            Setting::FineTuning => self != FineTuneMethod::Default,
        }
    }

    pub fn trainable_embedding(self) -> bool {
        matches!(
            self,
            FineTuneMethod::Baseline
                | FineTuneMethod::BaselineThenCorpusWs
                | FineTuneMethod::BaselineThenUtteranceWs
                | FineTuneMethod::ParamCorpusWs
        )
    }

    pub fn uses_predictor(self) -> bool {
        matches!(self, FineTuneMethod::PredictorCorpusWs | FineTuneMethod::PredictorUtteranceWs)
    }

    fn trains_new_tag(self) -> bool {
        self.trainable_embedding()
    }

    pub fn applied_stage(self, setting: Setting) -> AppliedStage {
        use FineTuneMethod::*;
        let (ft, inf) = match (setting, self) {
            (_, Default | Baseline) => (false, false),
            (Setting::ZeroShot, _) => (false, true),
            (Setting::FineTuning, BaselineThenCorpusWs | BaselineThenUtteranceWs) => (false, true),
            (Setting::FineTuning, _) => (true, true),
        };
        AppliedStage {
            fine_tuning: ft,
            inference: inf,
        }
    }
}

impl fmt::Display for FineTuneMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FineTuneMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|m| m.name() == key)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|m| m.name()).collect();
                Error::invalid(format!("unknown method `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cer: Option<f64>,
}

pub fn write_metrics_jsonl(history: &[EpochMetrics], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ctx = || path.display().to_string();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(ctx(), e))?;
    }
    let mut f = File::create(path).map_err(|e| Error::io(ctx(), e))?;
    for m in history {
        writeln!(f, "{}", serde_json::to_string(m)?).map_err(|e| Error::io(ctx(), e))?;
    }
    Ok(())
}

struct Example<'a> {
    utt: &'a Utterance,
    language: LanguageInput,
    tag_target: Option<usize>,
}

/// Minibatch AdamW over teacher-forced cross-entropy. Returns mean loss per epoch.
fn train_loop(
    model: &mut TinyAsr,
    examples: &[Example<'_>],
    cfg: &TrainConfig,
    tag_weight: f32,
    stream: &str,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::invalid("no training utterances"));
    }
    let mut opt = AdamW::new(AdamWConfig::new(cfg.learning_rate, cfg.weight_decay))?;
    let mut order_rng = seeds::named_rng(cfg.seed, &format!("{stream}/order"));
    let mut dropout_rng = seeds::named_rng(cfg.seed, &format!("{stream}/dropout"));
    let indices: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        let order = shuffled(&indices, &mut order_rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            model.params_mut().zero_grads();
            let (loss_value, grads) = {
                let mut g = Graph::new(model.params());
                let mut loss = None;
                let inv = 1.0 / batch.len() as f32;
                for &i in batch {
                    let ex = &examples[i];
                    let mut dropout = Some(&mut dropout_rng);
                    let logits = model.teacher_forced_logits(
                        &mut g,
                        &ex.utt.features,
                        &ex.language,
                        &ex.utt.transcript,
                        &mut dropout,
                    )?;
                    let n = ex.utt.transcript.len() + 1;
                    let rows = g.slice_rows(logits, PREFIX_LEN - 1, n)?;
                    let mut targets: Vec<usize> =
                        ex.utt.transcript.iter().map(|&t| model.transcript_token(t)).collect();
                    targets.push(EOT);
                    let mut l = g.cross_entropy(rows, &targets)?;
                    if let Some(tag) = ex.tag_target {
                        let row = g.slice_rows(logits, 0, 1)?;
                        let tl = g.cross_entropy(row, &[model.tag_range().vocab_index(tag)])?;
                        let tl = g.scale(tl, tag_weight);
                        l = g.add(l, tl)?;
                    }
                    let l = g.scale(l, inv);
                    loss = Some(match loss {
                        None => l,
                        Some(acc) => g.add(acc, l)?,
                    });
                }
                let loss = loss.expect("non-empty batch");
                (g.value(loss).data()[0] as f64, g.backward(loss)?)
            };
            model.params_mut().accumulate(&grads);
            if let Some(n) = cfg.max_grad_norm {
                clip_grad_norm(model.params_mut(), n);
            }
            step += 1;
            opt.step(model.params_mut(), step)?;
            total += loss_value * batch.len() as f64;
        }
        history.push(EpochMetrics {
            epoch,
            loss: total / examples.len() as f64,
            cer: None,
        });
    }
    Ok(history)
}

/// Final numbers of a pretraining run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub history: Vec<EpochMetrics>,
    pub tag_accuracy: f64,
    pub metrics: MetricsResult,
}

/// Joint language-identification and transcription training of every parameter
/// on the seen languages. `accent_swapped` utterances get transcript loss only.
/// `held_out` is only used for the final report.
pub fn pretrain(
    model: &mut TinyAsr,
    seen: &[(String, Vec<Utterance>)],
    accent_swapped: &[(String, Vec<Utterance>)],
    held_out: &[(String, Vec<Utterance>)],
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    if seen.len() < 2 {
        return Err(Error::invalid("pretraining needs at least two seen languages"));
    }
    let mut examples = Vec::new();
    for (lang, utts) in seen {
        let tag = model
            .tag_of(lang)
            .ok_or_else(|| Error::invalid(format!("language {lang} has no tag")))?;
        for u in utts {
            examples.push(Example {
                utt: u,
                language: LanguageInput::Tag(tag),
                tag_target: Some(tag),
            });
        }
    }
    for (lang, utts) in accent_swapped {
        let tag = model
            .tag_of(lang)
            .ok_or_else(|| Error::invalid(format!("language {lang} has no tag")))?;
        examples.extend(utts.iter().map(|u| Example {
            utt: u,
            language: LanguageInput::Tag(tag),
            tag_target: None,
        }));
    }
    model.params_mut().set_all_trainable(true);
    let history = train_loop(model, &examples, &cfg.as_train(), cfg.tag_loss_weight, "pretrain")?;
    let (tag_accuracy, metrics) = seen_language_report(model, held_out)?;
    Ok(PretrainReport {
        history,
        tag_accuracy,
        metrics,
    })
}

/// Tag accuracy of the argmax language and CER/WER when decoding with the true tag.
pub fn seen_language_report(model: &TinyAsr, corpora: &[(String, Vec<Utterance>)]) -> Result<(f64, MetricsResult)> {
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut pairs = Vec::new();
    for (lang, utts) in corpora {
        let tag = model
            .tag_of(lang)
            .ok_or_else(|| Error::invalid(format!("language {lang} has no tag")))?;
        for u in utts {
            if argmax_language(&model.language_distribution(&u.features)?) == tag {
                correct += 1;
            }
            total += 1;
            pairs.push((u.transcript.clone(), model.greedy_decode(&u.features, &LanguageInput::Tag(tag))?));
        }
    }
    if total == 0 {
        return Err(Error::invalid("no held-out utterances"));
    }
    Ok((correct as f64 / total as f64, corpus_metrics(&pairs)?))
}

/// Where the language slot of the prefix comes from at inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    /// A language-tag row of the fine-tuned model.
    Tag(usize),
    /// One vector for the whole language.
    Fixed(WeightedEmbedding),
    /// Each utterance's own weighted sum (passed through the predictor if present).
    PerUtterance,
}

/// A fine-tuned model together with what it needs at inference.
#[derive(Clone, Debug)]
pub struct FineTuned {
    pub method: FineTuneMethod,
    pub model: TinyAsr,
    /// The frozen pretrained model; language distributions always come from it.
    pub reference: TinyAsr,
    pub predictor: Option<PredictorParams>,
    pub sources: BTreeMap<String, EmbeddingSource>,
    pub history: Vec<EpochMetrics>,
}

/// Utterance-wise weighted sum from the reference model's own tags.
pub fn utterance_embedding(reference: &TinyAsr, features: &crate::Tensor) -> Result<WeightedEmbedding> {
    let dist = reference.language_distribution(features)?;
    utterance_ws_embedding(&dist, &reference.embedding_table())
}

/// Corpus-wise weighted sum from the reference model's own tags.
pub fn corpus_embedding(reference: &TinyAsr, utts: &[Utterance]) -> Result<WeightedEmbedding> {
    let dists = utts
        .iter()
        .map(|u| reference.language_distribution(&u.features))
        .collect::<Result<Vec<_>>>()?;
    corpus_ws_embedding(&dists, &reference.embedding_table())
}

impl FineTuned {
    pub fn language_input(&self, lang: &str, features: &crate::Tensor) -> Result<LanguageInput> {
        let source = self
            .sources
            .get(lang)
            .ok_or_else(|| Error::invalid(format!("no embedding source for language {lang}")))?;
        Ok(match source {
            EmbeddingSource::Tag(k) => LanguageInput::Tag(*k),
            EmbeddingSource::Fixed(w) => LanguageInput::Embedding(w.clone()),
            EmbeddingSource::PerUtterance => {
                let ws = utterance_embedding(&self.reference, features)?;
                LanguageInput::Embedding(match &self.predictor {
                    Some(p) => predict_embedding(p, &ws)?,
                    None => ws,
                })
            }
        })
    }

    pub fn transcribe(&self, lang: &str, features: &crate::Tensor) -> Result<Vec<usize>> {
        let input = self.language_input(lang, features)?;
        self.model.greedy_decode(features, &input)
    }

    /// Writes the fine-tuned model, inference sources, predictor and metrics.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.model.save(dir.join("model"))?;
        let meta = FineTunedMeta {
            method: self.method,
            sources: self.sources.clone(),
            predictor_activation: self.predictor.as_ref().map(|p| p.activation),
        };
        let p = dir.join("finetune.json");
        fs::write(&p, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(p.display().to_string(), e))?;
        if let Some(pred) = &self.predictor {
            pred.save_weights(dir.join("predictor"))?;
        }
        write_metrics_jsonl(&self.history, dir.join("metrics.jsonl"))
    }

    /// Loads a directory written by [`FineTuned::save`]; `reference` is the pretrained model.
    pub fn load(dir: impl AsRef<Path>, reference: TinyAsr) -> Result<Self> {
        let dir = dir.as_ref();
        let p = dir.join("finetune.json");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(p.display().to_string(), e))?;
        let meta: FineTunedMeta = serde_json::from_str(&text)?;
        let predictor = match meta.predictor_activation {
            Some(a) => Some(PredictorParams::load_weights(dir.join("predictor"), a)?),
            None => None,
        };
        Ok(Self {
            method: meta.method,
            model: TinyAsr::load(dir.join("model"))?,
            reference,
            predictor,
            sources: meta.sources,
            history: Vec::new(),
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FineTunedMeta {
    method: FineTuneMethod,
    sources: BTreeMap<String, EmbeddingSource>,
    predictor_activation: Option<Activation>,
}

/// Everything fixed before the first optimizer step.
#[derive(Clone, Debug)]
pub struct FineTuneSetup {
    pub fine_tuned: FineTuned,
    /// Language input for each training utterance, per language, in corpus order.
    pub train_inputs: Vec<Vec<LanguageInput>>,
}

/// Adds tags, attaches adapters and fixes the training-time language inputs.
pub fn prepare_finetune(
    pretrained: &TinyAsr,
    unseen: &[(String, Vec<Utterance>)],
    method: FineTuneMethod,
    adapters: &AdapterConfig,
    predictor: Option<&PredictorParams>,
    new_tag_init: TagInit,
    seed: u64,
) -> Result<FineTuneSetup> {
    if method == FineTuneMethod::Default {
        return Err(Error::invalid("the default method is zero-shot only"));
    }
    if method.uses_predictor() != predictor.is_some() {
        return Err(Error::invalid(if method.uses_predictor() {
            format!("method {method} needs a predictor")
        } else {
            format!("method {method} does not take a predictor")
        }));
    }
    if pretrained.has_adapters() {
        return Err(Error::IllegalState("pretrained model already carries adapters".into()));
    }
    if unseen.is_empty() || unseen.iter().any(|(_, u)| u.is_empty()) {
        return Err(Error::invalid("every unseen language needs training utterances"));
    }
    let reference = pretrained.clone();
    let mut model = pretrained.clone();
    let mut sources = BTreeMap::new();
    let mut train_inputs = Vec::with_capacity(unseen.len());
    let first_new = model.tag_range().count;

    for (lang, utts) in unseen {
        let (source, inputs) = match method {
            FineTuneMethod::Baseline
            | FineTuneMethod::BaselineThenCorpusWs
            | FineTuneMethod::BaselineThenUtteranceWs => {
                let k = model.add_language_tag(lang.clone(), new_tag_init, seeds::derive(seed, lang))?;
                let source = match method {
                    FineTuneMethod::Baseline => EmbeddingSource::Tag(k),
                    FineTuneMethod::BaselineThenCorpusWs => EmbeddingSource::Fixed(corpus_embedding(&reference, utts)?),
                    _ => EmbeddingSource::PerUtterance,
                };
                (source, vec![LanguageInput::Tag(k); utts.len()])
            }
            FineTuneMethod::ParamCorpusWs => {
                let ws = corpus_embedding(&reference, utts)?;
                let k = model.append_tag_row(lang.clone(), &ws.vector)?;
                (EmbeddingSource::Tag(k), vec![LanguageInput::Tag(k); utts.len()])
            }
            FineTuneMethod::CorpusWs | FineTuneMethod::PredictorCorpusWs => {
                let mut ws = corpus_embedding(&reference, utts)?;
                if let Some(p) = predictor {
                    ws = predict_embedding(p, &ws)?;
                }
                (
                    EmbeddingSource::Fixed(ws.clone()),
                    vec![LanguageInput::Embedding(ws); utts.len()],
                )
            }
            FineTuneMethod::UtteranceWs | FineTuneMethod::PredictorUtteranceWs => {
                let inputs = utts
                    .iter()
                    .map(|u| {
                        let ws = utterance_embedding(&reference, &u.features)?;
                        Ok(LanguageInput::Embedding(match predictor {
                            Some(p) => predict_embedding(p, &ws)?,
                            None => ws,
                        }))
                    })
                    .collect::<Result<Vec<_>>>()?;
                (EmbeddingSource::PerUtterance, inputs)
            }
            FineTuneMethod::Default => unreachable!("rejected above"),
        };
        sources.insert(lang.clone(), source);
        train_inputs.push(inputs);
    }

    model.apply_adapters(adapters, seeds::derive(seed, "adapters"))?;
    if method.trains_new_tag() {
        let id = model.embed_id();
        let end = model.tag_range().end();
        let p = model.params_mut().get_mut(id);
        p.trainable = true;
        p.trainable_rows = Some(reference.tag_range().vocab_index(first_new)..end);
    }
    Ok(FineTuneSetup {
        fine_tuned: FineTuned {
            method,
            model,
            reference,
            predictor: predictor.cloned(),
            sources,
            history: Vec::new(),
        },
        train_inputs,
    })
}

/// Adapter fine-tuning on the unseen languages' training utterances.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    pretrained: &TinyAsr,
    unseen: &[(String, Vec<Utterance>)],
    method: FineTuneMethod,
    cfg: &TrainConfig,
    adapters: &AdapterConfig,
    predictor: Option<&PredictorParams>,
    new_tag_init: TagInit,
) -> Result<FineTuned> {
    cfg.validate()?;
    let setup = prepare_finetune(pretrained, unseen, method, adapters, predictor, new_tag_init, cfg.seed)?;
    let mut ft = setup.fine_tuned;
    let examples: Vec<Example<'_>> = unseen
        .iter()
        .zip(setup.train_inputs)
        .flat_map(|((_, utts), inputs)| {
            utts.iter().zip(inputs).map(|(u, language)| Example {
                utt: u,
                language,
                tag_target: None,
            })
        })
        .collect();
    ft.history = train_loop(&mut ft.model, &examples, cfg, 0.0, "finetune")?;
    Ok(ft)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_benchmark, BenchmarkConfig, SplitKind};
    use crate::model::ModelConfig;

    fn small() -> (TinyAsr, Vec<(String, Vec<Utterance>)>) {
        let bc = BenchmarkConfig {
            num_families: 1,
            seen_per_family: 3,
            unseen_per_family: 1,
            utterances_per_split: 6,
            ..BenchmarkConfig::default()
        };
        let b = generate_benchmark(&bc, 5).unwrap();
        let mc = ModelConfig {
            d_model: 16,
            ffn_hidden: 32,
            num_language_tags: 3,
            ..ModelConfig::default()
        };
        let m = TinyAsr::new(mc, b.seen_ids(), 1).unwrap();
        (m, b.corpora(&b.unseen_ids(), SplitKind::Train))
    }

    #[test]
    fn method_names_round_trip() {
        for m in FineTuneMethod::ALL {
            assert_eq!(m.name().parse::<FineTuneMethod>().unwrap(), m);
        }
        assert!("nope".parse::<FineTuneMethod>().is_err());
        assert_eq!(FineTuneMethod::FINE_TUNING.len(), 8);
    }

    #[test]
    fn applied_stages_follow_the_method_table() {
        use FineTuneMethod::*;
        let ft = |m: FineTuneMethod| {
            let s = m.applied_stage(Setting::FineTuning);
            (s.fine_tuning, s.inference)
        };
        assert_eq!(ft(Baseline), (false, false));
        assert_eq!(ft(CorpusWs), (true, true));
        assert_eq!(ft(BaselineThenUtteranceWs), (false, true));
        assert_eq!(ft(ParamCorpusWs), (true, true));
        assert!(ParamCorpusWs.trainable_embedding());
        assert!(!PredictorCorpusWs.trainable_embedding());
        assert!(PredictorUtteranceWs.uses_predictor());
    }

    #[test]
    fn adapter_config_checks() {
        assert_eq!(AdapterConfig::paper().scale(), 2.0);
        assert!(AdapterConfig { rank: 0, ..AdapterConfig::default() }.validate().is_err());
        assert!(AdapterConfig { dropout: 1.0, ..AdapterConfig::default() }.validate().is_err());
    }

    #[test]
    fn train_config_defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.learning_rate, c.weight_decay, c.epochs), (4.7e-5, 0.02, 5));
        assert!(TrainConfig { epochs: 0, ..c }.validate().is_err());
    }

    #[test]
    fn predictor_presence_is_checked() {
        let (m, unseen) = small();
        let a = AdapterConfig::default();
        let err = prepare_finetune(&m, &unseen, FineTuneMethod::PredictorCorpusWs, &a, None, TagInit::MeanOfTags, 0);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
        let p = PredictorParams::zeros(16, 16, Activation::Gelu);
        let err = prepare_finetune(&m, &unseen, FineTuneMethod::CorpusWs, &a, Some(&p), TagInit::MeanOfTags, 0);
        assert!(err.is_err());
        assert!(prepare_finetune(&m, &unseen, FineTuneMethod::Default, &a, None, TagInit::MeanOfTags, 0).is_err());
    }

    #[test]
    fn param_corpus_ws_starts_at_the_corpus_embedding() {
        let (m, unseen) = small();
        let s = prepare_finetune(
            &m,
            &unseen,
            FineTuneMethod::ParamCorpusWs,
            &AdapterConfig::default(),
            None,
            TagInit::MeanOfTags,
            0,
        )
        .unwrap();
        let ws = corpus_embedding(&m, &unseen[0].1).unwrap();
        let ft = &s.fine_tuned;
        let EmbeddingSource::Tag(k) = ft.sources[&unseen[0].0] else {
            panic!("expected a tag source")
        };
        assert_eq!(ft.model.embedding_table().tag_row(k), ws.vector.as_slice());
        let embed = ft.model.params().get(ft.model.embed_id());
        assert!(embed.trainable);
        let r = embed.trainable_rows.clone().unwrap();
        assert_eq!(r, ft.model.tag_range().vocab_index(k)..ft.model.tag_range().end());
    }

    #[test]
    fn baseline_tag_starts_at_the_mean() {
        let (m, unseen) = small();
        let s = prepare_finetune(
            &m,
            &unseen,
            FineTuneMethod::Baseline,
            &AdapterConfig::default(),
            None,
            TagInit::MeanOfTags,
            0,
        )
        .unwrap();
        let t = m.embedding_table();
        let new = s.fine_tuned.model.embedding_table();
        for c in 0..16 {
            let mean = (0..3).map(|k| t.tag_row(k)[c] as f64).sum::<f64>() / 3.0;
            assert!((new.tag_row(3)[c] as f64 - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn utterance_ws_inputs_differ_across_utterances() {
        let (m, unseen) = small();
        let s = prepare_finetune(
            &m,
            &unseen,
            FineTuneMethod::UtteranceWs,
            &AdapterConfig::default(),
            None,
            TagInit::MeanOfTags,
            0,
        )
        .unwrap();
        let inputs = &s.train_inputs[0];
        assert_ne!(inputs[0], inputs[1]);
    }

    #[test]
    fn frozen_methods_keep_the_embedding_table() {
        let (m, unseen) = small();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            epochs: 1,
            ..TrainConfig::default()
        };
        let ft = finetune(
            &m,
            &unseen,
            FineTuneMethod::CorpusWs,
            &cfg,
            &AdapterConfig::default(),
            None,
            TagInit::MeanOfTags,
        )
        .unwrap();
        assert_eq!(ft.model.embedding_matrix(), m.embedding_matrix());
        assert_ne!(ft.model.params().fingerprint(), ft.reference.params().fingerprint());
    }

    #[test]
    fn param_corpus_ws_embedding_moves() {
        let (m, unseen) = small();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            epochs: 1,
            batch_size: 64,
            ..TrainConfig::default()
        };
        let ft = finetune(
            &m,
            &unseen,
            FineTuneMethod::ParamCorpusWs,
            &cfg,
            &AdapterConfig::default(),
            None,
            TagInit::MeanOfTags,
        )
        .unwrap();
        let ws = corpus_embedding(&m, &unseen[0].1).unwrap();
        assert_ne!(ft.model.embedding_table().tag_row(3), ws.vector.as_slice());
        for k in 0..3 {
            assert_eq!(ft.model.embedding_table().tag_row(k), m.embedding_table().tag_row(k));
        }
    }
}
