//! Weighted-sum language embeddings and the embedding predictor.
//!
//! Given the recognizer's tag-restricted distribution `P(l_j | x, sot)`, the
//! weighted-sum embedding is `Σ_j P(l_j | x, sot) · Emb_j` over the language-tag
//! rows of the tied embedding table. The corpus-wise variant averages the
//! distributions of a corpus first. The predictor is a two-layer MLP trained to
//! map a weighted sum computed with one seen language masked out onto that
//! language's own embedding row.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{shuffled, Utterance};
use crate::error::{Error, Result};
use crate::model::{TagRange, TinyAsr};
use crate::numerics::{
    gelu, lbt, mse_loss, softmax, AdamW, AdamWConfig, Graph, ParamId, ParamStore, Tensor,
};
use crate::seeds;

const SUM_TOLERANCE: f64 = 1e-9;

/// Probability vector over the model's language tags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LangDistribution {
    probs: Vec<f64>,
}

impl LangDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("empty language distribution"));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("probabilities must lie in [0, 1]"));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::invalid(format!("probabilities sum to {s}, not 1")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("empty language distribution"));
        }
        Ok(Self {
            probs: vec![1.0 / n as f64; n],
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Tag,
    UtteranceWs,
    CorpusWs,
    Parameterized,
    Predicted,
}

/// A `d_model` vector destined for the language slot of the decoder prefix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedEmbedding {
    pub vector: Vec<f32>,
    pub provenance: Provenance,
}

impl WeightedEmbedding {
    pub fn new(vector: Vec<f32>, provenance: Provenance) -> Self {
        Self { vector, provenance }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::vector(self.vector.clone())
    }
}

/// Read-only view of an embedding matrix and its language-tag block.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingTable<'a> {
    matrix: &'a Tensor,
    tag_range: TagRange,
}

impl<'a> EmbeddingTable<'a> {
    pub fn new(matrix: &'a Tensor, tag_range: TagRange) -> Result<Self> {
        if matrix.rank() != 2 || tag_range.end() > matrix.rows() {
            return Err(Error::invalid(format!(
                "tag range {tag_range:?} does not fit matrix {:?}",
                matrix.shape()
            )));
        }
        Ok(Self { matrix, tag_range })
    }

    pub fn matrix(&self) -> &'a Tensor {
        self.matrix
    }

    pub fn tag_range(&self) -> TagRange {
        self.tag_range
    }

    pub fn tag_count(&self) -> usize {
        self.tag_range.count
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn row(&self, index: usize) -> &'a [f32] {
        self.matrix.row(index)
    }

    /// Embedding row of tag `k` (the tag's language embedding).
    pub fn tag_row(&self, k: usize) -> &'a [f32] {
        self.matrix.row(self.tag_range.vocab_index(k))
    }
}

/// Index of the most probable tag; ties go to the lowest index.
pub fn argmax_language(dist: &LangDistribution) -> usize {
    let mut best = 0;
    for (i, &p) in dist.probs().iter().enumerate() {
        if p > dist.probs()[best] {
            best = i;
        }
    }
    best
}

fn weighted_rows(weights: &[f64], table: &EmbeddingTable<'_>) -> Vec<f32> {
    let d = table.dim();
    let mut acc = vec![0.0f64; d];
    for (k, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for (a, &v) in acc.iter_mut().zip(table.tag_row(k)) {
            *a += w * v as f64;
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// `Σ_j dist[j] · Emb_j` for one utterance.
pub fn utterance_ws_embedding(dist: &LangDistribution, table: &EmbeddingTable<'_>) -> Result<WeightedEmbedding> {
    if dist.len() != table.tag_count() {
        return Err(Error::invalid(format!(
            "distribution over {} tags, table has {}",
            dist.len(),
            table.tag_count()
        )));
    }
    Ok(WeightedEmbedding::new(
        weighted_rows(dist.probs(), table),
        Provenance::UtteranceWs,
    ))
}

/// Per-coordinate mean of a corpus of distributions.
pub fn corpus_distribution(dists: &[LangDistribution]) -> Result<LangDistribution> {
    let Some(first) = dists.first() else {
        return Err(Error::invalid("corpus has no distributions"));
    };
    let n = first.len();
    if dists.iter().any(|d| d.len() != n) {
        return Err(Error::invalid("distributions have different lengths"));
    }
    let mut acc = vec![0.0f64; n];
    for d in dists {
        for (a, p) in acc.iter_mut().zip(d.probs()) {
            *a += p;
        }
    }
    let m = dists.len() as f64;
    LangDistribution::new(acc.into_iter().map(|v| v / m).collect())
}

/// Weighted sum under the corpus-averaged distribution.
pub fn corpus_ws_embedding(dists: &[LangDistribution], table: &EmbeddingTable<'_>) -> Result<WeightedEmbedding> {
    let avg = corpus_distribution(dists)?;
    let mut e = utterance_ws_embedding(&avg, table)?;
    e.provenance = Provenance::CorpusWs;
    Ok(e)
}

/// Softmax over tag logits with tag `masked` removed from the denominator.
/// The masked entry is exactly zero.
pub fn masked_distribution(tag_logits: &[f64], masked: usize) -> Result<Vec<f64>> {
    if masked >= tag_logits.len() {
        return Err(Error::invalid(format!("masked tag {masked} out of range")));
    }
    if tag_logits.len() < 2 {
        return Err(Error::invalid("masking needs at least two tags"));
    }
    let rest: Vec<f64> = tag_logits
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != masked)
        .map(|(_, &v)| v)
        .collect();
    let p = softmax(&rest)?;
    let mut out = Vec::with_capacity(tag_logits.len());
    let mut it = p.into_iter();
    for i in 0..tag_logits.len() {
        out.push(if i == masked { 0.0 } else { it.next().expect("length") });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LooMode {
    CorpusWise,
    UtteranceWise,
}

/// One leave-one-language-out training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedExample {
    pub input: WeightedEmbedding,
    pub target: Vec<f32>,
    pub masked_lang: usize,
    /// Weights that produced `input`; `weights[masked_lang] == 0`.
    pub weights: Vec<f64>,
}

/// Tag logits (as `f64`) at the `sot` position.
pub fn tag_logits(model: &TinyAsr, features: &Tensor) -> Result<Vec<f64>> {
    let r = model.tag_range();
    Ok(model.sot_logits(features)?[r.first..r.end()]
        .iter()
        .map(|&v| v as f64)
        .collect())
}

/// Masks each seen language in turn and pairs the weighted sum of the remaining
/// tag embeddings (computed from that language's own audio) with its true row.
pub fn build_loo_dataset(
    model: &TinyAsr,
    seen_corpora: &[(String, Vec<Utterance>)],
    mode: LooMode,
) -> Result<Vec<MaskedExample>> {
    if seen_corpora.len() < 2 {
        return Err(Error::invalid("leave-one-out needs at least two seen languages"));
    }
    let table = model.embedding_table();
    let mut out = Vec::new();
    for (lang, utts) in seen_corpora {
        let masked = model
            .tag_of(lang)
            .ok_or_else(|| Error::invalid(format!("language {lang} has no tag")))?;
        if utts.is_empty() {
            return Err(Error::invalid(format!("language {lang} has no utterances")));
        }
        let target = table.tag_row(masked).to_vec();
        let per_utt = utts
            .iter()
            .map(|u| masked_distribution(&tag_logits(model, &u.features)?, masked))
            .collect::<Result<Vec<_>>>()?;
        match mode {
            LooMode::CorpusWise => {
                let n = per_utt.len() as f64;
                let mut avg = vec![0.0f64; table.tag_count()];
                for w in &per_utt {
                    for (a, v) in avg.iter_mut().zip(w) {
                        *a += v;
                    }
                }
                avg.iter_mut().for_each(|v| *v /= n);
                out.push(MaskedExample {
                    input: WeightedEmbedding::new(weighted_rows(&avg, &table), Provenance::CorpusWs),
                    target,
                    masked_lang: masked,
                    weights: avg,
                });
            }
            LooMode::UtteranceWise => {
                for w in per_utt {
                    out.push(MaskedExample {
                        input: WeightedEmbedding::new(weighted_rows(&w, &table), Provenance::UtteranceWs),
                        target: target.clone(),
                        masked_lang: masked,
                        weights: w,
                    });
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Gelu => gelu(x),
            Activation::Tanh => x.tanh(),
        }
    }
}

/// Two affine layers with one nonlinearity between them.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorParams {
    /// `[d_model × hidden]`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `[hidden × d_model]`
    pub w2: Tensor,
    pub b2: Tensor,
    pub activation: Activation,
}

impl PredictorParams {
    pub fn zeros(d_model: usize, hidden: usize, activation: Activation) -> Self {
        Self {
            w1: Tensor::zeros(&[d_model, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, d_model]),
            b2: Tensor::zeros(&[d_model]),
            activation,
        }
    }

    pub fn random(d_model: usize, hidden: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let mut draw = |n: usize, std: f32| -> Vec<f32> {
            (0..n)
                .map(|_| {
                    let z: f32 = StandardNormal.sample(rng);
                    z * std
                })
                .collect()
        };
        Self {
            w1: Tensor::matrix(d_model, hidden, draw(d_model * hidden, 1.0 / (d_model as f32).sqrt()))
                .expect("shape"),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::matrix(hidden, d_model, draw(hidden * d_model, 1.0 / (hidden as f32).sqrt()))
                .expect("shape"),
            b2: Tensor::zeros(&[d_model]),
            activation,
        }
    }

    /// `layer1 = s·I`, `layer2 = I / (s·act'(0))` on the leading `min(d, hidden)`
    /// block; with small `s` the activation is nearly linear on typical inputs.
    pub fn near_identity(d_model: usize, hidden: usize, activation: Activation) -> Self {
        const S: f32 = 0.1;
        let slope = match activation {
            Activation::Gelu => 0.5,
            Activation::Tanh => 1.0,
        };
        let mut w1 = vec![0.0; d_model * hidden];
        let mut w2 = vec![0.0; hidden * d_model];
        for i in 0..d_model.min(hidden) {
            w1[i * hidden + i] = S;
            w2[i * d_model + i] = 1.0 / (S * slope);
        }
        Self {
            w1: Tensor::matrix(d_model, hidden, w1).expect("shape"),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::matrix(hidden, d_model, w2).expect("shape"),
            b2: Tensor::zeros(&[d_model]),
            activation,
        }
    }

    pub fn d_model(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    fn to_store(&self) -> (ParamStore, [ParamId; 4]) {
        let mut s = ParamStore::new();
        let ids = [
            s.insert("layer1.w", self.w1.clone()).expect("fresh store"),
            s.insert("layer1.b", self.b1.clone()).expect("fresh store"),
            s.insert("layer2.w", self.w2.clone()).expect("fresh store"),
            s.insert("layer2.b", self.b2.clone()).expect("fresh store"),
        ];
        (s, ids)
    }

    fn from_store(s: &ParamStore, ids: [ParamId; 4], activation: Activation) -> Self {
        Self {
            w1: s.get(ids[0]).value.clone(),
            b1: s.get(ids[1]).value.clone(),
            w2: s.get(ids[2]).value.clone(),
            b2: s.get(ids[3]).value.clone(),
            activation,
        }
    }

    /// Writes the four weight tensors as LBT1 files.
    pub fn save_weights(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        lbt::save(&self.w1, dir.join("layer1.w.lbt"))?;
        lbt::save(&self.b1, dir.join("layer1.b.lbt"))?;
        lbt::save(&self.w2, dir.join("layer2.w.lbt"))?;
        lbt::save(&self.b2, dir.join("layer2.b.lbt"))
    }

    pub fn load_weights(dir: impl AsRef<Path>, activation: Activation) -> Result<Self> {
        let dir = dir.as_ref();
        let p = Self {
            w1: lbt::load(dir.join("layer1.w.lbt"))?,
            b1: lbt::load(dir.join("layer1.b.lbt"))?,
            w2: lbt::load(dir.join("layer2.w.lbt"))?,
            b2: lbt::load(dir.join("layer2.b.lbt"))?,
            activation,
        };
        let (d, h) = (p.d_model(), p.hidden());
        if p.w1.rank() != 2 || p.b1.shape() != [h] || p.w2.shape() != [h, d] || p.b2.shape() != [d] {
            return Err(Error::invalid("predictor weight shapes are inconsistent"));
        }
        Ok(p)
    }

    /// Weights plus a `predictor.json` sidecar.
    pub fn save(&self, dir: impl AsRef<Path>, meta: &PredictorMeta) -> Result<()> {
        let dir = dir.as_ref();
        self.save_weights(dir)?;
        let p = dir.join("predictor.json");
        fs::write(&p, serde_json::to_string_pretty(meta)?).map_err(|e| Error::io(p.display().to_string(), e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, PredictorMeta)> {
        let dir = dir.as_ref();
        let p = dir.join("predictor.json");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(p.display().to_string(), e))?;
        let meta: PredictorMeta = serde_json::from_str(&text)?;
        let params = Self::load_weights(dir, meta.activation)?;
        if params.hidden() != meta.hidden {
            return Err(Error::invalid("predictor weights disagree with metadata"));
        }
        Ok((params, meta))
    }
}

/// Sidecar metadata for a saved predictor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorMeta {
    pub hidden: usize,
    pub activation: Activation,
    pub mode: LooMode,
    pub config: PredictorConfig,
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub train_languages: Vec<String>,
    pub val_languages: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Stop after this many epochs without validation improvement; 0 disables.
    pub patience: usize,
    pub batch_size: usize,
    /// `None` means `hidden == d_model`.
    pub hidden: Option<usize>,
    pub activation: Activation,
    pub init: PredictorInit,
    pub val_fraction: f64,
    pub mode: LooMode,
}

/// Starting point of predictor training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorInit {
    /// Scaled Gaussian weights, zero biases.
    Random,
    /// Close to the identity map, so training starts from the weighted sum itself.
    NearIdentity,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            weight_decay: 0.01,
            epochs: 200,
            patience: 20,
            batch_size: 4,
            hidden: None,
            activation: Activation::Gelu,
            init: PredictorInit::NearIdentity,
            val_fraction: 0.2,
            mode: LooMode::CorpusWise,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        AdamWConfig::new(self.learning_rate, self.weight_decay).validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be positive"));
        }
        if self.hidden == Some(0) {
            return Err(Error::invalid("hidden size must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid("val_fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Per-epoch losses of one predictor run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictorHistory {
    pub train_mse: Vec<f64>,
    pub val_mse: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
}

fn stack(rows: impl Iterator<Item = Vec<f32>>) -> Result<Tensor> {
    let rows: Vec<Vec<f32>> = rows.collect();
    Tensor::from_rows(&rows)
}

fn batch_mse(p: &PredictorParams, examples: &[MaskedExample]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(f64::NAN);
    }
    let pred = stack(
        examples
            .iter()
            .map(|e| forward_vec(p, &e.input.vector)),
    )?;
    let target = stack(examples.iter().map(|e| e.target.clone()))?;
    mse_loss(&pred, &target)
}

fn forward_vec(p: &PredictorParams, x: &[f32]) -> Vec<f32> {
    let (d, h) = (p.d_model(), p.hidden());
    let mut hid = p.b1.data().to_vec();
    for (i, &xi) in x.iter().enumerate() {
        for (j, hv) in hid.iter_mut().enumerate() {
            *hv += xi * p.w1.data()[i * h + j];
        }
    }
    hid.iter_mut().for_each(|v| *v = p.activation.apply(*v));
    let mut out = p.b2.data().to_vec();
    for (j, &hj) in hid.iter().enumerate() {
        for (k, o) in out.iter_mut().enumerate() {
            *o += hj * p.w2.data()[j * d + k];
        }
    }
    out
}

/// Trains the predictor with AdamW on MSE; returns the parameters of the epoch
/// with the lowest validation MSE (training MSE when no validation set is given).
pub fn train_predictor(
    examples: &[MaskedExample],
    val_examples: &[MaskedExample],
    config: &PredictorConfig,
    seed: u64,
) -> Result<(PredictorParams, PredictorHistory)> {
    config.validate()?;
    let Some(first) = examples.first() else {
        return Err(Error::invalid("predictor needs at least one training example"));
    };
    let d = first.input.dim();
    if examples
        .iter()
        .chain(val_examples)
        .any(|e| e.input.dim() != d || e.target.len() != d)
    {
        return Err(Error::invalid("examples disagree on embedding width"));
    }
    let hidden = config.hidden.unwrap_or(d);
    let mut rng = seeds::named_rng(seed, "predictor");
    let init = match config.init {
        PredictorInit::Random => PredictorParams::random(d, hidden, config.activation, &mut rng),
        PredictorInit::NearIdentity => PredictorParams::near_identity(d, hidden, config.activation),
    };
    let (mut store, ids) = init.to_store();
    let mut opt = AdamW::new(AdamWConfig::new(config.learning_rate, config.weight_decay))?;

    let mut history = PredictorHistory {
        best_val_mse: f64::INFINITY,
        ..PredictorHistory::default()
    };
    let mut best = init.clone();
    let mut since_best = 0;
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let order = shuffled(&(0..examples.len()).collect::<Vec<_>>(), &mut rng);
        for batch in order.chunks(config.batch_size) {
            let x = stack(batch.iter().map(|&i| examples[i].input.vector.clone()))?;
            let y = stack(batch.iter().map(|&i| examples[i].target.clone()))?;
            store.zero_grads();
            let grads = {
                let mut g = Graph::new(&store);
                let xv = g.input(x);
                let yv = g.input(y);
                let [w1, b1, w2, b2] = ids.map(|id| g.param(id));
                let h = g.matmul(xv, w1)?;
                let h = g.add_bias(h, b1)?;
                let h = match config.activation {
                    Activation::Gelu => g.gelu(h),
                    Activation::Tanh => g.tanh(h),
                };
                let o = g.matmul(h, w2)?;
                let o = g.add_bias(o, b2)?;
                let loss = g.mse(o, yv)?;
                g.backward(loss)?
            };
            store.accumulate(&grads);
            step += 1;
            opt.step(&mut store, step)?;
        }
        let current = PredictorParams::from_store(&store, ids, config.activation);
        let train = batch_mse(&current, examples)?;
        let score = if val_examples.is_empty() {
            train
        } else {
            batch_mse(&current, val_examples)?
        };
        history.train_mse.push(train);
        history.val_mse.push(score);
        if score < history.best_val_mse {
            history.best_val_mse = score;
            history.best_epoch = epoch;
            best = current;
            since_best = 0;
        } else {
            since_best += 1;
            if config.patience > 0 && since_best >= config.patience {
                break;
            }
        }
    }
    Ok((best, history))
}

/// `layer2(activation(layer1(ws)))`.
pub fn predict_embedding(predictor: &PredictorParams, ws: &WeightedEmbedding) -> Result<WeightedEmbedding> {
    if ws.dim() != predictor.d_model() {
        return Err(Error::invalid(format!(
            "input has {} dims, predictor expects {}",
            ws.dim(),
            predictor.d_model()
        )));
    }
    Ok(WeightedEmbedding::new(
        forward_vec(predictor, &ws.vector),
        Provenance::Predicted,
    ))
}

/// Chooses `max(2, round(fraction·n))` validation languages (always leaving at
/// least one for training), deterministically per seed.
pub fn split_languages(langs: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    if fraction <= 0.0 || langs.len() < 3 {
        return (langs.to_vec(), Vec::new());
    }
    let n_val = ((fraction * langs.len() as f64).round() as usize)
        .max(2)
        .min(langs.len() - 1);
    let mut rng = seeds::named_rng(seed, "predictor-split");
    let order = shuffled(langs, &mut rng);
    let mut val: Vec<usize> = order[..n_val].to_vec();
    let mut train: Vec<usize> = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Trains on the examples whose masked language is not held out for validation.
pub fn train_predictor_split(
    examples: &[MaskedExample],
    config: &PredictorConfig,
    seed: u64,
) -> Result<(PredictorParams, PredictorHistory, Vec<usize>, Vec<usize>)> {
    let mut langs: Vec<usize> = examples.iter().map(|e| e.masked_lang).collect();
    langs.sort_unstable();
    langs.dedup();
    let (train_langs, val_langs) = split_languages(&langs, config.val_fraction, seed);
    let train: Vec<MaskedExample> = examples
        .iter()
        .filter(|e| train_langs.contains(&e.masked_lang))
        .cloned()
        .collect();
    let val: Vec<MaskedExample> = examples
        .iter()
        .filter(|e| val_langs.contains(&e.masked_lang))
        .cloned()
        .collect();
    let (p, h) = train_predictor(&train, &val, config, seed)?;
    Ok((p, h, train_langs, val_langs))
}

/// Held-out errors of three estimates of a masked language's embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldoutComparison {
    pub predictor_mse: f64,
    pub ws_input_mse: f64,
    pub mean_of_tags_mse: f64,
    pub folds: usize,
}

/// Leave-one-language-out evaluation: for each language, a predictor trained
/// without it (inner validation split for model selection) predicts its
/// embedding; errors are averaged over languages. The mean-of-tags baseline is
/// the uniform average of the tag rows other than the masked one.
pub fn heldout_comparison(
    examples: &[MaskedExample],
    table: &EmbeddingTable<'_>,
    config: &PredictorConfig,
    seed: u64,
) -> Result<HeldoutComparison> {
    let mut langs: Vec<usize> = examples.iter().map(|e| e.masked_lang).collect();
    langs.sort_unstable();
    langs.dedup();
    if langs.len() < 3 {
        return Err(Error::invalid("held-out comparison needs at least three languages"));
    }
    let (mut pred_sum, mut ws_sum, mut mean_sum) = (0.0, 0.0, 0.0);
    for &held in &langs {
        let rest: Vec<MaskedExample> = examples
            .iter()
            .filter(|e| e.masked_lang != held)
            .cloned()
            .collect();
        let fold_seed = seeds::derive(seed, &format!("fold-{held}"));
        let (p, ..) = train_predictor_split(&rest, config, fold_seed)?;
        let test: Vec<&MaskedExample> = examples.iter().filter(|e| e.masked_lang == held).collect();
        let target = Tensor::vector(table.tag_row(held).to_vec());
        let mean_rest: Vec<f32> = {
            let others: Vec<f64> = (0..table.tag_count())
                .map(|k| if k == held { 0.0 } else { 1.0 / (table.tag_count() - 1) as f64 })
                .collect();
            weighted_rows(&others, table)
        };
        let (mut pm, mut wm) = (0.0, 0.0);
        for e in &test {
            pm += mse_loss(&predict_embedding(&p, &e.input)?.to_tensor(), &target)?;
            wm += mse_loss(&e.input.to_tensor(), &target)?;
        }
        pred_sum += pm / test.len() as f64;
        ws_sum += wm / test.len() as f64;
        mean_sum += mse_loss(&Tensor::vector(mean_rest), &target)?;
    }
    let n = langs.len() as f64;
    Ok(HeldoutComparison {
        predictor_mse: pred_sum / n,
        ws_input_mse: ws_sum / n,
        mean_of_tags_mse: mean_sum / n,
        folds: langs.len(),
    })
}
