//! Tiny tied-embedding encoder–decoder recognizer.
//!
//! Vocabulary layout (fixed, documented):
//!
//! | index range                     | tokens                          |
//! |---------------------------------|---------------------------------|
//! | `0`, `1`, `2`                   | `sot`, `transcribe`, `eot`      |
//! | `3 .. 3+V`                      | transcript tokens `0..V`        |
//! | `3+V .. 3+V+N`                  | language tags (grows on append) |
//!
//! The decoder prefix is always `[sot, language, transcribe]`. The language slot
//! holds either a tag embedding row or an arbitrary injected vector; the learned
//! positional row is added on top in both cases.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::langembed::{EmbeddingTable, LangDistribution, WeightedEmbedding};
use crate::numerics::{lbt, softmax, Graph, ParamId, ParamStore, Tensor, Var};
use crate::seeds;
use crate::trainer::AdapterConfig;

pub const SOT: usize = 0;
pub const TRANSCRIBE: usize = 1;
pub const EOT: usize = 2;
pub const NUM_SPECIAL_TOKENS: usize = 3;
pub const PREFIX_LEN: usize = 3;

const EMBED: &str = "embed";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub feature_dim: usize,
    pub transcript_vocab: usize,
    pub num_language_tags: usize,
    pub num_special_tokens: usize,
    pub decoder_layers: usize,
    pub ffn_hidden: usize,
    pub max_frames: usize,
    pub max_decode_len: usize,
    pub embed_init_std: f32,
    pub position_init_scale: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            feature_dim: 16,
            transcript_vocab: 16,
            num_language_tags: 12,
            num_special_tokens: NUM_SPECIAL_TOKENS,
            decoder_layers: 1,
            ffn_hidden: 128,
            max_frames: 32,
            max_decode_len: 16,
            embed_init_std: 0.02,
            position_init_scale: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_model", self.d_model),
            ("feature_dim", self.feature_dim),
            ("transcript_vocab", self.transcript_vocab),
            ("num_language_tags", self.num_language_tags),
            ("decoder_layers", self.decoder_layers),
            ("ffn_hidden", self.ffn_hidden),
            ("max_frames", self.max_frames),
            ("max_decode_len", self.max_decode_len),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.num_special_tokens != NUM_SPECIAL_TOKENS {
            return Err(Error::invalid(format!(
                "num_special_tokens is fixed at {NUM_SPECIAL_TOKENS}"
            )));
        }
        Ok(())
    }

    pub fn total_vocab(&self) -> usize {
        self.transcript_vocab + self.num_language_tags + self.num_special_tokens
    }

    fn max_positions(&self) -> usize {
        PREFIX_LEN + self.max_decode_len + 1
    }
}

/// Contiguous block of language-tag rows in the embedding table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagRange {
    pub first: usize,
    pub count: usize,
}

impl TagRange {
    pub fn vocab_index(&self, tag: usize) -> usize {
        self.first + tag
    }

    pub fn end(&self) -> usize {
        self.first + self.count
    }
}

/// What fills the language slot of the decoder prefix.
#[derive(Clone, Debug, PartialEq)]
pub enum LanguageInput {
    Tag(usize),
    Embedding(WeightedEmbedding),
}

/// Initialization for a freshly appended language tag.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TagInit {
    MeanOfTags,
    Gaussian { sigma: f32 },
}

#[derive(Clone, Debug, PartialEq)]
enum Slot {
    Token(usize),
    Vector(Vec<f32>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct AdapterSlot {
    pub down: String,
    pub up: String,
    pub rank: usize,
    pub scale: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TinyAsr {
    config: ModelConfig,
    params: ParamStore,
    tag_range: TagRange,
    tag_labels: Vec<String>,
    adapters: BTreeMap<String, AdapterSlot>,
    adapter_dropout: f32,
}

/// Dropout source for training passes; `None` means inference.
pub(crate) type DropoutRng<'a> = Option<&'a mut ChaCha8Rng>;

fn normal(rng: &mut impl Rng, n: usize, std: f32) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let z: f32 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

fn sinusoid(rows: usize, d: usize, scale: f32) -> Tensor {
    let mut data = vec![0.0f32; rows * d];
    for p in 0..rows {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = p as f64 * rate;
            data[p * d + i] = scale * if i % 2 == 0 { angle.sin() } else { angle.cos() } as f32;
        }
    }
    Tensor::matrix(rows, d, data).expect("sinusoid shape")
}

impl TinyAsr {
    /// Fresh model with seeded initialization. `tag_labels` names the language tags.
    pub fn new(config: ModelConfig, tag_labels: Vec<String>, seed: u64) -> Result<Self> {
        config.validate()?;
        if tag_labels.len() != config.num_language_tags {
            return Err(Error::invalid(format!(
                "{} tag labels for {} language tags",
                tag_labels.len(),
                config.num_language_tags
            )));
        }
        let mut rng = seeds::named_rng(seed, "model-init");
        let d = config.d_model;
        let h = config.ffn_hidden;
        let mut params = ParamStore::new();

        let linear = |params: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, din: usize, dout: usize, bias: bool| -> Result<()> {
            let std = 1.0 / (din as f32).sqrt();
            params.insert(format!("{name}.w"), Tensor::matrix(din, dout, normal(rng, din * dout, std))?)?;
            if bias {
                params.insert(format!("{name}.b"), Tensor::zeros(&[dout]))?;
            }
            Ok(())
        };
        let layer_norm = |params: &mut ParamStore, name: &str| -> Result<()> {
            params.insert(format!("{name}.g"), Tensor::full(&[d], 1.0))?;
            params.insert(format!("{name}.b"), Tensor::zeros(&[d]))?;
            Ok(())
        };

        params.insert(
            EMBED,
            Tensor::matrix(
                config.total_vocab(),
                d,
                normal(&mut rng, config.total_vocab() * d, config.embed_init_std),
            )?,
        )?;
        params.insert("enc.pos", sinusoid(config.max_frames, d, config.position_init_scale))?;
        params.insert("dec.pos", sinusoid(config.max_positions(), d, config.position_init_scale))?;

        linear(&mut params, &mut rng, "enc.in", config.feature_dim, d, true)?;
        layer_norm(&mut params, "enc.ln_attn")?;
        for m in ["q", "k", "v", "o"] {
            linear(&mut params, &mut rng, &format!("enc.attn.{m}"), d, d, false)?;
        }
        layer_norm(&mut params, "enc.ln_ffn")?;
        linear(&mut params, &mut rng, "enc.ffn.up", d, h, true)?;
        linear(&mut params, &mut rng, "enc.ffn.down", h, d, true)?;
        layer_norm(&mut params, "enc.ln_out")?;

        for l in 0..config.decoder_layers {
            layer_norm(&mut params, &format!("dec.{l}.ln_self"))?;
            for m in ["q", "k", "v", "o"] {
                linear(&mut params, &mut rng, &format!("dec.{l}.self.{m}"), d, d, false)?;
            }
            layer_norm(&mut params, &format!("dec.{l}.ln_cross"))?;
            for m in ["q", "k", "v", "o"] {
                linear(&mut params, &mut rng, &format!("dec.{l}.cross.{m}"), d, d, false)?;
            }
            layer_norm(&mut params, &format!("dec.{l}.ln_ffn"))?;
            linear(&mut params, &mut rng, &format!("dec.{l}.ffn.up"), d, h, true)?;
            linear(&mut params, &mut rng, &format!("dec.{l}.ffn.down"), h, d, true)?;
        }
        layer_norm(&mut params, "dec.ln_out")?;

        let tag_range = TagRange {
            first: NUM_SPECIAL_TOKENS + config.transcript_vocab,
            count: config.num_language_tags,
        };
        Ok(Self {
            config,
            params,
            tag_range,
            tag_labels,
            adapters: BTreeMap::new(),
            adapter_dropout: 0.0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn tag_range(&self) -> TagRange {
        self.tag_range
    }

    pub fn tag_labels(&self) -> &[String] {
        &self.tag_labels
    }

    pub fn tag_of(&self, label: &str) -> Option<usize> {
        self.tag_labels.iter().position(|l| l == label)
    }

    /// Vocabulary size including tags appended after construction.
    pub fn vocab_size(&self) -> usize {
        self.embedding_matrix().rows()
    }

    pub fn transcript_token(&self, token: usize) -> usize {
        NUM_SPECIAL_TOKENS + token
    }

    pub fn embedding_matrix(&self) -> &Tensor {
        &self.params.by_name(EMBED).expect("embedding table").value
    }

    pub fn embedding_table(&self) -> EmbeddingTable<'_> {
        EmbeddingTable::new(self.embedding_matrix(), self.tag_range).expect("consistent tag range")
    }

    pub(crate) fn embed_id(&self) -> ParamId {
        self.params.id(EMBED).expect("embedding table")
    }

    pub fn has_adapters(&self) -> bool {
        !self.adapters.is_empty()
    }

    /// Appends a language tag row and returns its tag index.
    pub fn add_language_tag(&mut self, label: impl Into<String>, init: TagInit, seed: u64) -> Result<usize> {
        let d = self.config.d_model;
        let row: Vec<f32> = match init {
            TagInit::MeanOfTags => {
                let table = self.embedding_table();
                let n = table.tag_count();
                if n == 0 {
                    vec![0.0; d]
                } else {
                    let mut acc = vec![0.0f64; d];
                    for k in 0..n {
                        for (a, &v) in acc.iter_mut().zip(table.tag_row(k)) {
                            *a += v as f64;
                        }
                    }
                    acc.into_iter().map(|v| (v / n as f64) as f32).collect()
                }
            }
            TagInit::Gaussian { sigma } => {
                if !(sigma >= 0.0) {
                    return Err(Error::invalid("sigma must be non-negative"));
                }
                let mut rng = seeds::named_rng(seed, "new-tag");
                normal(&mut rng, d, sigma)
            }
        };
        self.append_tag_row(label, &row)
    }

    /// Appends a language tag with an explicit embedding row.
    pub fn append_tag_row(&mut self, label: impl Into<String>, row: &[f32]) -> Result<usize> {
        if row.len() != self.config.d_model {
            return Err(Error::invalid("tag row width must equal d_model"));
        }
        if self.tag_range.end() != self.vocab_size() {
            return Err(Error::IllegalState("tag rows must be the final block".into()));
        }
        let id = self.embed_id();
        let p = self.params.get_mut(id);
        p.value.push_row(row)?;
        p.gradient = None;
        self.tag_range.count += 1;
        self.tag_labels.push(label.into());
        Ok(self.tag_range.count - 1)
    }

    /// Decoder input rows for `[sot, language, transcribe]`, without positions.
    pub fn embed_prefix(&self, language: &LanguageInput) -> Result<Tensor> {
        let e = self.embedding_matrix();
        let lang_row: Vec<f32> = match language {
            LanguageInput::Tag(k) => {
                if *k >= self.tag_range.count {
                    return Err(Error::invalid(format!(
                        "tag {k} outside {} tags",
                        self.tag_range.count
                    )));
                }
                e.row(self.tag_range.vocab_index(*k)).to_vec()
            }
            LanguageInput::Embedding(w) => {
                if w.vector.len() != self.config.d_model {
                    return Err(Error::invalid(format!(
                        "embedding has {} dims, model has {}",
                        w.vector.len(),
                        self.config.d_model
                    )));
                }
                w.vector.clone()
            }
        };
        Tensor::from_rows(&[e.row(SOT).to_vec(), lang_row, e.row(TRANSCRIBE).to_vec()])
    }

    fn language_slot(&self, language: &LanguageInput) -> Result<Slot> {
        match language {
            LanguageInput::Tag(k) => {
                if *k >= self.tag_range.count {
                    return Err(Error::invalid(format!(
                        "tag {k} outside {} tags",
                        self.tag_range.count
                    )));
                }
                Ok(Slot::Token(self.tag_range.vocab_index(*k)))
            }
            LanguageInput::Embedding(w) => {
                if w.vector.len() != self.config.d_model {
                    return Err(Error::invalid(format!(
                        "embedding has {} dims, model has {}",
                        w.vector.len(),
                        self.config.d_model
                    )));
                }
                Ok(Slot::Vector(w.vector.clone()))
            }
        }
    }

    fn check_features(&self, features: &Tensor) -> Result<()> {
        if features.rank() != 2 || features.cols() != self.config.feature_dim {
            return Err(Error::invalid(format!(
                "features {:?} do not match feature_dim {}",
                features.shape(),
                self.config.feature_dim
            )));
        }
        if features.rows() == 0 || features.rows() > self.config.max_frames {
            return Err(Error::invalid(format!(
                "{} frames outside 1..={}",
                features.rows(),
                self.config.max_frames
            )));
        }
        features.ensure_finite("features")
    }

    fn linear(&self, g: &mut Graph, x: Var, name: &str, dropout: &mut DropoutRng) -> Result<Var> {
        let w = g.param_by_name(&format!("{name}.w"))?;
        let mut y = g.matmul(x, w)?;
        if let Some(slot) = self.adapters.get(name) {
            let mut xin = x;
            if let Some(rng) = dropout.as_deref_mut() {
                if self.adapter_dropout > 0.0 {
                    let keep = 1.0 - self.adapter_dropout;
                    let shape = g.value(x).shape().to_vec();
                    let n: usize = shape.iter().product();
                    let mask: Vec<f32> = (0..n)
                        .map(|_| if rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    let m = g.input(Tensor::new(shape, mask)?);
                    xin = g.mul(x, m)?;
                }
            }
            let down = g.param_by_name(&slot.down)?;
            let up = g.param_by_name(&slot.up)?;
            let low = g.matmul(xin, down)?;
            let delta = g.matmul(low, up)?;
            let delta = g.scale(delta, slot.scale);
            y = g.add(y, delta)?;
        }
        if self.params.id(&format!("{name}.b")).is_some() {
            let b = g.param_by_name(&format!("{name}.b"))?;
            y = g.add_bias(y, b)?;
        }
        Ok(y)
    }

    fn layer_norm(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let gain = g.param_by_name(&format!("{name}.g"))?;
        let bias = g.param_by_name(&format!("{name}.b"))?;
        g.layer_norm(x, gain, bias)
    }

    fn attention(
        &self,
        g: &mut Graph,
        query: Var,
        source: Var,
        name: &str,
        causal: bool,
        dropout: &mut DropoutRng,
    ) -> Result<Var> {
        let q = self.linear(g, query, &format!("{name}.q"), dropout)?;
        let k = self.linear(g, source, &format!("{name}.k"), dropout)?;
        let v = self.linear(g, source, &format!("{name}.v"), dropout)?;
        let scores = g.matmul_t(q, k)?;
        let mut scores = g.scale(scores, 1.0 / (self.config.d_model as f32).sqrt());
        if causal {
            scores = g.causal_mask(scores)?;
        }
        let probs = g.softmax_rows(scores);
        let mixed = g.matmul(probs, v)?;
        self.linear(g, mixed, &format!("{name}.o"), dropout)
    }

    fn ffn(&self, g: &mut Graph, x: Var, name: &str, dropout: &mut DropoutRng) -> Result<Var> {
        let hidden = self.linear(g, x, &format!("{name}.up"), dropout)?;
        let hidden = g.gelu(hidden);
        self.linear(g, hidden, &format!("{name}.down"), dropout)
    }

    pub(crate) fn encode(&self, g: &mut Graph, features: &Tensor, dropout: &mut DropoutRng) -> Result<Var> {
        self.check_features(features)?;
        let t = features.rows();
        let x = g.input(features.clone());
        let x = self.linear(g, x, "enc.in", dropout)?;
        let pos = g.param_by_name("enc.pos")?;
        let pos = g.slice_rows(pos, 0, t)?;
        let mut h = g.add(x, pos)?;
        let n = self.layer_norm(g, h, "enc.ln_attn")?;
        let a = self.attention(g, n, n, "enc.attn", false, dropout)?;
        h = g.add(h, a)?;
        let n = self.layer_norm(g, h, "enc.ln_ffn")?;
        let f = self.ffn(g, n, "enc.ffn", dropout)?;
        h = g.add(h, f)?;
        self.layer_norm(g, h, "enc.ln_out")
    }

    fn decode(&self, g: &mut Graph, enc: Var, slots: &[Slot], dropout: &mut DropoutRng) -> Result<Var> {
        if slots.is_empty() {
            return Err(Error::invalid("decoder prefix must not be empty"));
        }
        if slots.len() > self.config.max_positions() {
            return Err(Error::invalid("decoder input longer than max positions"));
        }
        let embed = g.param(self.embed_id());
        let mut parts = Vec::new();
        let mut run: Vec<usize> = Vec::new();
        for s in slots {
            match s {
                Slot::Token(i) => run.push(*i),
                Slot::Vector(v) => {
                    if !run.is_empty() {
                        parts.push(g.gather_rows(embed, &run)?);
                        run.clear();
                    }
                    parts.push(g.input(Tensor::matrix(1, v.len(), v.clone())?));
                }
            }
        }
        if !run.is_empty() {
            parts.push(g.gather_rows(embed, &run)?);
        }
        let tokens = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
        let pos = g.param_by_name("dec.pos")?;
        let pos = g.slice_rows(pos, 0, slots.len())?;
        let mut h = g.add(tokens, pos)?;
        for l in 0..self.config.decoder_layers {
            let n = self.layer_norm(g, h, &format!("dec.{l}.ln_self"))?;
            let a = self.attention(g, n, n, &format!("dec.{l}.self"), true, dropout)?;
            h = g.add(h, a)?;
            let n = self.layer_norm(g, h, &format!("dec.{l}.ln_cross"))?;
            let c = self.attention(g, n, enc, &format!("dec.{l}.cross"), false, dropout)?;
            h = g.add(h, c)?;
            let n = self.layer_norm(g, h, &format!("dec.{l}.ln_ffn"))?;
            let f = self.ffn(g, n, &format!("dec.{l}.ffn"), dropout)?;
            h = g.add(h, f)?;
        }
        let h = self.layer_norm(g, h, "dec.ln_out")?;
        g.matmul_t(h, embed)
    }

    fn prefix_slots(&self, language: &LanguageInput) -> Result<Vec<Slot>> {
        Ok(vec![
            Slot::Token(SOT),
            self.language_slot(language)?,
            Slot::Token(TRANSCRIBE),
        ])
    }

    /// Teacher-forced logits `[PREFIX_LEN + T × vocab]` for a full transcript.
    ///
    /// Row `PREFIX_LEN - 1 + t` predicts transcript token `t`; the last row predicts
    /// `eot`. Row `0` holds the language-tag prediction.
    pub(crate) fn teacher_forced_logits(
        &self,
        g: &mut Graph,
        features: &Tensor,
        language: &LanguageInput,
        transcript: &[usize],
        dropout: &mut DropoutRng,
    ) -> Result<Var> {
        let enc = self.encode(g, features, dropout)?;
        let mut slots = self.prefix_slots(language)?;
        for &t in transcript {
            if t >= self.config.transcript_vocab {
                return Err(Error::invalid(format!("transcript token {t} out of range")));
            }
            slots.push(Slot::Token(self.transcript_token(t)));
        }
        self.decode(g, enc, &slots, dropout)
    }

    /// Logits at the last position of an already-embedded prefix `[L×d_model]`.
    pub fn next_token_logits(&self, features: &Tensor, prefix: &Tensor) -> Result<Vec<f32>> {
        if prefix.rank() != 2 || prefix.rows() == 0 || prefix.cols() != self.config.d_model {
            return Err(Error::invalid(format!(
                "prefix {:?} must be [L×{}] with L ≥ 1",
                prefix.shape(),
                self.config.d_model
            )));
        }
        let slots: Vec<Slot> = (0..prefix.rows()).map(|r| Slot::Vector(prefix.row(r).to_vec())).collect();
        let mut g = Graph::new(&self.params);
        let enc = self.encode(&mut g, features, &mut None)?;
        let logits = self.decode(&mut g, enc, &slots, &mut None)?;
        let t = g.value(logits);
        Ok(t.row(t.rows() - 1).to_vec())
    }

    /// Full-vocabulary logits at the `sot` position.
    pub fn sot_logits(&self, features: &Tensor) -> Result<Vec<f32>> {
        let mut g = Graph::new(&self.params);
        let enc = self.encode(&mut g, features, &mut None)?;
        let logits = self.decode(&mut g, enc, &[Slot::Token(SOT)], &mut None)?;
        Ok(g.value(logits).row(0).to_vec())
    }

    /// Tag-restricted softmax of the `sot`-position logits.
    pub fn language_distribution(&self, features: &Tensor) -> Result<LangDistribution> {
        if self.tag_range.count == 0 {
            return Err(Error::IllegalState("model has no language tags".into()));
        }
        let logits = self.sot_logits(features)?;
        let tags: Vec<f64> = logits[self.tag_range.first..self.tag_range.end()]
            .iter()
            .map(|&v| v as f64)
            .collect();
        LangDistribution::new(softmax(&tags)?)
    }

    /// Argmax decoding over `eot` and transcript tokens; ties go to the lowest index.
    pub fn greedy_decode(&self, features: &Tensor, language: &LanguageInput) -> Result<Vec<usize>> {
        let mut g = Graph::new(&self.params);
        let enc = self.encode(&mut g, features, &mut None)?;
        let mut slots = self.prefix_slots(language)?;
        let first = NUM_SPECIAL_TOKENS;
        let last = NUM_SPECIAL_TOKENS + self.config.transcript_vocab;
        let mut out = Vec::new();
        while out.len() < self.config.max_decode_len {
            let logits = self.decode(&mut g, enc, &slots, &mut None)?;
            let t = g.value(logits);
            let row = t.row(t.rows() - 1);
            let mut best = EOT;
            let mut best_v = row[EOT];
            for (i, &v) in row.iter().enumerate().take(last).skip(first) {
                if v > best_v {
                    best = i;
                    best_v = v;
                }
            }
            if best == EOT {
                break;
            }
            out.push(best - NUM_SPECIAL_TOKENS);
            slots.push(Slot::Token(best));
        }
        Ok(out)
    }

    /// Names of matrices that receive low-rank adapters.
    pub fn adapter_targets(&self) -> Vec<String> {
        let mut out = Vec::new();
        for l in 0..self.config.decoder_layers {
            for block in ["self", "cross"] {
                for m in ["q", "k", "v", "o"] {
                    out.push(format!("dec.{l}.{block}.{m}"));
                }
            }
            out.push(format!("dec.{l}.ffn.up"));
            out.push(format!("dec.{l}.ffn.down"));
        }
        out
    }

    /// Freezes every base parameter and attaches trainable low-rank adapters to the
    /// decoder matrices. The down projection is Gaussian, the up projection zero, so
    /// outputs are unchanged until training moves the up projection.
    pub fn apply_adapters(&mut self, cfg: &AdapterConfig, seed: u64) -> Result<()> {
        cfg.validate()?;
        if self.has_adapters() {
            return Err(Error::IllegalState("adapters already attached".into()));
        }
        let targets = self.adapter_targets();
        for name in &targets {
            let w = &self.params.expect_id(&format!("{name}.w")).map(|id| self.params.get(id))?.value;
            let (din, dout) = (w.rows(), w.cols());
            if cfg.rank > din.min(dout) {
                return Err(Error::invalid(format!(
                    "adapter rank {} exceeds min dimension of `{name}` ({din}×{dout})",
                    cfg.rank
                )));
            }
        }
        self.params.set_all_trainable(false);
        let mut rng = seeds::named_rng(seed, "adapters");
        for name in targets {
            let w = &self.params.by_name(&format!("{name}.w")).expect("checked").value;
            let (din, dout) = (w.rows(), w.cols());
            let down = format!("{name}.lora_down");
            let up = format!("{name}.lora_up");
            let std = 1.0 / (din as f32).sqrt();
            self.params.insert(&down, Tensor::matrix(din, cfg.rank, normal(&mut rng, din * cfg.rank, std))?)?;
            self.params.insert(&up, Tensor::zeros(&[cfg.rank, dout]))?;
            self.adapters.insert(
                name,
                AdapterSlot {
                    down,
                    up,
                    rank: cfg.rank,
                    scale: cfg.scale(),
                },
            );
        }
        self.adapter_dropout = cfg.dropout;
        Ok(())
    }

    /// Number of values inside adapter matrices.
    pub fn adapter_parameter_count(&self) -> usize {
        self.adapters
            .values()
            .map(|s| {
                self.params.by_name(&s.down).map_or(0, |p| p.value.len())
                    + self.params.by_name(&s.up).map_or(0, |p| p.value.len())
            })
            .sum()
    }

    /// Folds every adapter into its base matrix and drops the adapter parameters.
    pub fn merge_adapters(&self) -> Result<TinyAsr> {
        let mut merged = ParamStore::new();
        let adapter_params: Vec<&str> = self
            .adapters
            .values()
            .flat_map(|s| [s.down.as_str(), s.up.as_str()])
            .collect();
        for (_, p) in self.params.iter() {
            if adapter_params.contains(&p.name.as_str()) {
                continue;
            }
            let mut value = p.value.clone();
            if let Some(base) = p.name.strip_suffix(".w") {
                if let Some(slot) = self.adapters.get(base) {
                    let down = &self.params.by_name(&slot.down).expect("adapter").value;
                    let up = &self.params.by_name(&slot.up).expect("adapter").value;
                    let (din, r, dout) = (down.rows(), down.cols(), up.cols());
                    let mut delta = vec![0.0f32; din * dout];
                    crate::numerics::tensor_matmul(down.data(), up.data(), &mut delta, din, r, dout);
                    for (w, dlt) in value.data_mut().iter_mut().zip(&delta) {
                        *w += slot.scale * dlt;
                    }
                }
            }
            let id = merged.insert(p.name.clone(), value)?;
            merged.get_mut(id).trainable = false;
        }
        Ok(TinyAsr {
            config: self.config.clone(),
            params: merged,
            tag_range: self.tag_range,
            tag_labels: self.tag_labels.clone(),
            adapters: BTreeMap::new(),
            adapter_dropout: 0.0,
        })
    }

    /// Writes `model.json` and one LBT1 file per parameter into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let mut entries = Vec::new();
        for (_, p) in self.params.iter() {
            let file = format!("{}.lbt", p.name);
            lbt::save(&p.value, dir.join(&file))?;
            entries.push(ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                file,
                trainable: p.trainable,
            });
        }
        let meta = CheckpointMeta {
            config: self.config.clone(),
            tag_range: self.tag_range,
            tag_labels: self.tag_labels.clone(),
            params: entries,
            adapters: self.adapters.clone(),
            adapter_dropout: self.adapter_dropout,
        };
        let p = dir.join("model.json");
        fs::write(&p, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(p.display().to_string(), e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let p = dir.join("model.json");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(p.display().to_string(), e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)?;
        meta.config.validate()?;
        let mut params = ParamStore::new();
        for e in &meta.params {
            let t = lbt::load(dir.join(&e.file))?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::invalid(format!(
                    "parameter `{}` has shape {:?}, manifest says {:?}",
                    e.name,
                    t.shape(),
                    e.shape
                )));
            }
            let id = params.insert(e.name.clone(), t)?;
            params.get_mut(id).trainable = e.trainable;
        }
        let model = Self {
            config: meta.config,
            params,
            tag_range: meta.tag_range,
            tag_labels: meta.tag_labels,
            adapters: meta.adapters,
            adapter_dropout: meta.adapter_dropout,
        };
        if model.tag_range.end() != model.vocab_size() || model.tag_labels.len() != model.tag_range.count {
            return Err(Error::invalid("checkpoint tag range is inconsistent"));
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    config: ModelConfig,
    tag_range: TagRange,
    tag_labels: Vec<String>,
    params: Vec<ParamEntry>,
    adapters: BTreeMap<String, AdapterSlot>,
    adapter_dropout: f32,
}
