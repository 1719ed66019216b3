//! Run configuration: one JSON document, strict keys, one mandatory seed.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::BenchmarkConfig;
use crate::error::{Error, Result};
use crate::eval::{default_matrix, parse_matrix_entry};
use crate::langembed::PredictorConfig;
use crate::model::{ModelConfig, TagInit, NUM_SPECIAL_TOKENS};
use crate::seeds;
use crate::trainer::{AdapterConfig, FineTuneMethod, PretrainConfig, Setting, TrainConfig};

/// Architecture knobs; vocabulary, feature and tag sizes come from the benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub decoder_layers: usize,
    pub ffn_hidden: usize,
    pub max_frames: usize,
    pub max_decode_len: usize,
    pub embed_init_std: f32,
    pub position_init_scale: f32,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            d_model: m.d_model,
            decoder_layers: m.decoder_layers,
            ffn_hidden: m.ffn_hidden,
            max_frames: m.max_frames,
            max_decode_len: m.max_decode_len,
            embed_init_std: m.embed_init_std,
            position_init_scale: m.position_init_scale,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub train: TrainConfig,
    pub adapters: AdapterConfig,
    pub new_tag_init: TagInit,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            train: TrainConfig::desk(),
            adapters: AdapterConfig::default(),
            new_tag_init: TagInit::MeanOfTags,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Fine-tuning seeds aggregated into mean ± std.
    pub seeds: Vec<u64>,
    /// `setting:method` entries; empty means the full table.
    pub methods: Vec<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3, 4, 5],
            methods: Vec::new(),
        }
    }
}

impl EvalSection {
    pub fn matrix(&self) -> Result<Vec<(Setting, FineTuneMethod)>> {
        if self.methods.is_empty() {
            return Ok(default_matrix());
        }
        self.methods.iter().map(|m| parse_matrix_entry(m)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub benchmark: BenchmarkConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub finetune: FinetuneSection,
    #[serde(default)]
    pub predictor: PredictorConfig,
    #[serde(default)]
    pub eval: EvalSection,
}

impl RunConfig {
    /// Defaults everywhere except the seed.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            benchmark: BenchmarkConfig::default(),
            model: ModelSection::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneSection::default(),
            predictor: PredictorConfig::default(),
            eval: EvalSection::default(),
        }
    }

    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: Value = serde_json::from_str(text)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_json(&text, overrides)
    }

    fn from_value(value: Value) -> Result<Self> {
        if value.get("seed").is_none() {
            return Err(Error::invalid("config must set `seed`"));
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.benchmark.validate()?;
        self.model_config()?.validate()?;
        self.pretrain_config().as_check()?;
        self.finetune.train.validate()?;
        self.finetune.adapters.validate()?;
        self.predictor.validate()?;
        if self.eval.seeds.is_empty() {
            return Err(Error::invalid("eval.seeds must not be empty"));
        }
        self.eval.matrix()?;
        if self.benchmark.max_length > self.model.max_frames || self.benchmark.max_length >= self.model.max_decode_len {
            return Err(Error::invalid(
                "model.max_frames and model.max_decode_len must exceed benchmark.max_length",
            ));
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        Ok(ModelConfig {
            d_model: m.d_model,
            feature_dim: self.benchmark.feature_dim,
            transcript_vocab: self.benchmark.transcript_vocab,
            num_language_tags: self.benchmark.num_families * self.benchmark.seen_per_family,
            num_special_tokens: NUM_SPECIAL_TOKENS,
            decoder_layers: m.decoder_layers,
            ffn_hidden: m.ffn_hidden,
            max_frames: m.max_frames,
            max_decode_len: m.max_decode_len,
            embed_init_std: m.embed_init_std,
            position_init_scale: m.position_init_scale,
        })
    }

    pub fn sub_seed(&self, name: &str) -> u64 {
        seeds::derive(self.seed, name)
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            seed: self.sub_seed("pretrain"),
            ..self.pretrain.clone()
        }
    }

    pub fn finetune_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.sub_seed("finetune"),
            ..self.finetune.train.clone()
        }
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes the fully resolved configuration as `config.json` in `dir`.
    pub fn write_resolved(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let p = dir.join("config.json");
        fs::write(&p, self.to_json_pretty()?).map_err(|e| Error::io(p.display().to_string(), e))
    }
}

impl PretrainConfig {
    fn as_check(&self) -> Result<()> {
        TrainConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
            max_grad_norm: self.max_grad_norm,
            seed: self.seed,
        }
        .validate()
    }
}

/// Applies `a.b.c=value`. The value is read as JSON when it parses, otherwise as
/// a plain string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::invalid(format!("override `{assignment}` is not KEY=VALUE")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::invalid(format!("bad override key `{key}`")));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::invalid(format!("override `{key}`: `{}` is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("non-empty key")
}
