//! Synthetic language families and utterance manifests.
//!
//! Every language owns an acoustic basis `[V×F]` mapping each transcript token to a
//! feature frame. Languages of one family are built from the same prototype: the
//! prototype rows are permuted by a few language-specific token swaps, shifted by a
//! language-specific constant, and jittered. A family offset is added to every frame,
//! so audio from one family shares a common signature.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{lbt, Tensor};
use crate::seeds;

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageSpec {
    pub lang_id: String,
    pub family_id: String,
    pub token_unigram: Vec<f64>,
    /// `[transcript_vocab × feature_dim]`
    pub acoustic_basis: Tensor,
    pub family_offset: Vec<f32>,
    pub noise_sigma: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `[T × feature_dim]`, one frame per transcript token.
    pub features: Tensor,
    pub transcript: Vec<usize>,
    pub lang_id: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub train: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Train,
    Test,
}

impl SplitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub seen_languages: Vec<LanguageSpec>,
    pub unseen_languages: Vec<LanguageSpec>,
    pub splits: BTreeMap<String, Split>,
    pub seed: u64,
    pub config: BenchmarkConfig,
}

/// Generator knobs. The similarity knobs are modeling choices for the testbed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub num_families: usize,
    pub seen_per_family: usize,
    pub unseen_per_family: usize,
    pub utterances_per_split: usize,
    pub transcript_vocab: usize,
    pub feature_dim: usize,
    pub min_length: usize,
    pub max_length: usize,
    pub noise_sigma: f32,
    pub family_offset_scale: f32,
    pub language_shift_scale: f32,
    pub basis_jitter: f32,
    /// Shared traits per family; each language carries a distinct subset.
    pub traits_per_family: usize,
    pub private_shift_scale: f32,
    /// Place unseen members at the trait centre of their seen siblings instead of
    /// at a random free combination.
    pub central_unseen: bool,
    /// One set of acoustic prototypes for all families, each with its own spelling.
    pub shared_inventory: bool,
    pub unigram_spread: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            num_families: 3,
            seen_per_family: 4,
            unseen_per_family: 1,
            utterances_per_split: 100,
            transcript_vocab: 16,
            feature_dim: 16,
            min_length: 4,
            max_length: 8,
            noise_sigma: 0.3,
            family_offset_scale: 1.0,
            language_shift_scale: 0.3,
            basis_jitter: 0.0,
            traits_per_family: 4,
            private_shift_scale: 0.1,
            central_unseen: true,
            shared_inventory: true,
            unigram_spread: 0.5,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_families", self.num_families),
            ("seen_per_family", self.seen_per_family),
            ("unseen_per_family", self.unseen_per_family),
            ("utterances_per_split", self.utterances_per_split),
            ("transcript_vocab", self.transcript_vocab),
            ("feature_dim", self.feature_dim),
            ("min_length", self.min_length),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        if 2 * self.traits_per_family > self.transcript_vocab {
            return Err(Error::invalid("traits_per_family needs two tokens per trait"));
        }
        if self.traits_per_family >= 16
            || self.seen_per_family + self.unseen_per_family > 1usize << self.traits_per_family
        {
            return Err(Error::invalid(
                "seen_per_family + unseen_per_family exceeds the distinct trait subsets",
            ));
        }
        if self.max_length < self.min_length {
            return Err(Error::invalid("max_length is below min_length"));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("family_offset_scale", self.family_offset_scale),
            ("language_shift_scale", self.language_shift_scale),
            ("basis_jitter", self.basis_jitter),
            ("private_shift_scale", self.private_shift_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }
}

impl Benchmark {
    pub fn transcript_vocab(&self) -> usize {
        self.config.transcript_vocab
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn language(&self, lang_id: &str) -> Option<&LanguageSpec> {
        self.seen_languages
            .iter()
            .chain(&self.unseen_languages)
            .find(|l| l.lang_id == lang_id)
    }

    pub fn seen_ids(&self) -> Vec<String> {
        self.seen_languages.iter().map(|l| l.lang_id.clone()).collect()
    }

    pub fn unseen_ids(&self) -> Vec<String> {
        self.unseen_languages.iter().map(|l| l.lang_id.clone()).collect()
    }

    pub fn split(&self, lang_id: &str, kind: SplitKind) -> &[Utterance] {
        self.splits
            .get(lang_id)
            .map(|s| match kind {
                SplitKind::Train => s.train.as_slice(),
                SplitKind::Test => s.test.as_slice(),
            })
            .unwrap_or(&[])
    }

    /// Seen training utterances re-rendered with another seen language's accent.
    ///
    /// For every seen language, `fraction` of its training split keeps transcript and
    /// `lang_id` but carries the average acoustic offset of another seen language.
    pub fn accent_swapped(&self, fraction: f64, seed: u64) -> Result<Vec<(String, Vec<Utterance>)>> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::invalid("accent swap fraction must lie in [0, 1]"));
        }
        let mut rng = seeds::named_rng(seed, "accent-swap");
        let mut out = Vec::new();
        for spec in &self.seen_languages {
            let siblings: Vec<&LanguageSpec> = self
                .seen_languages
                .iter()
                .filter(|o| o.lang_id != spec.lang_id)
                .collect();
            let train = self.split(&spec.lang_id, SplitKind::Train);
            let k = (fraction * train.len() as f64).round() as usize;
            if siblings.is_empty() || k == 0 {
                continue;
            }
            let utts = shuffled(train, &mut rng)
                .into_iter()
                .take(k)
                .map(|u| {
                    let to = siblings[rng.random_range(0..siblings.len())];
                    transfer_accent(&u, spec, to)
                })
                .collect::<Result<Vec<_>>>()?;
            out.push((spec.lang_id.clone(), utts));
        }
        Ok(out)
    }

    /// Utterances of the given languages grouped per language, in the given order.
    pub fn corpora(&self, ids: &[String], kind: SplitKind) -> Vec<(String, Vec<Utterance>)> {
        ids.iter()
            .map(|id| (id.clone(), self.split(id, kind).to_vec()))
            .collect()
    }
}

fn gaussian_vec(rng: &mut impl Rng, n: usize, sigma: f32) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let z: f32 = StandardNormal.sample(rng);
            z * sigma
        })
        .collect()
}

fn softmax_f32_logits(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Builds the full benchmark. A pure function of `(config, seed)`.
pub fn generate_benchmark(config: &BenchmarkConfig, seed: u64) -> Result<Benchmark> {
    config.validate()?;
    let mut rng = seeds::named_rng(seed, "benchmark");
    let v = config.transcript_vocab;
    let f = config.feature_dim;

    let shared = gaussian_vec(&mut rng, v * f, 1.0);
    let mut seen = Vec::new();
    let mut unseen = Vec::new();
    for fam in 0..config.num_families {
        let family_id = format!("f{fam}");
        // With a shared inventory every family renders tokens through the same
        // prototypes but spells them differently.
        let (prototype, family_perm) = if config.shared_inventory {
            let mut perm: Vec<usize> = (0..v).collect();
            perm.shuffle(&mut rng);
            (shared.clone(), perm)
        } else {
            (gaussian_vec(&mut rng, v * f, 1.0), (0..v).collect())
        };
        let family_offset = gaussian_vec(&mut rng, f, config.family_offset_scale);
        let base_logits: Vec<f64> = (0..v)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * config.unigram_spread
            })
            .collect();

        // Each trait swaps one token pair and adds one shift direction; a language
        // is a distinct subset of its family's traits plus a little private noise.
        let mut tokens: Vec<usize> = (0..v).collect();
        tokens.shuffle(&mut rng);
        let trait_pairs: Vec<(usize, usize)> = (0..config.traits_per_family)
            .map(|p| (tokens[2 * p], tokens[2 * p + 1]))
            .collect();
        let trait_shifts: Vec<Vec<f32>> = (0..config.traits_per_family)
            .map(|_| gaussian_vec(&mut rng, f, config.language_shift_scale))
            .collect();
        let mut combos: Vec<u32> = (0..1u32 << config.traits_per_family).collect();
        combos.shuffle(&mut rng);
        let (seen_combos, rest) = combos.split_at(config.seen_per_family);
        let mut rest = rest.to_vec();
        if config.central_unseen {
            // Unseen members take the free combinations nearest the seen members'
            // per-trait frequencies.
            let freq: Vec<f64> = (0..config.traits_per_family)
                .map(|p| {
                    let on = seen_combos.iter().filter(|&&c| c & (1 << p) != 0).count();
                    on as f64 / seen_combos.len() as f64
                })
                .collect();
            let distance = |c: u32| -> f64 {
                freq.iter()
                    .enumerate()
                    .map(|(p, q)| ((c >> p & 1) as f64 - q).abs())
                    .sum()
            };
            rest.sort_by(|&a, &b| distance(a).total_cmp(&distance(b)));
        }
        let members = seen_combos.iter().chain(&rest[..config.unseen_per_family]);

        for (member, &combo) in members.enumerate() {
            let is_seen = member < config.seen_per_family;
            let lang_id = if is_seen {
                format!("{family_id}s{member}")
            } else {
                format!("{family_id}u{}", member - config.seen_per_family)
            };

            let mut perm = family_perm.clone();
            let mut shift = gaussian_vec(&mut rng, f, config.private_shift_scale);
            for (p, &(a, b)) in trait_pairs.iter().enumerate() {
                if combo & (1 << p) != 0 {
                    perm.swap(a, b);
                    for (s, t) in shift.iter_mut().zip(&trait_shifts[p]) {
                        *s += t;
                    }
                }
            }
            let jitter = gaussian_vec(&mut rng, v * f, config.basis_jitter);
            let mut basis = vec![0.0f32; v * f];
            for tok in 0..v {
                let src = perm[tok];
                for j in 0..f {
                    basis[tok * f + j] = prototype[src * f + j] + shift[j] + jitter[tok * f + j];
                }
            }
            let logits: Vec<f64> = base_logits
                .iter()
                .map(|b| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    b + z * config.unigram_spread * 0.5
                })
                .collect();

            let spec = LanguageSpec {
                lang_id,
                family_id: family_id.clone(),
                token_unigram: softmax_f32_logits(&logits),
                acoustic_basis: Tensor::matrix(v, f, basis)?,
                family_offset: family_offset.clone(),
                noise_sigma: config.noise_sigma,
            };
            if is_seen {
                seen.push(spec);
            } else {
                unseen.push(spec);
            }
        }
    }

    let mut splits = BTreeMap::new();
    for spec in seen.iter().chain(&unseen) {
        let mut split = Split::default();
        for kind in [SplitKind::Train, SplitKind::Test] {
            let mut urng = seeds::named_rng(seed, &format!("utt/{}/{}", spec.lang_id, kind.as_str()));
            let utts = (0..config.utterances_per_split)
                .map(|i| {
                    let len = urng.random_range(config.min_length..=config.max_length);
                    let mut u = synth_utterance(spec, len, &mut urng)?;
                    u.id = format!("{}-{}-{i:04}", spec.lang_id, kind.as_str());
                    Ok(u)
                })
                .collect::<Result<Vec<_>>>()?;
            match kind {
                SplitKind::Train => split.train = utts,
                SplitKind::Test => split.test = utts,
            }
        }
        splits.insert(spec.lang_id.clone(), split);
    }

    Ok(Benchmark {
        seen_languages: seen,
        unseen_languages: unseen,
        splits,
        seed,
        config: config.clone(),
    })
}

/// Samples a transcript from the language's unigram and renders one frame per token.
pub fn synth_utterance(spec: &LanguageSpec, length: usize, rng: &mut impl Rng) -> Result<Utterance> {
    if length == 0 {
        return Err(Error::invalid("utterance length must be at least 1"));
    }
    let f = spec.acoustic_basis.cols();
    let cdf: Vec<f64> = spec
        .token_unigram
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect();
    let noise = if spec.noise_sigma > 0.0 {
        Some(Normal::new(0.0f32, spec.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?)
    } else {
        None
    };
    let mut transcript = Vec::with_capacity(length);
    let mut features = Vec::with_capacity(length * f);
    for _ in 0..length {
        let u: f64 = rng.random::<f64>() * cdf.last().copied().unwrap_or(1.0);
        let tok = cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1);
        transcript.push(tok);
        let row = spec.acoustic_basis.row(tok);
        for j in 0..f {
            let mut x = row[j] + spec.family_offset[j];
            if let Some(n) = &noise {
                x += n.sample(rng);
            }
            features.push(x);
        }
    }
    Ok(Utterance {
        id: String::new(),
        features: Tensor::matrix(length, f, features)?,
        transcript,
        lang_id: spec.lang_id.clone(),
    })
}

/// Column means of the basis plus the family offset: what every frame of the
/// language shares regardless of token.
pub fn accent(spec: &LanguageSpec) -> Vec<f32> {
    let b = &spec.acoustic_basis;
    (0..b.cols())
        .map(|j| {
            let s: f64 = (0..b.rows()).map(|r| b.row(r)[j] as f64).sum();
            (s / b.rows() as f64) as f32 + spec.family_offset[j]
        })
        .collect()
}

/// Moves every frame by `accent(to) - accent(from)`; transcript and label stay.
pub fn transfer_accent(utt: &Utterance, from: &LanguageSpec, to: &LanguageSpec) -> Result<Utterance> {
    let (a, b) = (accent(from), accent(to));
    if a.len() != utt.features.cols() || b.len() != a.len() {
        return Err(Error::invalid("accent width differs from feature width"));
    }
    let f = a.len();
    let data = utt
        .features
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| x + b[i % f] - a[i % f])
        .collect();
    Ok(Utterance {
        id: format!("{}-as-{}", utt.id, to.lang_id),
        features: Tensor::matrix(utt.features.rows(), f, data)?,
        transcript: utt.transcript.clone(),
        lang_id: utt.lang_id.clone(),
    })
}

/// Cosine similarity of two flattened bases.
pub fn basis_cosine(a: &LanguageSpec, b: &LanguageSpec) -> f64 {
    let (x, y) = (a.acoustic_basis.data(), b.acoustic_basis.data());
    let dot: f64 = x.iter().zip(y).map(|(&p, &q)| p as f64 * q as f64).sum();
    let nx: f64 = x.iter().map(|&p| (p as f64).powi(2)).sum::<f64>().sqrt();
    let ny: f64 = y.iter().map(|&p| (p as f64).powi(2)).sum::<f64>().sqrt();
    dot / (nx * ny)
}

/// Mean basis cosine similarity over within-family and cross-family pairs.
pub fn family_similarity(benchmark: &Benchmark) -> (f64, f64) {
    let all: Vec<&LanguageSpec> = benchmark
        .seen_languages
        .iter()
        .chain(&benchmark.unseen_languages)
        .collect();
    let (mut within, mut nw, mut across, mut na) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..all.len() {
        for j in (i + 1)..all.len() {
            let c = basis_cosine(all[i], all[j]);
            if all[i].family_id == all[j].family_id {
                within += c;
                nw += 1;
            } else {
                across += c;
                na += 1;
            }
        }
    }
    (within / nw.max(1) as f64, across / na.max(1) as f64)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    id: String,
    lang: String,
    text: String,
    features_file: String,
}

pub fn transcript_text(tokens: &[usize]) -> String {
    tokens
        .iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Writes a JSONL manifest; feature tensors go to `features/<id>.lbt` next to it.
pub fn save_manifest(utterances: &[Utterance], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut out = Vec::new();
    for u in utterances {
        let rel = format!("features/{}.lbt", u.id);
        lbt::save(&u.features, dir.join(&rel))?;
        let rec = ManifestRecord {
            id: u.id.clone(),
            lang: u.lang_id.clone(),
            text: transcript_text(&u.transcript),
            features_file: rel,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&out)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<Utterance>> {
    let path = path.as_ref();
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let f = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: PathBuf::from(path),
        line,
        message,
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        let transcript = rec
            .text
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(lineno, format!("bad token in text: {e}")))?;
        let features = lbt::load(dir.join(&rec.features_file))?;
        if features.rank() != 2 || features.rows() != transcript.len() {
            return Err(parse_err(
                lineno,
                format!(
                    "features {:?} do not align with {} tokens",
                    features.shape(),
                    transcript.len()
                ),
            ));
        }
        out.push(Utterance {
            id: rec.id,
            features,
            transcript,
            lang_id: rec.lang,
        });
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LanguageRecord {
    lang_id: String,
    family_id: String,
    seen: bool,
    token_unigram: Vec<f64>,
    acoustic_basis: Vec<Vec<f32>>,
    family_offset: Vec<f32>,
    noise_sigma: f32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BenchmarkRecord {
    seed: u64,
    config: BenchmarkConfig,
    languages: Vec<LanguageRecord>,
}

/// Writes `benchmark.json` plus `train.jsonl` / `test.jsonl` manifests into `dir`.
pub fn save_benchmark(benchmark: &Benchmark, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let languages = benchmark
        .seen_languages
        .iter()
        .map(|l| (l, true))
        .chain(benchmark.unseen_languages.iter().map(|l| (l, false)))
        .map(|(l, seen)| LanguageRecord {
            lang_id: l.lang_id.clone(),
            family_id: l.family_id.clone(),
            seen,
            token_unigram: l.token_unigram.clone(),
            acoustic_basis: (0..l.acoustic_basis.rows())
                .map(|r| l.acoustic_basis.row(r).to_vec())
                .collect(),
            family_offset: l.family_offset.clone(),
            noise_sigma: l.noise_sigma,
        })
        .collect();
    let rec = BenchmarkRecord {
        seed: benchmark.seed,
        config: benchmark.config.clone(),
        languages,
    };
    let json = serde_json::to_string_pretty(&rec)?;
    let p = dir.join("benchmark.json");
    fs::write(&p, json).map_err(|e| Error::io(p.display().to_string(), e))?;
    for kind in [SplitKind::Train, SplitKind::Test] {
        let utts: Vec<Utterance> = benchmark
            .splits
            .values()
            .flat_map(|s| match kind {
                SplitKind::Train => s.train.iter(),
                SplitKind::Test => s.test.iter(),
            })
            .cloned()
            .collect();
        save_manifest(&utts, dir.join(format!("{}.jsonl", kind.as_str())))?;
    }
    Ok(())
}

pub fn load_benchmark(dir: impl AsRef<Path>) -> Result<Benchmark> {
    let dir = dir.as_ref();
    let p = dir.join("benchmark.json");
    let text = fs::read_to_string(&p).map_err(|e| Error::io(p.display().to_string(), e))?;
    let rec: BenchmarkRecord = serde_json::from_str(&text)?;
    let mut seen = Vec::new();
    let mut unseen = Vec::new();
    for l in rec.languages {
        let spec = LanguageSpec {
            lang_id: l.lang_id,
            family_id: l.family_id,
            token_unigram: l.token_unigram,
            acoustic_basis: Tensor::from_rows(&l.acoustic_basis)?,
            family_offset: l.family_offset,
            noise_sigma: l.noise_sigma,
        };
        if l.seen {
            seen.push(spec);
        } else {
            unseen.push(spec);
        }
    }
    let mut splits: BTreeMap<String, Split> = BTreeMap::new();
    for spec in seen.iter().chain(&unseen) {
        splits.insert(spec.lang_id.clone(), Split::default());
    }
    for kind in [SplitKind::Train, SplitKind::Test] {
        for u in load_manifest(dir.join(format!("{}.jsonl", kind.as_str())))? {
            let split = splits.get_mut(&u.lang_id).ok_or_else(|| {
                Error::invalid(format!("utterance {} has unknown language {}", u.id, u.lang_id))
            })?;
            match kind {
                SplitKind::Train => split.train.push(u),
                SplitKind::Test => split.test.push(u),
            }
        }
    }
    Ok(Benchmark {
        seen_languages: seen,
        unseen_languages: unseen,
        splits,
        seed: rec.seed,
        config: rec.config,
    })
}

/// Shuffles a copy of `items` deterministically.
pub(crate) fn shuffled<T: Clone>(items: &[T], rng: &mut impl Rng) -> Vec<T> {
    let mut v = items.to_vec();
    v.shuffle(rng);
    v
}
