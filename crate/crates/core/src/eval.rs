//! Error-rate metrics, zero-shot evaluation and the method-matrix report.
//!
//! Synthetic transcripts are token sequences: a token counts as a character and
//! each run of [`WORD_SIZE`] consecutive tokens counts as a word.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::langembed::{argmax_language, PredictorParams};
use crate::model::{LanguageInput, TagInit, TinyAsr};
use crate::trainer::{
    corpus_embedding, finetune, utterance_embedding, AdapterConfig, FineTuneMethod, FineTuned, Setting,
    TrainConfig,
};
use crate::seeds;

/// Tokens per synthetic word.
pub const WORD_SIZE: usize = 3;

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn rate<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid("reference must not be empty"));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Character error rate; may exceed 1 when the hypothesis has insertions.
pub fn cer(reference: &str, hypothesis: &str) -> Result<f64> {
    let r: Vec<char> = reference.chars().collect();
    let h: Vec<char> = hypothesis.chars().collect();
    rate(&r, &h)
}

/// Word error rate over whitespace-separated tokens.
pub fn wer(reference: &str, hypothesis: &str) -> Result<f64> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    rate(&r, &h)
}

/// Splits a token sequence into words of `size` tokens (the last may be shorter).
pub fn token_words(tokens: &[usize], size: usize) -> Vec<&[usize]> {
    tokens.chunks(size.max(1)).collect()
}

pub fn token_cer(reference: &[usize], hypothesis: &[usize]) -> Result<f64> {
    rate(reference, hypothesis)
}

pub fn token_wer(reference: &[usize], hypothesis: &[usize], word_size: usize) -> Result<f64> {
    rate(&token_words(reference, word_size), &token_words(hypothesis, word_size))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsResult {
    pub cer: f64,
    pub wer: f64,
    pub n_utterances: usize,
}

/// Corpus-level rates: total edits over total reference length.
pub fn corpus_metrics(pairs: &[(Vec<usize>, Vec<usize>)]) -> Result<MetricsResult> {
    if pairs.is_empty() {
        return Err(Error::invalid("no utterances to score"));
    }
    let (mut ce, mut cn, mut we, mut wn) = (0usize, 0usize, 0usize, 0usize);
    for (r, h) in pairs {
        if r.is_empty() {
            return Err(Error::invalid("reference must not be empty"));
        }
        ce += edit_distance(r, h);
        cn += r.len();
        let (rw, hw) = (token_words(r, WORD_SIZE), token_words(h, WORD_SIZE));
        we += edit_distance(&rw, &hw);
        wn += rw.len();
    }
    Ok(MetricsResult {
        cer: ce as f64 / cn as f64,
        wer: we as f64 / wn as f64,
        n_utterances: pairs.len(),
    })
}

/// Decodes every utterance with the language input chosen by `select`.
pub fn decode_corpora(
    model: &TinyAsr,
    corpora: &[(String, Vec<Utterance>)],
    mut select: impl FnMut(&str, &Utterance) -> Result<LanguageInput>,
) -> Result<MetricsResult> {
    let mut pairs = Vec::new();
    for (lang, utts) in corpora {
        for u in utts {
            let input = select(lang, u)?;
            pairs.push((u.transcript.clone(), model.greedy_decode(&u.features, &input)?));
        }
    }
    corpus_metrics(&pairs)
}

/// Zero-shot decoding of unseen languages with every parameter frozen. The
/// corpus-wise embedding is averaged over the evaluated corpus itself.
pub fn zero_shot_eval(
    model: &TinyAsr,
    corpora: &[(String, Vec<Utterance>)],
    method: FineTuneMethod,
) -> Result<MetricsResult> {
    if !method.supports(Setting::ZeroShot) {
        return Err(Error::invalid(format!("method {method} has no zero-shot form")));
    }
    let mut corpus_vectors = std::collections::BTreeMap::new();
    if method == FineTuneMethod::CorpusWs {
        for (lang, utts) in corpora {
            corpus_vectors.insert(lang.clone(), corpus_embedding(model, utts)?);
        }
    }
    decode_corpora(model, corpora, |lang, u| {
        Ok(match method {
            FineTuneMethod::Default => LanguageInput::Tag(argmax_language(&model.language_distribution(&u.features)?)),
            FineTuneMethod::CorpusWs => LanguageInput::Embedding(corpus_vectors[lang].clone()),
            _ => LanguageInput::Embedding(utterance_embedding(model, &u.features)?),
        })
    })
}

/// Test-set metrics of a fine-tuned model.
pub fn evaluate(ft: &FineTuned, corpora: &[(String, Vec<Utterance>)]) -> Result<MetricsResult> {
    decode_corpora(&ft.model, corpora, |lang, u| ft.language_input(lang, &u.features))
}

/// One line of the report, shaped like the method table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub setting: Setting,
    pub method: FineTuneMethod,
    pub trainable_embedding: bool,
    pub predictor: bool,
    pub applied_ft: bool,
    pub applied_inf: bool,
    pub cer_mean: f64,
    pub cer_std: Option<f64>,
    pub wer_mean: f64,
    pub wer_std: Option<f64>,
    /// Per-run values behind the mean (not part of the CSV).
    #[serde(default)]
    pub cer_runs: Vec<f64>,
    #[serde(default)]
    pub wer_runs: Vec<f64>,
}

impl ReportRow {
    pub fn from_runs(setting: Setting, method: FineTuneMethod, runs: &[MetricsResult]) -> Self {
        let cer: Vec<f64> = runs.iter().map(|m| m.cer).collect();
        let wer: Vec<f64> = runs.iter().map(|m| m.wer).collect();
        let stage = method.applied_stage(setting);
        let ft = setting == Setting::FineTuning;
        Self {
            setting,
            method,
            trainable_embedding: ft && method.trainable_embedding(),
            predictor: method.uses_predictor(),
            applied_ft: stage.fine_tuning,
            applied_inf: stage.inference,
            cer_mean: mean(&cer),
            cer_std: sample_std(&cer),
            wer_mean: mean(&wer),
            wer_std: sample_std(&wer),
            cer_runs: cer,
            wer_runs: wer,
        }
    }
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; `None` below two values.
pub fn sample_std(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let m = mean(v);
    Some((v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt())
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
    pub seeds: Vec<u64>,
}

pub const CSV_HEADER: [&str; 10] = [
    "setting",
    "method",
    "trainable_embedding",
    "predictor",
    "applied_ft",
    "applied_inf",
    "cer_mean",
    "cer_std",
    "wer_mean",
    "wer_std",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            _ => Err(Error::invalid(format!("unknown report format `{s}`"))),
        }
    }
}

fn best_in(rows: &[ReportRow], setting: Setting, key: impl Fn(&ReportRow) -> f64) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in rows.iter().enumerate() {
        if r.setting != setting || key(r).is_nan() {
            continue;
        }
        if best.is_none_or(|b| key(r) < key(&rows[b])) {
            best = Some(i);
        }
    }
    best
}

impl ExperimentReport {
    pub fn row(&self, setting: Setting, method: FineTuneMethod) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.setting == setting && r.method == method)
    }

    /// Index of the lowest mean CER within `setting` (first on ties).
    pub fn best_cer(&self, setting: Setting) -> Option<usize> {
        best_in(&self.rows, setting, |r| r.cer_mean)
    }

    pub fn best_wer(&self, setting: Setting) -> Option<usize> {
        best_in(&self.rows, setting, |r| r.wer_mean)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::invalid(format!("csv: {e}"));
        w.write_record(CSV_HEADER).map_err(io)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.setting.as_str().to_string(),
                r.method.name().to_string(),
                r.trainable_embedding.to_string(),
                r.predictor.to_string(),
                r.applied_ft.to_string(),
                r.applied_inf.to_string(),
                r.cer_mean.to_string(),
                opt(r.cer_std),
                r.wer_mean.to_string(),
                opt(r.wer_std),
            ])
            .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Parses the CSV produced by [`ExperimentReport::to_csv`]; per-run values are not recovered.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| Error::invalid(format!("csv: {e}")))?;
        if header.iter().ne(CSV_HEADER) {
            return Err(Error::invalid("unexpected report header"));
        }
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| Error::invalid(format!("csv row {}: {e}", i + 1)))?;
            let bad = |what: &str| Error::invalid(format!("csv row {}: bad {what}", i + 1));
            let flag = |k: usize| rec[k].parse::<bool>().map_err(|_| bad(CSV_HEADER[k]));
            let num = |k: usize| rec[k].parse::<f64>().map_err(|_| bad(CSV_HEADER[k]));
            let opt = |k: usize| if rec[k].is_empty() { Ok(None) } else { num(k).map(Some) };
            rows.push(ReportRow {
                setting: match &rec[0] {
                    "zero_shot" => Setting::ZeroShot,
                    "fine_tuning" => Setting::FineTuning,
                    _ => return Err(bad("setting")),
                },
                method: rec[1].parse()?,
                trainable_embedding: flag(2)?,
                predictor: flag(3)?,
                applied_ft: flag(4)?,
                applied_inf: flag(5)?,
                cer_mean: num(6)?,
                cer_std: opt(7)?,
                wer_mean: num(8)?,
                wer_std: opt(9)?,
                cer_runs: Vec::new(),
                wer_runs: Vec::new(),
            });
        }
        Ok(Self { rows, seeds: Vec::new() })
    }

    /// Markdown table; the best CER and WER within each setting are bold.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "CER counts tokens; WER counts words of {WORD_SIZE} tokens. Values in percent, mean ± sample std over {} seed(s).\n",
            self.seeds.len().max(1)
        );
        let _ = writeln!(
            s,
            "| setting | method | trainable_embedding | predictor | applied_ft | applied_inf | CER (%) | WER (%) |"
        );
        let _ = writeln!(s, "|---|---|---|---|---|---|---|---|");
        let mark = |b: bool| if b { "✓" } else { "✗" };
        let cell = |m: f64, sd: Option<f64>, bold: bool| {
            let body = match sd {
                Some(sd) => format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * sd),
                None => format!("{:.2}", 100.0 * m),
            };
            if bold { format!("**{body}**") } else { body }
        };
        let best: Vec<(Option<usize>, Option<usize>)> = [Setting::ZeroShot, Setting::FineTuning]
            .iter()
            .map(|&st| (self.best_cer(st), self.best_wer(st)))
            .collect();
        for (i, r) in self.rows.iter().enumerate() {
            let bold_cer = best.iter().any(|b| b.0 == Some(i));
            let bold_wer = best.iter().any(|b| b.1 == Some(i));
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} | {} |",
                r.setting.as_str(),
                r.method.name(),
                mark(r.trainable_embedding),
                mark(r.predictor),
                mark(r.applied_ft),
                mark(r.applied_inf),
                cell(r.cer_mean, r.cer_std, bold_cer),
                cell(r.wer_mean, r.wer_std, bold_wer),
            );
        }
        s
    }

    pub fn render(&self, format: ReportFormat) -> Result<String> {
        match format {
            ReportFormat::Csv => self.to_csv(),
            ReportFormat::Markdown => Ok(self.to_markdown()),
        }
    }
}

pub fn emit_report(report: &ExperimentReport, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = report.render(format)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Everything the fine-tuning rows need besides the method itself.
#[derive(Clone, Debug)]
pub struct MatrixInputs<'a> {
    pub pretrained: &'a TinyAsr,
    pub predictor: Option<&'a PredictorParams>,
    pub unseen_train: &'a [(String, Vec<Utterance>)],
    pub unseen_test: &'a [(String, Vec<Utterance>)],
    pub train: TrainConfig,
    pub adapters: AdapterConfig,
    pub new_tag_init: TagInit,
}

/// Rows in table order: zero-shot Default, CorpusWS, UtteranceWS, then the eight
/// fine-tuning methods.
pub fn default_matrix() -> Vec<(Setting, FineTuneMethod)> {
    FineTuneMethod::ZERO_SHOT
        .iter()
        .map(|&m| (Setting::ZeroShot, m))
        .chain(FineTuneMethod::FINE_TUNING.iter().map(|&m| (Setting::FineTuning, m)))
        .collect()
}

/// Parses `setting:method` or a bare method name (fine-tuning unless the method
/// is zero-shot only).
pub fn parse_matrix_entry(s: &str) -> Result<(Setting, FineTuneMethod)> {
    let (setting, name) = match s.split_once(':') {
        Some(("zero_shot", m)) => (Some(Setting::ZeroShot), m),
        Some(("fine_tuning", m)) => (Some(Setting::FineTuning), m),
        Some((other, _)) => return Err(Error::invalid(format!("unknown setting `{other}`"))),
        None => (None, s),
    };
    let method: FineTuneMethod = name.parse()?;
    let setting = setting.unwrap_or(if method == FineTuneMethod::Default {
        Setting::ZeroShot
    } else {
        Setting::FineTuning
    });
    if !method.supports(setting) {
        return Err(Error::invalid(format!("method {method} is not valid for {}", setting.as_str())));
    }
    Ok((setting, method))
}

/// Training seed of one fine-tuning run in the matrix.
pub fn run_seed(train_seed: u64, method: FineTuneMethod, seed: u64) -> u64 {
    seeds::derive(train_seed, &format!("{}/{seed}", method.name()))
}

/// Runs every (method × seed); each run's seed is derived from `inputs.train.seed`,
/// the method and the listed seed. Zero-shot rows do not depend on the seed and are
/// evaluated once; fine-tuning rows are repeated per seed and aggregated.
pub fn run_experiment_matrix(
    inputs: &MatrixInputs<'_>,
    methods: &[(Setting, FineTuneMethod)],
    seeds: &[u64],
) -> Result<ExperimentReport> {
    if seeds.is_empty() {
        return Err(Error::invalid("at least one seed is required"));
    }
    for &(setting, method) in methods {
        if !method.supports(setting) {
            return Err(Error::invalid(format!("method {method} is not valid for {}", setting.as_str())));
        }
        if method.uses_predictor() && inputs.predictor.is_none() {
            return Err(Error::invalid(format!("method {method} needs a trained predictor")));
        }
    }
    let mut rows = Vec::with_capacity(methods.len());
    for &(setting, method) in methods {
        let runs = match setting {
            Setting::ZeroShot => vec![zero_shot_eval(inputs.pretrained, inputs.unseen_test, method)?],
            Setting::FineTuning => seeds
                .iter()
                .map(|&seed| {
                    let cfg = TrainConfig {
                        seed: run_seed(inputs.train.seed, method, seed),
                        ..inputs.train.clone()
                    };
                    let ft = finetune(
                        inputs.pretrained,
                        inputs.unseen_train,
                        method,
                        &cfg,
                        &inputs.adapters,
                        inputs.predictor.filter(|_| method.uses_predictor()),
                        inputs.new_tag_init,
                    )?;
                    evaluate(&ft, inputs.unseen_test)
                })
                .collect::<Result<Vec<_>>>()?,
        };
        rows.push(ReportRow::from_runs(setting, method, &runs));
    }
    Ok(ExperimentReport {
        rows,
        seeds: seeds.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance::<u8>(&[], &[]), 0);
        assert_eq!(edit_distance(b"kitten", b"sitting"), 3);
        assert_eq!(edit_distance(b"abc", b""), 3);
    }

    #[test]
    fn rates() {
        assert_eq!(cer("abc", "abc").unwrap(), 0.0);
        assert!((cer("abc", "abd").unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(cer("a", "abc").unwrap(), 2.0);
        assert!(matches!(cer("", "x"), Err(Error::InvalidArgument(_))));
        assert_eq!(wer("a b c", "a x c").unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn token_words_group_by_three() {
        assert_eq!(token_words(&[1, 2, 3, 4], 3), vec![&[1, 2, 3][..], &[4][..]]);
        assert_eq!(token_wer(&[1, 2, 3, 4, 5, 6], &[1, 2, 3, 4, 5, 7], 3).unwrap(), 0.5);
        assert!((token_cer(&[1, 2, 3, 4, 5, 6], &[1, 2, 3, 4, 5, 7]).unwrap() - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn corpus_metrics_pool_counts() {
        let m = corpus_metrics(&[(vec![1, 2], vec![1, 2]), (vec![3, 4], vec![])]).unwrap();
        assert_eq!(m.cer, 0.5);
        assert_eq!(m.n_utterances, 2);
    }

    #[test]
    fn stats() {
        assert_eq!(sample_std(&[1.0]), None);
        assert!((sample_std(&[1.0, 3.0]).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn matrix_layout() {
        let m = default_matrix();
        assert_eq!(m.iter().filter(|e| e.0 == Setting::ZeroShot).count(), 3);
        assert_eq!(m.iter().filter(|e| e.0 == Setting::FineTuning).count(), 8);
        assert_eq!(parse_matrix_entry("default").unwrap(), (Setting::ZeroShot, FineTuneMethod::Default));
        assert!(parse_matrix_entry("fine_tuning:default").is_err());
        assert!(parse_matrix_entry("zero_shot:baseline").is_err());
        assert!(parse_matrix_entry("bogus").is_err());
    }

    fn row(setting: Setting, method: FineTuneMethod, cer: &[f64]) -> ReportRow {
        let runs: Vec<MetricsResult> = cer
            .iter()
            .map(|&c| MetricsResult {
                cer: c,
                wer: 2.0 * c,
                n_utterances: 1,
            })
            .collect();
        ReportRow::from_runs(setting, method, &runs)
    }

    #[test]
    fn empty_report_is_header_only() {
        let csv = ExperimentReport::default().to_csv().unwrap();
        assert_eq!(csv.trim_end(), CSV_HEADER.join(","));
    }

    #[test]
    fn csv_round_trip() {
        let report = ExperimentReport {
            rows: vec![
                row(Setting::ZeroShot, FineTuneMethod::Default, &[0.8]),
                row(Setting::FineTuning, FineTuneMethod::ParamCorpusWs, &[0.2, 0.25]),
            ],
            seeds: vec![1, 2],
        };
        let back = ExperimentReport::from_csv(&report.to_csv().unwrap()).unwrap();
        assert_eq!(back.rows.len(), 2);
        for (a, b) in report.rows.iter().zip(&back.rows) {
            assert_eq!((a.setting, a.method, a.trainable_embedding), (b.setting, b.method, b.trainable_embedding));
            assert_eq!((a.cer_mean, a.cer_std, a.wer_mean, a.wer_std), (b.cer_mean, b.cer_std, b.wer_mean, b.wer_std));
        }
        assert_eq!(back.rows[0].cer_std, None);
    }

    #[test]
    fn markdown_bolds_the_minimum() {
        let report = ExperimentReport {
            rows: vec![
                row(Setting::FineTuning, FineTuneMethod::Baseline, &[0.5]),
                row(Setting::FineTuning, FineTuneMethod::PredictorCorpusWs, &[0.2]),
                row(Setting::FineTuning, FineTuneMethod::CorpusWs, &[0.3]),
            ],
            seeds: vec![7],
        };
        assert_eq!(report.best_cer(Setting::FineTuning), Some(1));
        let md = report.to_markdown();
        let bold: Vec<&str> = md.lines().filter(|l| l.contains("**")).collect();
        assert_eq!(bold.len(), 1);
        assert!(bold[0].contains("predictor_corpus_ws"));
        assert!(bold[0].contains("**20.00**"));
    }
}
