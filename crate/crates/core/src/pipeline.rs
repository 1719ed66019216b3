//! End-to-end helpers shared by the command line and the acceptance tests.

use crate::config::RunConfig;
use crate::corpus::{generate_benchmark, Benchmark, SplitKind};
use crate::error::Result;
use crate::eval::{run_experiment_matrix, ExperimentReport, MatrixInputs};
use crate::langembed::{
    build_loo_dataset, heldout_comparison, train_predictor_split, HeldoutComparison, PredictorHistory,
    PredictorMeta, PredictorParams,
};
use crate::model::TinyAsr;
use crate::trainer::{pretrain, PretrainReport};

pub fn build_benchmark(cfg: &RunConfig) -> Result<Benchmark> {
    generate_benchmark(&cfg.benchmark, cfg.sub_seed("benchmark"))
}

/// Fresh model pretrained on the seen languages; the report uses their test splits.
pub fn pretrain_model(cfg: &RunConfig, benchmark: &Benchmark) -> Result<(TinyAsr, PretrainReport)> {
    let seen = benchmark.seen_ids();
    let mut model = TinyAsr::new(cfg.model_config()?, seen.clone(), cfg.sub_seed("model-init"))?;
    let pcfg = cfg.pretrain_config();
    let swapped = benchmark.accent_swapped(pcfg.accent_swap_fraction, cfg.sub_seed("accent-swap"))?;
    let report = pretrain(
        &mut model,
        &benchmark.corpora(&seen, SplitKind::Train),
        &swapped,
        &benchmark.corpora(&seen, SplitKind::Test),
        &pcfg,
    )?;
    Ok((model, report))
}

#[derive(Clone, Debug)]
pub struct TrainedPredictor {
    pub params: PredictorParams,
    pub history: PredictorHistory,
    pub meta: PredictorMeta,
}

/// Leave-one-out predictor over the seen languages' training splits.
pub fn fit_predictor(cfg: &RunConfig, model: &TinyAsr, benchmark: &Benchmark) -> Result<TrainedPredictor> {
    let seen = benchmark.seen_ids();
    let examples = build_loo_dataset(model, &benchmark.corpora(&seen, SplitKind::Train), cfg.predictor.mode)?;
    let seed = cfg.sub_seed("predictor");
    let (params, history, train, val) = train_predictor_split(&examples, &cfg.predictor, seed)?;
    let labels = |v: &[usize]| v.iter().map(|&k| model.tag_labels()[k].clone()).collect();
    let meta = PredictorMeta {
        hidden: params.hidden(),
        activation: params.activation,
        mode: cfg.predictor.mode,
        config: cfg.predictor.clone(),
        seed,
        best_epoch: history.best_epoch,
        best_val_mse: history.best_val_mse,
        train_languages: labels(&train),
        val_languages: labels(&val),
    };
    Ok(TrainedPredictor { params, history, meta })
}

/// Held-out errors of the predictor against its input and the mean of the other tags.
pub fn predictor_heldout(cfg: &RunConfig, model: &TinyAsr, benchmark: &Benchmark) -> Result<HeldoutComparison> {
    let seen = benchmark.seen_ids();
    let examples = build_loo_dataset(model, &benchmark.corpora(&seen, SplitKind::Train), cfg.predictor.mode)?;
    heldout_comparison(
        &examples,
        &model.embedding_table(),
        &cfg.predictor,
        cfg.sub_seed("predictor-heldout"),
    )
}

pub fn experiment_report(
    cfg: &RunConfig,
    benchmark: &Benchmark,
    pretrained: &TinyAsr,
    predictor: Option<&PredictorParams>,
    seeds: &[u64],
) -> Result<ExperimentReport> {
    let unseen = benchmark.unseen_ids();
    let train = benchmark.corpora(&unseen, SplitKind::Train);
    let test = benchmark.corpora(&unseen, SplitKind::Test);
    let inputs = MatrixInputs {
        pretrained,
        predictor,
        unseen_train: &train,
        unseen_test: &test,
        train: cfg.finetune_config(),
        adapters: cfg.finetune.adapters,
        new_tag_init: cfg.finetune.new_tag_init,
    };
    run_experiment_matrix(&inputs, &cfg.eval.matrix()?, seeds)
}

/// Every artifact of one complete run.
#[derive(Clone, Debug)]
pub struct FullRun {
    pub benchmark: Benchmark,
    pub pretrained: TinyAsr,
    pub pretrain: PretrainReport,
    pub predictor: TrainedPredictor,
    pub heldout: Option<HeldoutComparison>,
    pub report: ExperimentReport,
}

/// Benchmark, pretraining, predictor and the method table in one call.
pub fn run_full(cfg: &RunConfig, with_heldout: bool) -> Result<FullRun> {
    let benchmark = build_benchmark(cfg)?;
    let (pretrained, pretrain) = pretrain_model(cfg, &benchmark)?;
    let predictor = fit_predictor(cfg, &pretrained, &benchmark)?;
    let heldout = if with_heldout {
        Some(predictor_heldout(cfg, &pretrained, &benchmark)?)
    } else {
        None
    };
    let report = experiment_report(cfg, &benchmark, &pretrained, Some(&predictor.params), &cfg.eval.seeds)?;
    Ok(FullRun {
        benchmark,
        pretrained,
        pretrain,
        predictor,
        heldout,
        report,
    })
}
