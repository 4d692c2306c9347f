//! End-to-end synthetic benchmark: generate, score, train variants, evaluate.

use serde::Serialize;

use crate::error::Result;
use crate::model::LaprModel;
use crate::retrieval::build_cache;
use crate::synth::{
    batch_mean_mixture_entropy, consistency_correlation, evaluate, generate, scorer_seed, BaselineRetriever,
    LaprRetriever, Metrics, ProxyScorer, SynthConfig, SynthDataset,
};
use crate::training::{init_and_train, AblationFlags, Supervision, TrainConfig, TrainReport};

/// Dataset shape of the reference benchmark.
pub fn reference_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        num_modes: 6,
        num_categories: 5,
        dim: 64,
        prompts: 2000,
        queries: 400,
        image_noise: 0.35,
        label_noise: 0.1,
        seed,
        ..SynthConfig::default()
    }
}

/// Training schedule of the reference benchmark. Temperature 0.1 and
/// momentum 0.9 on top of the default learning rate.
pub fn reference_train(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 40,
        experts: 6,
        pool_size: 30,
        mine_count: 5,
        temperature: 0.1,
        momentum: 0.9,
        seed,
        ..TrainConfig::default()
    }
}

/// The variants compared by the benchmark, full model first.
pub fn reference_variants() -> Vec<AblationFlags> {
    let f = AblationFlags::default();
    vec![
        f,
        AblationFlags { no_router: true, ..f },
        AblationFlags { no_label: true, ..f },
        AblationFlags { drop_pg: true, ..f },
        AblationFlags { drop_lg: true, ..f },
        AblationFlags { drop_lb: true, ..f },
    ]
}

/// A generated dataset with its proxy supervision.
pub struct Prepared {
    pub dataset: SynthDataset,
    pub supervision: Supervision,
}

pub fn prepare(synth: &SynthConfig, train: &TrainConfig) -> Result<Prepared> {
    let dataset = generate(synth)?;
    let mut scorer = ProxyScorer::new(synth.proxy(), scorer_seed(synth.seed));
    let supervision = Supervision::build(&dataset.train_queries, &dataset.prompts, &mut scorer, train)?;
    Ok(Prepared { dataset, supervision })
}

impl Prepared {
    pub fn baseline(&self) -> Result<Metrics> {
        evaluate(&BaselineRetriever { prompts: &self.dataset.prompts }, &self.dataset.eval_view())
    }

    /// Label/performance correlation over every scored (query, candidate) pair.
    pub fn consistency(&self) -> Result<f64> {
        let pairs: Vec<(usize, usize)> = self.supervision.scores.iter().map(|(k, _)| k).collect();
        consistency_correlation(&pairs, &self.supervision.scores)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct VariantOutcome {
    pub variant: String,
    pub metrics: Metrics,
    /// Batch-mean mixture entropy over the training queries after training.
    pub entropy: f64,
    pub report: TrainReport,
    #[serde(skip)]
    pub model: LaprModel,
}

pub fn run_variant(prep: &Prepared, train: &TrainConfig) -> Result<VariantOutcome> {
    let ds = &prep.dataset;
    let (model, report) = init_and_train(&ds.prompts, &ds.train_queries, &prep.supervision, train)?;
    let cache = build_cache(&ds.prompts, &model)?;
    let metrics = evaluate(&LaprRetriever { model: &model, cache: &cache }, &ds.eval_view())?;
    let entropy = batch_mean_mixture_entropy(&model, &ds.train_queries, train.batch_size)?;
    Ok(VariantOutcome { variant: report.variant.clone(), metrics, entropy, report, model })
}

/// Everything measured for one seed.
#[derive(Clone, Debug, Serialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub baseline: Metrics,
    pub consistency: f64,
    pub variants: Vec<VariantOutcome>,
}

impl SeedOutcome {
    pub fn variant(&self, label: &str) -> Option<&VariantOutcome> {
        self.variants.iter().find(|v| v.variant == label)
    }
}

pub fn run_seed(synth: &SynthConfig, train: &TrainConfig, variants: &[AblationFlags]) -> Result<SeedOutcome> {
    let prep = prepare(synth, train)?;
    let mut outcomes = Vec::with_capacity(variants.len());
    for &ablation in variants {
        outcomes.push(run_variant(&prep, &TrainConfig { ablation, ..train.clone() })?);
    }
    Ok(SeedOutcome { seed: synth.seed, baseline: prep.baseline()?, consistency: prep.consistency()?, variants: outcomes })
}
