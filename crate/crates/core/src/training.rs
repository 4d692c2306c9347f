//! Supervision and the alternating optimizer.
//!
//! Supervision is built once from the frozen extractor features: every
//! training query gets a candidate pool (top prompts by raw image cosine),
//! each pool member gets a performance and a label score, and the best and
//! worst few members by each score become the positive and negative sets.
//! Training then walks shuffled mini-batches and, per batch, takes an
//! expert step followed by a router step.

use std::collections::BTreeMap;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{LaprError, Result};
use crate::linalg::cosine_similarity;
use crate::losses::{
    contrastive_loss, joint_objective, router_objective, Embeddings, LossOutput, PairSelection, PairSource,
};
use crate::model::{GradMask, Gradients, LaprModel, ModelConfig};
use crate::parallel::par_map;
use crate::retrieval::{rank_order, PromptRecord, QueryRecord};
use crate::rng::SeededRng;

/// Switches for the ablation variants. All off is the full method.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    /// Uniform mixture weights everywhere; no router step.
    pub no_router: bool,
    /// Prompts fused from the image embedding alone.
    pub no_label: bool,
    /// One joint step per batch instead of two alternating ones.
    pub single_stage: bool,
    /// Expert step trains on label pairs instead of performance pairs.
    pub drop_pg: bool,
    /// Router step trains on performance pairs instead of label pairs.
    pub drop_lg: bool,
    /// No load-balancing term.
    pub drop_lb: bool,
}

impl AblationFlags {
    pub fn validate(&self) -> Result<()> {
        let conflict = |a: &str, b: &str| Err(LaprError::invalid(format!("ablation flags {a} and {b} conflict")));
        if self.single_stage && self.drop_pg {
            return conflict("single_stage", "drop_pg");
        }
        if self.single_stage && self.drop_lg {
            return conflict("single_stage", "drop_lg");
        }
        if self.drop_pg && self.drop_lg {
            return conflict("drop_pg", "drop_lg");
        }
        if self.no_router && self.single_stage {
            return conflict("no_router", "single_stage");
        }
        if self.no_router && self.drop_lg {
            return conflict("no_router", "drop_lg");
        }
        if self.no_router && self.drop_lb {
            return conflict("no_router", "drop_lb");
        }
        Ok(())
    }

    /// Short name used in reports, `full` when nothing is switched off.
    pub fn label(&self) -> String {
        let names = [
            (self.no_router, "no_router"),
            (self.no_label, "no_label"),
            (self.single_stage, "single_stage"),
            (self.drop_pg, "drop_pg"),
            (self.drop_lg, "drop_lg"),
            (self.drop_lb, "drop_lb"),
        ];
        let on: Vec<&str> = names.iter().filter(|(f, _)| *f).map(|(_, n)| *n).collect();
        if on.is_empty() {
            "full".to_string()
        } else {
            on.join("+")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub experts: usize,
    pub pool_size: usize,
    pub mine_count: usize,
    pub momentum: f64,
    pub seed: u64,
    pub temperature: f64,
    /// Expert hidden width; defaults to the input dimension.
    pub hidden_dim: Option<usize>,
    /// Expert output width; defaults to the input dimension.
    pub output_dim: Option<usize>,
    pub ablation: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.005,
            batch_size: 64,
            epochs: 200,
            experts: 10,
            pool_size: 50,
            mine_count: 5,
            momentum: 0.0,
            seed: 0,
            temperature: 1.0,
            hidden_dim: None,
            output_dim: None,
            ablation: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(LaprError::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(LaprError::invalid("batch_size must be at least 1"));
        }
        if self.mine_count == 0 || self.pool_size < 2 * self.mine_count {
            return Err(LaprError::invalid(format!(
                "pool_size ({}) must be at least twice mine_count ({})",
                self.pool_size, self.mine_count
            )));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(LaprError::invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        self.ablation.validate()?;
        self.model_config(1).validate()
    }

    /// Model shape implied by this configuration for `input_dim`-wide inputs.
    pub fn model_config(&self, input_dim: usize) -> ModelConfig {
        ModelConfig {
            experts: self.experts,
            input_dim,
            hidden_dim: self.hidden_dim.unwrap_or(input_dim),
            output_dim: self.output_dim.unwrap_or(input_dim),
            temperature: self.temperature,
            use_label: !self.ablation.no_label,
            uniform_routing: self.ablation.no_router,
        }
    }
}

/// Per-query candidate lists, best first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub pools: Vec<Vec<usize>>,
}

impl CandidatePool {
    pub fn get(&self, query_id: usize) -> Option<&[usize]> {
        self.pools.get(query_id).map(|p| p.as_slice())
    }
}

/// Top `pool_size` prompts per query by raw image cosine.
pub fn build_candidate_pool(queries: &[QueryRecord], database: &[PromptRecord], pool_size: usize) -> Result<CandidatePool> {
    if pool_size == 0 || pool_size > database.len() {
        return Err(LaprError::invalid(format!(
            "pool_size {pool_size} must be in 1..={}",
            database.len()
        )));
    }
    let pools = par_map(queries, |q| -> Result<Vec<usize>> {
        let mut scored = Vec::with_capacity(database.len());
        for p in database {
            scored.push((p.id, cosine_similarity(&q.embedding, &p.image)?));
        }
        scored.sort_by(rank_order);
        Ok(scored.into_iter().take(pool_size).map(|(id, _)| id).collect())
    });
    Ok(CandidatePool { pools: pools.into_iter().collect::<Result<_>>()? })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub perf: f64,
    pub label: f64,
}

impl ScoreEntry {
    pub fn get(&self, source: PairSource) -> f64 {
        match source {
            PairSource::Performance => self.perf,
            PairSource::Label => self.label,
        }
    }
}

/// Supervision scores keyed by `(query_id, prompt_id)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreTable {
    entries: BTreeMap<(usize, usize), ScoreEntry>,
}

impl ScoreTable {
    pub fn new() -> Self {
        ScoreTable::default()
    }

    pub fn insert(&mut self, query_id: usize, prompt_id: usize, entry: ScoreEntry) -> Result<()> {
        if !(entry.perf.is_finite() && entry.label.is_finite()) {
            return Err(LaprError::invalid(format!("non-finite score for ({query_id}, {prompt_id})")));
        }
        self.entries.insert((query_id, prompt_id), entry);
        Ok(())
    }

    pub fn get(&self, query_id: usize, prompt_id: usize) -> Option<ScoreEntry> {
        self.entries.get(&(query_id, prompt_id)).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in ascending `(query_id, prompt_id)` order.
    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), ScoreEntry)> + '_ {
        self.entries.iter().map(|(k, v)| (*k, *v))
    }

    /// Errors unless the table covers exactly the pairs of `pool`.
    pub fn check_covers(&self, pool: &CandidatePool) -> Result<()> {
        let mut expected = 0;
        for (q, ids) in pool.pools.iter().enumerate() {
            for &p in ids {
                if !self.entries.contains_key(&(q, p)) {
                    return Err(LaprError::invalid(format!("score table lacks pool pair ({q}, {p})")));
                }
                expected += 1;
            }
        }
        if expected != self.entries.len() {
            return Err(LaprError::invalid(format!(
                "score table has {} entries, pools hold {expected} pairs",
                self.entries.len()
            )));
        }
        Ok(())
    }
}

/// Source of supervision scores for a (query, prompt) pairing.
pub trait Scorer {
    fn score(&mut self, query: &QueryRecord, prompt: &PromptRecord) -> Result<ScoreEntry>;
}

/// Scores every pool pair, queries in id order and pool members in rank order.
pub fn build_score_table(
    queries: &[QueryRecord],
    database: &[PromptRecord],
    pool: &CandidatePool,
    scorer: &mut dyn Scorer,
) -> Result<ScoreTable> {
    let mut table = ScoreTable::new();
    for (q, ids) in pool.pools.iter().enumerate() {
        let query = queries.get(q).ok_or_else(|| LaprError::invalid(format!("pool for unknown query {q}")))?;
        for &p in ids {
            let prompt = database.get(p).ok_or_else(|| LaprError::invalid(format!("unknown prompt {p}")))?;
            table.insert(q, p, scorer.score(query, prompt)?)?;
        }
    }
    Ok(table)
}

/// Positive and negative sets for one query.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinedSets {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Best `mine_count` pool members become positives, worst become negatives.
/// Ties go to the smaller id on both ends, so a constant-score pool yields
/// overlapping sets and is rejected.
pub fn mine_query(
    query_id: usize,
    pool: &[usize],
    scores: &ScoreTable,
    source: PairSource,
    mine_count: usize,
) -> Result<MinedSets> {
    let degenerate = |reason: String| LaprError::DegenerateSupervision { query: query_id, reason };
    if mine_count == 0 || pool.len() < mine_count {
        return Err(degenerate(format!("pool of {} cannot supply {mine_count} pairs", pool.len())));
    }
    let mut scored = Vec::with_capacity(pool.len());
    for &p in pool {
        let entry = scores
            .get(query_id, p)
            .ok_or_else(|| LaprError::invalid(format!("no score for ({query_id}, {p})")))?;
        scored.push((p, entry.get(source)));
    }
    scored.sort_by(rank_order);
    let positives: Vec<usize> = scored[..mine_count].iter().map(|e| e.0).collect();
    scored.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    let negatives: Vec<usize> = scored[..mine_count].iter().map(|e| e.0).collect();
    if positives.iter().any(|p| negatives.contains(p)) {
        return Err(degenerate("positive and negative sets overlap".to_string()));
    }
    Ok(MinedSets { positives, negatives })
}

/// Mined sets for every query; degenerate queries are logged and left out.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MinedPairs {
    pub source: Option<PairSource>,
    pub sets: BTreeMap<usize, MinedSets>,
    pub skipped: Vec<usize>,
}

pub fn mine_pairs(pool: &CandidatePool, scores: &ScoreTable, source: PairSource, mine_count: usize) -> Result<MinedPairs> {
    let mut out = MinedPairs { source: Some(source), ..MinedPairs::default() };
    for (q, ids) in pool.pools.iter().enumerate() {
        match mine_query(q, ids, scores, source, mine_count) {
            Ok(sets) => {
                out.sets.insert(q, sets);
            }
            Err(e @ LaprError::DegenerateSupervision { .. }) => {
                warn!("skipping query {q} for {source:?} pairs: {e}");
                out.skipped.push(q);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// One uniform positive and one uniform negative.
pub fn sample_pair(rng: &mut SeededRng, query_id: usize, sets: &MinedSets, source: PairSource) -> Result<PairSelection> {
    if sets.positives.is_empty() || sets.negatives.is_empty() {
        return Err(LaprError::DegenerateSupervision { query: query_id, reason: "empty positive or negative set".into() });
    }
    let positive_id = sets.positives[rng.below(sets.positives.len())];
    let negative_id = sets.negatives[rng.below(sets.negatives.len())];
    Ok(PairSelection { query_id, positive_id, negative_id, source })
}

/// Pools, scores and mined sets for a training run.
#[derive(Clone, Debug)]
pub struct Supervision {
    pub pool: CandidatePool,
    pub scores: ScoreTable,
    pub performance: MinedPairs,
    pub label: MinedPairs,
}

impl Supervision {
    pub fn from_table(pool: CandidatePool, scores: ScoreTable, mine_count: usize) -> Result<Self> {
        scores.check_covers(&pool)?;
        let performance = mine_pairs(&pool, &scores, PairSource::Performance, mine_count)?;
        let label = mine_pairs(&pool, &scores, PairSource::Label, mine_count)?;
        Ok(Supervision { pool, scores, performance, label })
    }

    /// Builds pools from raw features, scores them with `scorer`, and mines.
    pub fn build(
        queries: &[QueryRecord],
        database: &[PromptRecord],
        scorer: &mut dyn Scorer,
        config: &TrainConfig,
    ) -> Result<Self> {
        let pool = build_candidate_pool(queries, database, config.pool_size)?;
        let scores = build_score_table(queries, database, &pool, scorer)?;
        Self::from_table(pool, scores, config.mine_count)
    }
}

/// Heavy-ball SGD state. With zero momentum this is plain SGD.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Gradients,
}

impl Sgd {
    pub fn new(config: &TrainConfig, model: &ModelConfig) -> Self {
        Sgd { lr: config.lr, momentum: config.momentum, velocity: Gradients::zeros(model) }
    }

    fn apply(&mut self, model: &mut LaprModel, grads: &Gradients, mask: GradMask) {
        let lr = self.lr;
        let mu = self.momentum;
        let update = |params: Vec<&mut [f64]>, vel: Vec<&mut [f64]>, g: Vec<&[f64]>| {
            for ((p, v), g) in params.into_iter().zip(vel).zip(g) {
                for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                    *v = mu * *v + g;
                    *p -= lr * *v;
                }
            }
        };
        if mask.experts {
            let mut vel = self.velocity.query_bank.param_slices_mut();
            vel.extend(self.velocity.prompt_bank.param_slices_mut());
            update(model.expert_slices_mut(), vel, grads.expert_slices());
        }
        if mask.router {
            update(model.router_slices_mut(), self.velocity.router.param_slices_mut(), grads.router_slices());
        }
    }
}

/// Which objective a step used.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepKind {
    Expert,
    Router,
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub kind: StepKind,
    pub loss: f64,
}

fn checked_step(
    model: &mut LaprModel,
    opt: &mut Sgd,
    out: LossOutput,
    mask: GradMask,
    kind: StepKind,
) -> Result<StepReport> {
    let before = model.fingerprints();
    opt.apply(model, &out.grads, mask);
    let after = model.fingerprints();
    if (!mask.router && before.1 != after.1) || (!mask.experts && before.0 != after.0) {
        return Err(LaprError::invalid(format!("{kind:?} step touched a frozen parameter group")));
    }
    Ok(StepReport { kind, loss: out.value })
}

/// SGD on both expert banks with the router frozen. The batch is normally
/// performance-sourced; the drop_pg ablation passes label pairs.
pub fn expert_step(model: &mut LaprModel, opt: &mut Sgd, emb: &Embeddings<'_>, batch: &[PairSelection]) -> Result<StepReport> {
    let out = contrastive_loss(model, emb, batch, GradMask::EXPERTS)?;
    checked_step(model, opt, out, GradMask::EXPERTS, StepKind::Expert)
}

/// SGD on the router with experts frozen. The batch is normally
/// label-sourced; the drop_lg ablation passes performance pairs.
pub fn router_step(
    model: &mut LaprModel,
    opt: &mut Sgd,
    emb: &Embeddings<'_>,
    batch: &[PairSelection],
    include_lb: bool,
) -> Result<StepReport> {
    if model.config.uniform_routing {
        return Err(LaprError::invalid("router step under uniform routing"));
    }
    let out = router_objective(model, emb, batch, include_lb)?;
    checked_step(model, opt, out, GradMask::ROUTER, StepKind::Router)
}

/// One unified step on every parameter.
pub fn joint_step(
    model: &mut LaprModel,
    opt: &mut Sgd,
    emb: &Embeddings<'_>,
    batch_pg: &[PairSelection],
    batch_lg: &[PairSelection],
    include_lb: bool,
) -> Result<StepReport> {
    let out = joint_objective(model, emb, batch_pg, batch_lg, include_lb)?;
    checked_step(model, opt, out, GradMask::ALL, StepKind::Joint)
}

/// Mean step losses for one epoch. `expert` holds the expert-step loss
/// (the joint loss under single_stage); `router` is absent when no router
/// step ran.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub expert: f64,
    pub router: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: String,
    pub epochs: Vec<EpochLosses>,
    pub skipped_performance: usize,
    pub skipped_label: usize,
}

fn check_model_matches(model: &LaprModel, config: &TrainConfig) -> Result<()> {
    let cfg = &model.config;
    if cfg.use_label == config.ablation.no_label || cfg.uniform_routing != config.ablation.no_router {
        return Err(LaprError::invalid("model routing/fusion settings disagree with the ablation flags"));
    }
    if cfg.experts != config.experts {
        return Err(LaprError::invalid(format!(
            "model has {} experts, config asks for {}",
            cfg.experts, config.experts
        )));
    }
    Ok(())
}

/// Runs the alternating schedule (or the ablated variant) for
/// `config.epochs` epochs. `rng` drives batch shuffling and pair sampling.
pub fn train(
    model: &mut LaprModel,
    prompts: &[PromptRecord],
    queries: &[QueryRecord],
    supervision: &Supervision,
    config: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<TrainReport> {
    config.validate()?;
    model.validate()?;
    check_model_matches(model, config)?;
    let flags = config.ablation;
    let emb = Embeddings { queries, prompts };
    let mut opt = Sgd::new(config, &model.config);

    // Queries with no usable supervision of either kind never enter a batch.
    let mut active: Vec<usize> = (0..queries.len())
        .filter(|q| supervision.performance.sets.contains_key(q) || supervision.label.sets.contains_key(q))
        .collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    if config.epochs > 0 && active.is_empty() {
        return Err(LaprError::invalid("no query has usable supervision"));
    }

    for epoch in 0..config.epochs {
        rng.shuffle(&mut active);
        let (mut expert_sum, mut router_sum, mut expert_n, mut router_n) = (0.0, 0.0, 0usize, 0usize);
        for chunk in active.chunks(config.batch_size) {
            let mut perf = Vec::with_capacity(chunk.len());
            let mut label = Vec::with_capacity(chunk.len());
            for &q in chunk {
                if let Some(sets) = supervision.performance.sets.get(&q) {
                    perf.push(sample_pair(rng, q, sets, PairSource::Performance)?);
                }
                if let Some(sets) = supervision.label.sets.get(&q) {
                    label.push(sample_pair(rng, q, sets, PairSource::Label)?);
                }
            }

            if flags.single_stage {
                if perf.is_empty() || label.is_empty() {
                    continue;
                }
                let r = joint_step(model, &mut opt, &emb, &perf, &label, !flags.drop_lb)?;
                expert_sum += r.loss;
                expert_n += 1;
                continue;
            }

            let expert_batch = if flags.drop_pg { &label } else { &perf };
            if !expert_batch.is_empty() {
                let r = expert_step(model, &mut opt, &emb, expert_batch)?;
                expert_sum += r.loss;
                expert_n += 1;
            }
            if !flags.no_router {
                let router_batch = if flags.drop_lg { &perf } else { &label };
                if !router_batch.is_empty() {
                    let r = router_step(model, &mut opt, &emb, router_batch, !flags.drop_lb)?;
                    router_sum += r.loss;
                    router_n += 1;
                }
            }
        }
        let losses = EpochLosses {
            epoch,
            expert: if expert_n > 0 { expert_sum / expert_n as f64 } else { f64::NAN },
            router: (router_n > 0).then(|| router_sum / router_n as f64),
        };
        debug!("epoch {epoch}: expert {:.6} router {:?}", losses.expert, losses.router);
        epochs.push(losses);
    }
    if let (Some(first), Some(last)) = (epochs.first(), epochs.last()) {
        info!(
            "trained {} ({} epochs): expert loss {:.5} -> {:.5}",
            flags.label(),
            epochs.len(),
            first.expert,
            last.expert
        );
    }
    Ok(TrainReport {
        variant: flags.label(),
        epochs,
        skipped_performance: supervision.performance.skipped.len(),
        skipped_label: supervision.label.skipped.len(),
    })
}

/// Initializes a model from `config` and trains it. The seed is split into
/// one stream for initialization and one for the optimizer loop.
pub fn init_and_train(
    prompts: &[PromptRecord],
    queries: &[QueryRecord],
    supervision: &Supervision,
    config: &TrainConfig,
) -> Result<(LaprModel, TrainReport)> {
    config.validate()?;
    let dim = prompts
        .first()
        .map(|p| p.image.dim())
        .or_else(|| queries.first().map(|q| q.embedding.dim()))
        .ok_or_else(|| LaprError::invalid("no records to train on"))?;
    let mut master = SeededRng::new(config.seed);
    let mut init_rng = master.fork();
    let mut loop_rng = master.fork();
    let mut model = LaprModel::init(config.model_config(dim), &mut init_rng)?;
    let report = train(&mut model, prompts, queries, supervision, config, &mut loop_rng)?;
    Ok((model, report))
}
