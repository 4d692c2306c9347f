//! Training objectives and their exact gradients.
//!
//! Both contrastive objectives share one kernel: every query in the batch
//! is scored against the batch-wide denominator set `D` (the deduplicated
//! union of all sampled positives and negatives), and the loss is
//!
//! ```text
//! L = -(1/B) Σ_q [ s(q, i⁺_q) - log Σ_{j∈D} exp s(q, j) ]
//! ```
//!
//! What distinguishes the performance-guided from the label-guided loss is
//! the pair source and which parameter group receives gradient: experts
//! for the former (router frozen), router only for the latter (experts
//! frozen, though gradient still flows through their output values into
//! `π`). The load-balancing term is `KL(π̄ ‖ uniform)` over the batch.

use serde::{Deserialize, Serialize};

use crate::error::{LaprError, Result};
use crate::linalg::{axpy, dot, log_sum_exp};
use crate::model::{cosine_backward, cosine_parts, mix_into, GradMask, Gradients, LaprModel, MixtureWeights};
use crate::retrieval::{PromptRecord, QueryRecord};

/// Guard inside the load-balancing logarithm.
pub const LB_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairSource {
    Performance,
    Label,
}

/// One sampled (query, positive, negative) triple.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSelection {
    pub query_id: usize,
    pub positive_id: usize,
    pub negative_id: usize,
    pub source: PairSource,
}

/// Read-only access to the records a batch refers to by id.
#[derive(Clone, Copy, Debug)]
pub struct Embeddings<'a> {
    pub queries: &'a [QueryRecord],
    pub prompts: &'a [PromptRecord],
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub value: f64,
    pub grads: Gradients,
}

/// Sorted, deduplicated union of every positive and negative in the batch.
/// The same set serves as denominator for every query.
pub fn batch_denominator(batch: &[PairSelection]) -> Vec<usize> {
    let mut ids: Vec<usize> = batch.iter().flat_map(|p| [p.positive_id, p.negative_id]).collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

fn check_batch(batch: &[PairSelection], emb: &Embeddings<'_>) -> Result<()> {
    if batch.is_empty() {
        return Err(LaprError::invalid("empty batch"));
    }
    for p in batch {
        if p.query_id >= emb.queries.len() {
            return Err(LaprError::invalid(format!("unknown query id {}", p.query_id)));
        }
        if p.positive_id >= emb.prompts.len() || p.negative_id >= emb.prompts.len() {
            return Err(LaprError::invalid(format!(
                "pair ({}, {}) references a prompt outside the database",
                p.positive_id, p.negative_id
            )));
        }
        if p.positive_id == p.negative_id {
            return Err(LaprError::invalid(format!("query {} has positive == negative", p.query_id)));
        }
    }
    Ok(())
}

fn check_source(batch: &[PairSelection], source: PairSource) -> Result<()> {
    if let Some(p) = batch.iter().find(|p| p.source != source) {
        return Err(LaprError::invalid(format!(
            "query {} carries a {:?} pair where {:?} was expected",
            p.query_id, p.source, source
        )));
    }
    Ok(())
}

/// Batched in-batch contrastive loss, accumulating gradient for the groups
/// in `mask` into `grads`. Returns the loss value.
pub fn contrastive_into(
    model: &LaprModel,
    emb: &Embeddings<'_>,
    batch: &[PairSelection],
    mask: GradMask,
    grads: &mut Gradients,
) -> Result<f64> {
    check_batch(batch, emb)?;
    let cfg = &model.config;
    let (k_experts, dim) = (cfg.experts, cfg.output_dim);
    let inv_t = 1.0 / cfg.temperature;
    let scale = 1.0 / batch.len() as f64;

    let denom = batch_denominator(batch);
    let mut fused = Vec::with_capacity(denom.len());
    let mut prompt_fw = Vec::with_capacity(denom.len());
    for &j in &denom {
        let rec = &emb.prompts[j];
        let z = model.fuse(&rec.image, &rec.label)?;
        prompt_fw.push(model.forward_prompt(&z));
        fused.push(z);
    }
    let slot = |id: usize| denom.binary_search(&id).expect("pair id is in the denominator");

    let mut d_modes = if mask.experts { vec![vec![0.0; k_experts * dim]; denom.len()] } else { Vec::new() };
    let mut p_mix = vec![vec![0.0; dim]; denom.len()];
    let mut scores = vec![0.0; denom.len()];
    let mut d_pmix = vec![0.0; dim];
    let mut total = 0.0;

    for pair in batch {
        let u = &emb.queries[pair.query_id].embedding;
        let q = model.forward_query(u);
        let mut parts = Vec::with_capacity(denom.len());
        for (j, fw) in prompt_fw.iter().enumerate() {
            mix_into(&q.pi, fw.modes(), &mut p_mix[j]);
            let c = cosine_parts(&q.embedding, &p_mix[j])?;
            scores[j] = c.value * inv_t;
            parts.push(c);
        }
        let lse = log_sum_exp(&scores);
        let pos = slot(pair.positive_id);
        total += lse - scores[pos];

        let mut d_query = vec![0.0; dim];
        let mut dpi = vec![0.0; k_experts];
        for j in 0..denom.len() {
            let mut ds = (scores[j] - lse).exp();
            if j == pos {
                ds -= 1.0;
            }
            let g = ds * scale * inv_t;
            if g == 0.0 {
                continue;
            }
            d_pmix.iter_mut().for_each(|x| *x = 0.0);
            cosine_backward(&q.embedding, &p_mix[j], &parts[j], g, &mut d_query, &mut d_pmix);
            for (k, trace) in prompt_fw[j].traces.iter().enumerate() {
                dpi[k] += dot(&d_pmix, &trace.out);
                if mask.experts {
                    axpy(q.pi[k], &d_pmix, &mut d_modes[j][k * dim..(k + 1) * dim]);
                }
            }
        }
        model.backprop_query(u, &q, &d_query, &mut dpi, mask, grads);
    }

    if mask.experts {
        for (j, fw) in prompt_fw.iter().enumerate() {
            for (k, trace) in fw.traces.iter().enumerate() {
                let dy = &d_modes[j][k * dim..(k + 1) * dim];
                model.prompt_bank.experts[k].backward(&fused[j], trace, dy, &mut grads.prompt_bank.experts[k]);
            }
        }
    }
    Ok(total * scale)
}

/// Generic contrastive loss over any pair source and gradient mask.
pub fn contrastive_loss(
    model: &LaprModel,
    emb: &Embeddings<'_>,
    batch: &[PairSelection],
    mask: GradMask,
) -> Result<LossOutput> {
    let mut grads = Gradients::zeros(&model.config);
    let value = contrastive_into(model, emb, batch, mask, &mut grads)?;
    Ok(LossOutput { value, grads })
}

/// Performance-guided loss. Expert gradients only; router slots stay zero.
pub fn loss_pg(model: &LaprModel, emb: &Embeddings<'_>, batch: &[PairSelection]) -> Result<LossOutput> {
    check_source(batch, PairSource::Performance)?;
    contrastive_loss(model, emb, batch, GradMask::EXPERTS)
}

/// Label-guided loss. Router gradients only; expert slots stay zero.
pub fn loss_lg(model: &LaprModel, emb: &Embeddings<'_>, batch: &[PairSelection]) -> Result<LossOutput> {
    check_source(batch, PairSource::Label)?;
    contrastive_loss(model, emb, batch, GradMask::ROUTER)
}

/// `KL(π̄ ‖ uniform)` and its gradient with respect to each input mixture.
pub fn loss_lb(mixtures: &[MixtureWeights]) -> Result<(f64, Vec<Vec<f64>>)> {
    let Some(first) = mixtures.first() else {
        return Err(LaprError::invalid("load balancing over an empty batch"));
    };
    let k = first.len();
    if mixtures.iter().any(|m| m.len() != k) {
        return Err(LaprError::invalid("mixtures of different sizes"));
    }
    let b = mixtures.len() as f64;
    let mut mean = vec![0.0; k];
    for m in mixtures {
        axpy(1.0 / b, m.as_slice(), &mut mean);
    }
    let kf = k as f64;
    let value: f64 = mean.iter().map(|&p| p * ((p + LB_EPS) * kf).ln()).sum();
    let d_mean: Vec<f64> = mean.iter().map(|&p| ((p + LB_EPS) * kf).ln() + p / (p + LB_EPS)).collect();
    let per_query: Vec<f64> = d_mean.iter().map(|g| g / b).collect();
    Ok((value, vec![per_query; mixtures.len()]))
}

/// Load-balancing loss over the given queries, chained into router gradients.
/// Zero (with zero gradient) under uniform routing.
pub fn lb_into(model: &LaprModel, emb: &Embeddings<'_>, query_ids: &[usize], grads: &mut Gradients) -> Result<f64> {
    if query_ids.is_empty() {
        return Err(LaprError::invalid("load balancing over an empty batch"));
    }
    let mut mixtures = Vec::with_capacity(query_ids.len());
    for &q in query_ids {
        let rec = emb.queries.get(q).ok_or_else(|| LaprError::invalid(format!("unknown query id {q}")))?;
        mixtures.push(model.mixture(&rec.embedding)?);
    }
    let (value, dpis) = loss_lb(&mixtures)?;
    if !model.config.uniform_routing {
        for ((&q, pi), dpi) in query_ids.iter().zip(&mixtures).zip(&dpis) {
            crate::model::RouterParams::backward(pi.as_slice(), &emb.queries[q].embedding, dpi, &mut grads.router);
        }
    }
    Ok(value)
}

fn batch_queries(batches: &[&[PairSelection]]) -> Vec<usize> {
    let mut ids: Vec<usize> = batches.iter().flat_map(|b| b.iter().map(|p| p.query_id)).collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// Router objective `L_LG + L_LB`, router gradients only.
pub fn loss_router(model: &LaprModel, emb: &Embeddings<'_>, batch: &[PairSelection]) -> Result<LossOutput> {
    check_source(batch, PairSource::Label)?;
    router_objective(model, emb, batch, true)
}

/// Router-step objective with an arbitrary contrastive batch and an
/// optional load-balancing term (the loss ablations swap both).
pub fn router_objective(
    model: &LaprModel,
    emb: &Embeddings<'_>,
    batch: &[PairSelection],
    include_lb: bool,
) -> Result<LossOutput> {
    let mut grads = Gradients::zeros(&model.config);
    let mut value = contrastive_into(model, emb, batch, GradMask::ROUTER, &mut grads)?;
    if include_lb {
        value += lb_into(model, emb, &batch_queries(&[batch]), &mut grads)?;
    }
    Ok(LossOutput { value, grads })
}

/// Unified objective `L_PG + L_LG + L_LB` with gradients for every parameter.
pub fn loss_joint(
    model: &LaprModel,
    emb: &Embeddings<'_>,
    batch_pg: &[PairSelection],
    batch_lg: &[PairSelection],
) -> Result<LossOutput> {
    joint_objective(model, emb, batch_pg, batch_lg, true)
}

pub fn joint_objective(
    model: &LaprModel,
    emb: &Embeddings<'_>,
    batch_pg: &[PairSelection],
    batch_lg: &[PairSelection],
    include_lb: bool,
) -> Result<LossOutput> {
    check_source(batch_pg, PairSource::Performance)?;
    check_source(batch_lg, PairSource::Label)?;
    let mut grads = Gradients::zeros(&model.config);
    let mut value = contrastive_into(model, emb, batch_pg, GradMask::ALL, &mut grads)?;
    value += contrastive_into(model, emb, batch_lg, GradMask::ALL, &mut grads)?;
    if include_lb {
        value += lb_into(model, emb, &batch_queries(&[batch_pg, batch_lg]), &mut grads)?;
    }
    Ok(LossOutput { value, grads })
}
