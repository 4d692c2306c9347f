//! Central finite-difference verification of the analytic gradients.
//!
//! The numeric side only ever calls loss *values*; it shares no code with
//! the backward passes it checks.

use serde::Serialize;

use crate::error::Result;
use crate::losses::{
    lb_into, loss_joint, loss_lg, loss_pg, loss_router, Embeddings, PairSelection, PairSource,
};
use crate::linalg::affine_forward;
use crate::model::{ExpertParams, GradMask, Gradients, LaprModel, ModelConfig};
use crate::retrieval::{PromptRecord, QueryRecord};
use crate::rng::SeededRng;

pub const FD_STEP: f64 = 1e-5;
pub const REL_GUARD: f64 = 1e-8;
pub const REL_TOLERANCE: f64 = 1e-6;
pub const KINK_MARGIN: f64 = 1e-3;

/// Largest absolute deviation relative to the largest gradient magnitude,
/// `max|a - n| / (max(|a|∞, |n|∞) + 1e-8)`.
///
/// Scaling each entry by its own magnitude instead would flag entries near
/// 1e-6, where central differences at this step carry ~1e-11 of roundoff and
/// truncation error.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    if analytic.iter().chain(numeric).any(|x| !x.is_finite()) {
        return f64::NAN;
    }
    let inf = |v: &[f64]| v.iter().map(|x| x.abs()).fold(0.0, f64::max);
    let scale = inf(analytic).max(inf(numeric));
    let dev = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    dev / (scale + REL_GUARD)
}

/// Smallest distance of any hidden pre-activation from the rectifier kink,
/// over every expert applied to the given inputs.
pub fn kink_margin<'a>(model: &LaprModel, queries: impl Iterator<Item = &'a [f64]>, prompts: &[Vec<f64>]) -> f64 {
    let margin = |experts: &[ExpertParams], x: &[f64]| {
        experts
            .iter()
            .flat_map(|e| affine_forward(&e.w1, &e.b1, x).expect("shapes checked").into_inner())
            .map(f64::abs)
            .fold(f64::INFINITY, f64::min)
    };
    let q = queries.map(|u| margin(&model.query_bank.experts, u)).fold(f64::INFINITY, f64::min);
    let p = prompts.iter().map(|z| margin(&model.prompt_bank.experts, z)).fold(f64::INFINITY, f64::min);
    q.min(p)
}

/// Central differences of `f` over every parameter of `model`.
pub fn finite_difference(model: &LaprModel, f: impl Fn(&LaprModel) -> f64) -> Vec<f64> {
    let mut m = model.clone();
    (0..model.num_params())
        .map(|i| {
            let orig = *m.param_mut(i);
            *m.param_mut(i) = orig + FD_STEP;
            let plus = f(&m);
            *m.param_mut(i) = orig - FD_STEP;
            let minus = f(&m);
            *m.param_mut(i) = orig;
            (plus - minus) / (2.0 * FD_STEP)
        })
        .collect()
}

/// A tiny random model with records and sampled batches for both sources.
#[derive(Clone, Debug)]
pub struct GradInstance {
    pub model: LaprModel,
    pub queries: Vec<QueryRecord>,
    pub prompts: Vec<PromptRecord>,
    pub batch_pg: Vec<PairSelection>,
    pub batch_lg: Vec<PairSelection>,
}

impl GradInstance {
    /// Dimensions drawn from {2, 3}, K from {2, 3}; `batch` queries.
    /// Draws are repeated until every hidden pre-activation sits at least
    /// [`KINK_MARGIN`] from zero, so the loss is smooth across the stencil.
    pub fn random(seed: u64, batch: usize) -> Self {
        let mut rng = SeededRng::new(seed);
        loop {
            let inst = Self::draw(&mut rng, batch);
            let fused: Vec<Vec<f64>> = inst
                .prompts
                .iter()
                .map(|p| inst.model.fuse(&p.image, &p.label).expect("same dims").into_inner())
                .collect();
            let queries = inst.queries.iter().map(|q| q.embedding.as_slice());
            if kink_margin(&inst.model, queries, &fused) >= KINK_MARGIN {
                return inst;
            }
        }
    }

    fn draw(rng: &mut SeededRng, batch: usize) -> Self {
        let rng = &mut *rng;
        let pick = |rng: &mut SeededRng| 2 + rng.below(2);
        let d = pick(rng);
        let config = ModelConfig {
            experts: pick(rng),
            input_dim: d,
            hidden_dim: pick(rng),
            output_dim: pick(rng),
            temperature: 1.0,
            use_label: true,
            uniform_routing: false,
        };
        let mut model = LaprModel::init(config, rng).expect("valid tiny config");
        // Off-uniform routing so the mixture gradients are exercised.
        // Positive hidden biases keep two-unit layers from going dark, which
        // would collapse distinct prompts onto one output.
        model.router.w.scale(2.0);
        for b in model.router.b.iter_mut() {
            *b = rng.uniform_range(-1.0, 1.0);
        }
        for e in model.query_bank.experts.iter_mut().chain(model.prompt_bank.experts.iter_mut()) {
            e.b1.iter_mut().for_each(|b| *b = rng.uniform_range(0.2, 0.8));
            e.b2.iter_mut().for_each(|b| *b = rng.uniform_range(-0.5, 0.5));
        }
        let vec = |rng: &mut SeededRng| (0..d).map(|_| rng.gaussian()).collect::<Vec<f64>>();
        let n_prompts = 2 * batch + 2;
        let prompts: Vec<PromptRecord> = (0..n_prompts)
            .map(|i| PromptRecord::ingest(i, vec(rng), vec(rng), 0).expect("finite"))
            .collect();
        let queries: Vec<QueryRecord> =
            (0..batch).map(|i| QueryRecord::ingest(i, vec(rng), None, None).expect("finite")).collect();
        let mut sample = |source| {
            (0..batch)
                .map(|q| {
                    let pos = rng.below(n_prompts);
                    let neg = (pos + 1 + rng.below(n_prompts - 1)) % n_prompts;
                    PairSelection { query_id: q, positive_id: pos, negative_id: neg, source }
                })
                .collect::<Vec<_>>()
        };
        let batch_pg = sample(PairSource::Performance);
        let batch_lg = sample(PairSource::Label);
        GradInstance { model, queries, prompts, batch_pg, batch_lg }
    }

    pub fn embeddings(&self) -> Embeddings<'_> {
        Embeddings { queries: &self.queries, prompts: &self.prompts }
    }

    fn query_ids(&self) -> Vec<usize> {
        (0..self.queries.len()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum CheckedLoss {
    #[serde(rename = "L_PG")]
    Pg,
    #[serde(rename = "L_LG")]
    Lg,
    #[serde(rename = "L_LB")]
    Lb,
    #[serde(rename = "L_R")]
    Router,
    #[serde(rename = "L_J")]
    Joint,
}

impl CheckedLoss {
    pub const ALL: [CheckedLoss; 5] =
        [CheckedLoss::Pg, CheckedLoss::Lg, CheckedLoss::Lb, CheckedLoss::Router, CheckedLoss::Joint];

    pub fn name(self) -> &'static str {
        match self {
            CheckedLoss::Pg => "L_PG",
            CheckedLoss::Lg => "L_LG",
            CheckedLoss::Lb => "L_LB",
            CheckedLoss::Router => "L_R",
            CheckedLoss::Joint => "L_J",
        }
    }

    /// Parameters the loss trains; the rest are held constant.
    pub fn mask(self) -> GradMask {
        match self {
            CheckedLoss::Pg => GradMask::EXPERTS,
            CheckedLoss::Lg | CheckedLoss::Lb | CheckedLoss::Router => GradMask::ROUTER,
            CheckedLoss::Joint => GradMask::ALL,
        }
    }

    /// Loss value and analytic gradient on `inst`.
    pub fn evaluate(self, model: &LaprModel, inst: &GradInstance) -> Result<(f64, Gradients)> {
        let emb = inst.embeddings();
        match self {
            CheckedLoss::Pg => loss_pg(model, &emb, &inst.batch_pg).map(|o| (o.value, o.grads)),
            CheckedLoss::Lg => loss_lg(model, &emb, &inst.batch_lg).map(|o| (o.value, o.grads)),
            CheckedLoss::Router => loss_router(model, &emb, &inst.batch_lg).map(|o| (o.value, o.grads)),
            CheckedLoss::Joint => {
                loss_joint(model, &emb, &inst.batch_pg, &inst.batch_lg).map(|o| (o.value, o.grads))
            }
            CheckedLoss::Lb => {
                let mut grads = Gradients::zeros(&model.config);
                let v = lb_into(model, &emb, &inst.query_ids(), &mut grads)?;
                Ok((v, grads))
            }
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LossCheck {
    pub loss: CheckedLoss,
    pub instances: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub checks: Vec<LossCheck>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn max_relative_error(&self) -> f64 {
        self.checks.iter().map(|c| c.max_relative_error).fold(0.0, f64::max)
    }
}

/// Keeps the entries of a flattened parameter vector selected by `mask`.
pub fn masked(model: &LaprModel, mask: GradMask, flat: &[f64]) -> Vec<f64> {
    let n_experts: usize = model.expert_slices().iter().map(|s| s.len()).sum();
    let (experts, router) = flat.split_at(n_experts);
    let mut out = Vec::new();
    if mask.experts {
        out.extend_from_slice(experts);
    }
    if mask.router {
        out.extend_from_slice(router);
    }
    out
}

/// Worst relative error of one loss on one instance, over the parameters
/// that loss trains. Entries outside the mask must be exactly zero.
pub fn check_instance(loss: CheckedLoss, inst: &GradInstance) -> Result<f64> {
    let (_, grads) = loss.evaluate(&inst.model, inst)?;
    let mask = loss.mask();
    let analytic = grads.flatten();
    let frozen = GradMask { experts: !mask.experts, router: !mask.router };
    if masked(&inst.model, frozen, &analytic).iter().any(|&g| g != 0.0) {
        return Ok(f64::INFINITY);
    }
    let numeric = finite_difference(&inst.model, |m| loss.evaluate(m, inst).map(|(v, _)| v).unwrap_or(f64::NAN));
    Ok(relative_error(&masked(&inst.model, mask, &analytic), &masked(&inst.model, mask, &numeric)))
}

/// Runs every loss over `instances` random tiny instances derived from `seed`.
pub fn run_gradcheck(seed: u64, instances: usize) -> Result<GradReport> {
    let mut master = SeededRng::new(seed);
    let insts: Vec<GradInstance> = (0..instances)
        .map(|_| {
            let s = master.next_u64();
            let batch = 1 + (s % 4) as usize;
            GradInstance::random(s, batch)
        })
        .collect();
    let mut checks = Vec::new();
    for loss in CheckedLoss::ALL {
        let mut worst: f64 = 0.0;
        for inst in &insts {
            let err = check_instance(loss, inst)?;
            worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
        }
        checks.push(LossCheck {
            loss,
            instances,
            max_relative_error: worst,
            passed: worst <= REL_TOLERANCE,
        });
    }
    Ok(GradReport { seed, step: FD_STEP, tolerance: REL_TOLERANCE, checks })
}
