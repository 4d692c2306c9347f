//! Planted-mode synthetic benchmark.
//!
//! Every record belongs to a category and a hidden mode. Label embeddings
//! carry the mode only. Image embeddings carry the mode plus a category
//! direction plus heavy noise, so two images can look alike (same category)
//! while their labels disagree (different modes). Hidden modes are kept
//! apart from the records and only ever read by [`evaluate`].

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{LaprError, Result};
use crate::linalg::{cosine_similarity, l2_normalize, Vector};
use crate::model::LaprModel;
use crate::parallel::par_map;
use crate::retrieval::{retrieve, retrieve_baseline, ModeCache, PromptRecord, QueryRecord};
use crate::rng::SeededRng;
use crate::training::{ScoreEntry, ScoreTable, Scorer};

/// Cosine ceiling between any two mode prototypes.
pub const PROTOTYPE_MAX_COSINE: f64 = 0.3;
/// Rejected draws allowed per prototype before giving up.
pub const MAX_REJECTIONS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_modes: usize,
    pub num_categories: usize,
    pub dim: usize,
    pub prompts: usize,
    /// Training queries.
    pub queries: usize,
    /// Held-out evaluation queries; defaults to `queries`.
    pub eval_queries: Option<usize>,
    pub image_noise: f64,
    pub label_noise: f64,
    /// Norm of each category direction added to image embeddings.
    pub category_scale: f64,
    /// `C × M` category-to-mode mixing rows; banded when absent.
    pub mixing: Option<Vec<Vec<f64>>>,
    pub alpha: f64,
    pub beta: f64,
    pub perf_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_modes: 6,
            num_categories: 5,
            dim: 64,
            prompts: 2000,
            queries: 400,
            eval_queries: None,
            image_noise: 0.35,
            label_noise: 0.1,
            category_scale: 1.0,
            mixing: None,
            alpha: 0.7,
            beta: 0.3,
            perf_noise: 0.05,
            seed: 0,
        }
    }
}

/// Category `c` puts 0.5, 0.3, 0.2 on modes `c`, `c+1`, `c+2` (mod M).
/// With two modes the last weight folds back onto the first.
pub fn banded_mixing(categories: usize, modes: usize) -> Vec<Vec<f64>> {
    (0..categories)
        .map(|c| {
            let mut row = vec![0.0; modes];
            for (offset, w) in [0.5, 0.3, 0.2].into_iter().enumerate() {
                row[(c + offset) % modes] += w;
            }
            row
        })
        .collect()
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LaprError::invalid(m));
        if self.num_modes < 2 || self.num_categories < 2 {
            return bad(format!("need at least 2 modes and 2 categories, got {} and {}", self.num_modes, self.num_categories));
        }
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        for (name, v) in [
            ("image_noise", self.image_noise),
            ("label_noise", self.label_noise),
            ("perf_noise", self.perf_noise),
            ("category_scale", self.category_scale),
            ("alpha", self.alpha),
            ("beta", self.beta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        let a = self.mixing_matrix();
        if a.len() != self.num_categories || a.iter().any(|r| r.len() != self.num_modes) {
            return bad(format!("mixing matrix must be {}x{}", self.num_categories, self.num_modes));
        }
        for (c, row) in a.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&w| w.is_nan() || w < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return bad(format!("mixing row {c} is not on the simplex"));
            }
        }
        Ok(())
    }

    pub fn mixing_matrix(&self) -> Vec<Vec<f64>> {
        self.mixing.clone().unwrap_or_else(|| banded_mixing(self.num_categories, self.num_modes))
    }

    pub fn eval_count(&self) -> usize {
        self.eval_queries.unwrap_or(self.queries)
    }

    pub fn proxy(&self) -> ProxyParams {
        ProxyParams { alpha: self.alpha, beta: self.beta, noise: self.perf_noise }
    }
}

/// Weights of the performance proxy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyParams {
    pub alpha: f64,
    pub beta: f64,
    pub noise: f64,
}

impl Default for ProxyParams {
    fn default() -> Self {
        ProxyParams { alpha: 0.7, beta: 0.3, noise: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub prototypes: Vec<Vector>,
    pub category_directions: Vec<Vector>,
    pub prompts: Vec<PromptRecord>,
    pub prompt_modes: Vec<usize>,
    pub train_queries: Vec<QueryRecord>,
    pub train_modes: Vec<usize>,
    pub eval_queries: Vec<QueryRecord>,
    pub eval_modes: Vec<usize>,
}

fn gaussian_vec(rng: &mut SeededRng, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| scale * rng.gaussian()).collect()
}

fn unit_vec(rng: &mut SeededRng, d: usize) -> Result<Vector> {
    for _ in 0..100 {
        let v = Vector::new(gaussian_vec(rng, d, 1.0))?;
        if v.norm() > 1e-6 {
            return Ok(l2_normalize(&v));
        }
    }
    Err(LaprError::Generation("could not draw a nonzero direction".into()))
}

/// Unit prototypes with pairwise cosine at most [`PROTOTYPE_MAX_COSINE`].
pub fn draw_prototypes(rng: &mut SeededRng, modes: usize, dim: usize) -> Result<Vec<Vector>> {
    let mut protos: Vec<Vector> = Vec::with_capacity(modes);
    for m in 0..modes {
        let mut rejections = 0;
        loop {
            let cand = unit_vec(rng, dim)?;
            let ok = protos.iter().all(|p| crate::linalg::dot(p, &cand) <= PROTOTYPE_MAX_COSINE);
            if ok {
                protos.push(cand);
                break;
            }
            rejections += 1;
            if rejections >= MAX_REJECTIONS {
                return Err(LaprError::Generation(format!(
                    "prototype {m} of {modes} still within cosine {PROTOTYPE_MAX_COSINE} of another after {MAX_REJECTIONS} draws in {dim} dimensions"
                )));
            }
        }
    }
    Ok(protos)
}

fn categorical(rng: &mut SeededRng, weights: &[f64]) -> usize {
    let r = rng.uniform();
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if r < acc {
            return i;
        }
    }
    // Rounding left r above the running sum; take the last positive weight.
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

struct Draw {
    category: usize,
    mode: usize,
    image: Vec<f64>,
    label: Vec<f64>,
}

fn draw_record(rng: &mut SeededRng, cfg: &SynthConfig, a: &[Vec<f64>], protos: &[Vector], cats: &[Vector]) -> Draw {
    let category = rng.below(cfg.num_categories);
    let mode = categorical(rng, &a[category]);
    let d = cfg.dim;
    let noise = gaussian_vec(rng, d, cfg.image_noise);
    let image = (0..d).map(|i| protos[mode][i] + cats[category][i] + noise[i]).collect();
    let noise = gaussian_vec(rng, d, cfg.label_noise);
    let label = (0..d).map(|i| protos[mode][i] + noise[i]).collect();
    Draw { category, mode, image, label }
}

/// Generates prototypes, category directions, prompts, training queries and
/// evaluation queries, in that order, from `config.seed`.
pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let mut rng = SeededRng::new(config.seed);
    let a = config.mixing_matrix();
    let prototypes = draw_prototypes(&mut rng, config.num_modes, config.dim)?;
    let category_directions = (0..config.num_categories)
        .map(|_| unit_vec(&mut rng, config.dim).map(|v| Vector::from_raw(v.iter().map(|x| x * config.category_scale).collect())))
        .collect::<Result<Vec<_>>>()?;

    let mut prompts = Vec::with_capacity(config.prompts);
    let mut prompt_modes = Vec::with_capacity(config.prompts);
    for id in 0..config.prompts {
        let r = draw_record(&mut rng, config, &a, &prototypes, &category_directions);
        prompts.push(PromptRecord::ingest(id, r.image, r.label, r.category)?);
        prompt_modes.push(r.mode);
    }
    let queries = |n: usize, rng: &mut SeededRng| -> Result<(Vec<QueryRecord>, Vec<usize>)> {
        let mut qs = Vec::with_capacity(n);
        let mut modes = Vec::with_capacity(n);
        for id in 0..n {
            let r = draw_record(rng, config, &a, &prototypes, &category_directions);
            qs.push(QueryRecord::ingest(id, r.image, Some(r.label), Some(r.category))?);
            modes.push(r.mode);
        }
        Ok((qs, modes))
    };
    let (train_queries, train_modes) = queries(config.queries, &mut rng)?;
    let (eval_queries, eval_modes) = queries(config.eval_count(), &mut rng)?;
    Ok(SynthDataset {
        config: config.clone(),
        prototypes,
        category_directions,
        prompts,
        prompt_modes,
        train_queries,
        train_modes,
        eval_queries,
        eval_modes,
    })
}

fn query_label(query: &QueryRecord) -> Result<&Vector> {
    query
        .label
        .as_ref()
        .ok_or_else(|| LaprError::invalid(format!("query {} has no label embedding", query.id)))
}

/// `(cos(z_L, y_q) + 1) / 2`.
pub fn label_score_proxy(prompt: &PromptRecord, query: &QueryRecord) -> Result<f64> {
    let y = query_label(query)?;
    Ok((cosine_similarity(&prompt.label, y)? + 1.0) / 2.0)
}

/// `clamp(α·label_score + β·(cos(z_I, u) + 1)/2 + N(0, σ²), 0, 1)`. No
/// noise is drawn when σ is zero.
pub fn perf_score_proxy(prompt: &PromptRecord, query: &QueryRecord, params: &ProxyParams, rng: &mut SeededRng) -> Result<f64> {
    let label = label_score_proxy(prompt, query)?;
    let image = (cosine_similarity(&prompt.image, &query.embedding)? + 1.0) / 2.0;
    let noise = if params.noise > 0.0 { params.noise * rng.gaussian() } else { 0.0 };
    Ok((params.alpha * label + params.beta * image + noise).clamp(0.0, 1.0))
}

/// Both proxies behind the training [`Scorer`] interface.
#[derive(Clone, Debug)]
pub struct ProxyScorer {
    pub params: ProxyParams,
    rng: SeededRng,
}

impl ProxyScorer {
    pub fn new(params: ProxyParams, seed: u64) -> Self {
        ProxyScorer { params, rng: SeededRng::new(seed) }
    }
}

impl Scorer for ProxyScorer {
    fn score(&mut self, query: &QueryRecord, prompt: &PromptRecord) -> Result<ScoreEntry> {
        Ok(ScoreEntry {
            perf: perf_score_proxy(prompt, query, &self.params, &mut self.rng)?,
            label: label_score_proxy(prompt, query)?,
        })
    }
}

/// Seed of the proxy scorer's noise stream for a dataset seed.
pub fn scorer_seed(dataset_seed: u64) -> u64 {
    dataset_seed ^ 0x5c0e_5eed_0000_0001
}

/// What [`evaluate`] needs: prompts, queries, and the hidden modes of both.
#[derive(Clone, Copy, Debug)]
pub struct EvalView<'a> {
    pub prompts: &'a [PromptRecord],
    pub prompt_modes: &'a [usize],
    pub queries: &'a [QueryRecord],
    pub query_modes: &'a [usize],
    pub proxy: ProxyParams,
}

impl SynthDataset {
    pub fn eval_view(&self) -> EvalView<'_> {
        EvalView {
            prompts: &self.prompts,
            prompt_modes: &self.prompt_modes,
            queries: &self.eval_queries,
            query_modes: &self.eval_modes,
            proxy: self.config.proxy(),
        }
    }
}

/// Picks one prompt for a query. `index` is the query's position in the
/// evaluated set.
pub trait Retriever: Sync {
    fn top1(&self, index: usize, query: &QueryRecord) -> Result<usize>;
}

pub struct LaprRetriever<'a> {
    pub model: &'a LaprModel,
    pub cache: &'a ModeCache,
}

impl Retriever for LaprRetriever<'_> {
    fn top1(&self, _: usize, query: &QueryRecord) -> Result<usize> {
        Ok(retrieve(&query.embedding, self.model, self.cache, 1)?.entries[0].0)
    }
}

pub struct BaselineRetriever<'a> {
    pub prompts: &'a [PromptRecord],
}

impl Retriever for BaselineRetriever<'_> {
    fn top1(&self, _: usize, query: &QueryRecord) -> Result<usize> {
        Ok(retrieve_baseline(&query.embedding, self.prompts, 1)?.entries[0].0)
    }
}

/// Uniform choice, seeded per query so results do not depend on order.
pub struct RandomRetriever {
    pub prompts: usize,
    pub seed: u64,
}

impl Retriever for RandomRetriever {
    fn top1(&self, index: usize, _: &QueryRecord) -> Result<usize> {
        if self.prompts == 0 {
            return Err(LaprError::invalid("empty database"));
        }
        let mut rng = SeededRng::new(self.seed.wrapping_add((index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)));
        Ok(rng.below(self.prompts))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mode_match_acc: f64,
    pub mean_label_score: f64,
    pub mean_perf_score: f64,
}

/// Top-1 quality over the view's queries. The performance score uses the
/// noise-free proxy so the metric is a pure function of the selections.
pub fn evaluate(retriever: &dyn Retriever, view: &EvalView<'_>) -> Result<Metrics> {
    if view.queries.is_empty() {
        return Err(LaprError::invalid("evaluation needs at least one query"));
    }
    if view.queries.len() != view.query_modes.len() || view.prompts.len() != view.prompt_modes.len() {
        return Err(LaprError::invalid("hidden modes do not line up with the records"));
    }
    let indices: Vec<usize> = (0..view.queries.len()).collect();
    let noiseless = ProxyParams { noise: 0.0, ..view.proxy };
    let per_query = par_map(&indices, |&i| -> Result<(bool, f64, f64)> {
        let q = &view.queries[i];
        let p = retriever.top1(i, q)?;
        let prompt = view.prompts.get(p).ok_or_else(|| LaprError::invalid(format!("retriever chose unknown prompt {p}")))?;
        let mut unused = SeededRng::new(0);
        Ok((
            view.prompt_modes[p] == view.query_modes[i],
            label_score_proxy(prompt, q)?,
            perf_score_proxy(prompt, q, &noiseless, &mut unused)?,
        ))
    });
    let (mut hits, mut label, mut perf) = (0usize, 0.0, 0.0);
    for r in per_query {
        let (hit, l, p) = r?;
        hits += hit as usize;
        label += l;
        perf += p;
    }
    let n = view.queries.len() as f64;
    Ok(Metrics { mode_match_acc: hits as f64 / n, mean_label_score: label / n, mean_perf_score: perf / n })
}

/// Per-category router usage: mean mixture weight and argmax frequency.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ActivationTable {
    pub mean_weight: Vec<Vec<f64>>,
    pub argmax_freq: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

impl ActivationTable {
    pub fn categories(&self) -> usize {
        self.counts.len()
    }

    /// Categories with no queries; their rows are all zero.
    pub fn empty_categories(&self) -> Vec<usize> {
        self.counts.iter().enumerate().filter(|(_, &n)| n == 0).map(|(c, _)| c).collect()
    }

    /// `category,expert,mean_weight,argmax_freq,count`, reals at six
    /// significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("category,expert,mean_weight,argmax_freq,count\n");
        for (c, (mw, af)) in self.mean_weight.iter().zip(&self.argmax_freq).enumerate() {
            for (k, (w, f)) in mw.iter().zip(af).enumerate() {
                out.push_str(&format!(
                    "{c},{k},{},{},{}\n",
                    crate::io::format_g6(*w),
                    crate::io::format_g6(*f),
                    self.counts[c]
                ));
            }
        }
        out
    }
}

pub fn expert_activation_analysis(model: &LaprModel, queries: &[QueryRecord], categories: usize) -> Result<ActivationTable> {
    let k = model.config.experts;
    let mut mean_weight = vec![vec![0.0; k]; categories];
    let mut argmax_freq = vec![vec![0.0; k]; categories];
    let mut counts = vec![0usize; categories];
    let mixtures = par_map(queries, |q| model.mixture(&q.embedding));
    for (q, pi) in queries.iter().zip(mixtures) {
        let pi = pi?;
        let c = q.category.ok_or_else(|| LaprError::invalid(format!("query {} has no category", q.id)))?;
        if c >= categories {
            return Err(LaprError::invalid(format!("query {} has category {c} >= {categories}", q.id)));
        }
        counts[c] += 1;
        for (acc, &w) in mean_weight[c].iter_mut().zip(pi.as_slice()) {
            *acc += w;
        }
        argmax_freq[c][pi.argmax()] += 1.0;
    }
    for c in 0..categories {
        if counts[c] == 0 {
            warn!("category {c} has no queries; its activation row is zero");
            continue;
        }
        let n = counts[c] as f64;
        mean_weight[c].iter_mut().for_each(|w| *w /= n);
        argmax_freq[c].iter_mut().for_each(|f| *f /= n);
    }
    Ok(ActivationTable { mean_weight, argmax_freq, counts })
}

/// Pearson correlation of two equally long samples.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(LaprError::invalid("samples differ in length"));
    }
    if x.len() < 3 {
        return Err(LaprError::invalid(format!("correlation needs at least 3 pairs, got {}", x.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(LaprError::UndefinedCorrelation("constant sample".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Correlation between label score and performance score over the given
/// `(query_id, prompt_id)` pairs.
pub fn consistency_correlation(pairs: &[(usize, usize)], table: &ScoreTable) -> Result<f64> {
    let mut label = Vec::with_capacity(pairs.len());
    let mut perf = Vec::with_capacity(pairs.len());
    for &(q, p) in pairs {
        let e = table.get(q, p).ok_or_else(|| LaprError::invalid(format!("no score for ({q}, {p})")))?;
        label.push(e.label);
        perf.push(e.perf);
    }
    pearson(&label, &perf)
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Entropy of the batch-mean mixture, averaged over consecutive batches of
/// `batch_size` queries in id order.
pub fn batch_mean_mixture_entropy(model: &LaprModel, queries: &[QueryRecord], batch_size: usize) -> Result<f64> {
    if queries.is_empty() || batch_size == 0 {
        return Err(LaprError::invalid("entropy needs queries and a positive batch size"));
    }
    let mixtures = par_map(queries, |q| model.mixture(&q.embedding));
    let mixtures = mixtures.into_iter().collect::<Result<Vec<_>>>()?;
    let k = model.config.experts;
    let mut total = 0.0;
    let mut batches = 0;
    for chunk in mixtures.chunks(batch_size) {
        let mut mean = vec![0.0; k];
        for pi in chunk {
            for (m, w) in mean.iter_mut().zip(pi.as_slice()) {
                *m += w / chunk.len() as f64;
            }
        }
        total += entropy(&mean);
        batches += 1;
    }
    Ok(total / batches as f64)
}
