//! Inference-time prompt selection.
//!
//! The prompt side of the model does not depend on the query, so each
//! prompt's K mode embeddings are computed once into a [`ModeCache`]. A
//! query then costs one router pass, K query-expert passes, and an O(N·K·d′)
//! mixing sweep over the cache.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{LaprError, Result};
use crate::linalg::{cosine_similarity, l2_normalize, Vector};
use crate::model::{cosine_parts, mix_into, LaprModel};
use crate::parallel::par_map;

/// One database entry. Embeddings are l2-normalized at ingest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub id: usize,
    pub image: Vector,
    pub label: Vector,
    pub category: usize,
    #[serde(default)]
    pub meta: String,
}

impl PromptRecord {
    pub fn ingest(id: usize, image: Vec<f64>, label: Vec<f64>, category: usize) -> Result<Self> {
        let image = Vector::new(image)?;
        let label = Vector::new(label)?;
        if image.dim() != label.dim() {
            return Err(LaprError::invalid(format!(
                "prompt {id}: image dim {} != label dim {}",
                image.dim(),
                label.dim()
            )));
        }
        Ok(PromptRecord {
            id,
            image: l2_normalize(&image),
            label: l2_normalize(&label),
            category,
            meta: String::new(),
        })
    }
}

/// A query. The label embedding is only present for training and evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: usize,
    pub embedding: Vector,
    pub label: Option<Vector>,
    pub category: Option<usize>,
}

impl QueryRecord {
    pub fn ingest(id: usize, embedding: Vec<f64>, label: Option<Vec<f64>>, category: Option<usize>) -> Result<Self> {
        let embedding = l2_normalize(&Vector::new(embedding)?);
        let label = match label {
            Some(l) => {
                let l = Vector::new(l)?;
                if l.dim() != embedding.dim() {
                    return Err(LaprError::invalid(format!("query {id}: label dim mismatch")));
                }
                Some(l2_normalize(&l))
            }
            None => None,
        };
        Ok(QueryRecord { id, embedding, label, category })
    }
}

/// Checks the dense-id invariant: record `i` has id `i`.
pub fn check_dense_ids<'a>(ids: impl Iterator<Item = usize> + 'a, what: &str) -> Result<()> {
    for (i, id) in ids.enumerate() {
        if id != i {
            return Err(LaprError::invalid(format!("{what} ids must be dense: position {i} holds id {id}")));
        }
    }
    Ok(())
}

/// Precomputed prompt mode embeddings, stored `(prompt, expert)`-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeCache {
    num_prompts: usize,
    experts: usize,
    dim: usize,
    use_label: bool,
    fingerprint: u64,
    data: Vec<f64>,
}

impl ModeCache {
    pub fn from_parts(
        num_prompts: usize,
        experts: usize,
        dim: usize,
        use_label: bool,
        fingerprint: u64,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != num_prompts * experts * dim {
            return Err(LaprError::invalid(format!(
                "cache body has {} values, expected {}x{}x{}",
                data.len(),
                num_prompts,
                experts,
                dim
            )));
        }
        Ok(ModeCache { num_prompts, experts, dim, use_label, fingerprint, data })
    }

    pub fn num_prompts(&self) -> usize {
        self.num_prompts
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn use_label(&self) -> bool {
        self.use_label
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// `p_{i,k}`.
    pub fn entry(&self, prompt: usize, expert: usize) -> &[f64] {
        let start = (prompt * self.experts + expert) * self.dim;
        &self.data[start..start + self.dim]
    }

    fn modes(&self, prompt: usize) -> impl Iterator<Item = &[f64]> {
        (0..self.experts).map(move |k| self.entry(prompt, k))
    }

    /// Multiplies every stored vector by `alpha`.
    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|x| *x *= alpha);
    }

    /// Errors unless this cache was built from `model`'s current prompt side.
    pub fn check_fresh(&self, model: &LaprModel) -> Result<()> {
        let current = model.prompt_bank.fingerprint();
        if current != self.fingerprint || self.use_label != model.config.use_label {
            return Err(LaprError::StaleCache { cached: self.fingerprint, current });
        }
        if self.experts != model.config.experts || self.dim != model.config.output_dim {
            return Err(LaprError::invalid("cache shape disagrees with the model"));
        }
        Ok(())
    }
}

/// Runs every prompt through every prompt-side expert.
pub fn build_cache(database: &[PromptRecord], model: &LaprModel) -> Result<ModeCache> {
    model.validate()?;
    let cfg = &model.config;
    if let Some(bad) = database.iter().find(|p| p.image.dim() != cfg.input_dim || p.label.dim() != cfg.input_dim) {
        return Err(LaprError::invalid(format!(
            "prompt {} has dim {}, model expects {}",
            bad.id,
            bad.image.dim(),
            cfg.input_dim
        )));
    }
    let rows = par_map(database, |p| -> Result<Vec<f64>> {
        let z = model.fuse(&p.image, &p.label)?;
        Ok(model.forward_prompt(&z).modes().flatten().copied().collect())
    });
    let mut data = Vec::with_capacity(database.len() * cfg.experts * cfg.output_dim);
    for row in rows {
        data.extend(row?);
    }
    ModeCache::from_parts(
        database.len(),
        cfg.experts,
        cfg.output_dim,
        cfg.use_label,
        model.prompt_bank.fingerprint(),
        data,
    )
}

/// Ranked `(prompt_id, score)` list, best first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub entries: Vec<(usize, f64)>,
}

impl RankedResult {
    pub fn best(&self) -> Option<usize> {
        self.entries.first().map(|e| e.0)
    }

    pub fn ids(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.0).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Descending score, ties by ascending id.
pub fn rank_order(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
}

/// Top `k` of `scores` (indexed by prompt id).
pub fn top_k(scores: &[f64], k: usize) -> RankedResult {
    let mut entries: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
    let k = k.min(entries.len());
    if k < entries.len() && k > 0 {
        entries.select_nth_unstable_by(k - 1, rank_order);
        entries.truncate(k);
    }
    entries.sort_by(rank_order);
    entries.truncate(k);
    RankedResult { entries }
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(LaprError::invalid(format!("k must be in 1..={n}, got {k}")));
    }
    Ok(())
}

/// Label-aware retrieval through the mode cache.
pub fn retrieve(query: &[f64], model: &LaprModel, cache: &ModeCache, k: usize) -> Result<RankedResult> {
    cache.check_fresh(model)?;
    check_k(k, cache.num_prompts)?;
    let pi = model.mixture(query)?;
    let u_mix = crate::model::mix(&pi, &model.query_modes(query)?)?;
    let inv_t = 1.0 / model.config.temperature;
    let ids: Vec<usize> = (0..cache.num_prompts).collect();
    let scores = par_map(&ids, |&i| -> Result<f64> {
        let mut p_mix = vec![0.0; cache.dim];
        mix_into(pi.as_slice(), cache.modes(i), &mut p_mix);
        Ok(cosine_parts(&u_mix, &p_mix)?.value * inv_t)
    });
    let scores = scores.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(top_k(&scores, k))
}

/// Same ranking as [`retrieve`], recomputing every prompt from scratch.
pub fn retrieve_uncached(query: &[f64], database: &[PromptRecord], model: &LaprModel, k: usize) -> Result<RankedResult> {
    check_k(k, database.len())?;
    let scores = par_map(database, |p| -> Result<f64> {
        let z = model.fuse(&p.image, &p.label)?;
        Ok(model.pair_score(query, &z)?.score)
    });
    let scores = scores.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(top_k(&scores, k))
}

/// Label-agnostic ranking by raw image cosine.
pub fn retrieve_baseline(query: &[f64], database: &[PromptRecord], k: usize) -> Result<RankedResult> {
    check_k(k, database.len())?;
    let scores = par_map(database, |p| cosine_similarity(query, &p.image));
    let scores = scores.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(top_k(&scores, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::model::{ExpertParams, ModelConfig};
    use crate::rng::SeededRng;

    fn random_db(rng: &mut SeededRng, n: usize, d: usize) -> Vec<PromptRecord> {
        (0..n)
            .map(|i| {
                let img = (0..d).map(|_| rng.gaussian()).collect();
                let lab = (0..d).map(|_| rng.gaussian()).collect();
                PromptRecord::ingest(i, img, lab, i % 3).unwrap()
            })
            .collect()
    }

    fn small_model(rng: &mut SeededRng, d: usize, k: usize) -> LaprModel {
        LaprModel::init(ModelConfig { experts: k, ..ModelConfig::new(d) }, rng).unwrap()
    }

    fn oracle_rank(scores: &[f64]) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..scores.len()).collect();
        // Plain comparison sort, written independently of rank_order.
        for i in 0..ids.len() {
            for j in 0..ids.len() - 1 - i {
                let (a, b) = (ids[j], ids[j + 1]);
                if scores[b] > scores[a] || (scores[b] == scores[a] && b < a) {
                    ids.swap(j, j + 1);
                }
            }
        }
        ids
    }

    #[test]
    fn empty_database_gives_empty_cache() {
        let mut rng = SeededRng::new(0);
        let model = small_model(&mut rng, 4, 3);
        let cache = build_cache(&[], &model).unwrap();
        assert_eq!(cache.num_prompts(), 0);
        assert!(cache.as_slice().is_empty());
        assert!(retrieve(&[1.0, 0.0, 0.0, 0.0], &model, &cache, 1).is_err());
    }

    #[test]
    fn zero_bank_gives_zero_cache() {
        let mut rng = SeededRng::new(1);
        let db = random_db(&mut rng, 5, 3);
        let model = LaprModel::zeros(ModelConfig { experts: 2, ..ModelConfig::new(3) }).unwrap();
        let cache = build_cache(&db, &model).unwrap();
        assert!(cache.as_slice().iter().all(|&x| x == 0.0));
        assert_eq!(cache.as_slice().len(), 5 * 2 * 3);
    }

    #[test]
    fn cache_entries_equal_fresh_forward_passes() {
        let mut rng = SeededRng::new(2);
        let db = random_db(&mut rng, 12, 4);
        let model = small_model(&mut rng, 4, 3);
        let cache = build_cache(&db, &model).unwrap();
        for p in &db {
            let z = crate::model::fuse_prompt(&p.image, &p.label, true).unwrap();
            for (k, e) in model.prompt_bank.experts.iter().enumerate() {
                assert_eq!(cache.entry(p.id, k), e.forward(&z).unwrap().as_slice());
            }
        }
    }

    #[test]
    fn stale_cache_is_detected() {
        let mut rng = SeededRng::new(3);
        let db = random_db(&mut rng, 6, 3);
        let mut model = small_model(&mut rng, 3, 2);
        let cache = build_cache(&db, &model).unwrap();
        model.prompt_bank.experts[0].b2[0] += 1e-9;
        assert!(matches!(retrieve(&db[0].image, &model, &cache, 2), Err(LaprError::StaleCache { .. })));
        // Query-side changes do not invalidate the cache.
        let mut model = small_model(&mut SeededRng::new(3), 3, 2);
        let cache = build_cache(&db, &model).unwrap();
        model.query_bank.experts[0].b2[0] += 1.0;
        assert!(retrieve(&db[0].image, &model, &cache, 2).is_ok());
    }

    #[test]
    fn retrieve_matches_brute_force_oracle() {
        let mut rng = SeededRng::new(4);
        let db = random_db(&mut rng, 20, 5);
        let model = small_model(&mut rng, 5, 3);
        let cache = build_cache(&db, &model).unwrap();
        for _ in 0..5 {
            let u: Vec<f64> = l2_normalize(&(0..5).map(|_| rng.gaussian()).collect::<Vec<_>>()).into_inner();
            let scores: Vec<f64> = db
                .iter()
                .map(|p| {
                    let z: Vec<f64> = p.image.iter().zip(p.label.iter()).map(|(a, b)| a + b).collect();
                    model.pair_score(&u, &z).unwrap().score
                })
                .collect();
            let got = retrieve(&u, &model, &cache, 20).unwrap();
            assert_eq!(got.ids(), oracle_rank(&scores));
            for (id, s) in &got.entries {
                assert!((s - scores[*id]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn twin_prompt_ranks_first_with_unit_score() {
        let mut rng = SeededRng::new(5);
        let mut db = random_db(&mut rng, 10, 4);
        let mut model = small_model(&mut rng, 4, 2);
        model.config.use_label = false;
        model.config.temperature = 0.5;
        model.prompt_bank.experts = model.query_bank.experts.clone();
        let u = db[7].image.clone();
        db[7].label = Vector::zeros(4);
        let cache = build_cache(&db, &model).unwrap();
        let r = retrieve(&u, &model, &cache, 3).unwrap();
        assert_eq!(r.best(), Some(7));
        assert!((r.entries[0].1 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn baseline_examples() {
        let mut rng = SeededRng::new(6);
        let db = random_db(&mut rng, 8, 3);
        let r = retrieve_baseline(&db[5].image, &db, 8).unwrap();
        assert_eq!(r.best(), Some(5));
        assert!((r.entries[0].1 - 1.0).abs() < 1e-12);

        let flat: Vec<PromptRecord> =
            (0..4).map(|i| PromptRecord::ingest(i, vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], 0).unwrap()).collect();
        let r = retrieve_baseline(&[0.0, 0.0, 1.0], &flat, 4).unwrap();
        assert_eq!(r.ids(), vec![0, 1, 2, 3]);
        assert!(r.entries.iter().all(|e| e.1 == 0.0));
        assert!(retrieve_baseline(&[0.0, 0.0, 1.0], &flat, 5).is_err());
        assert!(retrieve_baseline(&[0.0, 0.0, 1.0], &flat, 0).is_err());
    }

    #[test]
    fn degenerate_query_embedding_errors() {
        let mut rng = SeededRng::new(7);
        let db = random_db(&mut rng, 4, 3);
        let mut model = small_model(&mut rng, 3, 2);
        for e in &mut model.query_bank.experts {
            *e = ExpertParams::zeros(3, 3, 3);
        }
        let cache = build_cache(&db, &model).unwrap();
        assert!(matches!(retrieve(&db[0].image, &model, &cache, 1), Err(LaprError::DegenerateVector(_))));
    }

    #[test]
    fn identity_experts_without_router_reproduce_baseline() {
        let mut rng = SeededRng::new(8);
        let d = 6;
        let db = random_db(&mut rng, 30, d);
        let mut cfg = ModelConfig { experts: 3, ..ModelConfig::new(d) };
        cfg.use_label = false;
        cfg.uniform_routing = true;
        let mut model = LaprModel::zeros(cfg).unwrap();
        for bank in [&mut model.query_bank, &mut model.prompt_bank] {
            for e in &mut bank.experts {
                e.w1 = Matrix::identity(d);
                e.w2 = Matrix::identity(d);
            }
        }
        let cache = build_cache(&db, &model).unwrap();
        for q in 0..5 {
            // Nonnegative queries and prompts keep the rectifier an identity.
            let u: Vec<f64> = (0..d).map(|_| rng.uniform()).collect();
            let pos_db: Vec<PromptRecord> = db
                .iter()
                .map(|p| {
                    let img = p.image.iter().map(|x| x.abs()).collect();
                    PromptRecord::ingest(p.id, img, p.label.to_vec(), 0).unwrap()
                })
                .collect();
            let cache_pos = build_cache(&pos_db, &model).unwrap();
            let a = retrieve(&u, &model, &cache_pos, 30).unwrap();
            let b = retrieve_baseline(&u, &pos_db, 30).unwrap();
            assert_eq!(a.ids(), b.ids(), "query {q}");
            let _ = &cache;
        }
    }

    #[test]
    fn top_k_is_prefix_of_top_k_plus_one() {
        let mut rng = SeededRng::new(9);
        let scores: Vec<f64> = (0..40).map(|_| (rng.below(10) as f64) / 10.0).collect();
        for k in 1..40 {
            let a = top_k(&scores, k).ids();
            let b = top_k(&scores, k + 1).ids();
            assert_eq!(a[..], b[..k]);
        }
    }

    #[test]
    fn scaling_cached_modes_keeps_ranking() {
        let mut rng = SeededRng::new(10);
        let db = random_db(&mut rng, 15, 4);
        let model = small_model(&mut rng, 4, 3);
        let mut cache = build_cache(&db, &model).unwrap();
        let u = db[3].image.clone();
        let before = retrieve(&u, &model, &cache, 15).unwrap().ids();
        cache.scale(17.5);
        assert_eq!(retrieve(&u, &model, &cache, 15).unwrap().ids(), before);
    }
}
