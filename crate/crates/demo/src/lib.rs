//! Browser demo: a small planted-mode dataset, trained in the page.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use lapr::retrieval::{build_cache, retrieve, retrieve_baseline, ModeCache};
use lapr::synth::{evaluate, expert_activation_analysis, generate, BaselineRetriever, LaprRetriever, Metrics, SynthConfig, SynthDataset};
use lapr::training::{train, Supervision, TrainConfig};
use lapr::{LaprModel, SeededRng};

fn js_err(e: lapr::LaprError) -> JsError {
    JsError::new(&e.to_string())
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable")
}

#[derive(Serialize)]
struct Pick {
    id: usize,
    score: f64,
    mode: usize,
    category: usize,
}

#[derive(Serialize)]
struct Comparison {
    query: usize,
    query_mode: usize,
    query_category: Option<usize>,
    mixture: Vec<f64>,
    lapr: Vec<Pick>,
    baseline: Vec<Pick>,
}

#[derive(Serialize)]
struct Progress {
    epochs: usize,
    expert_loss: Vec<f64>,
    router_loss: Vec<Option<f64>>,
    lapr: Metrics,
    baseline: Metrics,
}

/// Dataset, model and training state held by the page.
#[wasm_bindgen]
pub struct Demo {
    data: SynthDataset,
    supervision: Supervision,
    config: TrainConfig,
    model: LaprModel,
    cache: ModeCache,
    rng: SeededRng,
    expert_loss: Vec<f64>,
    router_loss: Vec<Option<f64>>,
}

#[wasm_bindgen]
impl Demo {
    /// Generates a dataset and an untrained model. `use_label = false` gives
    /// the image-only prompt fusion.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, use_label: bool) -> Result<Demo, JsError> {
        Self::build(seed as u64, use_label).map_err(js_err)
    }

    fn build(seed: u64, use_label: bool) -> lapr::Result<Demo> {
        let synth = SynthConfig {
            num_modes: 4,
            num_categories: 3,
            dim: 16,
            prompts: 300,
            queries: 120,
            eval_queries: Some(60),
            seed,
            ..SynthConfig::default()
        };
        let mut config = TrainConfig {
            epochs: 1,
            experts: 4,
            pool_size: 20,
            mine_count: 4,
            batch_size: 32,
            temperature: 0.1,
            momentum: 0.9,
            seed,
            ..TrainConfig::default()
        };
        config.ablation.no_label = !use_label;
        let data = generate(&synth)?;
        let mut scorer = lapr::synth::ProxyScorer::new(synth.proxy(), lapr::synth::scorer_seed(seed));
        let supervision = Supervision::build(&data.train_queries, &data.prompts, &mut scorer, &config)?;
        let mut master = SeededRng::new(seed);
        let mut init_rng = master.fork();
        let rng = master.fork();
        let model = LaprModel::init(config.model_config(synth.dim), &mut init_rng)?;
        let cache = build_cache(&data.prompts, &model)?;
        Ok(Demo { data, supervision, config, model, cache, rng, expert_loss: Vec::new(), router_loss: Vec::new() })
    }

    /// Runs `epochs` more epochs and returns the loss curve and metrics as JSON.
    pub fn train(&mut self, epochs: u32) -> Result<String, JsError> {
        self.step(epochs as usize).map_err(js_err)
    }

    fn step(&mut self, epochs: usize) -> lapr::Result<String> {
        let cfg = TrainConfig { epochs, ..self.config.clone() };
        let report = train(&mut self.model, &self.data.prompts, &self.data.train_queries, &self.supervision, &cfg, &mut self.rng)?;
        for e in report.epochs {
            self.expert_loss.push(e.expert);
            self.router_loss.push(e.router);
        }
        self.cache = build_cache(&self.data.prompts, &self.model)?;
        self.progress()
    }

    fn progress(&self) -> lapr::Result<String> {
        let view = self.data.eval_view();
        Ok(to_json(&Progress {
            epochs: self.expert_loss.len(),
            expert_loss: self.expert_loss.clone(),
            router_loss: self.router_loss.clone(),
            lapr: evaluate(&LaprRetriever { model: &self.model, cache: &self.cache }, &view)?,
            baseline: evaluate(&BaselineRetriever { prompts: &self.data.prompts }, &view)?,
        }))
    }

    /// Current metrics without training.
    pub fn status(&self) -> Result<String, JsError> {
        self.progress().map_err(js_err)
    }

    #[wasm_bindgen(getter)]
    pub fn eval_queries(&self) -> usize {
        self.data.eval_queries.len()
    }

    /// Top `k` prompts for eval query `index`, model and baseline side by side.
    pub fn compare(&self, index: usize, k: usize) -> Result<String, JsError> {
        self.comparison(index, k).map_err(js_err)
    }

    fn comparison(&self, index: usize, k: usize) -> lapr::Result<String> {
        let q = self
            .data
            .eval_queries
            .get(index)
            .ok_or_else(|| lapr::LaprError::InvalidArgument(format!("no eval query {index}")))?;
        let u = q.embedding.as_slice();
        let picks = |entries: Vec<(usize, f64)>| -> Vec<Pick> {
            entries
                .into_iter()
                .map(|(id, score)| Pick { id, score, mode: self.data.prompt_modes[id], category: self.data.prompts[id].category })
                .collect()
        };
        Ok(to_json(&Comparison {
            query: index,
            query_mode: self.data.eval_modes[index],
            query_category: q.category,
            mixture: self.model.mixture(u)?.as_slice().to_vec(),
            lapr: picks(retrieve(u, &self.model, &self.cache, k)?.entries),
            baseline: picks(retrieve_baseline(u, &self.data.prompts, k)?.entries),
        }))
    }

    /// Category by expert activation table as JSON.
    pub fn activation(&self) -> Result<String, JsError> {
        expert_activation_analysis(&self.model, &self.data.eval_queries, self.data.config.num_categories)
            .map(|t| to_json(&t))
            .map_err(js_err)
    }
}
