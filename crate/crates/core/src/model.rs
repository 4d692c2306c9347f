//! Mixture-of-experts dual encoders and the query router.
//!
//! A query embedding `u` is projected by K query-side experts into mode
//! embeddings `q_k`; a prompt's fused image+label embedding `z` is projected
//! by K independent prompt-side experts into `p_k`. The router maps `u` to
//! mixture weights `π` on the K-simplex, and both sides are aggregated with
//! the same weights before cosine scoring:
//!
//! ```text
//! ũ = Σ_k π_k q_k        p̃ = Σ_k π_k p_k        s = cos(ũ, p̃) / τ
//! ```
//!
//! Forward passes record a [`QueryForward`]/[`PromptForward`] trace that the
//! backward pass consumes; gradients are accumulated into a [`Gradients`]
//! value shaped exactly like the parameters.

use serde::{Deserialize, Serialize};

use crate::error::{LaprError, Result};
use crate::linalg::{axpy, dot, norm, softmax_into, Matrix, Vector, NORM_EPS};
use crate::rng::SeededRng;

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of experts per side (K).
    pub experts: usize,
    /// Input embedding dimension (d).
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Expert output dimension (d′).
    pub output_dim: usize,
    /// Divisor applied to cosine scores.
    pub temperature: f64,
    /// Fuse prompt label embeddings into the prompt representation.
    #[serde(default = "default_true")]
    pub use_label: bool,
    /// Replace router output by the uniform mixture everywhere.
    #[serde(default)]
    pub uniform_routing: bool,
}

impl ModelConfig {
    /// Defaults: 10 experts, hidden and output width equal to `input_dim`.
    pub fn new(input_dim: usize) -> Self {
        ModelConfig {
            experts: 10,
            input_dim,
            hidden_dim: input_dim,
            output_dim: input_dim,
            temperature: 1.0,
            use_label: true,
            uniform_routing: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.experts == 0 || self.input_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(LaprError::invalid(format!(
                "model dimensions must be positive (K={}, d={}, hidden={}, d'={})",
                self.experts, self.input_dim, self.hidden_dim, self.output_dim
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(LaprError::invalid(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// One expert: `W2 · relu(W1 x + b1) + b2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertParams {
    pub w1: Matrix,
    pub b1: Vector,
    pub w2: Matrix,
    pub b2: Vector,
}

/// Activations recorded by [`ExpertParams::forward_traced`].
#[derive(Clone, Debug)]
pub(crate) struct ExpertTrace {
    pre: Vec<f64>,
    hidden: Vec<f64>,
    pub(crate) out: Vec<f64>,
}

fn uniform_matrix(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix {
    let bound = 1.0 / (cols as f64).sqrt();
    let mut m = Matrix::zeros(rows, cols);
    m.as_mut_slice().iter_mut().for_each(|x| *x = rng.uniform_range(-bound, bound));
    m
}

impl ExpertParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize, output_dim: usize) -> Self {
        ExpertParams {
            w1: Matrix::zeros(hidden_dim, input_dim),
            b1: Vector::zeros(hidden_dim),
            w2: Matrix::zeros(output_dim, hidden_dim),
            b2: Vector::zeros(output_dim),
        }
    }

    /// Fan-in uniform weights, zero biases.
    pub fn init(input_dim: usize, hidden_dim: usize, output_dim: usize, rng: &mut SeededRng) -> Self {
        let w1 = uniform_matrix(hidden_dim, input_dim, rng);
        let w2 = uniform_matrix(output_dim, hidden_dim, rng);
        ExpertParams { w1, b1: Vector::zeros(hidden_dim), w2, b2: Vector::zeros(output_dim) }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.rows()
    }

    fn check_shapes(&self) -> Result<()> {
        let h = self.w1.rows();
        if self.b1.dim() != h || self.w2.cols() != h || self.b2.dim() != self.w2.rows() {
            return Err(LaprError::invalid("expert parameter shapes are inconsistent"));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vector> {
        self.check_shapes()?;
        if x.len() != self.input_dim() {
            return Err(LaprError::invalid(format!(
                "expert expects input dim {}, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        Ok(Vector::from_raw(self.forward_traced(x).out))
    }

    pub(crate) fn forward_traced(&self, x: &[f64]) -> ExpertTrace {
        let mut pre = vec![0.0; self.w1.rows()];
        self.w1.affine_into(&self.b1, x, &mut pre);
        let hidden: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
        let mut out = vec![0.0; self.w2.rows()];
        self.w2.affine_into(&self.b2, &hidden, &mut out);
        ExpertTrace { pre, hidden, out }
    }

    /// Accumulates `∂/∂θ ⟨dy, expert(x)⟩` into `grads`.
    pub(crate) fn backward(&self, x: &[f64], trace: &ExpertTrace, dy: &[f64], grads: &mut ExpertParams) {
        grads.w2.add_outer(1.0, dy, &trace.hidden);
        axpy(1.0, dy, &mut grads.b2);
        let mut dh = vec![0.0; self.w2.cols()];
        self.w2.add_transpose_mul(dy, &mut dh);
        for (g, &p) in dh.iter_mut().zip(&trace.pre) {
            if p <= 0.0 {
                *g = 0.0;
            }
        }
        grads.w1.add_outer(1.0, &dh, x);
        axpy(1.0, &dh, &mut grads.b1);
    }

    fn slices(&self) -> [&[f64]; 4] {
        [self.w1.as_slice(), &self.b1, self.w2.as_slice(), &self.b2]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 4] {
        [self.w1.as_mut_slice(), &mut self.b1, self.w2.as_mut_slice(), &mut self.b2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Query,
    Prompt,
}

/// The K experts of one side. Query and prompt banks never share storage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderBank {
    pub side: Side,
    pub experts: Vec<ExpertParams>,
}

impl EncoderBank {
    pub fn zeros(side: Side, config: &ModelConfig) -> Self {
        let experts = (0..config.experts)
            .map(|_| ExpertParams::zeros(config.input_dim, config.hidden_dim, config.output_dim))
            .collect();
        EncoderBank { side, experts }
    }

    pub fn init(side: Side, config: &ModelConfig, rng: &mut SeededRng) -> Self {
        let experts = (0..config.experts)
            .map(|_| ExpertParams::init(config.input_dim, config.hidden_dim, config.output_dim, rng))
            .collect();
        EncoderBank { side, experts }
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.experts.iter().flat_map(|e| e.slices()).collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.experts.iter_mut().flat_map(|e| e.slices_mut()).collect()
    }

    /// 64-bit FNV-1a over the shapes and little-endian parameter bytes.
    pub fn fingerprint(&self) -> u64 {
        let mut hash = Fnv64::new();
        hash.write_usize(self.experts.len());
        for e in &self.experts {
            for dim in [e.w1.rows(), e.w1.cols(), e.w2.rows(), e.w2.cols()] {
                hash.write_usize(dim);
            }
            for s in e.slices() {
                hash.write_f64s(s);
            }
        }
        hash.finish()
    }
}

/// FNV-1a, 64-bit.
pub(crate) struct Fnv64(u64);

impl Fnv64 {
    pub(crate) fn new() -> Self {
        Fnv64(0xcbf2_9ce4_8422_2325)
    }

    pub(crate) fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub(crate) fn write_usize(&mut self, n: usize) {
        self.write(&(n as u64).to_le_bytes());
    }

    pub(crate) fn write_f64s(&mut self, xs: &[f64]) {
        for x in xs {
            self.write(&x.to_le_bytes());
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

/// Affine map followed by softmax: `π = softmax(W u + b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterParams {
    pub w: Matrix,
    pub b: Vector,
}

impl RouterParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        RouterParams { w: Matrix::zeros(config.experts, config.input_dim), b: Vector::zeros(config.experts) }
    }

    pub fn init(config: &ModelConfig, rng: &mut SeededRng) -> Self {
        RouterParams {
            w: uniform_matrix(config.experts, config.input_dim, rng),
            b: Vector::zeros(config.experts),
        }
    }

    pub fn forward(&self, u: &[f64]) -> Result<MixtureWeights> {
        if self.w.cols() != u.len() || self.b.dim() != self.w.rows() {
            return Err(LaprError::invalid(format!(
                "router W is {}x{}, b has {}, input has {}",
                self.w.rows(),
                self.w.cols(),
                self.b.dim(),
                u.len()
            )));
        }
        Ok(MixtureWeights(Vector::from_raw(self.forward_raw(u))))
    }

    fn forward_raw(&self, u: &[f64]) -> Vec<f64> {
        let mut logits = vec![0.0; self.w.rows()];
        self.w.affine_into(&self.b, u, &mut logits);
        let mut pi = vec![0.0; logits.len()];
        softmax_into(&logits, &mut pi);
        pi
    }

    /// Accumulates router gradients given `dπ` at mixture `pi` for input `u`.
    pub(crate) fn backward(pi: &[f64], u: &[f64], dpi: &[f64], grads: &mut RouterParams) {
        let inner = dot(dpi, pi);
        let dlogits: Vec<f64> = pi.iter().zip(dpi).map(|(p, g)| p * (g - inner)).collect();
        grads.w.add_outer(1.0, &dlogits, u);
        axpy(1.0, &dlogits, &mut grads.b);
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        vec![self.w.as_slice(), &self.b]
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.w.as_mut_slice(), &mut self.b]
    }
}

/// A point on the K-simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureWeights(Vector);

impl MixtureWeights {
    pub const TOLERANCE: f64 = 1e-9;

    pub fn new(weights: Vec<f64>) -> Result<Self> {
        let v = Vector::new(weights)?;
        if v.dim() == 0 {
            return Err(LaprError::invalid("empty mixture"));
        }
        if v.iter().any(|&w| w < 0.0) || (v.iter().sum::<f64>() - 1.0).abs() > Self::TOLERANCE {
            return Err(LaprError::invalid("mixture weights are not on the simplex"));
        }
        Ok(MixtureWeights(v))
    }

    /// No simplex check; for perturbation tests.
    #[cfg(test)]
    pub(crate) fn from_raw(weights: Vec<f64>) -> Self {
        MixtureWeights(Vector::from_raw(weights))
    }

    pub fn uniform(k: usize) -> Self {
        MixtureWeights(Vector::from_raw(vec![1.0 / k as f64; k]))
    }

    pub fn one_hot(k: usize, index: usize) -> Self {
        let mut w = vec![0.0; k];
        w[index] = 1.0;
        MixtureWeights(Vector::from_raw(w))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.0.dim() == 0
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, &w) in self.0.iter().enumerate() {
            if w > self.0[best] {
                best = k;
            }
        }
        best
    }
}

/// Joint prompt embedding: `z_I + z_L`, or `z_I` alone when labels are off.
pub fn fuse_prompt(image: &[f64], label: &[f64], use_label: bool) -> Result<Vector> {
    if image.len() != label.len() {
        return Err(LaprError::invalid(format!(
            "image dim {} != label dim {}",
            image.len(),
            label.len()
        )));
    }
    if !use_label {
        return Ok(Vector::from_raw(image.to_vec()));
    }
    Ok(Vector::from_raw(image.iter().zip(label).map(|(a, b)| a + b).collect()))
}

/// Convex combination `Σ_k π_k v_k`.
pub fn mix(pi: &MixtureWeights, modes: &[Vector]) -> Result<Vector> {
    if modes.len() != pi.len() {
        return Err(LaprError::invalid(format!(
            "{} mixture weights for {} modes",
            pi.len(),
            modes.len()
        )));
    }
    let dim = modes[0].dim();
    if modes.iter().any(|m| m.dim() != dim) {
        return Err(LaprError::invalid("mode vectors differ in dimension"));
    }
    let mut out = vec![0.0; dim];
    mix_into(pi.as_slice(), modes.iter().map(|m| m.as_slice()), &mut out);
    Ok(Vector::from_raw(out))
}

pub(crate) fn mix_into<'a>(pi: &[f64], modes: impl Iterator<Item = &'a [f64]>, out: &mut [f64]) {
    out.iter_mut().for_each(|x| *x = 0.0);
    for (&w, m) in pi.iter().zip(modes) {
        axpy(w, m, out);
    }
}

/// Cosine value and norms, erroring on a collapsed operand.
pub(crate) struct CosineParts {
    pub(crate) value: f64,
    na: f64,
    nb: f64,
}

pub(crate) fn cosine_parts(a: &[f64], b: &[f64]) -> Result<CosineParts> {
    let (na, nb) = (norm(a), norm(b));
    if na < NORM_EPS || nb < NORM_EPS {
        return Err(LaprError::degenerate("mixed embedding has zero norm"));
    }
    Ok(CosineParts { value: dot(a, b) / (na * nb), na, nb })
}

/// `da += g ∂cos/∂a`, `db += g ∂cos/∂b`.
pub(crate) fn cosine_backward(a: &[f64], b: &[f64], parts: &CosineParts, g: f64, da: &mut [f64], db: &mut [f64]) {
    let inv = g / (parts.na * parts.nb);
    let ca = g * parts.value / (parts.na * parts.na);
    let cb = g * parts.value / (parts.nb * parts.nb);
    for i in 0..a.len() {
        da[i] += inv * b[i] - ca * a[i];
        db[i] += inv * a[i] - cb * b[i];
    }
}

/// Query-side forward trace: mixture, expert activations, and `ũ`.
#[derive(Clone, Debug)]
pub(crate) struct QueryForward {
    pub(crate) pi: Vec<f64>,
    pub(crate) traces: Vec<ExpertTrace>,
    pub(crate) embedding: Vec<f64>,
}

/// Prompt-side forward trace: the K mode embeddings `p_k`.
#[derive(Clone, Debug)]
pub(crate) struct PromptForward {
    pub(crate) traces: Vec<ExpertTrace>,
}

impl PromptForward {
    pub(crate) fn modes(&self) -> impl Iterator<Item = &[f64]> {
        self.traces.iter().map(|t| t.out.as_slice())
    }
}

/// Output of [`LaprModel::pair_score`].
#[derive(Clone, Debug)]
pub struct PairScore {
    pub score: f64,
    pub query_embedding: Vector,
    pub prompt_embedding: Vector,
    pub mixture: MixtureWeights,
}

/// Which parameter groups receive gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradMask {
    pub experts: bool,
    pub router: bool,
}

impl GradMask {
    pub const ALL: GradMask = GradMask { experts: true, router: true };
    pub const EXPERTS: GradMask = GradMask { experts: true, router: false };
    pub const ROUTER: GradMask = GradMask { experts: false, router: true };
}

/// Parameter-shaped gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub query_bank: EncoderBank,
    pub prompt_bank: EncoderBank,
    pub router: RouterParams,
}

impl Gradients {
    pub fn zeros(config: &ModelConfig) -> Self {
        Gradients {
            query_bank: EncoderBank::zeros(Side::Query, config),
            prompt_bank: EncoderBank::zeros(Side::Prompt, config),
            router: RouterParams::zeros(config),
        }
    }

    pub fn expert_slices(&self) -> Vec<&[f64]> {
        let mut s = self.query_bank.param_slices();
        s.extend(self.prompt_bank.param_slices());
        s
    }

    pub fn router_slices(&self) -> Vec<&[f64]> {
        self.router.param_slices()
    }

    /// Flattened in checkpoint order: query bank, prompt bank, router.
    pub fn flatten(&self) -> Vec<f64> {
        self.expert_slices().into_iter().chain(self.router_slices()).flatten().copied().collect()
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &Gradients) {
        let mine = self
            .query_bank
            .param_slices_mut()
            .into_iter()
            .chain(self.prompt_bank.param_slices_mut())
            .chain(self.router.param_slices_mut());
        let theirs = other.expert_slices().into_iter().chain(other.router_slices());
        for (m, t) in mine.zip(theirs) {
            axpy(alpha, t, m);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for s in self
            .query_bank
            .param_slices_mut()
            .into_iter()
            .chain(self.prompt_bank.param_slices_mut())
            .chain(self.router.param_slices_mut())
        {
            s.iter_mut().for_each(|x| *x *= alpha);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.flatten().iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Full model: both encoder banks and the router.
#[derive(Clone, Debug, PartialEq)]
pub struct LaprModel {
    pub config: ModelConfig,
    pub query_bank: EncoderBank,
    pub prompt_bank: EncoderBank,
    pub router: RouterParams,
}

impl LaprModel {
    pub fn init(config: ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let query_bank = EncoderBank::init(Side::Query, &config, rng);
        let prompt_bank = EncoderBank::init(Side::Prompt, &config, rng);
        let router = RouterParams::init(&config, rng);
        Ok(LaprModel { config, query_bank, prompt_bank, router })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(LaprModel {
            query_bank: EncoderBank::zeros(Side::Query, &config),
            prompt_bank: EncoderBank::zeros(Side::Prompt, &config),
            router: RouterParams::zeros(&config),
            config,
        })
    }

    /// Checks every parameter tensor against the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let c = &self.config;
        for bank in [&self.query_bank, &self.prompt_bank] {
            if bank.len() != c.experts {
                return Err(LaprError::invalid(format!("bank has {} experts, config says {}", bank.len(), c.experts)));
            }
            for e in &bank.experts {
                e.check_shapes()?;
                if e.input_dim() != c.input_dim || e.w1.rows() != c.hidden_dim || e.output_dim() != c.output_dim {
                    return Err(LaprError::invalid("expert shape disagrees with config"));
                }
            }
        }
        if self.router.w.rows() != c.experts || self.router.w.cols() != c.input_dim || self.router.b.dim() != c.experts
        {
            return Err(LaprError::invalid("router shape disagrees with config"));
        }
        Ok(())
    }

    pub fn fuse(&self, image: &[f64], label: &[f64]) -> Result<Vector> {
        fuse_prompt(image, label, self.config.use_label)
    }

    /// Router output, or the uniform mixture when routing is disabled.
    pub fn mixture(&self, u: &[f64]) -> Result<MixtureWeights> {
        self.check_input(u)?;
        if self.config.uniform_routing {
            return Ok(MixtureWeights::uniform(self.config.experts));
        }
        self.router.forward(u)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.config.input_dim {
            return Err(LaprError::invalid(format!(
                "input dim {} != model dim {}",
                x.len(),
                self.config.input_dim
            )));
        }
        Ok(())
    }

    pub(crate) fn forward_query(&self, u: &[f64]) -> QueryForward {
        let pi = if self.config.uniform_routing {
            vec![1.0 / self.config.experts as f64; self.config.experts]
        } else {
            self.router.forward_raw(u)
        };
        let traces: Vec<ExpertTrace> = self.query_bank.experts.iter().map(|e| e.forward_traced(u)).collect();
        let mut embedding = vec![0.0; self.config.output_dim];
        mix_into(&pi, traces.iter().map(|t| t.out.as_slice()), &mut embedding);
        QueryForward { pi, traces, embedding }
    }

    pub(crate) fn forward_prompt(&self, z: &[f64]) -> PromptForward {
        PromptForward { traces: self.prompt_bank.experts.iter().map(|e| e.forward_traced(z)).collect() }
    }

    /// Prompt mode embeddings `p_k = Ē_k(z)`.
    pub fn prompt_modes(&self, z: &[f64]) -> Result<Vec<Vector>> {
        self.check_input(z)?;
        Ok(self.forward_prompt(z).traces.into_iter().map(|t| Vector::from_raw(t.out)).collect())
    }

    /// Query mode embeddings `q_k = E_k(u)`.
    pub fn query_modes(&self, u: &[f64]) -> Result<Vec<Vector>> {
        self.check_input(u)?;
        Ok(self.query_bank.experts.iter().map(|e| Vector::from_raw(e.forward_traced(u).out)).collect())
    }

    /// Label-aware similarity of query `u` and fused prompt `z`.
    pub fn pair_score(&self, u: &[f64], z: &[f64]) -> Result<PairScore> {
        self.check_input(u)?;
        self.check_input(z)?;
        let q = self.forward_query(u);
        let p = self.forward_prompt(z);
        let mut p_mix = vec![0.0; self.config.output_dim];
        mix_into(&q.pi, p.modes(), &mut p_mix);
        let parts = cosine_parts(&q.embedding, &p_mix)?;
        Ok(PairScore {
            score: parts.value / self.config.temperature,
            query_embedding: Vector::from_raw(q.embedding),
            prompt_embedding: Vector::from_raw(p_mix),
            mixture: MixtureWeights(Vector::from_raw(q.pi)),
        })
    }

    /// Parameter gradients of `upstream · s(u, z)`. With `freeze_router`
    /// (or uniform routing) the router slot stays exactly zero.
    pub fn backward_pair(&self, u: &[f64], z: &[f64], upstream: f64, freeze_router: bool) -> Result<Gradients> {
        self.check_input(u)?;
        self.check_input(z)?;
        let mut grads = Gradients::zeros(&self.config);
        let q = self.forward_query(u);
        let p = self.forward_prompt(z);
        let dim = self.config.output_dim;
        let mut p_mix = vec![0.0; dim];
        mix_into(&q.pi, p.modes(), &mut p_mix);
        let parts = cosine_parts(&q.embedding, &p_mix)?;
        if upstream == 0.0 {
            return Ok(grads);
        }
        let mut d_query = vec![0.0; dim];
        let mut d_prompt = vec![0.0; dim];
        cosine_backward(&q.embedding, &p_mix, &parts, upstream / self.config.temperature, &mut d_query, &mut d_prompt);

        let mask = GradMask { experts: true, router: !freeze_router };
        let mut dpi = vec![0.0; self.config.experts];
        let mut d_modes = vec![vec![0.0; dim]; self.config.experts];
        for (k, d_mode) in d_modes.iter_mut().enumerate() {
            dpi[k] = dot(&d_prompt, &p.traces[k].out);
            axpy(q.pi[k], &d_prompt, d_mode);
        }
        self.backprop_query(u, &q, &d_query, &mut dpi, mask, &mut grads);
        for (k, d_mode) in d_modes.iter().enumerate() {
            self.prompt_bank.experts[k].backward(z, &p.traces[k], d_mode, &mut grads.prompt_bank.experts[k]);
        }
        Ok(grads)
    }

    /// Pushes `dũ` into the query experts and (together with any `dπ`
    /// already accumulated from the prompt side) into the router.
    pub(crate) fn backprop_query(
        &self,
        u: &[f64],
        q: &QueryForward,
        d_query: &[f64],
        dpi: &mut [f64],
        mask: GradMask,
        grads: &mut Gradients,
    ) {
        for (k, trace) in q.traces.iter().enumerate() {
            dpi[k] += dot(d_query, &trace.out);
            if mask.experts && q.pi[k] != 0.0 {
                let dq: Vec<f64> = d_query.iter().map(|g| g * q.pi[k]).collect();
                self.query_bank.experts[k].backward(u, trace, &dq, &mut grads.query_bank.experts[k]);
            }
        }
        if mask.router && !self.config.uniform_routing {
            RouterParams::backward(&q.pi, u, dpi, &mut grads.router);
        }
    }

    pub fn expert_slices(&self) -> Vec<&[f64]> {
        let mut s = self.query_bank.param_slices();
        s.extend(self.prompt_bank.param_slices());
        s
    }

    pub fn expert_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut s = self.query_bank.param_slices_mut();
        s.extend(self.prompt_bank.param_slices_mut());
        s
    }

    pub fn router_slices(&self) -> Vec<&[f64]> {
        self.router.param_slices()
    }

    pub fn router_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.router.param_slices_mut()
    }

    /// All parameters flattened: query bank, prompt bank, router.
    pub fn flatten(&self) -> Vec<f64> {
        self.expert_slices().into_iter().chain(self.router_slices()).flatten().copied().collect()
    }

    pub fn num_params(&self) -> usize {
        self.expert_slices().iter().chain(self.router_slices().iter()).map(|s| s.len()).sum()
    }

    /// Mutable reference to the `index`-th parameter in [`flatten`](Self::flatten) order.
    pub fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        let mut slices = self.query_bank.param_slices_mut();
        slices.extend(self.prompt_bank.param_slices_mut());
        slices.extend(self.router.param_slices_mut());
        for s in slices {
            if index < s.len() {
                return &mut s[index];
            }
            index -= s.len();
        }
        panic!("parameter index out of range");
    }

    /// Hashes of (both expert banks, router), for freeze checks.
    pub fn fingerprints(&self) -> (u64, u64) {
        let mut experts = Fnv64::new();
        experts.write(&self.query_bank.fingerprint().to_le_bytes());
        experts.write(&self.prompt_bank.fingerprint().to_le_bytes());
        let mut router = Fnv64::new();
        for s in self.router_slices() {
            router.write_f64s(s);
        }
        (experts.finish(), router.finish())
    }
}
