//! The generative model: graph prior, graph posterior and the graph-aware
//! trajectory module, all with identity-covariance Gaussian outputs.
//!
//! Graph embeddings are tokenized per agent. The token of agent `i` for
//! `G^τ` is `[Gu_i, Gv_{0·n+i}, …, Gv_{(τ−1)·n+i}]`, zero-padded to
//! `(T_max+1)·d`; the `n` tokens of one step together hold the flattened
//! `[Gu; Gv]`. Output means are read back through the same layout and
//! sliced to the requested step.

use ndarray::{Array2, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{attention, decoder_block, stg_attention, AttentionMask, DecoderBlockParams, LinearParams, ScaleMode};
use crate::params::{Init, ParamGroup, ParamId, ParamStore, Registry};
use crate::stg::{column_index, StgAdjacency, StgEmbedding, Provenance};

/// How the adjacency passes gradient back to the graph embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjacencyGradient {
    /// Hard adjacency forward, sigmoid surrogate backward.
    StraightThrough,
    /// Sigmoid surrogate in both passes; the loss is smooth in every
    /// parameter.
    Relaxed,
}

/// Model ablations. All false is the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Only self edges (`j = i`) survive.
    pub no_social: bool,
    /// Prior replaced by a standard normal.
    pub no_learned_prior: bool,
    /// The graph of step 1 is reused for every later step.
    pub stationary_g: bool,
    /// Only edges from step `t − 1` survive.
    pub short_term_g: bool,
    /// Adjacency forced to all ones; no graph modules run.
    pub no_g: bool,
    /// Sparsity weight forced to zero.
    pub zeta_zero: bool,
}

impl Ablation {
    pub const NAMES: [&'static str; 6] = ["no_social", "no_learned_prior", "stationary_g", "short_term_g", "no_g", "zeta_zero"];

    pub fn enable(&mut self, name: &str) -> Result<()> {
        match name {
            "no_social" => self.no_social = true,
            "no_learned_prior" => self.no_learned_prior = true,
            "stationary_g" => self.stationary_g = true,
            "short_term_g" => self.short_term_g = true,
            "no_g" => self.no_g = true,
            "zeta_zero" => self.zeta_zero = true,
            other => {
                return Err(Error::Config(vec![format!(
                    "unknown ablation `{other}` (expected one of {})",
                    Self::NAMES.join(", ")
                )]))
            }
        }
        Ok(())
    }

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut a = Self::default();
        let mut problems = Vec::new();
        for n in names {
            if let Err(Error::Config(p)) = a.enable(n.as_ref()) {
                problems.extend(p);
            }
        }
        if problems.is_empty() {
            Ok(a)
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn names(&self) -> Vec<&'static str> {
        let flags = [self.no_social, self.no_learned_prior, self.stationary_g, self.short_term_g, self.no_g, self.zeta_zero];
        Self::NAMES.iter().zip(flags).filter(|(_, on)| *on).map(|(n, _)| *n).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Graph embedding width `d`.
    pub embed_dim: usize,
    /// Model width `w`.
    pub width: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub trajectory_blocks: usize,
    pub graph_blocks: usize,
    /// Largest step index `T_max`; windows span steps `0..=T_max`.
    pub max_step: usize,
    pub layer_norm_eps: f64,
    pub trajectory_scale: ScaleMode,
    pub graph_scale: ScaleMode,
    /// Temperature of the sigmoid adjacency surrogate.
    pub temperature: f64,
    pub adjacency_gradient: AdjacencyGradient,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            width: 64,
            heads: 4,
            ff_width: 128,
            trajectory_blocks: 2,
            graph_blocks: 1,
            max_step: crate::data::WINDOW_LEN - 1,
            layer_norm_eps: 1e-5,
            trajectory_scale: ScaleMode::AgentSteps,
            graph_scale: ScaleMode::CumulativeSteps,
            temperature: 1.0,
            adjacency_gradient: AdjacencyGradient::StraightThrough,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.embed_dim == 0 {
            p.push("model.embed_dim must be positive".into());
        }
        if self.width == 0 {
            p.push("model.width must be positive".into());
        }
        if self.heads == 0 || (self.width > 0 && !self.width.is_multiple_of(self.heads)) {
            p.push(format!("model.heads ({}) must divide model.width ({})", self.heads, self.width));
        }
        if self.ff_width == 0 {
            p.push("model.ff_width must be positive".into());
        }
        if self.trajectory_blocks == 0 {
            p.push("model.trajectory_blocks must be positive".into());
        }
        if self.graph_blocks == 0 {
            p.push("model.graph_blocks must be positive".into());
        }
        if self.max_step == 0 {
            p.push("model.max_step must be positive".into());
        }
        if !(self.layer_norm_eps > 0.0) {
            p.push("model.layer_norm_eps must be positive".into());
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            p.push("model.temperature must be positive and finite".into());
        }
        p
    }

    /// Short stable digest of the configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    fn token_width(&self) -> usize {
        (self.max_step + 1) * self.embed_dim
    }
}

#[derive(Debug, Clone)]
struct TrajectoryLayout {
    input: LinearParams,
    position: ParamId,
    blocks: Vec<DecoderBlockParams>,
    mean_head: LinearParams,
    output_map: LinearParams,
}

#[derive(Debug, Clone)]
struct GraphLayout {
    token: LinearParams,
    position: ParamId,
    blocks: Vec<DecoderBlockParams>,
    head: LinearParams,
    /// Posterior only: trajectory query projection and the start token used
    /// as key/value at step 0.
    query: Option<LinearParams>,
    start: Option<ParamId>,
}

#[derive(Debug, Clone)]
struct Layout {
    trajectory: TrajectoryLayout,
    prior: GraphLayout,
    posterior: GraphLayout,
}

impl Layout {
    fn declare(cfg: &ModelConfig) -> (Registry, Layout) {
        let mut reg = Registry::new();
        let w = cfg.width;
        let steps = cfg.max_step + 1;

        let g = ParamGroup::Trajectory;
        let trajectory = TrajectoryLayout {
            input: LinearParams::declare(&mut reg, g, "input", 2, w),
            position: reg.declare(g, "position", (steps, w), Init::Normal(0.02)),
            blocks: (0..cfg.trajectory_blocks)
                .map(|b| DecoderBlockParams::declare(&mut reg, g, &format!("block{b}"), w, cfg.heads, cfg.ff_width))
                .collect(),
            mean_head: LinearParams::declare(&mut reg, g, "mean_head", w, 2),
            output_map: LinearParams {
                weight: reg.declare_fixed(g, "output_map.weight", (2, 2), Init::Identity),
                bias: reg.declare_fixed(g, "output_map.bias", (1, 2), Init::Zeros),
            },
        };

        let graph = |reg: &mut Registry, g: ParamGroup, posterior: bool| GraphLayout {
            token: LinearParams::declare(reg, g, "token", cfg.token_width(), w),
            position: reg.declare(g, "position", (steps, w), Init::Normal(0.02)),
            blocks: (0..cfg.graph_blocks)
                .map(|b| DecoderBlockParams::declare(reg, g, &format!("block{b}"), w, cfg.heads, cfg.ff_width))
                .collect(),
            head: LinearParams::declare_with(reg, g, "head", w, cfg.token_width(), Init::Zeros),
            query: posterior.then(|| LinearParams::declare(reg, g, "query", 2 * steps, w)),
            start: posterior.then(|| reg.declare(g, "start", (1, w), Init::Normal(0.02))),
        };
        let prior = graph(&mut reg, ParamGroup::Prior, false);
        let posterior = graph(&mut reg, ParamGroup::Posterior, true);
        (
            reg,
            Layout {
                trajectory,
                prior,
                posterior,
            },
        )
    }
}

/// Graph embedding on a tape. `gv` is `None` at step 0.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingVars {
    pub step: usize,
    pub gu: Var,
    pub gv: Option<Var>,
}

/// Adjacency of one step on a tape.
#[derive(Debug, Clone)]
pub struct AdjacencyVars {
    /// Mask consumed by attention (binary under straight-through).
    pub mask: Var,
    /// Sigmoid surrogate after structural masking; `None` when the graph is
    /// disabled.
    pub soft: Option<Var>,
    pub hard: StgAdjacency,
}

/// Output of one trajectory step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    /// Predicted positions `x̂^t`, `n×2`.
    pub x_next: Mat,
    /// Mean `μ_Φ`, `n×2`.
    pub mean: Mat,
    pub adjacency: StgAdjacency,
}

/// Model configuration plus parameters `(Φ, Ψ, Θ)`.
#[derive(Debug, Clone)]
pub struct Stgformer {
    config: ModelConfig,
    layout: Layout,
    params: ParamStore,
}

pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

impl Stgformer {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let problems = config.validate();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let (reg, layout) = Layout::declare(&config);
        let params = reg.initialize(rng);
        Ok(Self { config, layout, params })
    }

    /// Rebuilds a model from stored parameters, checking every name and
    /// shape against the layout implied by `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let problems = config.validate();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let (reg, layout) = Layout::declare(&config);
        let specs = reg.specs();
        if specs.len() != params.len() {
            return Err(Error::ConfigMismatch(format!(
                "config declares {} tensors, parameters hold {}",
                specs.len(),
                params.len()
            )));
        }
        for (spec, entry) in specs.iter().zip(params.entries()) {
            if spec.name != entry.name || spec.shape != entry.value.dim() {
                return Err(Error::ConfigMismatch(format!(
                    "expected {} {:?}, found {} {:?}",
                    spec.name,
                    spec.shape,
                    entry.name,
                    entry.value.dim()
                )));
            }
        }
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn ablation(&self) -> Ablation {
        self.config.ablation
    }

    fn check_step(&self, step: usize) -> Result<()> {
        if step > self.config.max_step {
            return Err(Error::HorizonExceeded {
                step,
                max: self.config.max_step,
            });
        }
        Ok(())
    }

    // ---- tape-level building blocks -------------------------------------

    pub fn embedding_to_tape(tape: &mut Tape, e: &StgEmbedding) -> EmbeddingVars {
        EmbeddingVars {
            step: e.step,
            gu: tape.constant(e.gu.clone()),
            gv: (e.step > 0).then(|| tape.constant(e.gv.clone())),
        }
    }

    pub fn embedding_from_tape(tape: &Tape, e: &EmbeddingVars, provenance: Provenance) -> StgEmbedding {
        let gu = tape.value(e.gu).clone();
        let gv = match e.gv {
            Some(v) => tape.value(v).clone(),
            None => Array2::zeros((0, gu.ncols())),
        };
        StgEmbedding {
            step: e.step,
            gu,
            gv,
            provenance,
        }
    }

    /// Per-agent tokens of one embedding, `n×(T_max+1)·d`.
    fn graph_tokens(&self, tape: &mut Tape, g: &EmbeddingVars) -> Var {
        let n = tape.shape(g.gu).0;
        let mut parts = vec![g.gu];
        if let Some(gv) = g.gv {
            for s in 0..g.step {
                parts.push(tape.slice_rows(gv, s * n, n));
            }
        }
        let flat = tape.concat_cols(&parts);
        tape.pad_cols(flat, self.config.token_width())
    }

    fn add_position(&self, tape: &mut Tape, x: Var, position: ParamId, steps: &[usize]) -> Var {
        let table = tape.param(&self.params, position);
        let pos = tape.gather_rows(table, steps);
        tape.add(x, pos)
    }

    /// Embedded graph history, `(n·t)×w` with row `τ·n + i`.
    fn history_tokens(&self, tape: &mut Tape, layout: &GraphLayout, history: &[EmbeddingVars]) -> Var {
        let rows: Vec<Var> = history
            .iter()
            .map(|g| {
                let tokens = self.graph_tokens(tape, g);
                let n = tape.shape(tokens).0;
                let embedded = layout.token.forward(tape, &self.params, tokens);
                self.add_position(tape, embedded, layout.position, &vec![g.step; n])
            })
            .collect();
        tape.concat_rows(&rows)
    }

    /// Splits an `n×(T_max+1)·d` mean into the step-`t` embedding.
    fn unpack(&self, tape: &mut Tape, mean: Var, step: usize) -> EmbeddingVars {
        let d = self.config.embed_dim;
        let gu = tape.slice_cols(mean, 0, d);
        let gv = (step > 0).then(|| {
            let blocks: Vec<Var> = (0..step).map(|s| tape.slice_cols(mean, (s + 1) * d, d)).collect();
            tape.concat_rows(&blocks)
        });
        EmbeddingVars { step, gu, gv }
    }

    fn graph_decoder(&self, tape: &mut Tape, layout: &GraphLayout, query: Var, kv: Var, agents: usize, step: usize) -> Var {
        let hw = self.config.width / self.config.heads;
        let denominator = self.config.graph_scale.denominator(agents, step, hw);
        let mut q = query;
        for block in &layout.blocks {
            let attn = attention(tape, &self.params, &block.attention, q, kv, None, denominator);
            q = decoder_block(tape, &self.params, block, attn, self.config.layer_norm_eps);
        }
        q
    }

    /// `μ_Ψ(G^{0:t−1})` for `t = history.len()`. Under the
    /// `no_learned_prior` ablation the mean is zero.
    pub fn prior_mean_vars(&self, tape: &mut Tape, history: &[EmbeddingVars]) -> EmbeddingVars {
        let step = history.len();
        let last = history.last().expect("prior needs at least G^0");
        let n = tape.shape(last.gu).0;
        if self.config.ablation.no_learned_prior {
            let d = self.config.embed_dim;
            return EmbeddingVars {
                step,
                gu: tape.constant(Array2::zeros((n, d))),
                gv: Some(tape.constant(Array2::zeros((n * step, d)))),
            };
        }
        let layout = &self.layout.prior;
        let q_tokens = self.graph_tokens(tape, last);
        let q = layout.token.forward(tape, &self.params, q_tokens);
        let q = self.add_position(tape, q, layout.position, &vec![step; n]);
        let kv = self.history_tokens(tape, layout, history);
        let a = self.graph_decoder(tape, layout, q, kv, n, step);
        let mean = layout.head.forward(tape, &self.params, a);
        self.unpack(tape, mean, step)
    }

    /// `μ_Θ(x^{0:t}, G̃^{0:t−1})` for `t = history.len()`; `x_hist` is
    /// `n×(t+1)×2`.
    pub fn posterior_mean_vars(&self, tape: &mut Tape, x_hist: ArrayView3<f64>, history: &[EmbeddingVars]) -> EmbeddingVars {
        let step = history.len();
        let n = x_hist.dim().0;
        let layout = &self.layout.posterior;
        let width = 2 * (self.config.max_step + 1);
        let mut flat = Array2::zeros((n, width));
        for i in 0..n {
            for tau in 0..=step {
                flat[[i, 2 * tau]] = x_hist[[i, tau, 0]];
                flat[[i, 2 * tau + 1]] = x_hist[[i, tau, 1]];
            }
        }
        let flat = tape.constant(flat);
        let q = layout.query.expect("posterior declares a query").forward(tape, &self.params, flat);
        let q = self.add_position(tape, q, layout.position, &vec![step; n]);
        let kv = if history.is_empty() {
            tape.param(&self.params, layout.start.expect("posterior declares a start token"))
        } else {
            self.history_tokens(tape, layout, history)
        };
        let a = self.graph_decoder(tape, layout, q, kv, n, step);
        let mean = layout.head.forward(tape, &self.params, a);
        self.unpack(tape, mean, step)
    }

    /// Adds unit-normal noise (or nothing when deterministic). Draws fill
    /// `Gu` row-major, then `Gv` row-major.
    pub fn sample_vars<R: Rng + ?Sized>(tape: &mut Tape, mean: &EmbeddingVars, rng: &mut R, deterministic: bool) -> EmbeddingVars {
        if deterministic {
            return *mean;
        }
        let (n, d) = tape.shape(mean.gu);
        let eu = tape.constant(standard_normal(n, d, rng));
        let gu = tape.add(mean.gu, eu);
        let gv = mean.gv.map(|gv| {
            let (r, c) = tape.shape(gv);
            let ev = tape.constant(standard_normal(r, c, rng));
            tape.add(gv, ev)
        });
        EmbeddingVars { step: mean.step, gu, gv }
    }

    /// Reuses the step-1 embedding for step `t` by tiling its sources.
    pub fn tile_stationary(tape: &mut Tape, first: &EmbeddingVars, step: usize) -> EmbeddingVars {
        assert_eq!(first.step, 1, "stationary graph is taken from step 1");
        let gv = first.gv.expect("step 1 has sources");
        let tiled = tape.concat_rows(&vec![gv; step]);
        EmbeddingVars {
            step,
            gu: first.gu,
            gv: Some(tiled),
        }
    }

    /// Structural `n×(n·t)` mask implied by the ablations, or `None`.
    fn structural_mask(&self, agents: usize, step: usize) -> Option<Mat> {
        let ab = self.config.ablation;
        if !ab.short_term_g && !ab.no_social {
            return None;
        }
        Some(Array2::from_shape_fn((agents, agents * step), |(i, c)| {
            let (j, tau) = crate::stg::decode_column(c, agents);
            let keep = (!ab.short_term_g || tau + 1 == step) && (!ab.no_social || j == i);
            if keep {
                1.0
            } else {
                0.0
            }
        }))
    }

    /// Adjacency of step `g.step` from a graph embedding.
    pub fn adjacency_vars(&self, tape: &mut Tape, g: &EmbeddingVars) -> AdjacencyVars {
        let step = g.step;
        let n = tape.shape(g.gu).0;
        if self.config.ablation.no_g {
            return self.fixed_adjacency_vars(tape, &StgAdjacency::ones(step, n));
        }
        let gv = g.gv.expect("adjacency needs step ≥ 1");
        let scores = tape.matmul_t(g.gu, gv);
        let mut hard = scores_to_hard(tape.value(scores));
        let scaled = tape.scale(scores, 1.0 / self.config.temperature);
        let mut soft = tape.sigmoid(scaled);
        if let Some(m) = self.structural_mask(n, step) {
            hard = &hard * &m;
            let mv = tape.constant(m);
            soft = tape.mul(soft, mv);
        }
        let mask = match self.config.adjacency_gradient {
            AdjacencyGradient::StraightThrough => tape.straight_through(hard.clone(), soft),
            AdjacencyGradient::Relaxed => soft,
        };
        AdjacencyVars {
            mask,
            soft: Some(soft),
            hard: StgAdjacency::from_matrix(step, &hard).expect("shape follows the embedding"),
        }
    }

    /// A constant adjacency (no gradient path).
    pub fn fixed_adjacency_vars(&self, tape: &mut Tape, adjacency: &StgAdjacency) -> AdjacencyVars {
        AdjacencyVars {
            mask: tape.constant(adjacency.to_matrix()),
            soft: None,
            hard: adjacency.clone(),
        }
    }

    /// `μ_Φ(x^{0:t−1}, G^t)` for `t = x_hist.dim().1`.
    pub fn trajectory_mean_vars(&self, tape: &mut Tape, x_hist: ArrayView3<f64>, adjacency: &AdjacencyVars) -> Var {
        let (n, step, _) = x_hist.dim();
        let layout = &self.layout.trajectory;
        let mut tokens = Array2::zeros((n * step, 2));
        for tau in 0..step {
            for j in 0..n {
                let r = column_index(j, tau, n);
                tokens[[r, 0]] = x_hist[[j, tau, 0]];
                tokens[[r, 1]] = x_hist[[j, tau, 1]];
            }
        }
        let steps: Vec<usize> = (0..n * step).map(|r| r / n).collect();
        let tokens = tape.constant(tokens);
        let kv = layout.input.forward(tape, &self.params, tokens);
        let kv = self.add_position(tape, kv, layout.position, &steps);
        let mut q = tape.slice_rows(kv, (step - 1) * n, n);
        for block in &layout.blocks {
            let attn = stg_attention(
                tape,
                &self.params,
                &block.attention,
                q,
                kv,
                adjacency.mask,
                step,
                self.config.trajectory_scale,
            );
            q = decoder_block(tape, &self.params, block, attn, self.config.layer_norm_eps);
        }
        layout.mean_head.forward(tape, &self.params, q)
    }

    /// `x̂ = MLP(μ_Φ + ε)`, evaluated on plain values.
    pub fn output_map(&self, latent: &Mat) -> Mat {
        let map = &self.layout.trajectory.output_map;
        latent.dot(self.params.value(map.weight)) + self.params.value(map.bias)
    }

    // ---- value-level operations -----------------------------------------

    fn check_history(&self, history: &[StgEmbedding]) -> Result<usize> {
        let first = history
            .first()
            .ok_or_else(|| Error::Shape("graph history is empty; use init_g0 for step 0".into()))?;
        let n = first.agents();
        for (k, g) in history.iter().enumerate() {
            if g.step != k {
                return Err(Error::Shape(format!("history entry {k} holds step {}", g.step)));
            }
            if g.agents() != n || g.dim() != self.config.embed_dim {
                return Err(Error::Shape(format!(
                    "history entry {k} is {}×{}, expected {n}×{}",
                    g.agents(),
                    g.dim(),
                    self.config.embed_dim
                )));
            }
        }
        Ok(n)
    }

    /// Prior mean for step `history.len()`.
    pub fn prior_mean(&self, history: &[StgEmbedding]) -> Result<StgEmbedding> {
        self.check_history(history)?;
        self.check_step(history.len())?;
        let mut tape = Tape::new();
        let vars: Vec<_> = history.iter().map(|g| Self::embedding_to_tape(&mut tape, g)).collect();
        let mean = self.prior_mean_vars(&mut tape, &vars);
        Ok(Self::embedding_from_tape(&tape, &mean, Provenance::Prior))
    }

    /// Samples `G^t ~ N(μ_Ψ(G^{0:t−1}), I)`, or returns the mean when
    /// `deterministic`.
    pub fn prior_step<R: Rng + ?Sized>(&self, history: &[StgEmbedding], rng: &mut R, deterministic: bool) -> Result<StgEmbedding> {
        let mut g = self.prior_mean(history)?;
        if !deterministic {
            add_noise(&mut g, rng);
        }
        Ok(g)
    }

    /// Posterior mean for step `g_hist.len()`; `x_hist` is `n×(t+1)×2`.
    pub fn posterior_mean(&self, x_hist: ArrayView3<f64>, g_hist: &[StgEmbedding]) -> Result<StgEmbedding> {
        let step = g_hist.len();
        self.check_step(step)?;
        let (n, len, dims) = x_hist.dim();
        if len != step + 1 || dims != 2 {
            return Err(Error::Shape(format!(
                "posterior at step {step} needs n×{}×2 positions, got {:?}",
                step + 1,
                x_hist.dim()
            )));
        }
        if !g_hist.is_empty() && self.check_history(g_hist)? != n {
            return Err(Error::Shape("positions and graph history disagree on agent count".into()));
        }
        let mut tape = Tape::new();
        let vars: Vec<_> = g_hist.iter().map(|g| Self::embedding_to_tape(&mut tape, g)).collect();
        let mean = self.posterior_mean_vars(&mut tape, x_hist, &vars);
        Ok(Self::embedding_from_tape(&tape, &mean, Provenance::Posterior))
    }

    pub fn posterior_step<R: Rng + ?Sized>(
        &self,
        x_hist: ArrayView3<f64>,
        g_hist: &[StgEmbedding],
        rng: &mut R,
        deterministic: bool,
    ) -> Result<StgEmbedding> {
        let mut g = self.posterior_mean(x_hist, g_hist)?;
        if !deterministic {
            add_noise(&mut g, rng);
        }
        Ok(g)
    }

    /// Adjacency the trajectory module uses for a graph embedding, with
    /// ablations applied.
    pub fn step_adjacency(&self, g: &StgEmbedding) -> StgAdjacency {
        let mut tape = Tape::new();
        let vars = Self::embedding_to_tape(&mut tape, g);
        self.adjacency_vars(&mut tape, &vars).hard
    }

    /// One trajectory step: `x_hist` is `n×t×2` and `g_t` the step-`t` graph.
    pub fn trajectory_step<R: Rng + ?Sized>(
        &self,
        x_hist: ArrayView3<f64>,
        g_t: &StgEmbedding,
        rng: &mut R,
        deterministic: bool,
    ) -> Result<TrajectoryStep> {
        let (n, step, _) = x_hist.dim();
        if g_t.step != step {
            return Err(Error::Shape(format!("graph is for step {}, positions cover {step} steps", g_t.step)));
        }
        if g_t.agents() != n {
            return Err(Error::Shape(format!("graph has {} agents, positions {n}", g_t.agents())));
        }
        let adjacency = self.step_adjacency(g_t);
        self.trajectory_step_with(x_hist, &adjacency, rng, deterministic)
    }

    /// Trajectory step under an explicit adjacency.
    pub fn trajectory_step_with<R: Rng + ?Sized>(
        &self,
        x_hist: ArrayView3<f64>,
        adjacency: &StgAdjacency,
        rng: &mut R,
        deterministic: bool,
    ) -> Result<TrajectoryStep> {
        let (n, step, dims) = x_hist.dim();
        if step == 0 || dims != 2 {
            return Err(Error::Shape(format!("trajectory step needs n×t×2 with t ≥ 1, got {:?}", x_hist.dim())));
        }
        self.check_step(step)?;
        if adjacency.step != step || adjacency.agents != n {
            return Err(Error::Shape(format!(
                "adjacency is {}×{} for step {}, expected {n}×{} for step {step}",
                adjacency.agents,
                adjacency.cols(),
                adjacency.step,
                n * step
            )));
        }
        let mut tape = Tape::new();
        let adj = self.fixed_adjacency_vars(&mut tape, adjacency);
        let mean_var = self.trajectory_mean_vars(&mut tape, x_hist, &adj);
        let mean = tape.value(mean_var).clone();
        let latent = if deterministic {
            mean.clone()
        } else {
            &mean + &standard_normal(n, 2, rng)
        };
        Ok(TrajectoryStep {
            x_next: self.output_map(&latent),
            mean,
            adjacency: adjacency.clone(),
        })
    }

    /// `G^0 ~ N(0, I)` with no sources; zeros when deterministic.
    pub fn init_g0<R: Rng + ?Sized>(&self, agents: usize, rng: &mut R, deterministic: bool) -> StgEmbedding {
        init_g0(agents, self.config.embed_dim, rng, deterministic)
    }

    /// Stacks `n×2` per-step positions along a new time axis.
    pub fn stack_positions(steps: &[Mat]) -> ndarray::Array3<f64> {
        let views: Vec<_> = steps.iter().map(|m| m.view().insert_axis(Axis(1))).collect();
        ndarray::concatenate(Axis(1), &views).expect("steps agree on n")
    }
}

pub fn init_g0<R: Rng + ?Sized>(agents: usize, dim: usize, rng: &mut R, deterministic: bool) -> StgEmbedding {
    let gu = if deterministic {
        Array2::zeros((agents, dim))
    } else {
        standard_normal(agents, dim, rng)
    };
    StgEmbedding {
        step: 0,
        gu,
        gv: Array2::zeros((0, dim)),
        provenance: Provenance::Prior,
    }
}

fn add_noise<R: Rng + ?Sized>(g: &mut StgEmbedding, rng: &mut R) {
    let (n, d) = g.gu.dim();
    g.gu += &standard_normal(n, d, rng);
    let (r, c) = g.gv.dim();
    g.gv += &standard_normal(r, c, rng);
}

fn scores_to_hard(scores: &Mat) -> Mat {
    scores.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

/// Attention with an explicit mask; exposed for oracle tests.
pub fn masked_attention(
    tape: &mut Tape,
    store: &ParamStore,
    params: &crate::nn::AttentionParams,
    q_src: Var,
    kv_src: Var,
    mask: &AttentionMask,
    denominator: f64,
) -> Var {
    attention(tape, store, params, q_src, kv_src, Some(mask), denominator)
}
