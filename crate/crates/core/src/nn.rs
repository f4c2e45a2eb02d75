//! Differentiable building blocks: linear maps, multi-head attention with an
//! optional socio-temporal mask, and the post-norm decoder block.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::params::{Init, ParamGroup, ParamId, ParamStore, Registry};

#[derive(Debug, Clone, Copy)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearParams {
    pub fn declare(reg: &mut Registry, group: ParamGroup, name: &str, input: usize, output: usize) -> Self {
        Self::declare_with(reg, group, name, input, output, Init::Xavier)
    }

    pub fn declare_with(reg: &mut Registry, group: ParamGroup, name: &str, input: usize, output: usize, init: Init) -> Self {
        Self {
            weight: reg.declare(group, format!("{name}.weight"), (input, output), init),
            bias: reg.declare(group, format!("{name}.bias"), (1, output), Init::Zeros),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let xw = tape.matmul(x, w);
        tape.add_row(xw, b)
    }
}

/// Query/key/value projections split into `heads` equal column blocks,
/// followed by an output projection.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: LinearParams,
    pub output: LinearParams,
    pub heads: usize,
    pub width: usize,
}

impl AttentionParams {
    pub fn declare(reg: &mut Registry, group: ParamGroup, name: &str, width: usize, heads: usize) -> Self {
        assert!(heads > 0 && width.is_multiple_of(heads), "width {width} must split into {heads} heads");
        Self {
            query: LinearParams::declare(reg, group, &format!("{name}.wq"), width, width),
            key: LinearParams::declare(reg, group, &format!("{name}.wk"), width, width),
            value: LinearParams::declare(reg, group, &format!("{name}.wv"), width, width),
            output: LinearParams::declare(reg, group, &format!("{name}.wo"), width, width),
            heads,
            width,
        }
    }

    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn declare(reg: &mut Registry, group: ParamGroup, name: &str, width: usize) -> Self {
        Self {
            gain: reg.declare(group, format!("{name}.gain"), (1, width), Init::Ones),
            bias: reg.declare(group, format!("{name}.bias"), (1, width), Init::Zeros),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, eps: f64) -> Var {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, eps)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderBlockParams {
    pub attention: AttentionParams,
    pub norm_attn: LayerNormParams,
    pub ff_in: LinearParams,
    pub ff_out: LinearParams,
    pub norm_out: LayerNormParams,
}

impl DecoderBlockParams {
    pub fn declare(reg: &mut Registry, group: ParamGroup, name: &str, width: usize, heads: usize, ff_width: usize) -> Self {
        Self {
            attention: AttentionParams::declare(reg, group, &format!("{name}.attn"), width, heads),
            norm_attn: LayerNormParams::declare(reg, group, &format!("{name}.ln1"), width),
            ff_in: LinearParams::declare(reg, group, &format!("{name}.ff1"), width, ff_width),
            ff_out: LinearParams::declare(reg, group, &format!("{name}.ff2"), ff_width, width),
            norm_out: LayerNormParams::declare(reg, group, &format!("{name}.ln2"), width),
        }
    }
}

/// Denominator applied to attention logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// `√(n·t)`, the number of agent-step keys.
    AgentSteps,
    /// `√(n·Σ_{s=1..t} s)`, the cumulative form used by the graph modules.
    CumulativeSteps,
    /// `√d_k`, the conventional per-head width.
    HeadWidth,
}

impl ScaleMode {
    pub fn denominator(self, agents: usize, step: usize, head_width: usize) -> f64 {
        let raw = match self {
            ScaleMode::AgentSteps => (agents * step) as f64,
            ScaleMode::CumulativeSteps => (agents * step * (step + 1) / 2) as f64,
            ScaleMode::HeadWidth => head_width as f64,
        };
        raw.max(1.0).sqrt()
    }
}

/// Mask applied to attention logits. Entries `≤ 0` are excluded from the
/// softmax; rows with no positive entry fall back to uniform weights over
/// `fallback[row]`.
#[derive(Debug, Clone)]
pub struct AttentionMask {
    pub mask: Var,
    pub fallback: Vec<Vec<usize>>,
}

/// Multi-head scaled dot-product attention of `q_src` rows over `kv_src`
/// rows, heads concatenated and projected.
pub fn attention(
    tape: &mut Tape,
    store: &ParamStore,
    params: &AttentionParams,
    q_src: Var,
    kv_src: Var,
    mask: Option<&AttentionMask>,
    denominator: f64,
) -> Var {
    let q = params.query.forward(tape, store, q_src);
    let k = params.key.forward(tape, store, kv_src);
    let v = params.value.forward(tape, store, kv_src);
    let hw = params.head_width();
    let mut heads = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let qh = tape.slice_cols(q, h * hw, hw);
        let kh = tape.slice_cols(k, h * hw, hw);
        let vh = tape.slice_cols(v, h * hw, hw);
        let raw = tape.matmul_t(qh, kh);
        let logits = tape.scale(raw, 1.0 / denominator);
        let weights = match mask {
            Some(m) => tape.masked_softmax(logits, Some(m.mask), &m.fallback),
            None => tape.masked_softmax(logits, None, &[]),
        };
        heads.push(tape.matmul(weights, vh));
    }
    let joined = tape.concat_cols(&heads);
    params.output.forward(tape, store, joined)
}

/// Columns of agent `agent`'s own past positions in the time-major layout.
pub fn own_history(agent: usize, agents: usize, step: usize) -> Vec<usize> {
    (0..step).map(|tau| tau * agents + agent).collect()
}

/// Socio-temporal attention: `n` destination queries over `n·t` source
/// keys, masked by the adjacency. Rows without any edge attend uniformly to
/// the destination agent's own history.
#[allow(clippy::too_many_arguments)]
pub fn stg_attention(
    tape: &mut Tape,
    store: &ParamStore,
    params: &AttentionParams,
    q_src: Var,
    kv_src: Var,
    adjacency: Var,
    step: usize,
    scale: ScaleMode,
) -> Var {
    let agents = tape.shape(q_src).0;
    assert_eq!(tape.shape(kv_src).0, agents * step, "kv rows must be n·t");
    assert_eq!(tape.shape(adjacency), (agents, agents * step), "adjacency must be n×(n·t)");
    let mask = AttentionMask {
        mask: adjacency,
        fallback: (0..agents).map(|i| own_history(i, agents, step)).collect(),
    };
    let denominator = scale.denominator(agents, step, params.head_width());
    attention(tape, store, params, q_src, kv_src, Some(&mask), denominator)
}

/// `a = LayerNorm(u + FF(u))` with `u = LayerNorm(attn_out)` and
/// `FF = Linear ∘ ReLU ∘ Linear`.
pub fn decoder_block(tape: &mut Tape, store: &ParamStore, params: &DecoderBlockParams, attn_out: Var, eps: f64) -> Var {
    let u = params.norm_attn.forward(tape, store, attn_out, eps);
    let hidden = params.ff_in.forward(tape, store, u);
    let hidden = tape.relu(hidden);
    let ff = params.ff_out.forward(tape, store, hidden);
    let sum = tape.add(u, ff);
    params.norm_out.forward(tape, store, sum, eps)
}
