//! Teacher-forced window loss, AdamW with cosine annealing, and the
//! training loop.

use ndarray::{s, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::TrajectoryWindow;
use crate::error::{Error, Result};
use crate::model::{EmbeddingVars, Stgformer};
use crate::params::{Gradients, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the sparsity penalty.
    pub zeta: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Per-step cap on the KL term.
    pub kl_clip: f64,
    pub kl_clip_mode: KlClipMode,
    /// Global gradient-norm cap; non-positive disables clipping.
    pub grad_clip: f64,
    pub epochs: usize,
    /// Windows per optimizer step.
    pub batch_size: usize,
    /// Monte-Carlo samples of the graph per window.
    pub mc_samples: usize,
    pub shuffle: bool,
    /// Set from the run seed, not from config files.
    #[serde(skip)]
    pub seed: u64,
}

/// Gradient of a KL term above the cap. Both report the capped value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlClipMode {
    /// `min(kl, cap)`; no gradient once clipped.
    Clamp,
    /// `kl · cap / kl`, the factor held constant; keeps the gradient direction.
    #[default]
    Rescale,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            zeta: 1e-3,
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            kl_clip: 2.0,
            kl_clip_mode: KlClipMode::Rescale,
            grad_clip: 5.0,
            epochs: 100,
            batch_size: 1,
            mc_samples: 1,
            shuffle: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut p = Vec::new();
        let nonneg = [("zeta", self.zeta), ("weight_decay", self.weight_decay), ("kl_clip", self.kl_clip)];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                p.push(format!("train.{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            p.push(format!("train.learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                p.push(format!("train.{name} must lie in [0, 1), got {v}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            p.push("train.adam_eps must be positive".into());
        }
        if self.epochs == 0 {
            p.push("train.epochs must be positive".into());
        }
        if self.batch_size == 0 {
            p.push("train.batch_size must be positive".into());
        }
        if self.mc_samples == 0 {
            p.push("train.mc_samples must be positive".into());
        }
        p
    }
}

/// Loss terms of one window, averaged over Monte-Carlo samples.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_mse: f64,
    /// Sum of per-step clipped KL terms.
    pub l_kl: f64,
    /// Sum of per-step KL terms before clipping.
    pub l_kl_raw: f64,
    pub l_sparsity: f64,
    pub total: f64,
    /// Per-step traces, indexed by step `t`.
    pub mse_steps: Vec<f64>,
    pub kl_steps: Vec<f64>,
    pub kl_raw_steps: Vec<f64>,
    pub sparsity_steps: Vec<f64>,
    /// Mean hard edge density over steps `t ≥ 1`.
    pub edge_density: f64,
}

/// Differentiable roots of the separate loss terms on a tape. Terms that
/// do not apply (for example KL under `no_g`) are `None`.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub mse: Var,
    pub kl: Option<Var>,
    /// Unweighted soft edge mass.
    pub sparsity: Option<Var>,
}

struct TapeLoss {
    vars: LossVars,
    breakdown: LossBreakdown,
}

fn effective_zeta(model: &Stgformer, cfg: &TrainConfig) -> f64 {
    if model.ablation().zeta_zero {
        0.0
    } else {
        cfg.zeta
    }
}

fn check_finite(value: f64, term: &str, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            term: term.to_string(),
            step,
        })
    }
}

/// One teacher-forced pass over `x` (`n×T×2`) recorded on `tape`.
fn single_pass<R: Rng + ?Sized>(model: &Stgformer, tape: &mut Tape, x: &Array3<f64>, cfg: &TrainConfig, rng: &mut R) -> Result<TapeLoss> {
    let (n, steps, dims) = x.dim();
    if n == 0 || steps < 2 || dims != 2 {
        return Err(Error::Shape(format!("training window must be n×T×2 with n ≥ 1, T ≥ 2, got {:?}", x.dim())));
    }
    if steps > model.config().max_step + 1 {
        return Err(Error::HorizonExceeded {
            step: steps - 1,
            max: model.config().max_step,
        });
    }
    let ablation = model.ablation();
    let zeta = effective_zeta(model, cfg);
    let d = model.config().embed_dim;
    let mut b = LossBreakdown {
        mse_steps: vec![0.0; steps],
        kl_steps: vec![0.0; steps],
        kl_raw_steps: vec![0.0; steps],
        sparsity_steps: vec![0.0; steps],
        ..LossBreakdown::default()
    };
    let mut terms: Vec<Var> = Vec::new();
    let mut mse_terms: Vec<Var> = Vec::new();
    let mut kl_terms: Vec<Var> = Vec::new();
    let mut sparsity_terms: Vec<Var> = Vec::new();
    let mut history: Vec<EmbeddingVars> = Vec::new();
    let mut density = 0.0;

    for t in 0..steps {
        let graph = if ablation.no_g {
            None
        } else if ablation.stationary_g && t >= 2 {
            Some(Stgformer::tile_stationary(tape, &history[1], t))
        } else {
            let posterior = model.posterior_mean_vars(tape, x.slice(s![.., ..=t, ..]), &history);
            let prior = if t == 0 {
                EmbeddingVars {
                    step: 0,
                    gu: tape.constant(ndarray::Array2::zeros((n, d))),
                    gv: None,
                }
            } else {
                model.prior_mean_vars(tape, &history)
            };
            let du = tape.sub(prior.gu, posterior.gu);
            let mut kl = tape.sum_squares(du);
            if let (Some(pv), Some(qv)) = (prior.gv, posterior.gv) {
                let dv = tape.sub(pv, qv);
                let kv = tape.sum_squares(dv);
                kl = tape.add(kl, kv);
            }
            let raw = tape.scalar_value(kl);
            check_finite(raw, "l_kl", t)?;
            let clipped = match cfg.kl_clip_mode {
                KlClipMode::Rescale if raw > cfg.kl_clip => tape.scale(kl, cfg.kl_clip / raw),
                _ => tape.clamp_max(kl, cfg.kl_clip),
            };
            b.kl_raw_steps[t] = raw;
            b.kl_steps[t] = tape.scalar_value(clipped);
            terms.push(clipped);
            kl_terms.push(clipped);
            let sample = Stgformer::sample_vars(tape, &posterior, rng, false);
            history.push(sample);
            Some(sample)
        };
        if t == 0 {
            continue;
        }
        let adjacency = match &graph {
            Some(g) => model.adjacency_vars(tape, g),
            None => model.fixed_adjacency_vars(tape, &crate::stg::StgAdjacency::ones(t, n)),
        };
        density += adjacency.hard.density();
        if let Some(soft) = adjacency.soft {
            let mass = tape.sum(soft);
            let value = tape.scalar_value(mass);
            check_finite(value, "l_sparsity", t)?;
            b.sparsity_steps[t] = value;
            sparsity_terms.push(mass);
            if zeta > 0.0 {
                let weighted = tape.scale(mass, zeta);
                terms.push(weighted);
            }
        }
        let mean = model.trajectory_mean_vars(tape, x.slice(s![.., ..t, ..]), &adjacency);
        let target = tape.constant(x.slice(s![.., t, ..]).to_owned());
        let diff = tape.sub(mean, target);
        let mse = tape.sum_squares(diff);
        let value = tape.scalar_value(mse);
        check_finite(value, "l_mse", t)?;
        b.mse_steps[t] = value;
        terms.push(mse);
        mse_terms.push(mse);
    }

    b.l_mse = b.mse_steps.iter().sum();
    b.l_kl = b.kl_steps.iter().sum();
    b.l_kl_raw = b.kl_raw_steps.iter().sum();
    b.l_sparsity = b.sparsity_steps.iter().sum();
    b.total = b.l_mse + b.l_kl + zeta * b.l_sparsity;
    b.edge_density = density / (steps - 1) as f64;
    check_finite(b.total, "total", steps - 1)?;
    let total = tape.add_all(&terms);
    let vars = LossVars {
        total,
        mse: tape.add_all(&mse_terms),
        kl: (!kl_terms.is_empty()).then(|| tape.add_all(&kl_terms)),
        sparsity: (!sparsity_terms.is_empty()).then(|| tape.add_all(&sparsity_terms)),
    };
    Ok(TapeLoss { vars, breakdown: b })
}

fn average(parts: &[LossBreakdown]) -> LossBreakdown {
    let k = parts.len() as f64;
    let mean_vec = |f: fn(&LossBreakdown) -> &Vec<f64>| -> Vec<f64> {
        let len = f(&parts[0]).len();
        (0..len).map(|i| parts.iter().map(|p| f(p)[i]).sum::<f64>() / k).collect()
    };
    LossBreakdown {
        l_mse: parts.iter().map(|p| p.l_mse).sum::<f64>() / k,
        l_kl: parts.iter().map(|p| p.l_kl).sum::<f64>() / k,
        l_kl_raw: parts.iter().map(|p| p.l_kl_raw).sum::<f64>() / k,
        l_sparsity: parts.iter().map(|p| p.l_sparsity).sum::<f64>() / k,
        total: parts.iter().map(|p| p.total).sum::<f64>() / k,
        mse_steps: mean_vec(|p| &p.mse_steps),
        kl_steps: mean_vec(|p| &p.kl_steps),
        kl_raw_steps: mean_vec(|p| &p.kl_raw_steps),
        sparsity_steps: mean_vec(|p| &p.sparsity_steps),
        edge_density: parts.iter().map(|p| p.edge_density).sum::<f64>() / k,
    }
}

/// Records the loss of positions `x` (`n×T×2`) on a tape and returns the
/// scalar root with its breakdown.
pub fn record_loss<R: Rng + ?Sized>(
    model: &Stgformer,
    tape: &mut Tape,
    x: &Array3<f64>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(Var, LossBreakdown)> {
    let mut roots = Vec::with_capacity(cfg.mc_samples);
    let mut parts = Vec::with_capacity(cfg.mc_samples);
    for _ in 0..cfg.mc_samples.max(1) {
        let pass = single_pass(model, tape, x, cfg, rng)?;
        roots.push(pass.vars.total);
        parts.push(pass.breakdown);
    }
    let sum = tape.add_all(&roots);
    let root = tape.scale(sum, 1.0 / roots.len() as f64);
    Ok((root, average(&parts)))
}

/// Records one pass (ignoring `mc_samples`) and returns each term's root.
pub fn record_loss_terms<R: Rng + ?Sized>(
    model: &Stgformer,
    tape: &mut Tape,
    x: &Array3<f64>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(LossVars, LossBreakdown)> {
    let pass = single_pass(model, tape, x, cfg, rng)?;
    Ok((pass.vars, pass.breakdown))
}

/// Loss of positions `x` (`n×T×2`, normalized).
pub fn sequence_loss<R: Rng + ?Sized>(model: &Stgformer, x: &Array3<f64>, cfg: &TrainConfig, rng: &mut R) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    Ok(record_loss(model, &mut tape, x, cfg, rng)?.1)
}

/// Loss and parameter gradients of positions `x`.
pub fn sequence_gradients<R: Rng + ?Sized>(
    model: &Stgformer,
    x: &Array3<f64>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(LossBreakdown, Gradients)> {
    let mut tape = Tape::new();
    let (root, breakdown) = record_loss(model, &mut tape, x, cfg, rng)?;
    let grads = tape.backward(model.params(), root)?;
    Ok((breakdown, grads))
}

/// Teacher-forced loss over all steps of a window.
pub fn window_loss<R: Rng + ?Sized>(model: &Stgformer, window: &TrajectoryWindow, cfg: &TrainConfig, rng: &mut R) -> Result<LossBreakdown> {
    sequence_loss(model, &window.full(), cfg, rng)
}

pub fn window_gradients<R: Rng + ?Sized>(
    model: &Stgformer,
    window: &TrajectoryWindow,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(LossBreakdown, Gradients)> {
    sequence_gradients(model, &window.full(), cfg, rng)
}

/// `lr·½(1 + cos(π·step/total))`, reaching zero at `step = total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let progress = (step.min(total)) as f64 / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    first: Gradients,
    second: Gradients,
    steps: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(params: &ParamStore, cfg: &TrainConfig) -> Self {
        Self {
            first: Gradients::zeros_like(params),
            second: Gradients::zeros_like(params),
            steps: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps as i32);
        let c2 = 1.0 - self.beta2.powi(self.steps as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let entry = &params.entries()[id.index()];
            if !entry.trainable {
                continue;
            }
            let decay = entry.decay;
            let g = grads.get(id);
            let m = self.first.get_mut(id);
            m.zip_mut_with(g, |m, g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            let v = self.second.get_mut(id);
            v.zip_mut_with(g, |v, g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let m = self.first.get(id);
            let v = self.second.get(id);
            let p = params.value_mut(id);
            if decay {
                p.mapv_inplace(|x| x * (1.0 - lr * self.weight_decay));
            }
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, m, v| {
                *p -= lr * (m / c1) / ((v / c2).sqrt() + self.eps);
            });
        }
    }
}

/// Aggregate metrics of one epoch, averaged over windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_mse: f64,
    pub l_kl: f64,
    pub l_kl_raw: f64,
    pub l_sparsity: f64,
    pub total: f64,
    pub edge_density: f64,
}

/// Sub-seed for window `index` of `epoch`.
pub fn window_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng.random()
}

/// Optimizes `model` on normalized `n×T×2` sequences. `on_epoch` sees the
/// metrics of each finished epoch. On divergence the model keeps the last
/// finite parameters and the divergence error is returned.
pub fn train_sequences(
    model: &mut Stgformer,
    data: &[Array3<f64>],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    let mut problems = cfg.validate();
    problems.extend(model.config().validate());
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset("no training windows".into()));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batches_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut optimizer = AdamW::new(model.params(), cfg);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut order_rng);
        }
        let mut parts = Vec::with_capacity(data.len());
        for batch in order.chunks(cfg.batch_size) {
            let snapshot: &Stgformer = model;
            let results: Vec<Result<(LossBreakdown, Gradients)>> = batch
                .par_iter()
                .map(|&idx| {
                    let mut rng = ChaCha8Rng::seed_from_u64(window_seed(cfg.seed, epoch, idx));
                    sequence_gradients(snapshot, &data[idx], cfg, &mut rng)
                })
                .collect();
            let mut grads = Gradients::zeros_like(model.params());
            for r in results {
                let (breakdown, g) = r?;
                grads.accumulate(&g);
                parts.push(breakdown);
            }
            grads.scale(1.0 / batch.len() as f64);
            if !grads.all_finite() {
                return Err(Error::Divergence {
                    term: "gradient".into(),
                    step,
                });
            }
            if cfg.grad_clip > 0.0 {
                grads.clip_global_norm(cfg.grad_clip);
            }
            let before = model.params().clone();
            let lr = cosine_lr(cfg.learning_rate, step, total_steps);
            optimizer.step(model.params_mut(), &grads, lr);
            if !model.params().all_finite() {
                *model.params_mut() = before;
                return Err(Error::Divergence {
                    term: "parameters".into(),
                    step,
                });
            }
            step += 1;
        }
        let k = parts.len() as f64;
        let metrics = EpochMetrics {
            epoch,
            l_mse: parts.iter().map(|p| p.l_mse).sum::<f64>() / k,
            l_kl: parts.iter().map(|p| p.l_kl).sum::<f64>() / k,
            l_kl_raw: parts.iter().map(|p| p.l_kl_raw).sum::<f64>() / k,
            l_sparsity: parts.iter().map(|p| p.l_sparsity).sum::<f64>() / k,
            total: parts.iter().map(|p| p.total).sum::<f64>() / k,
            edge_density: parts.iter().map(|p| p.edge_density).sum::<f64>() / k,
        };
        log::debug!("epoch {epoch}: total {:.6} mse {:.6} kl {:.6}", metrics.total, metrics.l_mse, metrics.l_kl);
        on_epoch(&metrics)?;
        history.push(metrics);
    }
    Ok(history)
}

pub fn train(
    model: &mut Stgformer,
    windows: &[TrajectoryWindow],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    let data: Vec<Array3<f64>> = windows.iter().map(TrajectoryWindow::full).collect();
    train_sequences(model, &data, cfg, on_epoch)
}
