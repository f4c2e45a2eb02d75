//! Acceptance criteria, run in order with one PASS/FAIL line each.
//!
//! `ACCEPTANCE_ONLY=3,7` restricts the run to the listed criteria.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::{concatenate, s, Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use stgformer::analysis::{edge_sites, flip_distance_histogram, flip_events, spearman, EdgeEvent, FlipKind, Motion, PairAggregation};
use stgformer::autodiff::Tape;
use stgformer::commands::{cmd_predict, cmd_train};
use stgformer::config::RunConfig;
use stgformer::data::{make_windows, TrajectoryWindow};
use stgformer::eval::{ade_fde, ade_fde_subset, BestOf};
use stgformer::infer::{predict_window, PredictOptions};
use stgformer::model::{AdjacencyGradient, ModelConfig, Stgformer};
use stgformer::nn::{stg_attention, AttentionParams, ScaleMode};
use stgformer::params::{ParamGroup, ParamStore, Registry};
use stgformer::stg::StgAdjacency;
use stgformer::synth::{synth_scenario, ScenarioKind, ScenarioSpec};
use stgformer::train::{record_loss_terms, sequence_loss, train, TrainConfig};

type Outcome = Result<String, String>;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| normal(rng))
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, elapsed: Duration) -> Result<(), String> {
    if elapsed <= limit {
        Ok(())
    } else {
        Err(format!("took {elapsed:.1?}, limit {limit:?}"))
    }
}

// ---------------------------------------------------------------- 1

/// Dense masked attention computed directly from parameter values.
fn attention_oracle(
    store: &ParamStore,
    p: &AttentionParams,
    q_src: &Array2<f64>,
    kv_src: &Array2<f64>,
    mask: &Array2<f64>,
    denominator: f64,
) -> Array2<f64> {
    let lin = |x: &Array2<f64>, l: &stgformer::nn::LinearParams| x.dot(store.value(l.weight)) + store.value(l.bias);
    let (q, k, v) = (lin(q_src, &p.query), lin(kv_src, &p.key), lin(kv_src, &p.value));
    let n = q.nrows();
    let cols = k.nrows();
    let step = cols / n;
    let hw = p.head_width();
    let mut joined = Array2::zeros((n, p.width));
    for h in 0..p.heads {
        let r = h * hw..(h + 1) * hw;
        for i in 0..n {
            let logits: Vec<f64> = (0..cols)
                .map(|c| {
                    if mask[[i, c]] > 0.0 {
                        q.slice(s![i, r.clone()]).dot(&k.slice(s![c, r.clone()])) / denominator
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let weights: Vec<f64> = if logits.iter().all(|l| *l == f64::NEG_INFINITY) {
                (0..cols).map(|c| if c % n == i { 1.0 / step as f64 } else { 0.0 }).collect()
            } else {
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let z: f64 = e.iter().sum();
                e.iter().map(|x| x / z).collect()
            };
            for c in 0..cols {
                for (o, col) in r.clone().enumerate() {
                    joined[[i, h * hw + o]] += weights[c] * v[[c, col]];
                }
            }
        }
    }
    lin(&joined, &p.output)
}

fn criterion_attention() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_dense = 0.0f64;
    let mut worst_masked = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..=5);
        let t = rng.random_range(1..=6);
        let heads = rng.random_range(1..=3);
        let width = heads * rng.random_range(1..=4);
        let mut reg = Registry::new();
        let params = AttentionParams::declare(&mut reg, ParamGroup::Trajectory, "attn", width, heads);
        let mut store = reg.initialize(&mut rng);
        for e in store.entries_mut() {
            e.value.mapv_inplace(|v| v + 0.3 * normal(&mut rng));
        }
        let q_src = random_matrix(n, width, &mut rng);
        let kv_src = random_matrix(n * t, width, &mut rng);
        let denominator = ((n * t) as f64).sqrt();
        let ones = Array2::ones((n, n * t));
        let bits = Array2::from_shape_fn((n, n * t), |_| if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 });
        for (mask, worst) in [(&ones, &mut worst_dense), (&bits, &mut worst_masked)] {
            let mut tape = Tape::new();
            let q = tape.constant(q_src.clone());
            let kv = tape.constant(kv_src.clone());
            let adj = tape.constant(mask.clone());
            let out = stg_attention(&mut tape, &store, &params, q, kv, adj, t, ScaleMode::AgentSteps);
            let oracle = attention_oracle(&store, &params, &q_src, &kv_src, mask, denominator);
            let err = (tape.value(out) - &oracle).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            *worst = worst.max(err);
        }
    }
    let elapsed = start.elapsed();
    within(Duration::from_secs(10), elapsed)?;
    check(
        worst_dense <= 1e-9 && worst_masked <= 1e-9,
        format!("100 shapes, max error dense {worst_dense:.2e}, masked {worst_masked:.2e}, {elapsed:.1?}"),
    )
}

// ---------------------------------------------------------------- 2

fn tiny_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 4,
        width: 8,
        heads: 2,
        ff_width: 16,
        max_step: 4,
        adjacency_gradient: AdjacencyGradient::Relaxed,
        ..ModelConfig::default()
    }
}

fn perturbed_model(config: ModelConfig, seed: u64, scale: f64) -> Stgformer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Stgformer::new(config, &mut rng).unwrap();
    for e in model.params_mut().entries_mut() {
        if e.trainable {
            e.value.mapv_inplace(|v| v + scale * normal(&mut rng));
        }
    }
    model
}

/// `[mse, kl, sparsity, total]` with a fixed noise stream.
fn loss_terms(model: &Stgformer, x: &Array3<f64>, cfg: &TrainConfig) -> [f64; 4] {
    let mut tape = Tape::new();
    let (vars, _) = record_loss_terms(model, &mut tape, x, cfg, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
    [
        tape.scalar_value(vars.mse),
        vars.kl.map_or(0.0, |v| tape.scalar_value(v)),
        vars.sparsity.map_or(0.0, |v| tape.scalar_value(v)),
        tape.scalar_value(vars.total),
    ]
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let mut model = perturbed_model(tiny_config(), 5, 0.3);
    let x = random_matrix(2, 10, &mut ChaCha8Rng::seed_from_u64(6)).into_shape_with_order((2, 5, 2)).unwrap();
    // The cap is raised so that no step sits on the non-differentiable clip.
    let cfg = TrainConfig {
        zeta: 0.1,
        kl_clip: 1e3,
        ..TrainConfig::default()
    };
    let mut tape = Tape::new();
    let (vars, breakdown) = record_loss_terms(&model, &mut tape, &x, &cfg, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
    if let Some(step) = breakdown.kl_raw_steps.iter().position(|k| *k >= cfg.kl_clip) {
        return Err(format!("test point clips the KL term at step {step}; gradients are not comparable there"));
    }
    let roots = [Some(vars.mse), vars.kl, vars.sparsity, Some(vars.total)];
    let analytic: Vec<_> = roots
        .iter()
        .map(|r| r.map(|r| tape.backward(model.params(), r).unwrap()))
        .collect();

    let eps = 1e-4;
    let ids: Vec<_> = model.params().ids().collect();
    // Per term, per group: squared norms of (analytic − numeric), analytic and numeric.
    let mut acc = [[[0.0f64; 3]; 3]; 4];
    for id in ids {
        let entry = &model.params().entries()[id.index()];
        if !entry.trainable {
            continue;
        }
        let g = ParamGroup::ALL.iter().position(|x| *x == entry.group).unwrap();
        let shape = entry.value.dim();
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let orig = model.params().value(id)[[r, c]];
                model.params_mut().value_mut(id)[[r, c]] = orig + eps;
                let plus = loss_terms(&model, &x, &cfg);
                model.params_mut().value_mut(id)[[r, c]] = orig - eps;
                let minus = loss_terms(&model, &x, &cfg);
                model.params_mut().value_mut(id)[[r, c]] = orig;
                for term in 0..4 {
                    let numeric = (plus[term] - minus[term]) / (2.0 * eps);
                    let a = analytic[term].as_ref().map_or(0.0, |gr| gr.get(id)[[r, c]]);
                    acc[term][g][0] += (a - numeric).powi(2);
                    acc[term][g][1] += a * a;
                    acc[term][g][2] += numeric * numeric;
                }
            }
        }
    }
    let names = ["l_mse", "l_kl", "l_sparsity", "total"];
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    let mut nonzero_groups = [false; 3];
    for term in 0..4 {
        let mut errs = Vec::new();
        for g in 0..3 {
            let [diff, a, num] = acc[term][g];
            let scale = a.sqrt().max(num.sqrt());
            let rel = if scale < 1e-12 { 0.0 } else { diff.sqrt() / scale };
            if term == 3 && scale > 1e-8 {
                nonzero_groups[g] = true;
            }
            worst = worst.max(rel);
            errs.push(format!("{}={rel:.1e}", ParamGroup::ALL[g].prefix()));
        }
        parts.push(format!("{} [{}]", names[term], errs.join(" ")));
    }
    let elapsed = start.elapsed();
    within(Duration::from_secs(60), elapsed)?;
    if !nonzero_groups.iter().all(|x| *x) {
        return Err(format!("some parameter group has no total-loss gradient: {}", parts.join(", ")));
    }
    check(worst < 1e-3, format!("max relative error {worst:.2e}; {}; {elapsed:.1?}", parts.join(", ")))
}

// ---------------------------------------------------------------- 3

fn criterion_masking() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let config = ModelConfig {
        embed_dim: 4,
        width: 16,
        heads: 2,
        ff_width: 32,
        ..ModelConfig::default()
    };
    let model = perturbed_model(config, 22, 0.1);
    let mut trials = 0;
    let mut changed_when_visible = 0;
    for _ in 0..50 {
        let n = rng.random_range(2..=4);
        let t = rng.random_range(1..=8);
        let j = rng.random_range(0..n);
        let x = random_matrix(n, t * 2, &mut rng).into_shape_with_order((n, t, 2)).unwrap();
        let mut adj = StgAdjacency::zeros(t, n);
        for i in 0..n {
            for c in 0..n * t {
                adj.set(i, c, rng.random::<f64>() < 0.6);
            }
        }
        let mut hidden = adj.clone();
        for i in 0..n {
            for tau in 0..t {
                hidden.set(i, tau * n + j, false);
            }
        }
        let mut perturbed = x.clone();
        for tau in 0..t {
            for d in 0..2 {
                perturbed[[j, tau, d]] += 5.0 * normal(&mut rng);
            }
        }
        let det = &mut ChaCha8Rng::seed_from_u64(0);
        let a = model.trajectory_step_with(x.view(), &hidden, det, true).unwrap().mean;
        let b = model.trajectory_step_with(perturbed.view(), &hidden, det, true).unwrap().mean;
        for i in (0..n).filter(|i| *i != j) {
            trials += 1;
            let same = (0..2).all(|d| a[[i, d]].to_bits() == b[[i, d]].to_bits());
            if !same {
                return Err(format!("agent {i} moved when hidden agent {j} was perturbed (n={n}, t={t})"));
            }
        }
        let a = model.trajectory_step_with(x.view(), &adj, det, true).unwrap().mean;
        let b = model.trajectory_step_with(perturbed.view(), &adj, det, true).unwrap().mean;
        let visible = (0..n).filter(|i| *i != j && (0..t).any(|tau| adj.edge(*i, j, tau)));
        changed_when_visible += visible.filter(|i| a[[*i, 0]] != b[[*i, 0]]).count();
    }
    check(
        changed_when_visible > 0,
        format!("{trials} agent rows bitwise unchanged; {changed_when_visible} rows changed when the edges were kept"),
    )
}

// ---------------------------------------------------------------- 4

fn criterion_overfit() -> Outcome {
    let start = Instant::now();
    let scene = synth_scenario(&ScenarioSpec::new(ScenarioKind::Crossing, 2), 0).map_err(|e| e.to_string())?;
    let window = make_windows(&scene, 1).remove(0);
    let config = ModelConfig {
        embed_dim: 4,
        width: 32,
        heads: 2,
        ff_width: 64,
        ..ModelConfig::default()
    };
    let mut model = Stgformer::new(config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let cfg = TrainConfig {
        epochs: 2000,
        learning_rate: 3e-3,
        mc_samples: 4,
        seed: 0,
        ..TrainConfig::default()
    };
    let history = train(&mut model, std::slice::from_ref(&window), &cfg, |_| Ok(())).map_err(|e| e.to_string())?;
    let first = history[0].l_mse;
    let last = history.last().unwrap().l_mse;
    let opts = PredictOptions {
        k: 1,
        deterministic: true,
        ..PredictOptions::default()
    };
    let set = predict_window(&model, &window, &opts).map_err(|e| e.to_string())?;
    let gt = window.denormalize(&window.future);
    let (ade, fde) = ade_fde(set.samples.view(), gt.view(), BestOf::PerAgent).unwrap();
    let elapsed = start.elapsed();
    within(Duration::from_secs(300), elapsed)?;
    check(
        first / last >= 100.0 && ade < 0.05,
        format!("l_mse {first:.3e} -> {last:.3e} ({:.0}x), deterministic ADE {ade:.4} FDE {fde:.4}, {elapsed:.1?}", first / last),
    )
}

// ---------------------------------------------------------------- 5

fn criterion_sparsity() -> Outcome {
    let spec = ScenarioSpec::new(ScenarioKind::RandomWalk, 3);
    let windows: Vec<TrajectoryWindow> = (0..4).flat_map(|s| make_windows(&synth_scenario(&spec, s).unwrap(), 1)).collect();
    let config = ModelConfig {
        embed_dim: 4,
        width: 16,
        heads: 2,
        ff_width: 32,
        ..ModelConfig::default()
    };
    let mut rows = Vec::new();
    let mut ok = true;
    for seed in 0..5 {
        let mut density = [0.0; 2];
        for (slot, zeta) in [0.0, 10.0].into_iter().enumerate() {
            let mut model = Stgformer::new(config.clone(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let cfg = TrainConfig {
                zeta,
                epochs: 30,
                seed,
                ..TrainConfig::default()
            };
            let history = train(&mut model, &windows, &cfg, |_| Ok(())).map_err(|e| e.to_string())?;
            density[slot] = history.last().unwrap().edge_density;
        }
        ok &= density[1] < density[0];
        rows.push(format!("{:.3}<{:.3}", density[1], density[0]));
    }
    check(ok, format!("edge density zeta=10 vs zeta=0 per seed: {}", rows.join(" ")))
}

// ---------------------------------------------------------------- 6

fn gated_windows(seeds: std::ops::Range<u64>) -> Vec<TrajectoryWindow> {
    let spec = ScenarioSpec {
        speed: 0.3,
        ..ScenarioSpec::new(ScenarioKind::DistanceGated, 3)
    };
    seeds.flat_map(|s| make_windows(&synth_scenario(&spec, s).unwrap(), 1)).collect()
}

fn criterion_ablation() -> Outcome {
    let train_set = gated_windows(0..200);
    let test_set = gated_windows(1000..1016);
    let opts = PredictOptions {
        k: 1,
        deterministic: true,
        ..PredictOptions::default()
    };
    let mut wins = 0;
    let mut rows = Vec::new();
    let mut distances = Vec::new();
    let mut active = Vec::new();
    for seed in 0..5 {
        let mut ades = [0.0; 2];
        for (slot, no_g) in [false, true].into_iter().enumerate() {
            let mut config = ModelConfig {
                embed_dim: 4,
                width: 32,
                heads: 2,
                ff_width: 64,
                ..ModelConfig::default()
            };
            config.ablation.no_g = no_g;
            let mut model = Stgformer::new(config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let cfg = TrainConfig {
                zeta: 0.05,
                epochs: 10,
                learning_rate: 3e-3,
                seed,
                ..TrainConfig::default()
            };
            train(&mut model, &train_set, &cfg, |_| Ok(())).map_err(|e| e.to_string())?;
            let mut total = 0.0;
            for w in &test_set {
                let set = predict_window(&model, w, &opts).map_err(|e| e.to_string())?;
                let gt = w.denormalize(&w.future);
                total += ade_fde(set.samples.view(), gt.view(), BestOf::PerAgent).unwrap().0;
                if !no_g {
                    let observed = w.denormalize(&w.observed);
                    let positions = concatenate(Axis(1), &[observed.view(), set.samples.index_axis(Axis(0), 0)]).unwrap();
                    for g in &set.graphs[0] {
                        for site in edge_sites(&g.adjacency, positions.view(), false).unwrap() {
                            distances.push(site.distance);
                            active.push(if site.active { 1.0 } else { 0.0 });
                        }
                    }
                }
            }
            ades[slot] = total / test_set.len() as f64;
        }
        if ades[0] <= ades[1] {
            wins += 1;
        }
        rows.push(format!("{:.3}/{:.3}", ades[0], ades[1]));
    }
    let corr = spearman(&distances, &active).map_err(|e| e.to_string())?;
    check(
        wins >= 4 && corr.rho < 0.0 && corr.p_value < 0.05,
        format!(
            "full/no_g ADE per seed {} ({wins}/5 full ≤ no_g); spearman rho {:.4}, p {:.2e}, {} edge sites",
            rows.join(" "),
            corr.rho,
            corr.p_value,
            corr.n
        ),
    )
}

// ---------------------------------------------------------------- 7

/// Minimum over every assignment of samples to agents, restricted to
/// constant assignments in joint mode.
fn brute_force(samples: &Array4<f64>, gt: &Array3<f64>, joint: bool) -> (f64, f64) {
    let (k, n, h, _) = samples.dim();
    let err = |s: usize, i: usize, t: usize| {
        ((samples[[s, i, t, 0]] - gt[[i, t, 0]]).powi(2) + (samples[[s, i, t, 1]] - gt[[i, t, 1]]).powi(2)).sqrt()
    };
    let mut best = (f64::INFINITY, f64::INFINITY);
    for code in 0..k.pow(n as u32) {
        let pick: Vec<usize> = (0..n).map(|i| code / k.pow(i as u32) % k).collect();
        if joint && pick.iter().any(|p| *p != pick[0]) {
            continue;
        }
        let ade = (0..n).map(|i| (0..h).map(|t| err(pick[i], i, t)).sum::<f64>() / h as f64).sum::<f64>() / n as f64;
        let fde = (0..n).map(|i| err(pick[i], i, h - 1)).sum::<f64>() / n as f64;
        best = (best.0.min(ade), best.1.min(fde));
    }
    best
}

fn criterion_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (k, n, h) = (rng.random_range(1..=4), rng.random_range(1..=3), rng.random_range(1..=5));
        let samples = Array4::from_shape_fn((k, n, h, 2), |_| 3.0 * normal(&mut rng));
        let gt = Array3::from_shape_fn((n, h, 2), |_| 3.0 * normal(&mut rng));
        for (mode, joint) in [(BestOf::PerAgent, false), (BestOf::JointScene, true)] {
            let (a, f) = ade_fde(samples.view(), gt.view(), mode).unwrap();
            let (oa, of) = brute_force(&samples, &gt, joint);
            worst = worst.max((a - oa).abs()).max((f - of).abs());
        }
    }
    let mut monotone = true;
    for _ in 0..200 {
        let samples = Array4::from_shape_fn((20, 3, 12, 2), |_| normal(&mut rng));
        let gt = Array3::from_shape_fn((3, 12, 2), |_| normal(&mut rng));
        for mode in [BestOf::PerAgent, BestOf::JointScene] {
            let mut prev = (f64::INFINITY, f64::INFINITY);
            for keep in 1..=20 {
                let cur = ade_fde_subset(samples.view(), gt.view(), keep, mode).unwrap();
                monotone &= cur.0 <= prev.0 && cur.1 <= prev.1;
                prev = cur;
            }
        }
    }
    check(
        worst <= 1e-12 && monotone,
        format!("1000 instances, max deviation {worst:.1e}; nested best-of-K monotone: {monotone}"),
    )
}

// ---------------------------------------------------------------- 8

fn criterion_elbo() -> Outcome {
    let config = ModelConfig {
        embed_dim: 4,
        width: 16,
        heads: 2,
        ff_width: 32,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let x = random_matrix(3, 40, &mut rng).into_shape_with_order((3, 20, 2)).unwrap();
    let mut max_reported = 0.0f64;
    let mut max_raw = 0.0f64;
    for seed in 0..10 {
        let model = perturbed_model(config.clone(), seed, 1.0);
        let b = sequence_loss(&model, &x, &cfg, &mut rng).map_err(|e| e.to_string())?;
        max_reported = b.kl_steps.iter().cloned().fold(max_reported, f64::max);
        max_raw = b.kl_raw_steps.iter().cloned().fold(max_raw, f64::max);
        let identity = b.l_mse + b.l_kl + cfg.zeta * b.l_sparsity;
        if (b.total - identity).abs() > 1e-9 * identity.max(1.0) {
            return Err(format!("total {} differs from its terms {identity}", b.total));
        }
    }
    // Zero-initialized graph heads give identical prior and posterior means.
    let fresh = Stgformer::new(config, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
    let zero = sequence_loss(&fresh, &x, &cfg, &mut rng).map_err(|e| e.to_string())?;
    check(
        max_reported <= cfg.kl_clip && max_raw > cfg.kl_clip && zero.l_kl == 0.0 && zero.l_kl_raw == 0.0,
        format!(
            "max per-step KL reported {max_reported:.3} (raw up to {max_raw:.3}); coincident means give l_kl = {}",
            zero.l_kl
        ),
    )
}

// ---------------------------------------------------------------- 9

fn run_pipeline(dir: &std::path::Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let spec = ScenarioSpec::new(ScenarioKind::Crossing, 3);
    let scenes = dir.join("scenes");
    stgformer::commands::cmd_synth(&spec, 0, 2, &scenes.join("train")).map_err(|e| e.to_string())?;
    stgformer::commands::cmd_synth(&spec, 50, 1, &scenes.join("test")).map_err(|e| e.to_string())?;
    let text = r#"
schema_version = 1
seed = 17
out_dir = "out"
[data]
train = ["scenes/train"]
test = ["scenes/test"]
[model]
embed_dim = 4
width = 8
heads = 2
ff_width = 16
[train]
epochs = 3
[predict]
k = 5
"#;
    let path = dir.join("run.toml");
    std::fs::write(&path, text).map_err(|e| e.to_string())?;
    let cfg = RunConfig::load(&path).map_err(|e| e.to_string())?;
    let trained = cmd_train(&cfg).map_err(|e| e.to_string())?;
    cmd_predict(&cfg, &trained.checkpoint).map_err(|e| e.to_string())?;
    ["metrics.jsonl", "model.ckpt", "predictions.csv", "ground_truth.csv", "graphs.csv"]
        .iter()
        .map(|f| {
            std::fs::read(dir.join("out").join(f))
                .map(|b| (f.to_string(), b))
                .map_err(|e| e.to_string())
        })
        .collect()
}

fn criterion_reproducibility() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = run_pipeline(a.path())?;
    let second = run_pipeline(b.path())?;
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(x, y)| x.1 != y.1)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let bytes: usize = first.iter().map(|f| f.1.len()).sum();
    check(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} artifacts ({bytes} bytes) byte-identical across two runs", first.len())
        } else {
            format!("artifacts differ: {}", differing.join(", "))
        },
    )
}

// ---------------------------------------------------------------- 10

/// Independent diff of pair bits between consecutive steps.
fn flip_oracle(adjacency: &[StgAdjacency], positions: &Array3<f64>) -> Vec<(usize, usize, usize, FlipKind, Motion, f64)> {
    let n = positions.dim().0;
    let bit = |a: &StgAdjacency, i: usize, j: usize| {
        let m = a.to_matrix();
        (0..a.step).any(|tau| m[[i, tau * n + j]] > 0.0)
    };
    let p = |i: usize, t: usize| [positions[[i, t, 0]], positions[[i, t, 1]]];
    let d = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let mut out = Vec::new();
    for w in adjacency.windows(2) {
        let t = w[1].step;
        for i in 0..n {
            for j in 0..n {
                if i == j || bit(&w[0], i, j) == bit(&w[1], i, j) {
                    continue;
                }
                let (before, now) = (d(p(i, t - 1), p(j, t - 1)), d(p(i, t), p(j, t)));
                let motion = if now < before {
                    Motion::Approaching
                } else if now > before {
                    Motion::Diverging
                } else {
                    Motion::Tied
                };
                let kind = if bit(&w[1], i, j) { FlipKind::On } else { FlipKind::Off };
                out.push((t, i, j, kind, motion, now));
            }
        }
    }
    out
}

fn criterion_flips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut compared = 0;
    for _ in 0..200 {
        let n = rng.random_range(2..=4);
        let steps = rng.random_range(2..=8);
        let positions = Array3::from_shape_fn((n, steps, 2), |_| normal(&mut rng));
        let first = rng.random_range(1..steps);
        let adjacency: Vec<StgAdjacency> = (first..steps)
            .map(|t| {
                let mut a = StgAdjacency::zeros(t, n);
                for i in 0..n {
                    for c in 0..n * t {
                        a.set(i, c, rng.random::<f64>() < 0.3);
                    }
                }
                a
            })
            .collect();
        let events = flip_events("w", 0, &adjacency, positions.view(), PairAggregation::AnyStep).map_err(|e| e.to_string())?;
        let got: Vec<_> = events.iter().map(|e: &EdgeEvent| (e.step, e.dest, e.source, e.kind, e.motion, e.distance)).collect();
        let want = flip_oracle(&adjacency, &positions);
        let same = got.len() == want.len()
            && got
                .iter()
                .zip(&want)
                .all(|(g, w)| (g.0, g.1, g.2, g.3, g.4) == (w.0, w.1, w.2, w.3, w.4) && (g.5 - w.5).abs() <= 1e-12 * w.5.max(1.0));
        if !same {
            return Err(format!("flip events differ from the diff oracle for n={n}, steps {first}..{steps}: {got:?} vs {want:?}"));
        }
        compared += got.len();
    }

    // Scripted approach/diverge with edges on strictly inside the radius.
    let radius = 3.0;
    let spec = ScenarioSpec {
        speed: 0.25,
        frames: 60,
        ..ScenarioSpec::new(ScenarioKind::ApproachDiverge, 2)
    };
    let scene = synth_scenario(&spec, 0).map_err(|e| e.to_string())?;
    let positions = Array3::from_shape_fn((2, spec.frames, 2), |(i, t, d)| scene.agents[i].positions[t][d]);
    let gap = |t: usize| {
        let a = scene.agents[0].positions[t];
        let b = scene.agents[1].positions[t];
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    };
    let adjacency: Vec<StgAdjacency> = (1..spec.frames)
        .map(|t| {
            let mut a = StgAdjacency::zeros(t, 2);
            let on = gap(t) < radius;
            a.set(0, (t - 1) * 2 + 1, on);
            a.set(1, (t - 1) * 2, on);
            a
        })
        .collect();
    let events = flip_events("scripted", 0, &adjacency, positions.view(), PairAggregation::LatestStep).map_err(|e| e.to_string())?;
    let hists = flip_distance_histogram(&events, 0.0, 10.0, 20).map_err(|e| e.to_string())?;
    let target = hists[0].1.bin_of(radius) as i64;
    let mut detail = Vec::new();
    let mut ok = true;
    for (kind, h) in &hists {
        let mode = h.mode_bin().map(|b| b as i64);
        ok &= h.total() > 0 && mode.is_some_and(|m| (m - target).abs() <= 1);
        detail.push(format!("{} mode bin {:?} (n={})", kind.name(), mode, h.total()));
    }
    check(
        ok,
        format!("{compared} random events match the diff oracle; radius bin {target}: {}", detail.join(", ")),
    )
}

type Criterion = (usize, &'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        (1, "attention oracle", criterion_attention),
        (2, "gradient suite", criterion_gradients),
        (3, "exact masking", criterion_masking),
        (4, "overfit smoke test", criterion_overfit),
        (5, "sparsity knob", criterion_sparsity),
        (6, "ablation directionality", criterion_ablation),
        (7, "metric oracle", criterion_metrics),
        (8, "ELBO consistency", criterion_elbo),
        (9, "reproducibility", criterion_reproducibility),
        (10, "flip-event pipeline", criterion_flips),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = 0;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {id:>2} {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {id:>2} {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
