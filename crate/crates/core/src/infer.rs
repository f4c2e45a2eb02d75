//! Sampling future trajectories: posterior warm-up over observed steps, then
//! an autoregressive prior/trajectory rollout.

use ndarray::{concatenate, s, Array2, Array3, Array4, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{TrajectoryWindow, OBS_LEN, PRED_LEN};
use crate::error::{Error, Result};
use crate::model::Stgformer;
use crate::stg::{Provenance, StgAdjacency, StgEmbedding};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictOptions {
    /// Samples per window.
    pub k: usize,
    /// Zeroes both graph and position noise.
    pub deterministic: bool,
    /// Run the posterior warm-up once and share it across samples.
    pub share_warmup: bool,
    pub horizon: usize,
    /// Set from the run seed, not from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            k: 20,
            deterministic: false,
            share_warmup: false,
            horizon: PRED_LEN,
            seed: 0,
        }
    }
}

/// Adjacency used at one step of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphRecord {
    pub step: usize,
    pub provenance: Provenance,
    pub adjacency: StgAdjacency,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub k: usize,
    /// `K×n×H×2`.
    pub samples: Array4<f64>,
    /// Per sample: adjacencies of warm-up steps `1..t0` and predicted steps.
    pub graphs: Vec<Vec<GraphRecord>>,
    /// Sub-seed of each sample.
    pub seeds: Vec<u64>,
}

impl PredictionSet {
    pub fn agents(&self) -> usize {
        self.samples.dim().1
    }

    pub fn horizon(&self) -> usize {
        self.samples.dim().2
    }
}

/// Sub-seed of sample `index`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng.random()
}

fn tile(first: &StgEmbedding, step: usize) -> StgEmbedding {
    let views = vec![first.gv.view(); step];
    StgEmbedding {
        step,
        gu: first.gu.clone(),
        gv: concatenate(Axis(0), &views).expect("equal widths"),
        provenance: first.provenance,
    }
}

struct Warmup {
    history: Vec<StgEmbedding>,
    graphs: Vec<GraphRecord>,
}

fn warmup<R: Rng + ?Sized>(model: &Stgformer, observed: ArrayView3<f64>, rng: &mut R, deterministic: bool) -> Result<Warmup> {
    let ablation = model.ablation();
    let obs_len = observed.dim().1;
    let mut history = Vec::new();
    let mut graphs = Vec::new();
    if ablation.no_g {
        return Ok(Warmup { history, graphs });
    }
    let posterior_steps = if ablation.stationary_g { obs_len.min(2) } else { obs_len };
    for t in 0..posterior_steps {
        let g = model.posterior_step(observed.slice(s![.., ..=t, ..]), &history, rng, deterministic)?;
        if t > 0 {
            graphs.push(GraphRecord {
                step: t,
                provenance: Provenance::Posterior,
                adjacency: model.step_adjacency(&g),
            });
        }
        history.push(g);
    }
    if ablation.stationary_g {
        for t in posterior_steps..obs_len {
            let g = tile(&history[1], t);
            graphs.push(GraphRecord {
                step: t,
                provenance: Provenance::Posterior,
                adjacency: model.step_adjacency(&g),
            });
        }
    }
    Ok(Warmup { history, graphs })
}

fn rollout<R: Rng + ?Sized>(
    model: &Stgformer,
    observed: ArrayView3<f64>,
    warm: &Warmup,
    horizon: usize,
    rng: &mut R,
    deterministic: bool,
) -> Result<(Array3<f64>, Vec<GraphRecord>)> {
    let (n, obs_len, _) = observed.dim();
    let ablation = model.ablation();
    let mut history = warm.history.clone();
    let mut graphs = warm.graphs.clone();
    let mut steps: Vec<Array2<f64>> = (0..obs_len).map(|t| observed.slice(s![.., t, ..]).to_owned()).collect();
    for t in obs_len..obs_len + horizon {
        let adjacency = if ablation.no_g {
            StgAdjacency::ones(t, n)
        } else if ablation.stationary_g && t >= 2 {
            model.step_adjacency(&tile(&history[1], t))
        } else {
            assert_eq!(history.len(), t, "prior at step {t} needs {t} graphs");
            let g = model.prior_step(&history, rng, deterministic)?;
            let a = model.step_adjacency(&g);
            history.push(g);
            a
        };
        let x = Stgformer::stack_positions(&steps);
        let out = model.trajectory_step_with(x.view(), &adjacency, rng, deterministic)?;
        if !ablation.no_g {
            graphs.push(GraphRecord {
                step: t,
                provenance: Provenance::Prior,
                adjacency,
            });
        }
        steps.push(out.x_next);
    }
    let future = Stgformer::stack_positions(&steps[obs_len..]);
    Ok((future, graphs))
}

/// Samples `K` futures for `observed` (`n×t0×2`, model coordinates).
pub fn predict(model: &Stgformer, observed: ArrayView3<f64>, opts: &PredictOptions) -> Result<PredictionSet> {
    let (n, obs_len, dims) = observed.dim();
    if n == 0 || obs_len == 0 || dims != 2 {
        return Err(Error::Shape(format!("observed positions must be n×t0×2, got {:?}", observed.dim())));
    }
    if opts.k == 0 {
        return Err(Error::Config(vec!["k must be at least 1".into()]));
    }
    if opts.horizon == 0 {
        return Err(Error::Config(vec!["horizon must be at least 1".into()]));
    }
    let last = obs_len + opts.horizon - 1;
    if last > model.config().max_step {
        return Err(Error::HorizonExceeded {
            step: last,
            max: model.config().max_step,
        });
    }
    let seeds: Vec<u64> = (0..opts.k).map(|i| sample_seed(opts.seed, i)).collect();
    let shared = if opts.share_warmup || opts.deterministic {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        Some(warmup(model, observed, &mut rng, opts.deterministic)?)
    } else {
        None
    };
    let run = |seed: u64| -> Result<(Array3<f64>, Vec<GraphRecord>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let own;
        let warm = match &shared {
            Some(w) => w,
            None => {
                own = warmup(model, observed, &mut rng, false)?;
                &own
            }
        };
        rollout(model, observed, warm, opts.horizon, &mut rng, opts.deterministic)
    };
    let results: Vec<(Array3<f64>, Vec<GraphRecord>)> = if opts.deterministic {
        let one = run(seeds[0])?;
        vec![one; opts.k]
    } else {
        seeds.par_iter().map(|s| run(*s)).collect::<Result<_>>()?
    };
    let views: Vec<_> = results.iter().map(|(f, _)| f.view().insert_axis(Axis(0))).collect();
    let samples = concatenate(Axis(0), &views).expect("samples agree on shape");
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            term: "prediction".into(),
            step: last,
        });
    }
    Ok(PredictionSet {
        k: opts.k,
        samples,
        graphs: results.into_iter().map(|(_, g)| g).collect(),
        seeds,
    })
}

/// Predicts a window's future and returns samples in scene units.
pub fn predict_window(model: &Stgformer, window: &TrajectoryWindow, opts: &PredictOptions) -> Result<PredictionSet> {
    if window.observed.dim().1 < OBS_LEN {
        return Err(Error::Shape(format!(
            "window {} has {} observed frames, need {OBS_LEN}",
            window.id(),
            window.observed.dim().1
        )));
    }
    let mut set = predict(model, window.observed.view(), opts)?;
    for mut sample in set.samples.outer_iter_mut() {
        let raw = window.denormalize(&sample.to_owned());
        sample.assign(&raw);
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Ablation, ModelConfig};
    use rand_distr::{Distribution, StandardNormal};

    fn model(ablation: Ablation) -> Stgformer {
        let cfg = ModelConfig {
            embed_dim: 4,
            width: 8,
            heads: 2,
            ff_width: 16,
            ablation,
            ..ModelConfig::default()
        };
        Stgformer::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    fn observed(n: usize) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        Array3::from_shape_fn((n, OBS_LEN, 2), |_| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn shapes_and_graph_bookkeeping() {
        let m = model(Ablation::default());
        let set = predict(&m, observed(3).view(), &PredictOptions { k: 4, ..Default::default() }).unwrap();
        assert_eq!(set.samples.dim(), (4, 3, 12, 2));
        for graphs in &set.graphs {
            let steps: Vec<usize> = graphs.iter().map(|g| g.step).collect();
            assert_eq!(steps, (1..20).collect::<Vec<_>>());
            assert!(graphs.iter().all(|g| g.adjacency.agents == 3 && g.adjacency.step == g.step));
        }
    }

    #[test]
    fn deterministic_runs_agree() {
        let m = model(Ablation::default());
        let opts = PredictOptions {
            k: 3,
            deterministic: true,
            ..Default::default()
        };
        let a = predict(&m, observed(2).view(), &opts).unwrap();
        let b = predict(&m, observed(2).view(), &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.samples.index_axis(Axis(0), 0), a.samples.index_axis(Axis(0), 2));
    }

    #[test]
    fn stochastic_samples_are_pairwise_distinct() {
        let m = model(Ablation::default());
        let set = predict(&m, observed(2).view(), &PredictOptions::default()).unwrap();
        for a in 0..20 {
            for b in a + 1..20 {
                let diff = &set.samples.index_axis(Axis(0), a) - &set.samples.index_axis(Axis(0), b);
                assert!(diff.iter().fold(0.0f64, |m, v| m.max(v.abs())) > 0.0);
            }
        }
    }

    #[test]
    fn shared_warmup_is_reproducible() {
        let m = model(Ablation::default());
        let opts = PredictOptions {
            k: 3,
            share_warmup: true,
            ..Default::default()
        };
        assert_eq!(predict(&m, observed(2).view(), &opts).unwrap(), predict(&m, observed(2).view(), &opts).unwrap());
    }

    #[test]
    fn ablations_run() {
        for ab in [
            Ablation { no_g: true, ..Default::default() },
            Ablation { stationary_g: true, ..Default::default() },
            Ablation { no_learned_prior: true, ..Default::default() },
        ] {
            let set = predict(&model(ab), observed(2).view(), &PredictOptions { k: 2, ..Default::default() }).unwrap();
            assert!(set.samples.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn horizon_beyond_model_is_rejected() {
        let m = model(Ablation::default());
        let opts = PredictOptions {
            horizon: 13,
            ..Default::default()
        };
        assert!(matches!(predict(&m, observed(1).view(), &opts), Err(Error::HorizonExceeded { .. })));
    }
}
