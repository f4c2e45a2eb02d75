//! Best-of-K displacement metrics, baseline forecasters and the benchmark
//! harness.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array4, ArrayView3, ArrayView4, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_scene_dir, make_windows_with, Format, LoadOptions, TrajectoryWindow, Unit, WindowOptions};
use crate::error::{Error, Result};
use crate::infer::{predict_window, PredictOptions};
use crate::model::Stgformer;

/// How the best of `K` samples is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BestOf {
    /// Independently per agent.
    #[default]
    PerAgent,
    /// One sample for the whole scene, minimizing the agent-averaged error.
    JointScene,
}

fn displacement(samples: &ArrayView4<f64>, gt: &ArrayView3<f64>, k: usize, i: usize, t: usize) -> f64 {
    let dx = samples[[k, i, t, 0]] - gt[[i, t, 0]];
    let dy = samples[[k, i, t, 1]] - gt[[i, t, 1]];
    dx.hypot(dy)
}

/// Best-of-K ADE and FDE of `samples` (`K×n×H×2`) against `gt` (`n×H×2`).
pub fn ade_fde(samples: ArrayView4<f64>, gt: ArrayView3<f64>, mode: BestOf) -> Result<(f64, f64)> {
    let (k, n, h, dims) = samples.dim();
    if gt.dim() != (n, h, dims) || dims != 2 || k == 0 || n == 0 || h == 0 {
        return Err(Error::Shape(format!(
            "predictions {:?} do not match ground truth {:?}",
            samples.dim(),
            gt.dim()
        )));
    }
    let ade = |s: usize, i: usize| (0..h).map(|t| displacement(&samples, &gt, s, i, t)).sum::<f64>() / h as f64;
    let fde = |s: usize, i: usize| displacement(&samples, &gt, s, i, h - 1);
    let out = match mode {
        BestOf::PerAgent => {
            let a: f64 = (0..n).map(|i| (0..k).map(|s| ade(s, i)).fold(f64::INFINITY, f64::min)).sum();
            let f: f64 = (0..n).map(|i| (0..k).map(|s| fde(s, i)).fold(f64::INFINITY, f64::min)).sum();
            (a / n as f64, f / n as f64)
        }
        BestOf::JointScene => {
            let a = (0..k).map(|s| (0..n).map(|i| ade(s, i)).sum::<f64>() / n as f64).fold(f64::INFINITY, f64::min);
            let f = (0..k).map(|s| (0..n).map(|i| fde(s, i)).sum::<f64>() / n as f64).fold(f64::INFINITY, f64::min);
            (a, f)
        }
    };
    Ok(out)
}

/// Produces `K×n×H×2` futures for a window, in scene units.
pub trait Forecaster: Sync {
    fn name(&self) -> &str;
    fn forecast(&self, window: &TrajectoryWindow, k: usize, seed: u64) -> Result<Array4<f64>>;
}

fn last_observed(window: &TrajectoryWindow) -> ndarray::Array3<f64> {
    window.denormalize(&window.observed)
}

/// Repeats the last observed position.
pub struct ConstantPosition;

impl Forecaster for ConstantPosition {
    fn name(&self) -> &str {
        "constant_position"
    }

    fn forecast(&self, window: &TrajectoryWindow, k: usize, _seed: u64) -> Result<Array4<f64>> {
        let obs = last_observed(window);
        let (n, t0, _) = obs.dim();
        let h = window.future.dim().1;
        Ok(Array4::from_shape_fn((k, n, h, 2), |(_, i, _, c)| obs[[i, t0 - 1, c]]))
    }
}

/// Extrapolates the last observed velocity.
pub struct ConstantVelocity;

impl Forecaster for ConstantVelocity {
    fn name(&self) -> &str {
        "constant_velocity"
    }

    fn forecast(&self, window: &TrajectoryWindow, k: usize, _seed: u64) -> Result<Array4<f64>> {
        let obs = last_observed(window);
        let (n, t0, _) = obs.dim();
        if t0 < 2 {
            return Err(Error::Shape("constant velocity needs two observed frames".into()));
        }
        let h = window.future.dim().1;
        Ok(Array4::from_shape_fn((k, n, h, 2), |(_, i, t, c)| {
            let v = obs[[i, t0 - 1, c]] - obs[[i, t0 - 2, c]];
            obs[[i, t0 - 1, c]] + v * (t + 1) as f64
        }))
    }
}

/// The trained model as a forecaster.
pub struct ModelForecaster<'a> {
    pub model: &'a Stgformer,
    pub options: PredictOptions,
}

impl Forecaster for ModelForecaster<'_> {
    fn name(&self) -> &str {
        "stgformer"
    }

    fn forecast(&self, window: &TrajectoryWindow, k: usize, seed: u64) -> Result<Array4<f64>> {
        let opts = PredictOptions {
            k,
            seed,
            ..self.options.clone()
        };
        Ok(predict_window(self.model, window, &opts)?.samples)
    }
}

/// Seed for window `index` derived from a run seed.
pub fn eval_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene: String,
    pub ade: f64,
    pub fde: f64,
    pub windows: usize,
    pub agents: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub k: usize,
    pub mode: BestOf,
    pub unit: Unit,
    pub scenes: Vec<SceneMetrics>,
    /// Mean of the scene rows.
    pub ade: f64,
    pub fde: f64,
    pub windows: usize,
    pub config_hash: String,
    pub schema_version: u32,
}

impl MetricReport {
    /// Builds a report; scene rows are averaged with equal weight.
    pub fn from_scenes(scenes: Vec<SceneMetrics>, k: usize, mode: BestOf, unit: Unit, config_hash: String) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::EmptyDataset("no scenes to report".into()));
        }
        let m = scenes.len() as f64;
        Ok(Self {
            k,
            mode,
            unit,
            ade: scenes.iter().map(|s| s.ade).sum::<f64>() / m,
            fde: scenes.iter().map(|s| s.fde).sum::<f64>() / m,
            windows: scenes.iter().map(|s| s.windows).sum(),
            scenes,
            config_hash,
            schema_version: crate::config::SCHEMA_VERSION,
        })
    }
}

/// Agent-weighted metrics of one scene from per-window `(ade, fde, n)`.
pub fn scene_metrics(scene: &str, per_window: &[(f64, f64, usize)]) -> Result<SceneMetrics> {
    let agents: usize = per_window.iter().map(|w| w.2).sum();
    if agents == 0 {
        return Err(Error::EmptyDataset(format!("scene {scene} has no evaluable windows")));
    }
    Ok(SceneMetrics {
        scene: scene.to_string(),
        ade: per_window.iter().map(|w| w.0 * w.2 as f64).sum::<f64>() / agents as f64,
        fde: per_window.iter().map(|w| w.1 * w.2 as f64).sum::<f64>() / agents as f64,
        windows: per_window.len(),
        agents,
    })
}

/// Metrics of a forecaster on one scene's windows.
pub fn evaluate_scene(
    forecaster: &dyn Forecaster,
    scene: &str,
    windows: &[TrajectoryWindow],
    k: usize,
    mode: BestOf,
    seed: u64,
) -> Result<SceneMetrics> {
    let per_window: Vec<(f64, f64, usize)> = windows
        .par_iter()
        .enumerate()
        .map(|(idx, w)| {
            let samples = forecaster.forecast(w, k, eval_seed(seed, idx))?;
            let gt = w.denormalize(&w.future);
            let (a, f) = ade_fde(samples.view(), gt.view(), mode)?;
            Ok((a, f, w.agents()))
        })
        .collect::<Result<_>>()?;
    scene_metrics(scene, &per_window)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// One subdirectory per scene; each is held out in turn.
    LeaveOneSceneOut,
    /// `train/` and `test/` subdirectories; each test file is one row.
    SingleSplit,
}

#[derive(Debug, Clone)]
pub struct BenchmarkOptions {
    pub protocol: Protocol,
    pub format: Format,
    pub load: LoadOptions,
    pub windows: WindowOptions,
    pub k: usize,
    pub mode: BestOf,
    pub seed: u64,
}

/// Scene name and its windows.
pub type SceneWindows = (String, Vec<TrajectoryWindow>);

fn windows_of_dir(dir: &Path, opts: &BenchmarkOptions) -> Result<Vec<TrajectoryWindow>> {
    let scenes = load_scene_dir(dir, opts.format, &opts.load)?;
    Ok(scenes.iter().flat_map(|s| make_windows_with(s, &opts.windows)).collect())
}

/// Runs the benchmark protocol. `fit` trains a forecaster on the training
/// windows of a split; `on_split` sees each test scene name before it runs.
pub fn benchmark<F>(root: &Path, opts: &BenchmarkOptions, config_hash: &str, mut fit: F) -> Result<MetricReport>
where
    F: FnMut(&str, &[TrajectoryWindow]) -> Result<Box<dyn Forecaster + Send + Sync>>,
{
    if !root.is_dir() {
        return Err(Error::MissingScene(root.to_path_buf()));
    }
    let splits: Vec<(String, Vec<TrajectoryWindow>, Vec<SceneWindows>)> = match opts.protocol {
        Protocol::LeaveOneSceneOut => {
            let mut dirs: Vec<_> = std::fs::read_dir(root)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_dir())
                .collect();
            dirs.sort();
            if dirs.len() < 2 {
                return Err(Error::MissingScene(root.join("<scene>")));
            }
            let mut by_scene = BTreeMap::new();
            for d in &dirs {
                let name = d.file_name().unwrap().to_string_lossy().into_owned();
                by_scene.insert(name, windows_of_dir(d, opts)?);
            }
            by_scene
                .keys()
                .map(|held| {
                    let train: Vec<_> = by_scene
                        .iter()
                        .filter(|(k, _)| *k != held)
                        .flat_map(|(_, w)| w.iter().cloned())
                        .collect();
                    (held.clone(), train, vec![(held.clone(), by_scene[held].clone())])
                })
                .collect()
        }
        Protocol::SingleSplit => {
            let train = windows_of_dir(&root.join("train"), opts)?;
            let test_dir = root.join("test");
            let scenes = load_scene_dir(&test_dir, opts.format, &opts.load)?;
            let tests = scenes
                .iter()
                .map(|s| (s.scene_id.clone(), make_windows_with(s, &opts.windows)))
                .collect();
            vec![("split".to_string(), train, tests)]
        }
    };
    let mut rows = Vec::new();
    let mut unit = opts.format.unit();
    for (label, train, tests) in splits {
        if train.is_empty() {
            return Err(Error::EmptyDataset(format!("no training windows for split {label}")));
        }
        unit = train[0].unit;
        log::info!("split {label}: {} training windows", train.len());
        let forecaster = fit(&label, &train)?;
        for (scene, windows) in tests {
            if windows.is_empty() {
                return Err(Error::EmptyDataset(format!("scene {scene} yields no windows")));
            }
            rows.push(evaluate_scene(forecaster.as_ref(), &scene, &windows, opts.k, opts.mode, opts.seed)?);
        }
    }
    MetricReport::from_scenes(rows, opts.k, opts.mode, unit, config_hash.to_string())
}

/// Reference ADE/FDE rows keyed by benchmark then scene.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ReferenceBenchmark {
    pub unit: Unit,
    pub scenes: BTreeMap<String, [f64; 2]>,
}

pub type ReferenceTable = BTreeMap<String, ReferenceBenchmark>;

pub const REFERENCE_TOML: &str = include_str!("../reference.toml");

pub fn reference_table() -> ReferenceTable {
    toml::from_str(REFERENCE_TOML).expect("bundled reference table parses")
}

/// Renders a report as a text table with one `ADE/FDE` column per scene
/// and a final `AVG` column. With a reference benchmark, a second row
/// lists reference values and a third the deltas.
pub fn render_table(report: &MetricReport, reference: Option<&ReferenceBenchmark>) -> String {
    let mut header = vec!["method".to_string()];
    header.extend(report.scenes.iter().map(|s| s.scene.clone()));
    header.push("AVG".into());
    let cell = |a: f64, f: f64| format!("{a:.2}/{f:.2}");
    let mut rows = Vec::new();
    let mut ours = vec![format!("ours (K={})", report.k)];
    ours.extend(report.scenes.iter().map(|s| cell(s.ade, s.fde)));
    ours.push(cell(report.ade, report.fde));
    rows.push(ours);
    if let Some(r) = reference {
        let lookup = |name: &str| r.scenes.iter().find(|(k, _)| k.eq_ignore_ascii_case(name)).map(|(_, v)| *v);
        let names: Vec<String> = report.scenes.iter().map(|s| s.scene.clone()).chain(["AVG".to_string()]).collect();
        let ours_vals: Vec<[f64; 2]> = report
            .scenes
            .iter()
            .map(|s| [s.ade, s.fde])
            .chain([[report.ade, report.fde]])
            .collect();
        let mut refs = vec!["reference".to_string()];
        let mut deltas = vec!["delta".to_string()];
        for (name, v) in names.iter().zip(&ours_vals) {
            match lookup(name) {
                Some(rv) => {
                    refs.push(cell(rv[0], rv[1]));
                    deltas.push(format!("{:+.2}/{:+.2}", v[0] - rv[0], v[1] - rv[1]));
                }
                None => {
                    refs.push("-".into());
                    deltas.push("-".into());
                }
            }
        }
        rows.push(refs);
        rows.push(deltas);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap())
        .collect();
    let line = |cells: &[String]| -> String {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join(" | ")
    };
    let mut out = String::new();
    writeln!(out, "{}", line(&header)).unwrap();
    writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-|-")).unwrap();
    for r in &rows {
        writeln!(out, "{}", line(r)).unwrap();
    }
    out
}

/// Per-agent ADE over an arbitrary subset of samples, for nested-set checks.
pub fn ade_fde_subset(samples: ArrayView4<f64>, gt: ArrayView3<f64>, keep: usize, mode: BestOf) -> Result<(f64, f64)> {
    if keep == 0 || keep > samples.dim().0 {
        return Err(Error::Shape(format!("cannot keep {keep} of {} samples", samples.dim().0)));
    }
    ade_fde(samples.slice(s![..keep, .., .., ..]), gt, mode)
}

/// Stacks the samples of one window for metric use.
pub fn stack_samples(samples: &[ndarray::Array3<f64>]) -> Array4<f64> {
    let views: Vec<_> = samples.iter().map(|a| a.view().insert_axis(Axis(0))).collect();
    ndarray::concatenate(Axis(0), &views).expect("samples agree on shape")
}
