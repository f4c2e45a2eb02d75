//! Command implementations behind the `stgformer` binary. Each command is a
//! thin, deterministic orchestration of library operations; outputs carry
//! no timestamps.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{concatenate, s, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    distance_histogram, edge_sites, flip_distance_histogram, flip_events, flip_motion_table, plot_histogram, span_histogram,
    spearman, Correlation, EdgeEvent, EdgeSite, Histogram, PairAggregation,
};
use crate::checkpoint::{load_checkpoint_for, save_checkpoint};
use crate::config::{RunConfig, SCHEMA_VERSION};
use crate::data::{write_ethucy, OBS_LEN};
use crate::dump::{read_ground_truth, read_graphs, read_predictions, write_graphs, write_ground_truth, write_predictions, DumpWriters};
use crate::error::{Error, Result};
use crate::eval::{ade_fde, benchmark, reference_table, render_table, scene_metrics, BenchmarkOptions, BestOf, Forecaster, MetricReport, ModelForecaster};
use crate::infer::{predict_window, PredictOptions};
use crate::model::Stgformer;
use crate::stg::Provenance;
use crate::synth::{synth_scenario, ScenarioSpec};
use crate::train::{train, EpochMetrics};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Serialize)]
struct MetricsLine<'a> {
    schema_version: u32,
    #[serde(flatten)]
    metrics: &'a EpochMetrics,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    schema_version: u32,
    command: &'a str,
    seed: u64,
    config_hash: String,
    ablations: Vec<&'static str>,
}

fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    let m = Manifest {
        schema_version: SCHEMA_VERSION,
        command,
        seed: cfg.seed,
        config_hash: cfg.model.hash(),
        ablations: cfg.model.ablation.names(),
    };
    fs::write(dir.join(format!("{command}.manifest.json")), serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub epochs: Vec<EpochMetrics>,
}

/// Trains on `data.train` and writes the checkpoint and metrics log to the
/// output directory. On divergence the last finite parameters are saved
/// before the error is returned.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutput> {
    let windows = cfg.load_windows(&cfg.data.train)?;
    if windows.is_empty() {
        return Err(Error::EmptyDataset("data.train yields no complete windows".into()));
    }
    let out = cfg.out_path();
    fs::create_dir_all(&out)?;
    write_manifest(&out, "train", cfg)?;
    let mut model = Stgformer::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let metrics_path = out.join(METRICS_FILE);
    let mut log = BufWriter::new(File::create(&metrics_path)?);
    log::info!("training on {} windows for {} epochs", windows.len(), cfg.train.epochs);
    let result = train(&mut model, &windows, &cfg.train, |m| {
        let line = MetricsLine {
            schema_version: SCHEMA_VERSION,
            metrics: m,
        };
        writeln!(log, "{}", serde_json::to_string(&line)?)?;
        Ok(())
    });
    log.flush()?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    save_checkpoint(&model, &checkpoint)?;
    let epochs = result?;
    Ok(TrainOutput {
        checkpoint,
        metrics: metrics_path,
        epochs,
    })
}

#[derive(Debug, Clone)]
pub struct PredictOutput {
    pub predictions: PathBuf,
    pub ground_truth: PathBuf,
    pub graphs: PathBuf,
    pub windows: usize,
}

/// Samples futures for every window of `data.test` and writes the dumps.
pub fn cmd_predict(cfg: &RunConfig, checkpoint: &Path) -> Result<PredictOutput> {
    let model = load_checkpoint_for(checkpoint, &cfg.model)?;
    let windows = cfg.load_windows(&cfg.data.test)?;
    if windows.is_empty() {
        return Err(Error::EmptyDataset("data.test yields no complete windows".into()));
    }
    let out = cfg.out_path();
    fs::create_dir_all(&out)?;
    write_manifest(&out, "predict", cfg)?;
    let mut dumps = DumpWriters::create(&out)?;
    for (idx, w) in windows.iter().enumerate() {
        let opts = PredictOptions {
            seed: crate::eval::eval_seed(cfg.seed, idx),
            ..cfg.predict.clone()
        };
        let set = predict_window(&model, w, &opts)?;
        write_predictions(&mut dumps.predictions, w, &set, OBS_LEN)?;
        write_ground_truth(&mut dumps.ground_truth, w)?;
        write_graphs(&mut dumps.graphs, &w.id(), &set)?;
    }
    dumps.flush()?;
    Ok(PredictOutput {
        predictions: out.join("predictions.csv"),
        ground_truth: out.join("ground_truth.csv"),
        graphs: out.join("graphs.csv"),
        windows: windows.len(),
    })
}

fn scene_of(window_id: &str) -> &str {
    window_id.rsplit_once('@').map(|(s, _)| s).unwrap_or(window_id)
}

/// Best-of-K metrics of a prediction dump against a ground-truth dump.
pub fn cmd_eval(cfg: &RunConfig, predictions: &Path, ground_truth: &Path) -> Result<MetricReport> {
    let preds = read_predictions(predictions)?;
    let truth = read_ground_truth(ground_truth)?;
    if preds.is_empty() {
        return Err(Error::EmptyDataset(format!("{} holds no predictions", predictions.display())));
    }
    let mut by_scene: BTreeMap<String, Vec<(f64, f64, usize)>> = BTreeMap::new();
    let mut k = 0;
    for (id, p) in &preds {
        let gt = truth
            .get(id)
            .ok_or_else(|| Error::Shape(format!("window {id} has predictions but no ground truth")))?;
        if gt.agent_ids != p.agent_ids {
            return Err(Error::Shape(format!(
                "window {id}: prediction agents {:?} differ from ground truth {:?}",
                p.agent_ids, gt.agent_ids
            )));
        }
        let h = p.samples.dim().2;
        if p.first_step + h > gt.positions.dim().1 {
            return Err(Error::Shape(format!(
                "window {id}: predictions reach step {} but ground truth ends at {}",
                p.first_step + h - 1,
                gt.positions.dim().1 - 1
            )));
        }
        let target = gt.positions.slice(s![.., p.first_step..p.first_step + h, ..]);
        let (a, f) = ade_fde(p.samples.view(), target, cfg.eval.mode)?;
        k = p.samples.dim().0;
        by_scene.entry(scene_of(id).to_string()).or_default().push((a, f, p.agent_ids.len()));
    }
    let rows = by_scene.iter().map(|(s, w)| scene_metrics(s, w)).collect::<Result<Vec<_>>>()?;
    let report = MetricReport::from_scenes(rows, k, cfg.eval.mode, cfg.data.format.unit(), cfg.model.hash())?;
    let out = cfg.out_path();
    fs::create_dir_all(&out)?;
    fs::write(out.join(REPORT_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeOptions {
    pub bins: usize,
    /// Upper edge of distance histograms, in scene units.
    pub max_distance: f64,
    pub aggregation: PairAggregation,
    /// Restrict to graphs of one provenance.
    pub provenance: Option<Provenance>,
    pub include_self: bool,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self {
            bins: 20,
            max_distance: 10.0,
            aggregation: PairAggregation::AnyStep,
            provenance: None,
            include_self: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalysisSummary {
    pub schema_version: u32,
    pub graphs: usize,
    pub active_edges: usize,
    pub candidate_edges: usize,
    pub flip_events: usize,
    /// Rank correlation between node distance and edge activity.
    pub distance_activity: Option<Correlation>,
    pub flip_motion: Vec<(String, String, usize)>,
}

/// Analysis inputs gathered in memory.
pub struct AnalysisInput {
    pub sites: Vec<EdgeSite>,
    pub events: Vec<EdgeEvent>,
    pub graphs: usize,
    pub max_step: usize,
}

/// Joins graph, prediction and ground-truth dumps into edge sites and flip
/// events. A sample's positions are the observed ground truth followed by
/// its own predictions.
pub fn collect_analysis(dir: &Path, opts: &AnalyzeOptions) -> Result<AnalysisInput> {
    let preds = read_predictions(&dir.join("predictions.csv"))?;
    let truth = read_ground_truth(&dir.join("ground_truth.csv"))?;
    let graphs = read_graphs(&dir.join("graphs.csv"))?;
    let mut grouped: BTreeMap<(String, usize), Vec<crate::stg::StgAdjacency>> = BTreeMap::new();
    let mut count = 0;
    for g in graphs {
        if opts.provenance.is_some_and(|p| p != g.provenance) {
            continue;
        }
        count += 1;
        grouped.entry((g.window_id, g.sample)).or_default().push(g.adjacency);
    }
    let mut sites = Vec::new();
    let mut events = Vec::new();
    let mut max_step = 1;
    for ((id, sample), mut adj) in grouped {
        adj.sort_by_key(|a| a.step);
        let gt = truth.get(&id).ok_or_else(|| Error::Dump(format!("graphs reference unknown window {id}")))?;
        let positions = match preds.get(&id) {
            Some(p) if sample < p.samples.dim().0 => {
                let observed = gt.positions.slice(s![.., ..p.first_step, ..]);
                let own = p.samples.index_axis(Axis(0), sample);
                concatenate(Axis(1), &[observed, own]).expect("agent counts agree")
            }
            _ => gt.positions.clone(),
        };
        for a in &adj {
            max_step = max_step.max(a.step);
            sites.extend(edge_sites(a, positions.view(), opts.include_self)?);
        }
        // Split into runs of consecutive steps before diffing.
        let mut start = 0;
        for i in 1..=adj.len() {
            if i == adj.len() || adj[i].step != adj[i - 1].step + 1 {
                events.extend(flip_events(&id, sample, &adj[start..i], positions.view(), opts.aggregation)?);
                start = i;
            }
        }
    }
    Ok(AnalysisInput {
        sites,
        events,
        graphs: count,
        max_step,
    })
}

/// Histograms, plots and correlation summary of a prediction run's dumps.
pub fn cmd_analyze(dumps: &Path, out: &Path, opts: &AnalyzeOptions) -> Result<AnalysisSummary> {
    let input = collect_analysis(dumps, opts)?;
    fs::create_dir_all(out)?;
    let dist = distance_histogram(&input.sites, 0.0, opts.max_distance, opts.bins)?;
    dist.write_csv(&out.join("distance_hist.csv"), None)?;
    plot_histogram(&dist, "active edges by node distance", &out.join("distance_hist.svg"))?;
    let span = span_histogram(&input.sites, input.max_step)?;
    span.write_csv(&out.join("span_hist.csv"), None)?;
    plot_histogram(&span, "active edges by span t - tau", &out.join("span_hist.svg"))?;

    let flips = flip_distance_histogram(&input.events, 0.0, opts.max_distance, opts.bins)?;
    let mut w = csv::Writer::from_path(out.join("flip_hist.csv"))?;
    w.write_record(["kind", "bin_lo", "bin_hi", "count"])?;
    for (kind, h) in &flips {
        for (b, c) in h.counts.iter().enumerate() {
            let (lo, hi) = h.bin_range(b);
            w.write_record([kind.name().to_string(), lo.to_string(), hi.to_string(), c.to_string()])?;
        }
        plot_histogram(h, &format!("{} by distance", kind.name()), &out.join(format!("{}.svg", kind.name())))?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("flip_events.csv"))?;
    for e in &input.events {
        w.serialize(e)?;
    }
    w.flush()?;

    let activity = activity_by_distance(&input.sites, 0.0, opts.max_distance, opts.bins)?;
    let mut w = csv::Writer::from_path(out.join("edge_activity.csv"))?;
    w.write_record(["bin_lo", "bin_hi", "candidates", "active", "rate"])?;
    for row in &activity {
        w.write_record([
            row.0.to_string(),
            row.1.to_string(),
            row.2.to_string(),
            row.3.to_string(),
            if row.2 > 0 { (row.3 as f64 / row.2 as f64).to_string() } else { String::new() },
        ])?;
    }
    w.flush()?;

    let distances: Vec<f64> = input.sites.iter().map(|s| s.distance).collect();
    let active: Vec<f64> = input.sites.iter().map(|s| f64::from(u8::from(s.active))).collect();
    let correlation = spearman(&distances, &active).ok();
    let summary = AnalysisSummary {
        schema_version: SCHEMA_VERSION,
        graphs: input.graphs,
        active_edges: input.sites.iter().filter(|s| s.active).count(),
        candidate_edges: input.sites.len(),
        flip_events: input.events.len(),
        distance_activity: correlation,
        flip_motion: flip_motion_table(&input.events)
            .into_iter()
            .map(|(k, m, c)| (k.name().to_string(), format!("{m:?}").to_lowercase(), c))
            .collect(),
    };
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

/// `(bin_lo, bin_hi, candidates, active)` over node distance.
pub fn activity_by_distance(sites: &[EdgeSite], lo: f64, hi: f64, bins: usize) -> Result<Vec<(f64, f64, u64, u64)>> {
    let mut all = Histogram::new(lo, hi, bins)?;
    let mut on = Histogram::new(lo, hi, bins)?;
    for s in sites {
        all.add(s.distance);
        if s.active {
            on.add(s.distance);
        }
    }
    Ok((0..bins)
        .map(|b| {
            let (l, h) = all.bin_range(b);
            (l, h, all.counts[b], on.counts[b])
        })
        .collect())
}

/// Writes `count` scenes with seeds `seed..seed+count` into `out`.
pub fn cmd_synth(spec: &ScenarioSpec, seed: u64, count: usize, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    (0..count as u64)
        .map(|i| {
            let scene = synth_scenario(spec, seed + i)?;
            let path = out.join(format!("{}.txt", scene.scene_id));
            write_ethucy(&scene, &path)?;
            Ok(path)
        })
        .collect()
}

/// Runs the benchmark protocol over `root`, training one model per split.
pub fn cmd_benchmark(cfg: &RunConfig, root: &Path) -> Result<(MetricReport, String)> {
    let opts = BenchmarkOptions {
        protocol: cfg.eval.protocol,
        format: cfg.data.format,
        load: cfg.load_options(),
        windows: cfg.window_options(),
        k: cfg.predict.k,
        mode: cfg.eval.mode,
        seed: cfg.seed,
    };
    let out = cfg.out_path();
    fs::create_dir_all(&out)?;
    write_manifest(&out, "benchmark", cfg)?;
    let report = benchmark(root, &opts, &cfg.model.hash(), |label, windows| {
        let mut model = Stgformer::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
        let mut log = BufWriter::new(File::create(out.join(format!("metrics-{label}.jsonl")))?);
        train(&mut model, windows, &cfg.train, |m| {
            writeln!(
                log,
                "{}",
                serde_json::to_string(&MetricsLine {
                    schema_version: SCHEMA_VERSION,
                    metrics: m
                })?
            )?;
            Ok(())
        })?;
        log.flush()?;
        save_checkpoint(&model, &out.join(format!("model-{label}.ckpt")))?;
        Ok(Box::new(OwnedForecaster {
            model,
            options: cfg.predict.clone(),
        }))
    })?;
    fs::write(out.join(REPORT_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
    let table = cmd_table(&report, None);
    fs::write(out.join("table.txt"), &table)?;
    Ok((report, table))
}

struct OwnedForecaster {
    model: Stgformer,
    options: PredictOptions,
}

impl Forecaster for OwnedForecaster {
    fn name(&self) -> &str {
        "stgformer"
    }

    fn forecast(&self, window: &crate::data::TrajectoryWindow, k: usize, seed: u64) -> Result<ndarray::Array4<f64>> {
        ModelForecaster {
            model: &self.model,
            options: self.options.clone(),
        }
        .forecast(window, k, seed)
    }
}

/// Renders a report, optionally against a bundled reference (`sdd` or
/// `ethucy`).
pub fn cmd_table(report: &MetricReport, reference: Option<&str>) -> String {
    let refs = reference_table();
    render_table(report, reference.and_then(|r| refs.get(r)))
}

pub fn read_report(path: &Path) -> Result<MetricReport> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Joint or per-agent mode from a flag value.
pub fn parse_mode(joint: bool) -> BestOf {
    if joint {
        BestOf::JointScene
    } else {
        BestOf::PerAgent
    }
}
