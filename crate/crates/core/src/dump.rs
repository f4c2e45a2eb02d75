//! CSV dumps of predictions, ground truth and sampled graphs.
//!
//! | file | header |
//! |------|--------|
//! | predictions | `window_id,sample,t,agent_id,x,y` |
//! | ground truth | `window_id,t,agent_id,x,y` |
//! | graphs | `window_id,sample,t,source,n,bits` |
//!
//! Positions are in scene units and written with the shortest decimal form
//! that round-trips. `bits` is the `n×(n·t)` adjacency in row-major order as
//! a string of `0`/`1`; `source` is `prior` or `posterior`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::data::TrajectoryWindow;
use crate::error::{Error, Result};
use crate::infer::PredictionSet;
use crate::stg::{Provenance, StgAdjacency};

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRow {
    window_id: String,
    sample: usize,
    t: usize,
    agent_id: i64,
    x: f64,
    y: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TruthRow {
    window_id: String,
    t: usize,
    agent_id: i64,
    x: f64,
    y: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct GraphRow {
    window_id: String,
    sample: usize,
    t: usize,
    source: Provenance,
    n: usize,
    bits: String,
}

/// Predictions of one window read back from a dump. Agents keep the order
/// of their first appearance in the file, which is the window order.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPredictions {
    pub agent_ids: Vec<i64>,
    /// First predicted step.
    pub first_step: usize,
    /// `K×n×H×2`.
    pub samples: Array4<f64>,
}

/// Ground truth of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowTruth {
    pub agent_ids: Vec<i64>,
    /// `n×T×2` for steps `0..T`.
    pub positions: Array3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphEntry {
    pub window_id: String,
    pub sample: usize,
    pub provenance: Provenance,
    pub adjacency: StgAdjacency,
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(csv::Writer::from_path(path)?)
}

/// Appends one window's predictions; `first_step` is the step of the first
/// predicted frame.
pub fn write_predictions<W: Write>(
    out: &mut csv::Writer<W>,
    window: &TrajectoryWindow,
    set: &PredictionSet,
    first_step: usize,
) -> Result<()> {
    let (k, n, h, _) = set.samples.dim();
    if n != window.agents() {
        return Err(Error::Shape(format!("prediction has {n} agents, window {} has {}", window.id(), window.agents())));
    }
    let id = window.id();
    for s in 0..k {
        for t in 0..h {
            for (i, agent) in window.agent_ids.iter().enumerate() {
                out.serialize(PredictionRow {
                    window_id: id.clone(),
                    sample: s,
                    t: first_step + t,
                    agent_id: *agent,
                    x: set.samples[[s, i, t, 0]],
                    y: set.samples[[s, i, t, 1]],
                })?;
            }
        }
    }
    Ok(())
}

pub fn write_ground_truth<W: Write>(out: &mut csv::Writer<W>, window: &TrajectoryWindow) -> Result<()> {
    let raw = window.denormalize(&window.full());
    let id = window.id();
    for t in 0..raw.dim().1 {
        for (i, agent) in window.agent_ids.iter().enumerate() {
            out.serialize(TruthRow {
                window_id: id.clone(),
                t,
                agent_id: *agent,
                x: raw[[i, t, 0]],
                y: raw[[i, t, 1]],
            })?;
        }
    }
    Ok(())
}

pub fn write_graphs<W: Write>(out: &mut csv::Writer<W>, window_id: &str, set: &PredictionSet) -> Result<()> {
    for (s, graphs) in set.graphs.iter().enumerate() {
        for g in graphs {
            out.serialize(GraphRow {
                window_id: window_id.to_string(),
                sample: s,
                t: g.step,
                source: g.provenance,
                n: g.adjacency.agents,
                bits: g.adjacency.bits().iter().map(|b| if *b { '1' } else { '0' }).collect(),
            })?;
        }
    }
    Ok(())
}

/// Writer bundle for a prediction run.
pub struct DumpWriters {
    pub predictions: csv::Writer<std::fs::File>,
    pub ground_truth: csv::Writer<std::fs::File>,
    pub graphs: csv::Writer<std::fs::File>,
}

impl DumpWriters {
    pub fn create(dir: &Path) -> Result<Self> {
        Ok(Self {
            predictions: writer(&dir.join("predictions.csv"))?,
            ground_truth: writer(&dir.join("ground_truth.csv"))?,
            graphs: writer(&dir.join("graphs.csv"))?,
        })
    }

    pub fn flush(&mut self) -> Result<()> {
        self.predictions.flush()?;
        self.ground_truth.flush()?;
        self.graphs.flush()?;
        Ok(())
    }
}

fn dump_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Dump(format!("{}:{line}: {}", path.display(), message.into()))
}

fn line_of(r: &csv::StringRecord) -> u64 {
    r.position().map(|p| p.line()).unwrap_or(0)
}

/// Reads a prediction dump, keyed by window id.
pub fn read_predictions(path: &Path) -> Result<BTreeMap<String, WindowPredictions>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let mut grouped: BTreeMap<String, (Vec<i64>, BTreeMap<(usize, usize, i64), [f64; 2]>)> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let row: PredictionRow = rec.deserialize(Some(&headers)).map_err(|e| dump_err(path, line, e.to_string()))?;
        let (order, slot) = grouped.entry(row.window_id).or_default();
        if !order.contains(&row.agent_id) {
            order.push(row.agent_id);
        }
        if slot.insert((row.sample, row.t, row.agent_id), [row.x, row.y]).is_some() {
            return Err(dump_err(path, line, "duplicate (sample, t, agent_id)"));
        }
    }
    let mut out = BTreeMap::new();
    for (id, (agents, rows)) in grouped {
        let samples: Vec<usize> = dedup(rows.keys().map(|k| k.0));
        let steps: Vec<usize> = dedup(rows.keys().map(|k| k.1));
        let expected = samples.len() * steps.len() * agents.len();
        if rows.len() != expected
            || samples.iter().enumerate().any(|(i, s)| i != *s)
            || steps.windows(2).any(|w| w[1] != w[0] + 1)
        {
            return Err(Error::Dump(format!("{}: window {id} is not a complete sample×step×agent grid", path.display())));
        }
        let mut arr = Array4::zeros((samples.len(), agents.len(), steps.len(), 2));
        for ((s, t, a), p) in &rows {
            let i = agents.iter().position(|x| x == a).unwrap();
            arr[[*s, i, t - steps[0], 0]] = p[0];
            arr[[*s, i, t - steps[0], 1]] = p[1];
        }
        out.insert(
            id,
            WindowPredictions {
                agent_ids: agents,
                first_step: steps[0],
                samples: arr,
            },
        );
    }
    Ok(out)
}

fn dedup<T: Ord + Copy>(it: impl Iterator<Item = T>) -> Vec<T> {
    let mut v: Vec<T> = it.collect();
    v.sort();
    v.dedup();
    v
}

pub fn read_ground_truth(path: &Path) -> Result<BTreeMap<String, WindowTruth>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let mut grouped: BTreeMap<String, (Vec<i64>, BTreeMap<(usize, i64), [f64; 2]>)> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let row: TruthRow = rec.deserialize(Some(&headers)).map_err(|e| dump_err(path, line, e.to_string()))?;
        let (order, slot) = grouped.entry(row.window_id).or_default();
        if !order.contains(&row.agent_id) {
            order.push(row.agent_id);
        }
        if slot.insert((row.t, row.agent_id), [row.x, row.y]).is_some() {
            return Err(dump_err(path, line, "duplicate (t, agent_id)"));
        }
    }
    let mut out = BTreeMap::new();
    for (id, (agents, rows)) in grouped {
        let steps = dedup(rows.keys().map(|k| k.0));
        if rows.len() != steps.len() * agents.len() || steps.iter().enumerate().any(|(i, t)| i != *t) {
            return Err(Error::Dump(format!("{}: window {id} is not a complete step×agent grid from t = 0", path.display())));
        }
        let mut arr = Array3::zeros((agents.len(), steps.len(), 2));
        for ((t, a), p) in &rows {
            let i = agents.iter().position(|x| x == a).unwrap();
            arr[[i, *t, 0]] = p[0];
            arr[[i, *t, 1]] = p[1];
        }
        out.insert(
            id,
            WindowTruth {
                agent_ids: agents,
                positions: arr,
            },
        );
    }
    Ok(out)
}

pub fn read_graphs(path: &Path) -> Result<Vec<GraphEntry>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let row: GraphRow = rec.deserialize(Some(&headers)).map_err(|e| dump_err(path, line, e.to_string()))?;
        let bits: Vec<bool> = row
            .bits
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(dump_err(path, line, format!("bad adjacency character {other:?}"))),
            })
            .collect::<Result<_>>()?;
        let adjacency = StgAdjacency::from_bits(row.t, row.n, bits).map_err(|e| dump_err(path, line, e.to_string()))?;
        out.push(GraphEntry {
            window_id: row.window_id,
            sample: row.sample,
            provenance: row.source,
            adjacency,
        });
    }
    Ok(out)
}
