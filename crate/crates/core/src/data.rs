//! Scene loading, fixed-length windowing and coordinate normalization.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frames observed per window.
pub const OBS_LEN: usize = 8;
/// Frames predicted per window.
pub const PRED_LEN: usize = 12;
/// Total window length.
pub const WINDOW_LEN: usize = OBS_LEN + PRED_LEN;
/// Seconds between consecutive frame indices.
pub const FRAME_INTERVAL: f64 = 0.4;
/// Raw SDD annotations run at 30 fps; 12 raw frames make one 0.4 s step.
pub const SDD_FRAME_STEP: i64 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    Meters,
    Pixels,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    /// `frame agent_id x y`
    Ethucy,
    /// `agent_id xmin ymin xmax ymax frame lost occluded generated label`
    Sdd,
}

impl Format {
    pub fn unit(self) -> Unit {
        match self {
            Format::Ethucy => Unit::Meters,
            Format::Sdd => Unit::Pixels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub id: i64,
    /// Strictly increasing frame indices.
    pub frames: Vec<i64>,
    pub positions: Vec<[f64; 2]>,
}

impl AgentTrack {
    pub fn position_at(&self, frame: i64) -> Option<[f64; 2]> {
        self.frames.binary_search(&frame).ok().map(|i| self.positions[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    pub frame_interval: f64,
    /// Sorted by agent id.
    pub agents: Vec<AgentTrack>,
    pub unit: Unit,
}

impl Scene {
    pub fn frame_range(&self) -> Option<(i64, i64)> {
        let first = self.agents.iter().filter_map(|a| a.frames.first()).min()?;
        let last = self.agents.iter().filter_map(|a| a.frames.last()).max()?;
        Some((*first, *last))
    }

    pub fn translated(&self, offset: [f64; 2]) -> Scene {
        let mut out = self.clone();
        for a in &mut out.agents {
            for p in &mut a.positions {
                p[0] += offset[0];
                p[1] += offset[1];
            }
        }
        out
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Raw frames per 0.4 s step. Defaults to the gcd of per-agent frame
    /// gaps for ETH/UCY and [`SDD_FRAME_STEP`] for SDD.
    pub frame_step: Option<i64>,
    /// SDD only: keep `Pedestrian` rows.
    pub pedestrians_only: bool,
    /// Scene id; defaults to the file stem.
    pub scene_id: Option<String>,
}

struct Record {
    frame: i64,
    agent: i64,
    pos: [f64; 2],
}

pub fn load_scene(path: &Path, format: Format) -> Result<Scene> {
    load_scene_with(path, format, &LoadOptions::default())
}

pub fn load_scene_with(path: &Path, format: Format, opts: &LoadOptions) -> Result<Scene> {
    let text = fs::read_to_string(path)?;
    let scene_id = opts.scene_id.clone().unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    parse_scene(&text, path, format, opts, scene_id)
}

pub fn parse_scene(text: &str, path: &Path, format: Format, opts: &LoadOptions, scene_id: String) -> Result<Scene> {
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let record = match format {
            Format::Ethucy => parse_ethucy(&fields).map_err(err)?,
            Format::Sdd => match parse_sdd(&fields, opts.pedestrians_only).map_err(err)? {
                Some(r) => r,
                None => continue,
            },
        };
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::EmptyScene(path.to_path_buf()));
    }

    let mut grouped: BTreeMap<i64, BTreeMap<i64, [f64; 2]>> = BTreeMap::new();
    for r in records {
        if grouped.entry(r.agent).or_default().insert(r.frame, r.pos).is_some() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                message: format!("agent {} has two observations at frame {}", r.agent, r.frame),
            });
        }
    }

    let step = match (opts.frame_step, format) {
        (Some(s), _) => s,
        (None, Format::Sdd) => SDD_FRAME_STEP,
        (None, Format::Ethucy) => infer_frame_step(&grouped),
    };
    if step < 1 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: format!("frame step must be positive, got {step}"),
        });
    }
    let base = grouped.values().filter_map(|m| m.keys().next()).min().copied().unwrap_or(0);

    let agents = grouped
        .into_iter()
        .filter_map(|(id, obs)| {
            let (frames, positions): (Vec<i64>, Vec<[f64; 2]>) = obs
                .into_iter()
                .filter(|(f, _)| (f - base).rem_euclid(step) == 0)
                .map(|(f, p)| ((f - base) / step, p))
                .unzip();
            (!frames.is_empty()).then_some(AgentTrack { id, frames, positions })
        })
        .collect::<Vec<_>>();
    if agents.is_empty() {
        return Err(Error::EmptyScene(path.to_path_buf()));
    }
    Ok(Scene {
        scene_id,
        frame_interval: FRAME_INTERVAL,
        agents,
        unit: format.unit(),
    })
}

fn parse_number(field: &str, what: &str) -> std::result::Result<f64, String> {
    let v: f64 = field
        .trim_matches('"')
        .parse()
        .map_err(|_| format!("cannot parse {what} from `{field}`"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{what} is not finite"))
    }
}

fn parse_integer(field: &str, what: &str) -> std::result::Result<i64, String> {
    let v = parse_number(field, what)?;
    if v.fract() != 0.0 {
        return Err(format!("{what} `{field}` is not an integer"));
    }
    Ok(v as i64)
}

fn parse_ethucy(fields: &[&str]) -> std::result::Result<Record, String> {
    if fields.len() != 4 {
        return Err(format!("expected 4 fields `frame agent_id x y`, got {}", fields.len()));
    }
    Ok(Record {
        frame: parse_integer(fields[0], "frame")?,
        agent: parse_integer(fields[1], "agent_id")?,
        pos: [parse_number(fields[2], "x")?, parse_number(fields[3], "y")?],
    })
}

fn parse_sdd(fields: &[&str], pedestrians_only: bool) -> std::result::Result<Option<Record>, String> {
    if fields.len() != 10 {
        return Err(format!(
            "expected 10 fields `agent_id xmin ymin xmax ymax frame lost occluded generated label`, got {}",
            fields.len()
        ));
    }
    let agent = parse_integer(fields[0], "agent_id")?;
    let xmin = parse_number(fields[1], "xmin")?;
    let ymin = parse_number(fields[2], "ymin")?;
    let xmax = parse_number(fields[3], "xmax")?;
    let ymax = parse_number(fields[4], "ymax")?;
    let frame = parse_integer(fields[5], "frame")?;
    let lost = parse_integer(fields[6], "lost")?;
    parse_integer(fields[7], "occluded")?;
    parse_integer(fields[8], "generated")?;
    let label = fields[9].trim_matches('"');
    if lost == 1 || (pedestrians_only && label != "Pedestrian") {
        return Ok(None);
    }
    Ok(Some(Record {
        frame,
        agent,
        pos: [(xmin + xmax) / 2.0, (ymin + ymax) / 2.0],
    }))
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

fn infer_frame_step(grouped: &BTreeMap<i64, BTreeMap<i64, [f64; 2]>>) -> i64 {
    let g = grouped
        .values()
        .flat_map(|obs| obs.keys().zip(obs.keys().skip(1)).map(|(a, b)| b - a))
        .fold(0, gcd);
    g.max(1)
}

/// Observation/prediction window over agents co-present for all
/// [`WINDOW_LEN`] frames, in normalized coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryWindow {
    pub scene_id: String,
    pub start_frame: i64,
    pub agent_ids: Vec<i64>,
    /// `n×8×2`
    pub observed: Array3<f64>,
    /// `n×12×2`
    pub future: Array3<f64>,
    /// Raw-coordinate translation removed before scaling.
    pub origin: [f64; 2],
    /// Scene units per normalized unit.
    pub scale: f64,
    pub unit: Unit,
}

impl TrajectoryWindow {
    /// Builds a window from raw `n×20×2` positions.
    pub fn from_raw(scene_id: &str, start_frame: i64, agent_ids: Vec<i64>, raw: &Array3<f64>, scale: f64, unit: Unit) -> Result<Self> {
        let (n, len, dims) = raw.dim();
        if len != WINDOW_LEN || dims != 2 || n == 0 || agent_ids.len() != n {
            return Err(Error::Shape(format!(
                "window needs n×{WINDOW_LEN}×2 with n ≥ 1 matching ids, got {:?}",
                raw.dim()
            )));
        }
        if !(scale > 0.0) {
            return Err(Error::Shape(format!("scale must be positive, got {scale}")));
        }
        let first = raw.index_axis(Axis(1), 0);
        let origin = [first.column(0).mean().unwrap(), first.column(1).mean().unwrap()];
        let mut norm = raw.clone();
        for mut p in norm.lanes_mut(Axis(2)) {
            p[0] = (p[0] - origin[0]) / scale;
            p[1] = (p[1] - origin[1]) / scale;
        }
        Ok(Self {
            scene_id: scene_id.to_string(),
            start_frame,
            agent_ids,
            observed: norm.slice(ndarray::s![.., ..OBS_LEN, ..]).to_owned(),
            future: norm.slice(ndarray::s![.., OBS_LEN.., ..]).to_owned(),
            origin,
            scale,
            unit,
        })
    }

    pub fn agents(&self) -> usize {
        self.agent_ids.len()
    }

    /// Normalized `n×20×2` positions.
    pub fn full(&self) -> Array3<f64> {
        ndarray::concatenate(Axis(1), &[self.observed.view(), self.future.view()]).expect("window halves agree on n")
    }

    pub fn denormalize(&self, normalized: &Array3<f64>) -> Array3<f64> {
        let mut out = normalized.clone();
        for mut p in out.lanes_mut(Axis(2)) {
            p[0] = p[0] * self.scale + self.origin[0];
            p[1] = p[1] * self.scale + self.origin[1];
        }
        out
    }

    pub fn normalize(&self, raw: &Array3<f64>) -> Array3<f64> {
        let mut out = raw.clone();
        for mut p in out.lanes_mut(Axis(2)) {
            p[0] = (p[0] - self.origin[0]) / self.scale;
            p[1] = (p[1] - self.origin[1]) / self.scale;
        }
        out
    }

    pub fn id(&self) -> String {
        format!("{}@{}", self.scene_id, self.start_frame)
    }
}

#[derive(Debug, Clone)]
pub struct WindowOptions {
    pub stride: usize,
    /// Divisor for pixel scenes; ignored for meters.
    pub pixels_per_unit: f64,
}

impl Default for WindowOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            pixels_per_unit: 1.0,
        }
    }
}

pub fn make_windows(scene: &Scene, stride: usize) -> Vec<TrajectoryWindow> {
    make_windows_with(
        scene,
        &WindowOptions {
            stride,
            ..WindowOptions::default()
        },
    )
}

pub fn make_windows_with(scene: &Scene, opts: &WindowOptions) -> Vec<TrajectoryWindow> {
    assert!(opts.stride >= 1, "stride must be at least 1");
    let Some((first, last)) = scene.frame_range() else {
        return Vec::new();
    };
    let scale = match scene.unit {
        Unit::Meters => 1.0,
        Unit::Pixels => opts.pixels_per_unit,
    };
    let span = WINDOW_LEN as i64;
    let mut out = Vec::new();
    let mut start = first;
    while start + span - 1 <= last {
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        for agent in &scene.agents {
            let lo = match agent.frames.binary_search(&start) {
                Ok(i) => i,
                Err(_) => continue,
            };
            // Strictly increasing integer frames: full presence iff the slot
            // span - 1 entries later holds frame start + span - 1.
            if agent.frames.get(lo + WINDOW_LEN - 1) == Some(&(start + span - 1)) {
                ids.push(agent.id);
                rows.push(&agent.positions[lo..lo + WINDOW_LEN]);
            }
        }
        if !ids.is_empty() {
            let raw = Array3::from_shape_fn((ids.len(), WINDOW_LEN, 2), |(i, t, c)| rows[i][t][c]);
            out.push(
                TrajectoryWindow::from_raw(&scene.scene_id, start, ids, &raw, scale, scene.unit)
                    .expect("window shape is constructed consistently"),
            );
        }
        start += opts.stride as i64;
    }
    out
}

/// Loads every non-hidden regular file in `dir` as one scene, in file-name
/// order.
pub fn load_scene_dir(dir: &Path, format: Format, opts: &LoadOptions) -> Result<Vec<Scene>> {
    if !dir.is_dir() {
        return Err(Error::MissingScene(dir.to_path_buf()));
    }
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_scene_with(p, format, opts)).collect()
}

/// Writes a scene in the ETH/UCY text layout.
pub fn write_ethucy(scene: &Scene, path: &Path) -> Result<()> {
    let mut rows: Vec<(i64, i64, [f64; 2])> = scene
        .agents
        .iter()
        .flat_map(|a| a.frames.iter().zip(&a.positions).map(move |(f, p)| (*f, a.id, *p)))
        .collect();
    rows.sort_by_key(|(f, id, _)| (*f, *id));
    let mut text = String::new();
    for (f, id, p) in rows {
        text.push_str(&format!("{f} {id} {} {}\n", p[0], p[1]));
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}
