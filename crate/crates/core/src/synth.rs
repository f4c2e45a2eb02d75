//! Scripted multi-agent scenarios with known ground truth.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{AgentTrack, Scene, Unit, FRAME_INTERVAL, WINDOW_LEN};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// Agents start on a circle and walk past its centre, each offset to its
    /// right by half of `spacing`.
    Crossing,
    /// Two agents on opposite parallel lanes pass each other once.
    ApproachDiverge,
    /// Agents walk side by side with equal velocity.
    Parallel,
    /// Constant speed with random heading perturbations.
    RandomWalk,
    /// Straight walkers that repel each other only inside `radius`.
    DistanceGated,
}

impl ScenarioKind {
    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Crossing => "crossing",
            ScenarioKind::ApproachDiverge => "approach_diverge",
            ScenarioKind::Parallel => "parallel",
            ScenarioKind::RandomWalk => "random_walk",
            ScenarioKind::DistanceGated => "distance_gated",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "crossing" => ScenarioKind::Crossing,
            "approach_diverge" => ScenarioKind::ApproachDiverge,
            "parallel" => ScenarioKind::Parallel,
            "random_walk" => ScenarioKind::RandomWalk,
            "distance_gated" => ScenarioKind::DistanceGated,
            other => return Err(Error::UnknownScenario(other.to_string())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub agents: usize,
    /// Scene units per frame.
    pub speed: f64,
    /// Standard deviation of Gaussian noise added to recorded positions.
    pub noise: f64,
    pub frames: usize,
    /// Lateral gap between lanes (parallel, approach_diverge).
    pub spacing: f64,
    /// Interaction radius (distance_gated).
    pub radius: f64,
    /// Repulsion gain per frame (distance_gated).
    pub strength: f64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            kind: ScenarioKind::Crossing,
            agents: 2,
            speed: 0.5,
            noise: 0.0,
            frames: WINDOW_LEN,
            spacing: 1.0,
            radius: 2.0,
            strength: 0.3,
        }
    }
}

impl ScenarioSpec {
    pub fn new(kind: ScenarioKind, agents: usize) -> Self {
        Self {
            kind,
            agents,
            ..Self::default()
        }
    }

    /// Frame at which the two approach_diverge agents are closest.
    pub fn meeting_frame(&self) -> usize {
        self.frames / 2
    }

    fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.agents == 0 {
            problems.push("agents must be at least 1".to_string());
        }
        if self.kind == ScenarioKind::ApproachDiverge && self.agents != 2 {
            problems.push("approach_diverge needs exactly 2 agents".to_string());
        }
        if self.frames == 0 {
            problems.push("frames must be at least 1".to_string());
        }
        for (name, v) in [("speed", self.speed), ("spacing", self.spacing), ("radius", self.radius), ("strength", self.strength)] {
            if !v.is_finite() || v < 0.0 {
                problems.push(format!("{name} must be finite and non-negative"));
            }
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            problems.push("noise must be finite and non-negative".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidScenario(problems.join("; ")))
        }
    }
}

/// Generates a scene; identical `(spec, seed)` give identical scenes.
pub fn synth_scenario(spec: &ScenarioSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let paths = match spec.kind {
        ScenarioKind::Crossing => crossing(spec, &mut rng),
        ScenarioKind::ApproachDiverge => approach_diverge(spec),
        ScenarioKind::Parallel => parallel(spec),
        ScenarioKind::RandomWalk => random_walk(spec, &mut rng),
        ScenarioKind::DistanceGated => distance_gated(spec, &mut rng),
    };
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("finite std");
    let agents = paths
        .into_iter()
        .enumerate()
        .map(|(i, path)| AgentTrack {
            id: i as i64,
            frames: (0..path.len() as i64).collect(),
            positions: path
                .into_iter()
                .map(|[x, y]| {
                    if spec.noise > 0.0 {
                        [x + noise.sample(&mut rng), y + noise.sample(&mut rng)]
                    } else {
                        [x, y]
                    }
                })
                .collect(),
        })
        .collect();
    Ok(Scene {
        scene_id: format!("{}-{seed}", spec.kind),
        frame_interval: FRAME_INTERVAL,
        agents,
        unit: Unit::Meters,
    })
}

type Path2 = Vec<[f64; 2]>;

fn crossing(spec: &ScenarioSpec, rng: &mut ChaCha8Rng) -> Vec<Path2> {
    let radius = spec.speed * (spec.frames.saturating_sub(1)) as f64 / 2.0;
    let phase = rng.random_range(0.0..2.0 * PI);
    (0..spec.agents)
        .map(|k| {
            let angle = phase + 2.0 * PI * k as f64 / spec.agents as f64;
            let start = [radius * angle.cos(), radius * angle.sin()];
            let dir = [-angle.cos(), -angle.sin()];
            // Keep to the right of the centre by half the lane spacing.
            let side = [-dir[1] * spec.spacing / 2.0, dir[0] * spec.spacing / 2.0];
            (0..spec.frames)
                .map(|f| {
                    let s = spec.speed * f as f64;
                    [start[0] + side[0] + dir[0] * s, start[1] + side[1] + dir[1] * s]
                })
                .collect()
        })
        .collect()
}

fn approach_diverge(spec: &ScenarioSpec) -> Vec<Path2> {
    let meet = spec.meeting_frame() as f64;
    let half = spec.spacing / 2.0;
    let lane = |sign: f64| -> Path2 {
        (0..spec.frames)
            .map(|f| [sign * -spec.speed * (meet - f as f64), sign * half])
            .collect()
    };
    vec![lane(1.0), lane(-1.0)]
}

fn parallel(spec: &ScenarioSpec) -> Vec<Path2> {
    (0..spec.agents)
        .map(|k| {
            (0..spec.frames)
                .map(|f| [spec.speed * f as f64, k as f64 * spec.spacing])
                .collect()
        })
        .collect()
}

fn random_walk(spec: &ScenarioSpec, rng: &mut ChaCha8Rng) -> Vec<Path2> {
    let turn = Normal::new(0.0, 0.3).expect("finite std");
    let extent = 2.0 * spec.spacing * (spec.agents as f64).sqrt();
    (0..spec.agents)
        .map(|_| {
            let mut p = [rng.random_range(-extent..=extent), rng.random_range(-extent..=extent)];
            let mut heading = rng.random_range(0.0..2.0 * PI);
            let mut path = Vec::with_capacity(spec.frames);
            for _ in 0..spec.frames {
                path.push(p);
                heading += turn.sample(rng);
                p = [p[0] + spec.speed * heading.cos(), p[1] + spec.speed * heading.sin()];
            }
            path
        })
        .collect()
}

fn distance_gated(spec: &ScenarioSpec, rng: &mut ChaCha8Rng) -> Vec<Path2> {
    let n = spec.agents;
    let extent = spec.radius * (n as f64).sqrt();
    let mut pos: Vec<[f64; 2]> = (0..n)
        .map(|_| [rng.random_range(-extent..=extent), rng.random_range(-extent..=extent)])
        .collect();
    let mut vel: Vec<[f64; 2]> = (0..n)
        .map(|_| {
            let h = rng.random_range(0.0..2.0 * PI);
            [spec.speed * h.cos(), spec.speed * h.sin()]
        })
        .collect();
    let mut paths: Vec<Path2> = vec![Vec::with_capacity(spec.frames); n];
    for _ in 0..spec.frames {
        for (path, p) in paths.iter_mut().zip(&pos) {
            path.push(*p);
        }
        let mut push = vec![[0.0; 2]; n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let dx = pos[i][0] - pos[j][0];
                let dy = pos[i][1] - pos[j][1];
                let d = (dx * dx + dy * dy).sqrt();
                if d < spec.radius && d > 1e-9 {
                    let gain = spec.strength * (1.0 - d / spec.radius);
                    push[i][0] += gain * dx / d;
                    push[i][1] += gain * dy / d;
                }
            }
        }
        for i in 0..n {
            vel[i][0] += push[i][0];
            vel[i][1] += push[i][1];
            pos[i][0] += vel[i][0];
            pos[i][1] += vel[i][1];
        }
    }
    paths
}
