//! Statistics of sampled graphs: edge activity against distance, edge
//! spans, and edge flips against relative motion.

use std::path::Path;

use ndarray::ArrayView3;
use plotters::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::stg::{decode_column, StgAdjacency};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    Approaching,
    Diverging,
    Tied,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipKind {
    #[serde(rename = "flip_0_to_1")]
    On,
    #[serde(rename = "flip_1_to_0")]
    Off,
}

impl FlipKind {
    pub fn name(self) -> &'static str {
        match self {
            FlipKind::On => "flip_0_to_1",
            FlipKind::Off => "flip_1_to_0",
        }
    }
}

/// How per-source-step edges reduce to one bit per agent pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairAggregation {
    /// Any edge from `j` at any earlier step into `i`.
    #[default]
    AnyStep,
    /// Only the edge from `j` at step `t − 1`.
    LatestStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeEvent {
    pub window_id: String,
    pub sample: usize,
    pub dest: usize,
    pub source: usize,
    pub step: usize,
    pub kind: FlipKind,
    pub motion: Motion,
    /// `‖x_i^t − x_j^t‖`.
    pub distance: f64,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Compares the pair distance at the current step with the previous one.
pub fn classify_motion(xi_prev: [f64; 2], xj_prev: [f64; 2], xi_cur: [f64; 2], xj_cur: [f64; 2]) -> Motion {
    let before = dist(xi_prev, xj_prev);
    let now = dist(xi_cur, xj_cur);
    if now < before {
        Motion::Approaching
    } else if now > before {
        Motion::Diverging
    } else {
        Motion::Tied
    }
}

/// Pair-level edge from `source` into `dest`.
pub fn pair_edge(adj: &StgAdjacency, dest: usize, source: usize, agg: PairAggregation) -> bool {
    match agg {
        PairAggregation::AnyStep => (0..adj.step).any(|tau| adj.edge(dest, source, tau)),
        PairAggregation::LatestStep => adj.step > 0 && adj.edge(dest, source, adj.step - 1),
    }
}

fn point(x: &ArrayView3<f64>, agent: usize, t: usize) -> [f64; 2] {
    [x[[agent, t, 0]], x[[agent, t, 1]]]
}

/// Flip events between consecutive adjacencies. `adjacency` must hold
/// consecutive steps and `positions` (`n×T×2`) must cover the last of them.
pub fn flip_events(
    window_id: &str,
    sample: usize,
    adjacency: &[StgAdjacency],
    positions: ArrayView3<f64>,
    agg: PairAggregation,
) -> Result<Vec<EdgeEvent>> {
    let (n, steps, _) = positions.dim();
    for pair in adjacency.windows(2) {
        if pair[1].step != pair[0].step + 1 {
            return Err(Error::Shape(format!("adjacency steps {} and {} are not consecutive", pair[0].step, pair[1].step)));
        }
    }
    if let Some(last) = adjacency.last() {
        if last.step >= steps {
            return Err(Error::Shape(format!("positions cover {steps} steps, adjacency reaches step {}", last.step)));
        }
    }
    if adjacency.iter().any(|a| a.agents != n) {
        return Err(Error::Shape(format!("adjacency agent count differs from positions ({n})")));
    }
    let mut out = Vec::new();
    for pair in adjacency.windows(2) {
        let (prev, cur) = (&pair[0], &pair[1]);
        let t = cur.step;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let before = pair_edge(prev, i, j, agg);
                let now = pair_edge(cur, i, j, agg);
                if before == now {
                    continue;
                }
                out.push(EdgeEvent {
                    window_id: window_id.to_string(),
                    sample,
                    dest: i,
                    source: j,
                    step: t,
                    kind: if now { FlipKind::On } else { FlipKind::Off },
                    motion: classify_motion(
                        point(&positions, i, t - 1),
                        point(&positions, j, t - 1),
                        point(&positions, i, t),
                        point(&positions, j, t),
                    ),
                    distance: dist(point(&positions, i, t), point(&positions, j, t)),
                });
            }
        }
    }
    Ok(out)
}

/// Candidate edge `(i, j, τ) → t` with its node distance `‖x_i^t − x_j^τ‖`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeSite {
    pub step: usize,
    pub dest: usize,
    pub source: usize,
    pub tau: usize,
    pub distance: f64,
    pub active: bool,
}

/// All candidate edges of an adjacency; self edges only when requested.
pub fn edge_sites(adj: &StgAdjacency, positions: ArrayView3<f64>, include_self: bool) -> Result<Vec<EdgeSite>> {
    let (n, steps, _) = positions.dim();
    if adj.agents != n || adj.step >= steps {
        return Err(Error::Shape(format!(
            "adjacency for step {} with {} agents does not fit positions {:?}",
            adj.step,
            adj.agents,
            positions.dim()
        )));
    }
    let t = adj.step;
    let mut out = Vec::with_capacity(n * adj.cols());
    for i in 0..n {
        for c in 0..adj.cols() {
            let (j, tau) = decode_column(c, n);
            if i == j && !include_self {
                continue;
            }
            out.push(EdgeSite {
                step: t,
                dest: i,
                source: j,
                tau,
                distance: dist(point(&positions, i, t), point(&positions, j, tau)),
                active: adj.get(i, c),
            });
        }
    }
    Ok(out)
}

/// Fixed-width histogram. Values outside `[lo, hi)` land in the first or
/// last bin so counts always sum to the number of inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins == 0 || !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Config(vec![format!("histogram needs bins ≥ 1 and lo < hi, got {bins} bins over [{lo}, {hi})")]));
        }
        Ok(Self {
            lo,
            hi,
            counts: vec![0; bins],
        })
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.counts.len() as f64
    }

    pub fn bin_of(&self, v: f64) -> usize {
        let raw = ((v - self.lo) / self.width()).floor();
        if raw.is_nan() || raw < 0.0 {
            0
        } else {
            (raw as usize).min(self.counts.len() - 1)
        }
    }

    pub fn add(&mut self, v: f64) {
        let b = self.bin_of(v);
        self.counts[b] += 1;
    }

    pub fn from_values(values: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Self> {
        let mut h = Self::new(lo, hi, bins)?;
        if values.is_empty() {
            log::warn!("histogram over [{lo}, {hi}) has no input values");
        }
        for v in values {
            h.add(*v);
        }
        Ok(h)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn bin_range(&self, b: usize) -> (f64, f64) {
        let w = self.width();
        (self.lo + b as f64 * w, self.lo + (b + 1) as f64 * w)
    }

    /// Index of the fullest bin (first on ties).
    pub fn mode_bin(&self) -> Option<usize> {
        if self.total() == 0 {
            return None;
        }
        let max = *self.counts.iter().max().unwrap();
        self.counts.iter().position(|c| *c == max)
    }

    pub fn write_csv(&self, path: &Path, label: Option<(&str, &str)>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["bin_lo", "bin_hi", "count"];
        if let Some((col, _)) = label {
            header.insert(0, col);
        }
        w.write_record(&header)?;
        for (b, c) in self.counts.iter().enumerate() {
            let (lo, hi) = self.bin_range(b);
            let mut rec = vec![lo.to_string(), hi.to_string(), c.to_string()];
            if let Some((_, v)) = label {
                rec.insert(0, v.to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Distances of active non-self edges.
pub fn distance_histogram(sites: &[EdgeSite], lo: f64, hi: f64, bins: usize) -> Result<Histogram> {
    let v: Vec<f64> = sites.iter().filter(|s| s.active).map(|s| s.distance).collect();
    Histogram::from_values(&v, lo, hi, bins)
}

/// Spans `t − τ` of active edges, one bin per span `1..=max_span`.
pub fn span_histogram(sites: &[EdgeSite], max_span: usize) -> Result<Histogram> {
    let v: Vec<f64> = sites.iter().filter(|s| s.active).map(|s| (s.step - s.tau) as f64).collect();
    Histogram::from_values(&v, 0.5, max_span as f64 + 0.5, max_span.max(1))
}

/// Flip distances split by kind.
pub fn flip_distance_histogram(events: &[EdgeEvent], lo: f64, hi: f64, bins: usize) -> Result<Vec<(FlipKind, Histogram)>> {
    [FlipKind::On, FlipKind::Off]
        .into_iter()
        .map(|kind| {
            let v: Vec<f64> = events.iter().filter(|e| e.kind == kind).map(|e| e.distance).collect();
            Ok((kind, Histogram::from_values(&v, lo, hi, bins)?))
        })
        .collect()
}

/// Counts of `(kind, motion)` pairs.
pub fn flip_motion_table(events: &[EdgeEvent]) -> Vec<(FlipKind, Motion, usize)> {
    let mut out = Vec::new();
    for kind in [FlipKind::On, FlipKind::Off] {
        for motion in [Motion::Approaching, Motion::Diverging, Motion::Tied] {
            let c = events.iter().filter(|e| e.kind == kind && e.motion == motion).count();
            out.push((kind, motion, c));
        }
    }
    out
}

/// Ranks starting at 1; ties share their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|a, b| values[*a].total_cmp(&values[*b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = r;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub rho: f64,
    /// Two-sided, from the `t` approximation with `n − 2` degrees of freedom.
    pub p_value: f64,
    pub n: usize,
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Correlation> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("spearman inputs differ in length: {} vs {}", x.len(), y.len())));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::Shape(format!("spearman needs at least 3 points, got {n}")));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let mean = (n as f64 + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mean) * (b - mean);
        sxx += (a - mean).powi(2);
        syy += (b - mean).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Correlation {
            rho: 0.0,
            p_value: 1.0,
            n,
        });
    }
    let rho = sxy / (sxx * syy).sqrt();
    let df = (n - 2) as f64;
    let p_value = if rho.abs() >= 1.0 {
        0.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
        2.0 * (1.0 - dist.cdf(t.abs()))
    };
    Ok(Correlation { rho, p_value, n })
}

/// Renders a histogram as an SVG bar chart.
pub fn plot_histogram(hist: &Histogram, title: &str, path: &Path) -> Result<()> {
    let plot_err = |e: String| Error::Plot(e);
    let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(e.to_string()))?;
    let ymax = hist.counts.iter().copied().max().unwrap_or(0).max(1);
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(30)
        .y_label_area_size(45)
        .build_cartesian_2d(hist.lo..hist.hi, 0u64..ymax + ymax / 10 + 1)
        .map_err(|e| plot_err(e.to_string()))?;
    chart.configure_mesh().disable_x_mesh().draw().map_err(|e| plot_err(e.to_string()))?;
    chart
        .draw_series(hist.counts.iter().enumerate().map(|(b, c)| {
            let (lo, hi) = hist.bin_range(b);
            Rectangle::new([(lo, 0), (hi, *c)], BLUE.mix(0.6).filled())
        }))
        .map_err(|e| plot_err(e.to_string()))?;
    root.present().map_err(|e| plot_err(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn motion_classes() {
        let o = [0.0, 0.0];
        assert_eq!(classify_motion(o, [5.0, 0.0], o, [3.0, 0.0]), Motion::Approaching);
        assert_eq!(classify_motion(o, [3.0, 0.0], o, [5.0, 0.0]), Motion::Diverging);
        assert_eq!(classify_motion(o, [3.0, 0.0], o, [0.0, 3.0]), Motion::Tied);
    }

    fn pair_sequence(bits: &[bool]) -> Vec<StgAdjacency> {
        bits.iter()
            .enumerate()
            .map(|(k, b)| {
                let t = k + 1;
                let mut a = StgAdjacency::zeros(t, 2);
                if *b {
                    a.set(0, crate::stg::column_index(1, t - 1, 2), true);
                }
                a
            })
            .collect()
    }

    #[test]
    fn scripted_pair_flips() {
        // Pair bits over steps 1..=5: 0,0,1,1,0.
        let adj = pair_sequence(&[false, false, true, true, false]);
        let x = Array3::zeros((2, 6, 2));
        let ev = flip_events("w", 0, &adj, x.view(), PairAggregation::LatestStep).unwrap();
        let got: Vec<(usize, FlipKind)> = ev.iter().map(|e| (e.step, e.kind)).collect();
        assert_eq!(got, vec![(3, FlipKind::On), (5, FlipKind::Off)]);
        let constant = pair_sequence(&[true; 5]);
        assert!(flip_events("w", 0, &constant, x.view(), PairAggregation::LatestStep).unwrap().is_empty());
    }

    #[test]
    fn misaligned_steps_are_rejected() {
        let adj = vec![StgAdjacency::zeros(1, 2), StgAdjacency::zeros(3, 2)];
        let x = Array3::zeros((2, 4, 2));
        assert!(flip_events("w", 0, &adj, x.view(), PairAggregation::AnyStep).is_err());
        let adj = vec![StgAdjacency::zeros(3, 2)];
        assert!(flip_events("w", 0, &adj, Array3::zeros((2, 3, 2)).view(), PairAggregation::AnyStep).is_err());
    }

    #[test]
    fn single_distance_gives_single_bin() {
        let h = Histogram::from_values(&[2.5; 7], 0.0, 10.0, 10).unwrap();
        assert_eq!(h.counts.iter().filter(|c| **c > 0).count(), 1);
        assert_eq!(h.counts[2], 7);
    }

    #[test]
    fn histogram_counts_sum_with_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v: Vec<f64> = (0..500).map(|_| rng.random_range(-5.0..15.0)).collect();
        let h = Histogram::from_values(&v, 0.0, 10.0, 7).unwrap();
        assert_eq!(h.total(), 500);
        assert!(Histogram::new(1.0, 1.0, 3).is_err());
    }

    #[test]
    fn average_ranks_with_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
    }

    #[test]
    fn spearman_known_values() {
        let c = spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[5.0, 6.0, 7.0, 8.0, 7.0]).unwrap();
        // Ranks of y: 1, 2, 3.5, 5, 3.5 → ρ = 0.8208.
        assert!((c.rho - 0.820_782_681_668_123_5).abs() < 1e-12, "{}", c.rho);
        let perfect = spearman(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]).unwrap();
        assert_eq!(perfect.rho, -1.0);
        assert_eq!(perfect.p_value, 0.0);
        let flat = spearman(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(flat.p_value, 1.0);
    }

    #[test]
    fn spearman_p_value_matches_reference() {
        // n = 10, ρ = 0.6: t = 0.6·√(8/0.64) = 2.1213, two-sided p ≈ 0.06666.
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y = [1.0, 0.0, 3.0, 5.0, 2.0, 4.0, 9.0, 6.0, 8.0, 7.0];
        let c = spearman(&x, &y).unwrap();
        let t = c.rho * (8.0 / (1.0 - c.rho * c.rho)).sqrt();
        let p = 2.0 * (1.0 - StudentsT::new(0.0, 1.0, 8.0).unwrap().cdf(t));
        assert!((c.p_value - p).abs() < 1e-15);
        assert!(c.p_value > 0.0 && c.p_value < 1.0);
    }

    #[test]
    fn edge_sites_skip_self_edges() {
        let a = StgAdjacency::ones(2, 3);
        let x = Array3::zeros((3, 3, 2));
        assert_eq!(edge_sites(&a, x.view(), false).unwrap().len(), 3 * 6 - 6);
        assert_eq!(edge_sites(&a, x.view(), true).unwrap().len(), 18);
        let spans = span_histogram(&edge_sites(&a, x.view(), true).unwrap(), 2).unwrap();
        assert_eq!(spans.counts, vec![9, 9]);
    }

    #[test]
    fn plot_is_written() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.svg");
        let h = Histogram::from_values(&[1.0, 2.0, 2.5], 0.0, 4.0, 4).unwrap();
        plot_histogram(&h, "distance", &path).unwrap();
        let svg = std::fs::read_to_string(&path).unwrap();
        assert!(svg.contains("<svg"));
    }
}
