//! Socio-temporal graph representation.
//!
//! At step `t` the graph connects every agent at steps `0..t` (sources) to
//! every agent at step `t` (destinations). Source columns are time-major:
//! column `τ·n + j` holds agent `j` at step `τ`. Edges only point forward in
//! time, so the stacked graph over all steps is acyclic by construction.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Mat};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Prior,
    Posterior,
}

/// Continuous bilinear embedding `G^t = [Gu; Gv]` of the graph at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StgEmbedding {
    pub step: usize,
    /// `n×d`, one row per destination agent.
    pub gu: Mat,
    /// `(n·t)×d`, one row per source `(agent, earlier step)`.
    pub gv: Mat,
    pub provenance: Provenance,
}

impl StgEmbedding {
    pub fn new(step: usize, gu: Mat, gv: Mat, provenance: Provenance) -> Result<Self> {
        let (n, d) = gu.dim();
        if d == 0 {
            return Err(Error::Shape("embedding width must be positive".into()));
        }
        if gv.dim() != (n * step, d) {
            return Err(Error::Shape(format!(
                "Gv must be {}×{d} at step {step} with {n} agents, got {:?}",
                n * step,
                gv.dim()
            )));
        }
        if gu.iter().chain(gv.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Shape("embedding has non-finite entries".into()));
        }
        Ok(Self {
            step,
            gu,
            gv,
            provenance,
        })
    }

    pub fn agents(&self) -> usize {
        self.gu.nrows()
    }

    pub fn dim(&self) -> usize {
        self.gu.ncols()
    }

    /// Inner products `Gu · Gvᵀ`.
    pub fn scores(&self) -> Mat {
        self.gu.dot(&self.gv.t())
    }
}

/// Binary `n×(n·t)` adjacency of the graph at step `t`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StgAdjacency {
    pub step: usize,
    pub agents: usize,
    bits: Vec<bool>,
}

impl StgAdjacency {
    pub fn from_bits(step: usize, agents: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != agents * agents * step {
            return Err(Error::Shape(format!(
                "adjacency at step {step} with {agents} agents needs {} bits, got {}",
                agents * agents * step,
                bits.len()
            )));
        }
        Ok(Self { step, agents, bits })
    }

    pub fn from_matrix(step: usize, m: &Mat) -> Result<Self> {
        let agents = m.nrows();
        if m.ncols() != agents * step {
            return Err(Error::Shape(format!(
                "adjacency at step {step} must have {} columns, got {}",
                agents * step,
                m.ncols()
            )));
        }
        Ok(Self {
            step,
            agents,
            bits: m.iter().map(|v| *v > 0.0).collect(),
        })
    }

    pub fn zeros(step: usize, agents: usize) -> Self {
        Self {
            step,
            agents,
            bits: vec![false; agents * agents * step],
        }
    }

    pub fn ones(step: usize, agents: usize) -> Self {
        Self {
            step,
            agents,
            bits: vec![true; agents * agents * step],
        }
    }

    pub fn cols(&self) -> usize {
        self.agents * self.step
    }

    pub fn get(&self, dest: usize, col: usize) -> bool {
        self.bits[dest * self.cols() + col]
    }

    pub fn set(&mut self, dest: usize, col: usize, on: bool) {
        let cols = self.cols();
        self.bits[dest * cols + col] = on;
    }

    /// Edge from agent `source` at step `tau` into agent `dest` at this step.
    pub fn edge(&self, dest: usize, source: usize, tau: usize) -> bool {
        self.get(dest, column_index(source, tau, self.agents))
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn to_matrix(&self) -> Mat {
        Array2::from_shape_fn((self.agents, self.cols()), |(r, c)| if self.get(r, c) { 1.0 } else { 0.0 })
    }

    pub fn density(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            edge_count(self) as f64 / self.bits.len() as f64
        }
    }
}

/// Column of source `(agent, tau)` in the time-major layout.
pub fn column_index(agent: usize, tau: usize, agents: usize) -> usize {
    tau * agents + agent
}

/// Inverse of [`column_index`]: `(agent, tau)`.
pub fn decode_column(col: usize, agents: usize) -> (usize, usize) {
    (col % agents, col / agents)
}

/// `𝒢^t = (Gu Gvᵀ > 0)` with a strict threshold. At step 0 the result has
/// no columns.
pub fn hard_adjacency(e: &StgEmbedding) -> StgAdjacency {
    let scores = e.scores();
    StgAdjacency {
        step: e.step,
        agents: e.agents(),
        bits: scores.iter().map(|v| *v > 0.0).collect(),
    }
}

/// Elementwise `sigmoid(Gu Gvᵀ / temperature)`.
pub fn soft_adjacency(e: &StgEmbedding, temperature: f64) -> Result<Mat> {
    if !(temperature > 0.0) {
        return Err(Error::Shape(format!("temperature must be positive, got {temperature}")));
    }
    Ok(e.scores().mapv(|v| sigmoid(v / temperature)))
}

pub fn edge_count(a: &StgAdjacency) -> usize {
    a.bits.iter().filter(|b| **b).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
    }

    #[test]
    fn positive_product_is_an_edge() {
        let e = StgEmbedding::new(1, array![[1.0, 0.0]], array![[1.0, 0.0]], Provenance::Prior).unwrap();
        assert_eq!(hard_adjacency(&e).to_matrix(), array![[1.0]]);
    }

    #[test]
    fn zero_product_is_not_an_edge() {
        let e = StgEmbedding::new(1, array![[1.0, 0.0]], array![[0.0, 1.0]], Provenance::Prior).unwrap();
        assert_eq!(hard_adjacency(&e).to_matrix(), array![[0.0]]);
    }

    #[test]
    fn step_zero_gives_empty_graph() {
        let e = StgEmbedding::new(0, array![[1.0, 0.0], [0.0, 1.0]], Array2::zeros((0, 2)), Provenance::Prior).unwrap();
        let a = hard_adjacency(&e);
        assert_eq!(a.cols(), 0);
        assert_eq!(edge_count(&a), 0);
    }

    #[test]
    fn hard_adjacency_matches_dot_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, t, d) = (3, 2, 4);
        let gu = random(n, d, &mut rng);
        let gv = random(n * t, d, &mut rng);
        let e = StgEmbedding::new(t, gu.clone(), gv.clone(), Provenance::Posterior).unwrap();
        let a = hard_adjacency(&e);
        for i in 0..n {
            for c in 0..n * t {
                let dot: f64 = (0..d).map(|k| gu[[i, k]] * gv[[c, k]]).sum();
                assert_eq!(a.get(i, c), dot > 0.0, "entry ({i},{c})");
            }
        }
    }

    #[test]
    fn soft_adjacency_closed_forms() {
        let e = StgEmbedding::new(1, array![[1.0, 0.0]], array![[0.0, 1.0]], Provenance::Prior).unwrap();
        assert_eq!(soft_adjacency(&e, 1.0).unwrap()[[0, 0]], 0.5);
        let ln3 = 3f64.ln();
        let e = StgEmbedding::new(1, array![[ln3]], array![[1.0]], Provenance::Prior).unwrap();
        assert!((soft_adjacency(&e, 1.0).unwrap()[[0, 0]] - 0.75).abs() < 1e-15);
        assert!(soft_adjacency(&e, 0.0).is_err());
    }

    #[test]
    fn soft_adjacency_converges_to_hard_at_low_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        for _ in 0..50 {
            let e = StgEmbedding::new(2, random(3, 4, &mut rng), random(6, 4, &mut rng), Provenance::Prior).unwrap();
            let scores = e.scores();
            let soft = soft_adjacency(&e, 1e-3).unwrap();
            let hard = hard_adjacency(&e).to_matrix();
            for ((s, h), dot) in soft.iter().zip(hard.iter()).zip(scores.iter()) {
                if dot.abs() > 0.1 {
                    assert!((s - h).abs() < 1e-20, "dot {dot}: soft {s} hard {h}");
                    checked += 1;
                }
            }
        }
        assert!(checked > 500);
    }

    #[test]
    fn edge_count_cases() {
        assert_eq!(edge_count(&StgAdjacency::zeros(2, 2)), 0);
        assert_eq!(edge_count(&StgAdjacency::ones(2, 2)), 8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Array2::from_shape_fn((3, 9), |_| if rng.random::<f64>() > 0.5 { 1.0 } else { 0.0 });
        let a = StgAdjacency::from_matrix(3, &m).unwrap();
        assert_eq!(edge_count(&a), m.sum() as usize);
    }

    #[test]
    fn rejects_inconsistent_shapes() {
        assert!(StgEmbedding::new(2, Array2::zeros((2, 3)), Array2::zeros((3, 3)), Provenance::Prior).is_err());
        assert!(StgEmbedding::new(1, Array2::zeros((2, 0)), Array2::zeros((2, 0)), Provenance::Prior).is_err());
        assert!(StgAdjacency::from_bits(2, 2, vec![true; 7]).is_err());
    }

    proptest! {
        #[test]
        fn column_layout_round_trips(agents in 1usize..12, tau in 0usize..25, agent_seed in 0usize..1000) {
            let agent = agent_seed % agents;
            let col = column_index(agent, tau, agents);
            prop_assert_eq!(decode_column(col, agents), (agent, tau));
        }

        #[test]
        fn positive_rescaling_of_gu_keeps_adjacency(seed in 0u64..1000, c in 1e-3f64..1e3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = StgEmbedding::new(2, random(3, 4, &mut rng), random(6, 4, &mut rng), Provenance::Prior).unwrap();
            let scaled = StgEmbedding::new(2, &e.gu * c, e.gv.clone(), Provenance::Prior).unwrap();
            prop_assert_eq!(hard_adjacency(&e), hard_adjacency(&scaled));
        }

        #[test]
        fn soft_adjacency_is_monotone_in_score(a in -20.0f64..20.0, delta in 1e-6f64..5.0, temp in 0.1f64..4.0) {
            let lo = StgEmbedding::new(1, array![[a]], array![[1.0]], Provenance::Prior).unwrap();
            let hi = StgEmbedding::new(1, array![[a + delta]], array![[1.0]], Provenance::Prior).unwrap();
            prop_assert!(soft_adjacency(&lo, temp).unwrap()[[0, 0]] <= soft_adjacency(&hi, temp).unwrap()[[0, 0]]);
        }
    }
}
