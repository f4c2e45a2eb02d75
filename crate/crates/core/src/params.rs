//! Named parameter tables and their gradients.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The three disjoint parameter sets: trajectory module (Φ), graph prior (Ψ)
/// and graph posterior (Θ).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Trajectory,
    Prior,
    Posterior,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Trajectory, ParamGroup::Prior, ParamGroup::Posterior];

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::Trajectory => "phi",
            ParamGroup::Prior => "psi",
            ParamGroup::Posterior => "theta",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Glorot normal, `std = sqrt(2 / (fan_in + fan_out))`.
    Xavier,
    Identity,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Mat,
    /// Updated by the optimizer.
    pub trainable: bool,
    /// Subject to decoupled weight decay.
    pub decay: bool,
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub group: ParamGroup,
    pub shape: (usize, usize),
    pub init: Init,
    pub trainable: bool,
    pub decay: bool,
}

/// Collects parameter declarations in a fixed order; the order defines
/// [`ParamId`]s and the checkpoint layout.
#[derive(Debug, Default)]
pub struct Registry {
    specs: Vec<ParamSpec>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn declare(&mut self, group: ParamGroup, name: impl Into<String>, shape: (usize, usize), init: Init) -> ParamId {
        let name = format!("{}.{}", group.prefix(), name.into());
        let decay = matches!(init, Init::Xavier);
        self.specs.push(ParamSpec {
            name,
            group,
            shape,
            init,
            trainable: true,
            decay,
        });
        ParamId(self.specs.len() - 1)
    }

    /// A parameter that no loss term reaches; it keeps its initial value.
    pub fn declare_fixed(&mut self, group: ParamGroup, name: impl Into<String>, shape: (usize, usize), init: Init) -> ParamId {
        let id = self.declare(group, name, shape, init);
        let spec = &mut self.specs[id.0];
        spec.trainable = false;
        spec.decay = false;
        id
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn initialize<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let entries = self
            .specs
            .iter()
            .map(|spec| ParamEntry {
                name: spec.name.clone(),
                group: spec.group,
                value: init_matrix(spec.shape, spec.init, rng),
                trainable: spec.trainable,
                decay: spec.decay,
            })
            .collect();
        ParamStore { entries }
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn init_matrix<R: Rng + ?Sized>(shape: (usize, usize), init: Init, rng: &mut R) -> Mat {
    match init {
        Init::Zeros => Array2::zeros(shape),
        Init::Ones => Array2::ones(shape),
        Init::Identity => {
            let mut m = Array2::zeros(shape);
            for i in 0..shape.0.min(shape.1) {
                m[[i, i]] = 1.0;
            }
            m
        }
        Init::Normal(std) => Array2::from_shape_fn(shape, |_| std * normal(rng)),
        Init::Xavier => {
            let std = (2.0 / (shape.0 + shape.1) as f64).sqrt();
            Array2::from_shape_fn(shape, |_| std * normal(rng))
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    pub(crate) entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<ParamEntry>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.iter().all(|v| v.is_finite()))
    }
}

/// Gradients aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Mat>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.entries.iter().map(|e| Array2::zeros(e.value.dim())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            *a += b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in &mut self.grads {
            g.mapv_inplace(|v| v * c);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm.is_finite() {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn is_zero(&self) -> bool {
        self.grads.iter().all(|g| g.iter().all(|v| *v == 0.0))
    }
}
