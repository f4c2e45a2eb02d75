//! Declarative run configuration.
//!
//! ```toml
//! schema_version = 1
//! seed = 7
//! out_dir = "runs/demo"
//! ablations = ["no_g"]
//!
//! [data]
//! format = "ethucy"
//! train = ["scenes/train"]
//! test = ["scenes/test"]
//!
//! [model]
//! embed_dim = 16
//!
//! [train]
//! epochs = 50
//!
//! [predict]
//! k = 20
//! ```
//!
//! Relative data paths resolve against `data.root`, then the
//! `STGFORMER_DATA_ROOT` environment variable, then the config file's
//! directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_scene_with, load_scene_dir, make_windows_with, Format, LoadOptions, TrajectoryWindow, WindowOptions};
use crate::error::{Error, Result};
use crate::eval::{BestOf, Protocol};
use crate::infer::PredictOptions;
use crate::model::{Ablation, ModelConfig};
use crate::train::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;
pub const DATA_ROOT_ENV: &str = "STGFORMER_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub format: Format,
    /// Scene files or directories of scene files.
    pub train: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
    pub stride: usize,
    pub pixels_per_unit: f64,
    pub frame_step: Option<i64>,
    pub pedestrians_only: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            format: Format::Ethucy,
            train: Vec::new(),
            test: Vec::new(),
            stride: 1,
            pixels_per_unit: 1.0,
            frame_step: None,
            pedestrians_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub mode: BestOf,
    pub protocol: Protocol,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: BestOf::PerAgent,
            protocol: Protocol::LeaveOneSceneOut,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub ablations: Vec<String>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub predict: PredictOptions,
    pub eval: EvalConfig,
    /// Directory of the config file; relative paths fall back to it.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            out_dir: PathBuf::from("out"),
            ablations: Vec::new(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            predict: PredictOptions::default(),
            eval: EvalConfig::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

impl RunConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string().trim().to_string()]))?;
        cfg.finish()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(vec![format!("{}: {}", path.display(), e.to_string().trim())]))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.finish()
    }

    /// Folds `ablations` into the model config, propagates the seed and
    /// validates everything.
    pub fn finish(mut self) -> Result<Self> {
        self.apply_overrides(None, &[])?;
        Ok(self)
    }

    /// Applies command-line overrides, then re-validates.
    pub fn apply_overrides(&mut self, seed: Option<u64>, ablations: &[String]) -> Result<()> {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.ablations.extend(ablations.iter().cloned());
        self.ablations.sort();
        self.ablations.dedup();
        self.train.seed = self.seed;
        self.predict.seed = self.seed;
        let problems = self.validate();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        for name in &self.ablations {
            self.model.ablation.enable(name)?;
        }
        Ok(())
    }

    /// Every violation, not only the first.
    pub fn validate(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            p.push(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if let Err(Error::Config(bad)) = Ablation::from_names(&self.ablations) {
            p.extend(bad);
        }
        p.extend(self.model.validate());
        p.extend(self.train.validate());
        if self.predict.k == 0 {
            p.push("predict.k must be at least 1".into());
        }
        if self.predict.horizon == 0 {
            p.push("predict.horizon must be at least 1".into());
        }
        if self.data.stride == 0 {
            p.push("data.stride must be at least 1".into());
        }
        if !(self.data.pixels_per_unit > 0.0) {
            p.push("data.pixels_per_unit must be positive".into());
        }
        if matches!(self.data.frame_step, Some(s) if s <= 0) {
            p.push("data.frame_step must be positive".into());
        }
        p
    }

    pub fn data_root(&self) -> PathBuf {
        self.data
            .root
            .clone()
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
            .map(|r| if r.is_absolute() { r } else { self.base_dir.join(r) })
            .unwrap_or_else(|| self.base_dir.clone())
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.data_root().join(path)
        }
    }

    pub fn out_path(&self) -> PathBuf {
        if self.out_dir.is_absolute() {
            self.out_dir.clone()
        } else {
            self.base_dir.join(&self.out_dir)
        }
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            frame_step: self.data.frame_step,
            pedestrians_only: self.data.pedestrians_only,
            scene_id: None,
        }
    }

    pub fn window_options(&self) -> WindowOptions {
        WindowOptions {
            stride: self.data.stride,
            pixels_per_unit: self.data.pixels_per_unit,
        }
    }

    /// Windows of the listed scene files and directories.
    pub fn load_windows(&self, entries: &[PathBuf]) -> Result<Vec<TrajectoryWindow>> {
        let opts = self.load_options();
        let wopts = self.window_options();
        let mut out = Vec::new();
        for e in entries {
            let path = self.resolve(e);
            let scenes = if path.is_dir() {
                load_scene_dir(&path, self.data.format, &opts)?
            } else if path.is_file() {
                vec![load_scene_with(&path, self.data.format, &opts)?]
            } else {
                return Err(Error::MissingScene(path));
            };
            for s in &scenes {
                out.extend(make_windows_with(s, &wopts));
            }
        }
        Ok(out)
    }
}
