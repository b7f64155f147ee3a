//! Resolved run configurations. Each subcommand reads an optional JSON
//! file, applies flag overrides, and writes the result next to its outputs;
//! passing that file back with `--config` repeats the run.

use std::path::{Path, PathBuf};

use polyboot::desk::{DeskConfig, TEACHER_EPOCHS};
use polyboot::levelplan::{LevelParams, Policy};
use polyboot::moea::MosConfig;
use polyboot::rccde::RccdeConfig;
use polyboot::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

fn schema() -> u32 {
    SCHEMA_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSource {
    /// Seeded blob images.
    Images { noise: f64 },
    /// Gaussian clusters in the plane.
    Points { classes: usize, spread: f64 },
    /// `x,y,label` rows.
    Csv { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    #[serde(default = "schema")]
    pub schema: u32,
    pub arch: String,
    pub dataset: DatasetSource,
    pub epochs: usize,
    pub seed: u64,
    pub threads: Option<usize>,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            schema: SCHEMA_VERSION,
            arch: "desk-resnet".into(),
            dataset: DatasetSource::Images { noise: 0.5 },
            epochs: TEACHER_EPOCHS,
            seed: 0,
            threads: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApproxConfig {
    #[serde(default = "schema")]
    pub schema: u32,
    pub degrees: Vec<u32>,
    pub rccde: RccdeConfig,
    /// Reject the fit when its Linf error is above this.
    pub max_linf: Option<f64>,
    pub threads: Option<usize>,
}

impl Default for ApproxConfig {
    fn default() -> Self {
        Self { schema: SCHEMA_VERSION, degrees: vec![7, 7, 7], rccde: RccdeConfig::default(), max_linf: None, threads: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanConfig {
    #[serde(default = "schema")]
    pub schema: u32,
    /// Built-in graph name, or a path to a graph JSON file.
    pub graph: String,
    /// Per-slot depths; takes precedence over `uniform_depth`.
    pub depths: Option<Vec<u32>>,
    pub uniform_depth: Option<u32>,
    /// Fixed policy; greedy placement when absent.
    pub policy: Option<Policy>,
    pub level: LevelParams,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self { schema: SCHEMA_VERSION, graph: "resnet20".into(), depths: None, uniform_depth: None, policy: None, level: LevelParams::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    #[serde(default = "schema")]
    pub schema: u32,
    /// Directory written by `train-teacher`.
    pub teacher_dir: PathBuf,
    /// A population of 0 picks the per-backbone default; a hypervolume
    /// reference of 0 uses the uniform high-degree bootstrap count plus one.
    pub mos: MosConfig,
    pub desk: DeskConfig,
    pub threads: Option<usize>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { schema: SCHEMA_VERSION, teacher_dir: PathBuf::new(),
            mos: MosConfig { population: 0, hv_reference_boot: 0.0, ..MosConfig::default() }, desk: DeskConfig::default(), threads: None }
    }
}

/// Population size used when none is given.
pub fn default_population(backbone: &str) -> usize {
    match backbone {
        "vgg11" => 10,
        "resnet20" => 20,
        "resnet32" => 30,
        "resnet44" => 40,
        _ => 8,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    #[serde(default = "schema")]
    pub schema: u32,
    pub archive: PathBuf,
    /// Graph for the linear-op count of the latency model.
    pub graph: String,
    pub latency: bool,
    /// Points per activation in the shape samples.
    pub shape_points: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { schema: SCHEMA_VERSION, archive: PathBuf::new(), graph: "desk-resnet".into(), latency: false, shape_points: 41 }
    }
}

/// Reads `path`, or returns the defaults when there is none.
pub fn load<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C> {
    let Some(path) = path else { return Ok(C::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if let Some(v) = value.get("schema").and_then(|v| v.as_u64()) {
        if v != SCHEMA_VERSION as u64 {
            return Err(Error::InvalidInput(format!("config schema {v}, expected {SCHEMA_VERSION}")));
        }
    }
    Ok(serde_json::from_value(value)?)
}
