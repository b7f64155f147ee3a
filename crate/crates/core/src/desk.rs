//! Desk-scale search problem: a trained ReLU teacher, its synthetic data
//! and the level model, packaged as an [`Evaluator`] for the MOS loop.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::chebcore::{self, Branch, CompositeSpec, SLOTS};
use crate::error::{invalid, Error, Result};
use crate::evorelu::EvoReluSpec;
use crate::levelplan::{boot_count, place_policy, LevelParams, NetGraph, Policy};
use crate::moea::{Evaluator, Genome, SlotCoeffs};
use crate::rccde::{fit_quadratic, rccde_optimize, FitCertificate, FitGrid, RccdeConfig};
use crate::seed;
use crate::tinynet::data::DeskDataset;
use crate::tinynet::train::{train, TrainConfig, TrainReport};
use crate::tinynet::{snapshot, ActBinding, Arch, Model};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeskConfig {
    /// R-CCDE settings for composite rows; the seed is replaced per row.
    pub fit: RccdeConfig,
    pub quad_grid: usize,
    pub finetune_epochs: usize,
    pub finetune_samples: usize,
    pub finetune_lr: f64,
    pub minival_limit: Option<usize>,
    /// Training samples used for bounds and post-BN calibration.
    pub calib_samples: usize,
    pub level: LevelParams,
    pub seed: u64,
}

impl Default for DeskConfig {
    fn default() -> Self {
        Self {
            fit: RccdeConfig { generations: 400, seeds: 1, grid: FitGrid { n: 512, eps: 0.01 }, ..RccdeConfig::default() },
            quad_grid: 256,
            finetune_epochs: 1,
            finetune_samples: 256,
            finetune_lr: 0.01,
            minival_limit: None,
            calib_samples: 512,
            level: LevelParams::default(),
            seed: 0,
        }
    }
}

pub struct DeskEvaluator {
    cfg: DeskConfig,
    teacher: Model,
    data: DeskDataset,
    graph: NetGraph,
    bounds: Vec<(f64, f64)>,
    /// Fits keyed by merged stage degrees; `None` marks the quadratic fit.
    fits: Mutex<HashMap<Option<Vec<u32>>, SlotCoeffs>>,
    weights: Mutex<HashMap<String, Model>>,
    weights_dir: Option<PathBuf>,
}

impl DeskEvaluator {
    pub fn new(teacher: Model, data: DeskDataset, cfg: DeskConfig) -> Result<Self> {
        if teacher.acts().iter().any(|a| !matches!(a, ActBinding::Relu)) {
            return invalid("the teacher must use ReLU in every slot");
        }
        if teacher.arch().input != data.shape || teacher.arch().classes != data.classes {
            return invalid("teacher and dataset shapes differ");
        }
        let graph = teacher.arch().graph()?;
        let calib = data.train.head(cfg.calib_samples.min(data.train.len()));
        let bounds = teacher.estimate_bounds(&calib.x, calib.len())?;
        Ok(Self {
            cfg,
            teacher,
            data,
            graph,
            bounds,
            fits: Mutex::default(),
            weights: Mutex::default(),
            weights_dir: None,
        })
    }

    /// Also writes every fine-tuned model to `dir/<hash>.bin` and reads
    /// parents from there, so a resumed search finds its weights.
    pub fn with_weights_dir(mut self, dir: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&dir)?;
        self.weights_dir = Some(dir);
        Ok(self)
    }

    pub fn teacher(&self) -> &Model {
        &self.teacher
    }

    pub fn graph(&self) -> &NetGraph {
        &self.graph
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn config(&self) -> &DeskConfig {
        &self.cfg
    }

    /// Fine-tuned model by weight hash.
    pub fn model(&self, hash: &str) -> Result<Model> {
        if let Some(m) = self.weights.lock().expect("weight store").get(hash) {
            return Ok(m.clone());
        }
        let Some(dir) = &self.weights_dir else {
            return Err(Error::Integrity(format!("unknown weights {hash}")));
        };
        let m = snapshot::load(&dir.join(format!("{hash}.bin")))?;
        if m.params().content_hash() != hash {
            return Err(Error::Integrity(format!("weights file for {hash} holds other weights")));
        }
        self.weights.lock().expect("weight store").insert(hash.to_string(), m.clone());
        Ok(m)
    }

    fn store(&self, m: Model) -> Result<String> {
        let hash = m.params().content_hash();
        if let Some(dir) = &self.weights_dir {
            let path = dir.join(format!("{hash}.bin"));
            if !path.exists() {
                snapshot::save(&m, &path)?;
            }
        }
        self.weights.lock().expect("weight store").insert(hash.clone(), m);
        Ok(hash)
    }

    /// Activation bindings for a genome with fitted coefficients.
    pub fn bindings(&self, genome: &Genome, coeffs: &[SlotCoeffs]) -> Result<Vec<ActBinding>> {
        if genome.len() != self.graph.num_acts() || coeffs.len() != genome.len() {
            return invalid("genome, coefficients and activation slots disagree");
        }
        let channels = self.teacher.slot_channels();
        genome
            .iter()
            .zip(coeffs)
            .enumerate()
            .map(|(s, (row, c))| {
                let (b_in, b_out) = self.bounds[s];
                let spec = match c {
                    SlotCoeffs::Identity => EvoReluSpec::identity(),
                    SlotCoeffs::Quadratic { a2 } => EvoReluSpec::quadratic(row.to_vec(), *a2, channels[s])?,
                    SlotCoeffs::Composite { certificate } => {
                        EvoReluSpec::composite(CompositeSpec::new(row.to_vec(), certificate.composite.stages().to_vec())?, b_in, b_out)?
                    }
                };
                if spec.branch() != chebcore::classify(row) {
                    return invalid(format!("slot {s}: coefficients do not match the genome row"));
                }
                Ok(ActBinding::Evo { spec: spec.with_bounds(b_in, b_out)? })
            })
            .collect()
    }

    /// Student for a genome, starting from the teacher or a stored parent,
    /// with fresh quadratic post-BN layers calibrated against the teacher.
    pub fn student(&self, genome: &Genome, coeffs: &[SlotCoeffs], init: Option<&str>) -> Result<Model> {
        let base = match init {
            None => self.teacher.clone(),
            Some(h) => self.model(h)?,
        };
        let acts = self.bindings(genome, coeffs)?;
        let quad = |a: &ActBinding| matches!(a, ActBinding::Evo { spec } if spec.branch() == Branch::Quadratic);
        let fresh: Vec<usize> = (0..acts.len()).filter(|&s| quad(&acts[s]) && !quad(&base.acts()[s])).collect();
        let mut m = base.rebind(acts)?;
        if !fresh.is_empty() {
            let calib = self.data.train.head(self.cfg.calib_samples.min(self.data.train.len()));
            m.calibrate_post_bn(&self.teacher, &calib.x, calib.len(), &fresh)?;
        }
        Ok(m)
    }

    fn finetune_cfg(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.cfg.finetune_lr,
            samples_per_epoch: Some(self.cfg.finetune_samples),
            minival_limit: self.cfg.minival_limit,
            ..TrainConfig::finetune(self.cfg.finetune_epochs, seed)
        }
    }
}

impl Evaluator for DeskEvaluator {
    fn num_slots(&self) -> usize {
        self.graph.num_acts()
    }

    fn fit_row(&self, row: &[u32; SLOTS]) -> Result<SlotCoeffs> {
        chebcore::depth(row)?;
        let key = match chebcore::classify(row) {
            Branch::Identity => return Ok(SlotCoeffs::Identity),
            Branch::Quadratic => None,
            Branch::Composite => Some(chebcore::merge(row)),
        };
        if let Some(hit) = self.fits.lock().expect("fit cache").get(&key) {
            return Ok(hit.clone());
        }
        let tags: Vec<u64> = key.iter().flatten().map(|&d| d as u64).collect();
        let cfg = RccdeConfig { seed: seed::derive(self.cfg.seed, &[seed::tag("fit")]), ..self.cfg.fit.clone() };
        let fitted = match &key {
            None => {
                let (a2, _) = fit_quadratic(&cfg, self.cfg.quad_grid, seed::derive(cfg.seed, &[0]))?;
                SlotCoeffs::Quadratic { a2 }
            }
            Some(merged) => {
                let cfg = RccdeConfig { seed: seed::derive(cfg.seed, &tags), ..cfg };
                let out = rccde_optimize(merged, &cfg)?;
                SlotCoeffs::Composite { certificate: Box::new(out.certificate) }
            }
        };
        // Two threads may fit the same key; both results are identical.
        self.fits.lock().expect("fit cache").insert(key, fitted.clone());
        Ok(fitted)
    }

    fn boot(&self, genome: &Genome) -> Result<usize> {
        let depths = genome.iter().map(|r| chebcore::depth(r)).collect::<Result<Vec<u32>>>()?;
        boot_count(&self.graph, &depths, &self.cfg.level)
    }

    fn train_eval(&self, genome: &Genome, coeffs: &[SlotCoeffs], init: Option<&str>, seed: u64) -> Result<(String, f64)> {
        let mut m = self.student(genome, coeffs, init)?;
        let report = train(&mut m, Some(&self.teacher), &self.data, &self.finetune_cfg(seed))?;
        let hash = self.store(m)?;
        Ok((hash, 1.0 - report.best_acc))
    }
}

/// Teacher epochs of the committed desk baseline.
pub const TEACHER_EPOCHS: usize = 30;

/// ReLU teacher trained from scratch; weights and batch order both derive
/// from `seed`.
pub fn train_teacher(arch: Arch, data: &DeskDataset, epochs: usize, seed: u64) -> Result<(Model, TrainReport)> {
    let mut m = Model::new(arch, seed::derive(seed, &[seed::tag("teacher-init")]))?;
    let report = train(&mut m, None, data, &TrainConfig::teacher(epochs, seed::derive(seed, &[seed::tag("teacher-train")])))?;
    Ok((m, report))
}

/// Bootstraps of the fixed MPCNN placement with every slot at depth 14,
/// the reference a searched solution is compared with.
pub fn uniform_high_degree_boots(graph: &NetGraph, level: &LevelParams) -> Result<usize> {
    Ok(place_policy(graph, Policy::Mpcnn, &vec![Policy::Mpcnn.design_depth(); graph.num_acts()], level)?.count)
}

/// Certificate of a composite slot, if any.
pub fn slot_certificate(c: &SlotCoeffs) -> Option<&FitCertificate> {
    match c {
        SlotCoeffs::Composite { certificate } => Some(certificate),
        _ => None,
    }
}
