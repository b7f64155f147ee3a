use std::path::Path;

use polyboot::levelplan::{place_greedy, place_policy, simulate_levels, NetGraph, Placement};
use polyboot::persist::csv_text;
use polyboot::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::artifacts::OutDir;
use crate::config::PlanConfig;
use crate::graphs;

pub const DIR: &str = "plan";
pub const PLACEMENT: &str = "placement.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub graph: String,
    pub method: String,
    pub depths: Vec<u32>,
    pub placement: Placement,
    pub final_level: u32,
}

pub fn depths(cfg: &PlanConfig, g: &NetGraph) -> Result<Vec<u32>> {
    match (&cfg.depths, cfg.uniform_depth) {
        (Some(d), _) => Ok(d.clone()),
        (None, Some(u)) => Ok(vec![u; g.num_acts()]),
        (None, None) => Err(Error::InvalidInput("give per-activation depths or a uniform depth".into())),
    }
}

/// Placement and its level trace, recomputed from the config alone.
pub fn compute(cfg: &PlanConfig) -> Result<(PlanRecord, polyboot::levelplan::LevelTrace)> {
    let g = graphs::resolve(&cfg.graph)?;
    let depths = depths(cfg, &g)?;
    let (method, placement) = match cfg.policy {
        Some(p) => (format!("{p:?}").to_lowercase(), place_policy(&g, p, &depths, &cfg.level)?),
        None => ("greedy".to_string(), place_greedy(&g, &depths, &cfg.level)?),
    };
    let trace = simulate_levels(&g, &depths, &placement.bootstrap_positions, &cfg.level)?;
    let record = PlanRecord { graph: cfg.graph.clone(), method, depths, placement, final_level: trace.final_level };
    Ok((record, trace))
}

pub fn run(cfg: &PlanConfig, out_root: &Path) -> Result<()> {
    let (record, trace) = compute(cfg)?;
    let mut out = OutDir::create(&out_root.join(DIR), "plan", cfg)?;
    out.write_json(PLACEMENT, &record)?;
    out.write("level_trace.csv", trace.to_csv().as_bytes())?;
    let wasted = csv_text(
        &["op", "kind", "level_wasted"],
        trace.rows.iter().filter(|r| r.bootstrap_after).map(|r| {
            vec![r.op.to_string(), r.kind.name().to_string(), r.level_after.to_string()]
        }),
    );
    out.write("wasted_levels.csv", wasted.as_bytes())?;
    out.finish()?;
    println!(
        "{} ({}): {} bootstraps at {:?}, {} wasted levels",
        record.graph, record.method, record.placement.count, record.placement.bootstrap_positions, record.placement.wasted_levels
    );
    Ok(())
}
