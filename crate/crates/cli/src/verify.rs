use std::path::Path;

use polyboot::desk::slot_certificate;
use polyboot::levelplan::{boot_count, NetGraph};
use polyboot::moea::Archive;
use polyboot::rccde::FitCertificate;
use polyboot::tinynet::data::DeskDataset;
use polyboot::tinynet::snapshot;
use polyboot::{chebcore, Error, Result};

use crate::artifacts::{check_manifest, CONFIG};
use crate::config::{PlanConfig, SearchConfig};
use crate::plan::{self, PlanRecord};
use crate::{approx, search, teacher};

fn read_json<T: serde::de::DeserializeOwned>(dir: &Path, file: &str) -> Result<T> {
    let bytes = std::fs::read(dir.join(file))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Integrity(format!("{file}: {e}")))
}

fn verify_search(dir: &Path) -> Result<String> {
    let cfg: SearchConfig = read_json(dir, CONFIG)?;
    let graph: NetGraph = read_json(dir, search::GRAPH)?;
    let state = search::read_checkpoint(&dir.join(search::STATE))?;
    let text = std::fs::read_to_string(dir.join(search::ARCHIVE))?;
    let archive = Archive::from_jsonl(&text, cfg.mos.tie_cap)?;
    if archive.to_jsonl()? != state.archive.to_jsonl()? {
        return Err(Error::Integrity("archive file differs from the checkpointed archive".into()));
    }
    if !archive.is_mutually_non_dominated() {
        return Err(Error::Integrity("archive holds a dominated solution".into()));
    }
    for s in archive.members() {
        let depths: Vec<u32> = s.genome.iter().map(|r| chebcore::depth(r)).collect::<Result<_>>()?;
        let boot = boot_count(&graph, &depths, &cfg.desk.level)?;
        if boot != s.boot {
            return Err(Error::Integrity(format!("solution {} records {} bootstraps, recomputed {boot}", s.id, s.boot)));
        }
        for c in &s.coeffs {
            if let Some(cert) = slot_certificate(c) {
                cert.verify()?;
            }
        }
        let w = snapshot::load(&dir.join(search::WEIGHTS).join(format!("{}.bin", s.weights)))?;
        if w.params().content_hash() != s.weights {
            return Err(Error::Integrity(format!("weights of solution {} do not match their hash", s.id)));
        }
    }
    Ok(format!("{} archive members: bootstraps, certificates, weights and non-domination checked", archive.len()))
}

fn verify_plan(dir: &Path) -> Result<String> {
    let cfg: PlanConfig = read_json(dir, CONFIG)?;
    let stored: PlanRecord = read_json(dir, plan::PLACEMENT)?;
    let (fresh, _) = plan::compute(&cfg)?;
    if fresh != stored {
        return Err(Error::Integrity("placement differs from recomputation".into()));
    }
    Ok(format!("{} bootstraps recomputed", fresh.placement.count))
}

fn verify_teacher(dir: &Path) -> Result<String> {
    let m = snapshot::load(&dir.join(teacher::WEIGHTS))?;
    DeskDataset::load(&dir.join(teacher::DATASET))?;
    Ok(format!("weights {} and dataset checked", m.params().content_hash()))
}

fn verify_approx(dir: &Path) -> Result<String> {
    let cert: FitCertificate = read_json(dir, approx::CERTIFICATE)?;
    cert.verify()?;
    Ok(format!("certificate {} recomputed", cert.checksum))
}

/// Checks the manifest, then the command-specific invariants.
pub fn run(dir: &Path) -> Result<()> {
    let m = check_manifest(dir)?;
    let detail = match m.command.as_str() {
        "search" => verify_search(dir)?,
        "plan" => verify_plan(dir)?,
        "train-teacher" => verify_teacher(dir)?,
        "approx" => verify_approx(dir)?,
        _ => String::from("manifest only"),
    };
    println!("{}: {} ({} files): {detail}", dir.display(), m.command, m.artifacts.len());
    Ok(())
}
