use std::path::{Path, PathBuf};
use std::time::Instant;

use polyboot::desk::{uniform_high_degree_boots, DeskEvaluator};
use polyboot::moea::{mos_resume, mos_run, MosState};
use polyboot::persist::{atomic_write, checksum_json};
use polyboot::tinynet::data::DeskDataset;
use polyboot::tinynet::snapshot;
use polyboot::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::artifacts::{check_manifest, OutDir, CONFIG};
use crate::config::{default_population, SearchConfig};
use crate::{plot, teacher};

pub const DIR: &str = "search";
pub const STATE: &str = "state.json";
pub const ARCHIVE: &str = "archive.jsonl";
pub const GRAPH: &str = "graph.json";
pub const WEIGHTS: &str = "weights";

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    checksum: String,
    state: MosState,
}

pub fn write_checkpoint(path: &Path, state: &MosState) -> Result<()> {
    let ck = Checkpoint { checksum: checksum_json(state)?, state: state.clone() };
    atomic_write(path, &serde_json::to_vec(&ck)?)
}

pub fn read_checkpoint(path: &Path) -> Result<MosState> {
    let bytes = std::fs::read(path).map_err(|e| Error::InvalidInput(format!("no checkpoint at {}: {e}", path.display())))?;
    let ck: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| Error::Integrity(format!("unreadable checkpoint: {e}")))?;
    if checksum_json(&ck.state)? != ck.checksum {
        return Err(Error::Integrity("checkpoint checksum mismatch".into()));
    }
    Ok(ck.state)
}

fn teacher_dir(cfg: &SearchConfig, out_root: &Path) -> PathBuf {
    if cfg.teacher_dir.as_os_str().is_empty() {
        out_root.join(teacher::DIR)
    } else {
        cfg.teacher_dir.clone()
    }
}

pub fn run(mut cfg: SearchConfig, out_root: &Path, resume: bool) -> Result<()> {
    let tdir = teacher_dir(&cfg, out_root);
    if !tdir.join(teacher::WEIGHTS).is_file() {
        return Err(Error::InvalidInput(format!("no teacher in {}; run train-teacher first", tdir.display())));
    }
    check_manifest(&tdir)?;
    let model = snapshot::load(&tdir.join(teacher::WEIGHTS))?;
    let data = DeskDataset::load(&tdir.join(teacher::DATASET))?;
    let graph = model.arch().graph()?;
    cfg.teacher_dir = tdir;
    if cfg.mos.population == 0 {
        cfg.mos.population = default_population(&model.arch().name);
    }
    if cfg.mos.hv_reference_boot <= 0.0 {
        let uniform = uniform_high_degree_boots(&graph, &cfg.desk.level).unwrap_or(graph.num_acts());
        cfg.mos.hv_reference_boot = uniform as f64 + 1.0;
    }

    let dir = out_root.join(DIR);
    let start = if resume {
        let prior: SearchConfig = serde_json::from_slice(&std::fs::read(dir.join(CONFIG))?)
            .map_err(|e| Error::Integrity(format!("unreadable search config: {e}")))?;
        let state = read_checkpoint(&dir.join(STATE))?;
        let mut same = prior.clone();
        same.mos.generations = cfg.mos.generations;
        same.threads = cfg.threads;
        if same != cfg {
            return Err(Error::InvalidInput("resumed config differs from the checkpointed run beyond the generation count".into()));
        }
        Some(state)
    } else {
        if dir.join(STATE).exists() {
            return Err(Error::InvalidInput(format!("{} already holds a search; pass --resume or another --out", dir.display())));
        }
        None
    };

    let mut out = OutDir::create(&dir, "search", &cfg)?;
    let eval = DeskEvaluator::new(model, data, cfg.desk.clone())?.with_weights_dir(out.path(WEIGHTS))?;
    let state_path = out.path(STATE);
    let t0 = Instant::now();
    let on_generation = |s: &MosState| -> Result<()> {
        write_checkpoint(&state_path, s)?;
        if let Some(m) = s.metrics.last() {
            println!(
                "gen {}: archive {}, evaluated {}, discarded {}, hv {:.4} ({:.0}s)",
                m.generation, m.archive_size, m.evaluated, m.discarded, m.hypervolume, t0.elapsed().as_secs_f64()
            );
        }
        Ok(())
    };
    let state = match start {
        Some(s) => mos_resume(&cfg.mos, &eval, s, on_generation)?,
        None => mos_run(&cfg.mos, &eval, on_generation)?,
    };

    write_checkpoint(&state_path, &state)?;
    out.record(STATE)?;
    out.write(ARCHIVE, state.archive.to_jsonl()?.as_bytes())?;
    out.write("metrics.csv", state.metrics_csv().as_bytes())?;
    let mut discards = String::new();
    for d in &state.discards {
        discards.push_str(&serde_json::to_string(d)?);
        discards.push('\n');
    }
    out.write("discards.jsonl", discards.as_bytes())?;
    out.write_json(GRAPH, &graph)?;
    let points: Vec<(f64, f64)> = state.population.iter().map(|s| (s.boot as f64, s.accuracy())).collect();
    let front: Vec<(f64, f64)> = state.archive.sorted().iter().map(|s| (s.boot as f64, s.accuracy())).collect();
    out.write("pareto.png", &plot::pareto_png(&points, &front)?)?;
    for s in state.archive.members() {
        out.record(&format!("{WEIGHTS}/{}.bin", s.weights))?;
    }
    out.finish()?;
    for s in state.archive.sorted() {
        println!("  acc {:.4}  boot {:>3}  genome {:?}", s.accuracy(), s.boot, s.genome);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use polyboot::moea::{Archive, MosConfig};

    fn empty_state() -> MosState {
        MosState {
            config: MosConfig::default(),
            generations_done: 0,
            next_id: 0,
            population: vec![],
            archive: Archive::new(2),
            metrics: vec![],
            discards: vec![],
        }
    }

    #[test]
    fn checkpoint_round_trips_and_detects_edits() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(STATE);
        write_checkpoint(&p, &empty_state()).unwrap();
        assert_eq!(read_checkpoint(&p).unwrap(), empty_state());
        let text = std::fs::read_to_string(&p).unwrap().replace("\"next_id\":0", "\"next_id\":7");
        std::fs::write(&p, text).unwrap();
        assert!(matches!(read_checkpoint(&p), Err(Error::Integrity(_))));
        std::fs::write(&p, "{not json").unwrap();
        assert!(matches!(read_checkpoint(&p), Err(Error::Integrity(_))));
    }
}
