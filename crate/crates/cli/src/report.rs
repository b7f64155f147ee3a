use std::fmt::Write as _;
use std::path::Path;

use polyboot::chebcore;
use polyboot::evorelu::EvoReluSpec;
use polyboot::moea::{Archive, SlotCoeffs, Solution};
use polyboot::persist::csv_text;
use polyboot::{Error, Result};

use crate::artifacts::OutDir;
use crate::config::ReportConfig;
use crate::latency::{LatencyModel, LABEL, TIMINGS};
use crate::{graphs, search};

pub const DIR: &str = "report";

fn slot_value(c: &SlotCoeffs, x: f64) -> Result<f64> {
    Ok(match c {
        SlotCoeffs::Identity => x,
        SlotCoeffs::Quadratic { a2 } => (a2 * x + 0.5) * x,
        SlotCoeffs::Composite { certificate } => EvoReluSpec::composite(certificate.composite.clone(), 1.0, 1.0)?.eval(x, 0)?,
    })
}

fn depths(s: &Solution) -> Result<Vec<u32>> {
    s.genome.iter().map(|r| chebcore::depth(r)).collect()
}

pub fn run(cfg: &ReportConfig, out_root: &Path) -> Result<()> {
    let path = if cfg.archive.as_os_str().is_empty() { out_root.join(search::DIR).join(search::ARCHIVE) } else { cfg.archive.clone() };
    let text = std::fs::read_to_string(&path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    let archive = Archive::from_jsonl(&text, usize::MAX)?;
    if archive.is_empty() {
        return Err(Error::InvalidInput(format!("{} holds no solutions", path.display())));
    }
    if cfg.shape_points < 2 {
        return Err(Error::InvalidInput("need at least two shape points".into()));
    }
    let sols = archive.sorted();
    let slots = sols[0].genome.len();
    if sols.iter().any(|s| s.genome.len() != slots || s.coeffs.len() != slots) {
        return Err(Error::Shape("archive members disagree on the slot count".into()));
    }
    let model = if cfg.latency { Some(LatencyModel::calibrated()?) } else { None };
    let linear_ops = if cfg.latency { graphs::resolve(&cfg.graph)?.linear_op_count() } else { 0 };

    let mut header: Vec<String> = vec!["id".into(), "acc".into(), "boot".into()];
    header.extend((0..slots).map(|s| format!("slot_{s}")));
    header.push("total".into());
    let mut rows = Vec::new();
    for s in &sols {
        let d = depths(s)?;
        let mut row = vec![s.id.to_string(), format!("{:.6}", s.accuracy()), s.boot.to_string()];
        row.extend(d.iter().map(|v| v.to_string()));
        row.push(d.iter().sum::<u32>().to_string());
        rows.push(row);
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let depth_csv = csv_text(&header_refs, rows);

    let mut shape_rows = Vec::new();
    for s in &sols {
        for (slot, c) in s.coeffs.iter().enumerate() {
            for i in 0..cfg.shape_points {
                let x = -1.0 + 2.0 * i as f64 / (cfg.shape_points - 1) as f64;
                let y = slot_value(c, x)?;
                shape_rows.push(vec![s.id.to_string(), slot.to_string(), format!("{x:.6}"), format!("{y:.9}"), format!("{:.6}", x.max(0.0))]);
            }
        }
    }
    let shapes_csv = csv_text(&["id", "slot", "x", "y", "relu"], shape_rows);

    let mut md = String::new();
    writeln!(md, "# Search archive\n").ok();
    writeln!(md, "{} non-dominated solutions from `{}`.\n", sols.len(), path.display()).ok();
    if let Some(m) = model {
        writeln!(md, "Latency is {LABEL}: {:.1} s per bootstrap plus {:.1} s per linear op, {} linear ops in `{}`.\n", m.a, m.b, linear_ops, cfg.graph).ok();
        writeln!(md, "| id | accuracy | bootstraps | depths | latency (s, {LABEL}) |\n|---|---|---|---|---|").ok();
    } else {
        writeln!(md, "| id | accuracy | bootstraps | depths |\n|---|---|---|---|").ok();
    }
    for s in &sols {
        let d = depths(s)?.iter().map(u32::to_string).collect::<Vec<_>>().join(" ");
        write!(md, "| {} | {:.4} | {} | {} |", s.id, s.accuracy(), s.boot, d).ok();
        if let Some(m) = model {
            write!(md, " {:.0} |", m.seconds(s.boot, linear_ops)).ok();
        }
        md.push('\n');
    }

    let mut out = OutDir::create(&out_root.join(DIR), "report", cfg)?;
    out.write("depth_distribution.csv", depth_csv.as_bytes())?;
    out.write("shapes.csv", shapes_csv.as_bytes())?;
    out.write("summary.md", md.as_bytes())?;
    if let Some(m) = model {
        out.write_json("latency_model.json", &m)?;
        let rows = TIMINGS.iter().map(|t| {
            vec![t.backbone.to_string(), t.method.to_string(), t.boots.to_string(), format!("{:.1}", t.boot_s / t.boots as f64)]
        });
        out.write("latency_calibration.csv", csv_text(&["backbone", "method", "boots", "seconds_per_boot"], rows).as_bytes())?;
    }
    out.finish()?;
    print!("{md}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slot_shapes_follow_their_branch() {
        assert_eq!(slot_value(&SlotCoeffs::Identity, -0.3).unwrap(), -0.3);
        assert!((slot_value(&SlotCoeffs::Quadratic { a2: 0.25 }, 1.0).unwrap() - 0.75).abs() < 1e-15);
    }
}
