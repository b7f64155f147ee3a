use std::path::Path;

use polyboot::chebcore::SLOTS;
use polyboot::persist::csv_text;
use polyboot::rccde::rccde_optimize;
use polyboot::{Error, Result};

use crate::artifacts::OutDir;
use crate::config::ApproxConfig;

pub const DIR: &str = "approx";
pub const CERTIFICATE: &str = "certificate.json";

pub fn row(degrees: &[u32]) -> Result<[u32; SLOTS]> {
    if degrees.is_empty() || degrees.len() > SLOTS {
        return Err(Error::InvalidInput(format!("give between 1 and {SLOTS} stage degrees")));
    }
    let mut row = [0; SLOTS];
    row[..degrees.len()].copy_from_slice(degrees);
    Ok(row)
}

pub fn run(cfg: &ApproxConfig, out_root: &Path) -> Result<()> {
    let row = row(&cfg.degrees)?;
    let fit = rccde_optimize(&row, &cfg.rccde)?;
    let mut out = OutDir::create(&out_root.join(DIR), "approx", cfg)?;
    let cert = &fit.certificate;
    out.write_json(CERTIFICATE, cert)?;
    let curve = csv_text(
        &["generation", "stage", "block", "l1_before", "l1_after", "objective_after", "installed"],
        fit.best.trace.iter().map(|e| {
            vec![
                e.generation.to_string(),
                e.stage.to_string(),
                format!("{:?}", e.kind).to_lowercase(),
                format!("{:.9}", e.l1_before),
                format!("{:.9}", e.l1_after),
                format!("{:.9}", e.l1_after + e.reg_after),
                e.installed.to_string(),
            ]
        }),
    );
    out.write("error_curve.csv", curve.as_bytes())?;
    let seeds = csv_text(&["seed_index", "objective"], fit.seed_l1.iter().enumerate().map(|(i, v)| vec![i.to_string(), format!("{v:.9}")]));
    out.write("seeds.csv", seeds.as_bytes())?;
    out.finish()?;
    println!("degrees {:?}: depth {}, L1 {:.6}, Linf {:.6}, checksum {}", cfg.degrees, cert.depth, cert.l1, cert.linf, cert.checksum);
    if let Some(t) = cfg.max_linf {
        cert.require_linf(t)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_are_padded_and_bounded() {
        assert_eq!(row(&[15, 15, 27]).unwrap(), [15, 15, 27, 0, 0, 0]);
        assert!(row(&[]).is_err());
        assert!(row(&[1; 7]).is_err());
    }
}
