//! Fits the MPCNN (15, 15, 27) composite with the default R-CCDE settings
//! and prints its certificate errors against the Linf threshold.
//!
//! Usage: cargo run --release -p polyboot --example mpcnn_calibration [seed]

use std::time::Instant;

use polyboot::baselines::{mpcnn_spec_with, MPCNN_LINF_THRESHOLD};
use polyboot::rccde::RccdeConfig;

fn main() -> polyboot::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = RccdeConfig { seed, ..RccdeConfig::default() };
    let t0 = Instant::now();
    let b = mpcnn_spec_with(&cfg, f64::INFINITY)?;
    let c = &b.certificate;
    println!(
        "mpcnn: depth {} L1 {:.5} Linf {:.5} (threshold {MPCNN_LINF_THRESHOLD}) checksum {} ({:.1}s)",
        c.depth,
        c.l1,
        c.linf,
        &c.checksum[..12],
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}
