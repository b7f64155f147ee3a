//! Fits `0.5 * sgn(x)` with degrees (7, 7, 7) under the default settings
//! and compares against plain DE over the full coefficient vector.
//!
//! Usage: cargo run --release -p polyboot --example rccde_calibration [seed]

use std::time::Instant;

use polyboot::rccde::{joint_de, rccde_optimize, FitObjective, RccdeConfig};

fn main() -> polyboot::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = RccdeConfig { seed, ..RccdeConfig::default() };
    let t0 = Instant::now();
    let out = rccde_optimize(&[7, 7, 7], &cfg)?;
    println!(
        "rccde: L1 {:.5} Linf {:.5} per-seed L1 {:?} ({:.1}s)",
        out.certificate.l1,
        out.certificate.linf,
        out.seed_l1.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
        t0.elapsed().as_secs_f64()
    );
    println!("betas {:?}", out.best.context.betas);

    // Joint DE with the same evaluation budget per seed.
    let t0 = Instant::now();
    let objective = FitObjective::new(cfg.grid.points()?)?;
    let mut best = (f64::INFINITY, f64::INFINITY);
    for s in 0..cfg.seeds as u64 {
        let ctx = joint_de(&[7, 7, 7], &cfg, 240, 200, polyboot::seed::derive(seed, &[1000 + s]))?;
        let (l1, linf) = objective.errors(&ctx.alphas, &ctx.betas);
        if l1 < best.0 {
            best = (l1, linf);
        }
    }
    println!("joint DE: L1 {:.5} Linf {:.5} ({:.1}s)", best.0, best.1, t0.elapsed().as_secs_f64());
    Ok(())
}
