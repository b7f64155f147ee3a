//! Desk-scale end-to-end run: teacher on the seeded image set, then MOS on
//! the 8-activation residual network. Prints the archive and timings.
//!
//! Usage: cargo run --release -p polyboot --example desk_search [generations] [threads]

use std::time::Instant;

use polyboot::desk::{train_teacher, uniform_high_degree_boots, DeskConfig, DeskEvaluator, TEACHER_EPOCHS};
use polyboot::moea::{mos_run, MosConfig};
use polyboot::tinynet::data::{DeskDataset, ImageParams};
use polyboot::tinynet::Arch;

fn main() -> polyboot::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let generations = args.get(1).map_or(5, |s| s.parse().expect("generations"));
    let threads = args.get(2).map_or(1, |s| s.parse().expect("threads"));
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool");
    pool.install(|| {
        let t0 = Instant::now();
        let data = DeskDataset::images(0, &ImageParams::default())?;
        let (teacher, rep) = train_teacher(Arch::desk_resnet(), &data, TEACHER_EPOCHS, 0)?;
        println!("teacher minival {:.4} (epoch {}) in {:.1}s", rep.best_acc, rep.best_epoch, t0.elapsed().as_secs_f64());
        let eval = DeskEvaluator::new(teacher, data, DeskConfig::default())?;
        let reference = uniform_high_degree_boots(eval.graph(), &eval.config().level)?;
        let cfg = MosConfig { population: 8, generations, hv_reference_boot: reference as f64 + 1.0, ..MosConfig::default() };
        let t1 = Instant::now();
        let st = mos_run(&cfg, &eval, |s| {
            let m = s.metrics.last().expect("metrics row");
            println!("gen {} archive {} evaluated {} discarded {} hv {:.4} ({:.0}s)", m.generation, m.archive_size, m.evaluated, m.discarded, m.hypervolume, t1.elapsed().as_secs_f64());
            Ok(())
        })?;
        for s in st.archive.sorted() {
            println!("  err {:.4} boot {:>2} genome {:?}", s.err, s.boot, s.genome);
        }
        let best = st.archive.members().iter().map(|s| s.accuracy()).fold(0.0, f64::max);
        let min_boot = st.archive.members().iter().map(|s| s.boot).min().unwrap_or(usize::MAX);
        println!("max acc {best:.4} vs teacher {:.4}; min boot {min_boot} vs uniform policy {reference}", rep.best_acc);
        println!("archive checksum {}", polyboot::persist::sha256_hex(st.archive.to_jsonl()?.as_bytes()));
        println!("total {:.1}s", t0.elapsed().as_secs_f64());
        Ok(())
    })
}
