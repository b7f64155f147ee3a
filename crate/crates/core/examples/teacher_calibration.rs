//! Trains the desk teacher on the seeded image set and prints the minival
//! curve. Used once to pick the dataset noise and epoch budget.
//!
//! `cargo run --release -p polyboot --example teacher_calibration -- [epochs] [noise] [arch]`

use std::time::Instant;

use polyboot::tinynet::data::{DeskDataset, ImageParams};
use polyboot::tinynet::train::{train, TrainConfig};
use polyboot::tinynet::{Arch, Model};

fn main() -> polyboot::error::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs = args.get(1).map_or(30, |s| s.parse().expect("epochs"));
    let mut p = ImageParams::default();
    if let Some(n) = args.get(2) {
        p.noise = n.parse().expect("noise");
    }
    let arch = Arch::builtin(args.get(3).map_or("desk-resnet", |s| s.as_str()))?;
    let data = DeskDataset::images(0, &p)?;
    let mut m = Model::new(arch, 1)?;
    let t0 = Instant::now();
    let report = train(&mut m, None, &data, &TrainConfig::teacher(epochs, 2))?;
    for r in &report.epochs {
        println!("epoch {:>3}  loss {:>8}  minival {:.4}", r.epoch, r.loss.map_or("-".into(), |l| format!("{l:.4}")), r.minival_acc);
    }
    let train_acc = polyboot::tinynet::train::evaluate_acc(&m, &data.train)?;
    println!("best epoch {} acc {:.4}; train acc {:.4}; {:.1}s", report.best_epoch, report.best_acc, train_acc, t0.elapsed().as_secs_f64());
    Ok(())
}
