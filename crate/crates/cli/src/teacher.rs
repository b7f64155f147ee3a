use std::path::Path;

use polyboot::desk::train_teacher;
use polyboot::persist::csv_text;
use polyboot::tinynet::data::{DeskDataset, ImageParams};
use polyboot::tinynet::train::evaluate_acc;
use polyboot::tinynet::{snapshot, Arch};
use polyboot::{Error, Result};
use serde::Serialize;

use crate::artifacts::OutDir;
use crate::config::{DatasetSource, TeacherConfig};

pub const DIR: &str = "teacher";
pub const WEIGHTS: &str = "teacher.bin";
pub const DATASET: &str = "dataset";

#[derive(Serialize)]
struct Summary<'a> {
    arch: &'a str,
    weights: String,
    best_epoch: usize,
    minival_acc: f64,
    val_acc: f64,
}

pub fn dataset(cfg: &TeacherConfig) -> Result<DeskDataset> {
    match &cfg.dataset {
        DatasetSource::Images { noise } => DeskDataset::images(cfg.seed, &ImageParams { noise: *noise, ..ImageParams::default() }),
        DatasetSource::Points { classes, spread } => DeskDataset::points2d(cfg.seed, *classes, [2000, 500, 500], *spread),
        DatasetSource::Csv { path } => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
            DeskDataset::from_csv(&text, cfg.seed)
        }
    }
}

fn arch_for(name: &str, data: &DeskDataset) -> Result<Arch> {
    let arch = match name {
        "mlp" => Arch::mlp(data.shape[0] * data.shape[1] * data.shape[2], 16, data.classes),
        other => Arch::builtin(other)?,
    };
    if arch.input != data.shape || arch.classes != data.classes {
        return Err(Error::Shape(format!(
            "{name} takes {:?} inputs and {} classes; the dataset has {:?} and {}",
            arch.input, arch.classes, data.shape, data.classes
        )));
    }
    Ok(arch)
}

pub fn run(cfg: &TeacherConfig, out_root: &Path) -> Result<()> {
    let data = dataset(cfg)?;
    let arch = arch_for(&cfg.arch, &data)?;
    let mut out = OutDir::create(&out_root.join(DIR), "train-teacher", cfg)?;
    let (model, report) = train_teacher(arch, &data, cfg.epochs, cfg.seed)?;

    let manifest = data.save(&out.path(DATASET))?;
    out.record(&format!("{DATASET}/manifest.json"))?;
    for s in &manifest.splits {
        out.record(&format!("{DATASET}/{}", s.file))?;
    }
    let weights = snapshot::save(&model, &out.path(WEIGHTS))?;
    out.record(WEIGHTS)?;
    let curve = csv_text(
        &["epoch", "loss", "minival_acc"],
        report.epochs.iter().map(|r| {
            vec![r.epoch.to_string(), r.loss.map_or(String::new(), |l| format!("{l:.6}")), format!("{:.6}", r.minival_acc)]
        }),
    );
    out.write("curve.csv", curve.as_bytes())?;
    let val_acc = evaluate_acc(&model, &data.val)?;
    let summary = Summary { arch: &cfg.arch, weights, best_epoch: report.best_epoch, minival_acc: report.best_acc, val_acc };
    out.write_json("teacher.json", &summary)?;
    out.finish()?;
    println!("teacher {}: minival {:.4} at epoch {}, val {:.4}", cfg.arch, report.best_acc, report.best_epoch, val_acc);
    Ok(())
}
