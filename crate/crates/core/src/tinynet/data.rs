//! Seeded synthetic datasets and their on-disk container.
//!
//! Images are class prototypes (sums of Gaussian blobs) shifted by up to
//! one pixel, rescaled and overlaid with pixel noise.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::persist;
use crate::seed;

const MAGIC: &[u8; 4] = b"PBDS";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

/// Inputs and labels of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub x: Vec<f64>,
    pub y: Vec<u32>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Gathers the listed samples into contiguous buffers.
    pub fn gather(&self, idx: &[usize]) -> (Vec<f64>, Vec<u32>) {
        let d = self.x.len() / self.y.len().max(1);
        let mut x = Vec::with_capacity(idx.len() * d);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend_from_slice(&self.x[i * d..(i + 1) * d]);
            y.push(self.y[i]);
        }
        (x, y)
    }

    pub fn head(&self, n: usize) -> Split {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (x, y) = self.gather(&idx);
        Split { x, y }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageParams {
    pub classes: usize,
    pub side: usize,
    pub blobs: usize,
    pub noise: f64,
    /// Multiplicative amplitude jitter, drawn from `[1 - s, 1 + s]`.
    pub scale_jitter: f64,
    pub max_shift: i32,
    pub sizes: [usize; 3],
}

impl Default for ImageParams {
    fn default() -> Self {
        Self { classes: 10, side: 8, blobs: 3, noise: 0.5, scale_jitter: 0.2, max_shift: 1, sizes: [5000, 1000, 1000] }
    }
}

/// Train, minival and validation splits with their provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct DeskDataset {
    /// `(channels, height, width)`.
    pub shape: [usize; 3],
    pub classes: usize,
    pub seed: u64,
    pub train: Split,
    pub minival: Split,
    pub val: Split,
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "minival", "val"];

impl DeskDataset {
    pub fn splits(&self) -> [&Split; 3] {
        [&self.train, &self.minival, &self.val]
    }

    pub fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }

    /// Synthetic 10-class images with the default parameters.
    pub fn synthetic(seed: u64) -> Self {
        Self::images(seed, &ImageParams::default()).expect("default parameters are valid")
    }

    pub fn images(seed: u64, p: &ImageParams) -> Result<Self> {
        if p.classes < 2 || p.side < 2 || p.blobs == 0 || p.sizes.iter().any(|&s| s < p.classes) {
            return invalid("image dataset needs at least 2 classes, side 2, one blob and one sample per class per split");
        }
        let s = p.side;
        let mut rng = seed::stream(seed, &[seed::tag("prototypes")]);
        let protos: Vec<Vec<f64>> = (0..p.classes)
            .map(|_| {
                let mut img = vec![0.0; s * s];
                for _ in 0..p.blobs {
                    let cy = rng.gen_range(0.0..s as f64);
                    let cx = rng.gen_range(0.0..s as f64);
                    let sig = rng.gen_range(0.8..2.0) * s as f64 / 8.0;
                    let amp = if rng.gen_bool(0.5) { 1.0 } else { -1.0 } * rng.gen_range(0.7..1.3);
                    for y in 0..s {
                        for x in 0..s {
                            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                            img[y * s + x] += amp * (-d2 / (2.0 * sig * sig)).exp();
                        }
                    }
                }
                img
            })
            .collect();
        let make = |name: &str, n: usize| -> Split {
            let mut rng = seed::stream(seed, &[seed::tag(name)]);
            let mut x = Vec::with_capacity(n * s * s);
            let mut y = Vec::with_capacity(n);
            let mut labels: Vec<u32> = (0..n).map(|i| (i % p.classes) as u32).collect();
            labels.shuffle(&mut rng);
            for &label in &labels {
                let proto = &protos[label as usize];
                let dy = rng.gen_range(-p.max_shift..=p.max_shift);
                let dx = rng.gen_range(-p.max_shift..=p.max_shift);
                let amp = rng.gen_range(1.0 - p.scale_jitter..=1.0 + p.scale_jitter);
                for yy in 0..s as i32 {
                    for xx in 0..s as i32 {
                        let (sy, sx) = (yy - dy, xx - dx);
                        let base = if sy >= 0 && sx >= 0 && sy < s as i32 && sx < s as i32 { proto[(sy * s as i32 + sx) as usize] } else { 0.0 };
                        let noise: f64 = StandardNormal.sample(&mut rng);
                        x.push(amp * base + p.noise * noise);
                    }
                }
                y.push(label);
            }
            Split { x, y }
        };
        Ok(Self {
            shape: [1, s, s],
            classes: p.classes,
            seed,
            train: make("train", p.sizes[0]),
            minival: make("minival", p.sizes[1]),
            val: make("val", p.sizes[2]),
        })
    }

    /// Gaussian clusters in the plane, one per class, on a circle.
    pub fn points2d(seed: u64, classes: usize, sizes: [usize; 3], spread: f64) -> Result<Self> {
        if classes < 2 {
            return invalid("need at least two classes");
        }
        let make = |name: &str, n: usize| -> Split {
            let mut rng = seed::stream(seed, &[seed::tag(name)]);
            let mut x = Vec::with_capacity(2 * n);
            let mut y = Vec::with_capacity(n);
            for i in 0..n {
                let c = i % classes;
                let a = std::f64::consts::TAU * c as f64 / classes as f64;
                let (nx, ny): (f64, f64) = (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
                x.push(2.0 * a.cos() + spread * nx);
                x.push(2.0 * a.sin() + spread * ny);
                y.push(c as u32);
            }
            Split { x, y }
        };
        Ok(Self {
            shape: [2, 1, 1],
            classes,
            seed,
            train: make("train", sizes[0]),
            minival: make("minival", sizes[1]),
            val: make("val", sizes[2]),
        })
    }

    /// Reads `x,y,label` rows (optional header) and splits them 70/15/15
    /// after a seeded shuffle.
    pub fn from_csv(text: &str, seed: u64) -> Result<Self> {
        let mut rows: Vec<([f64; 2], u32)> = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 3 {
                return invalid(format!("csv line {}: expected x,y,label", ln + 1));
            }
            match (f[0].parse::<f64>(), f[1].parse::<f64>(), f[2].parse::<u32>()) {
                (Ok(a), Ok(b), Ok(l)) if a.is_finite() && b.is_finite() => rows.push(([a, b], l)),
                _ if ln == 0 => continue,
                _ => return invalid(format!("csv line {}: cannot parse '{line}'", ln + 1)),
            }
        }
        if rows.len() < 3 {
            return invalid("csv dataset needs at least three rows");
        }
        let classes = rows.iter().map(|r| r.1).max().unwrap_or(0) as usize + 1;
        rows.shuffle(&mut seed::stream(seed, &[seed::tag("csv")]));
        let n = rows.len();
        let n_mini = (n * 15 / 100).max(1);
        let n_val = (n * 15 / 100).max(1);
        let n_train = n - n_mini - n_val;
        let to_split = |r: &[([f64; 2], u32)]| Split { x: r.iter().flat_map(|p| p.0).collect(), y: r.iter().map(|p| p.1).collect() };
        Ok(Self {
            shape: [2, 1, 1],
            classes,
            seed,
            train: to_split(&rows[..n_train]),
            minival: to_split(&rows[n_train..n_train + n_mini]),
            val: to_split(&rows[n_train + n_mini..]),
        })
    }

    /// Writes one binary container per split plus `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<DatasetManifest> {
        let mut splits = Vec::new();
        for (name, s) in SPLIT_NAMES.iter().zip(self.splits()) {
            let bytes = encode_split(self.shape, self.classes, s);
            let file = format!("{name}.bin");
            persist::atomic_write(&dir.join(&file), &bytes)?;
            splits.push(SplitEntry { name: name.to_string(), file, len: s.len(), sha256: persist::sha256_hex(&bytes) });
        }
        let m = DatasetManifest { version: VERSION, seed: self.seed, shape: self.shape, classes: self.classes, splits };
        persist::write_json_pretty(&dir.join("manifest.json"), &m)?;
        Ok(m)
    }

    /// Loads a dataset written by [`DeskDataset::save`], checking hashes.
    pub fn load(dir: &Path) -> Result<Self> {
        let m: DatasetManifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
        if m.version != VERSION {
            return invalid(format!("unsupported dataset version {}", m.version));
        }
        let mut out = Vec::new();
        for name in SPLIT_NAMES {
            let e = m.splits.iter().find(|e| e.name == name).ok_or_else(|| Error::InvalidInput(format!("manifest lacks split {name}")))?;
            let bytes = std::fs::read(dir.join(&e.file))?;
            if persist::sha256_hex(&bytes) != e.sha256 {
                return Err(Error::Integrity(format!("{} does not match its manifest hash", e.file)));
            }
            let (shape, classes, split) = decode_split(&bytes)?;
            if shape != m.shape || classes != m.classes || split.len() != e.len {
                return Err(Error::Integrity(format!("{} header disagrees with the manifest", e.file)));
            }
            out.push(split);
        }
        let val = out.pop().expect("three splits");
        let minival = out.pop().expect("three splits");
        let train = out.pop().expect("three splits");
        Ok(Self { shape: m.shape, classes: m.classes, seed: m.seed, train, minival, val })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub name: String,
    pub file: String,
    pub len: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub shape: [usize; 3],
    pub classes: usize,
    pub splits: Vec<SplitEntry>,
}

fn encode_split(shape: [usize; 3], classes: usize, s: &Split) -> Vec<u8> {
    let mut b = Vec::with_capacity(32 + 4 * s.len() + 8 * s.x.len());
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    for v in [s.len(), shape[0], shape[1], shape[2], classes] {
        b.extend_from_slice(&(v as u32).to_le_bytes());
    }
    b.push(DTYPE_F64);
    for y in &s.y {
        b.extend_from_slice(&y.to_le_bytes());
    }
    for x in &s.x {
        b.extend_from_slice(&x.to_le_bytes());
    }
    b
}

fn decode_split(b: &[u8]) -> Result<([usize; 3], usize, Split)> {
    let bad = |m: &str| Error::Integrity(format!("dataset container: {m}"));
    if b.len() < 29 || &b[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let u = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().expect("4 bytes")) as usize;
    if u(4) != VERSION as usize {
        return Err(bad("unsupported version"));
    }
    let (n, c, h, w, classes) = (u(8), u(12), u(16), u(20), u(24));
    if b[28] != DTYPE_F64 {
        return Err(bad("unsupported dtype"));
    }
    let d = c * h * w;
    let need = 29 + 4 * n + 8 * n * d;
    if b.len() != need {
        return Err(bad("truncated or oversized payload"));
    }
    let y: Vec<u32> = (0..n).map(|i| u(29 + 4 * i) as u32).collect();
    if y.iter().any(|&l| l as usize >= classes) {
        return Err(bad("label out of range"));
    }
    let base = 29 + 4 * n;
    let x = (0..n * d).map(|i| f64::from_le_bytes(b[base + 8 * i..base + 8 * i + 8].try_into().expect("8 bytes"))).collect();
    Ok(([c, h, w], classes, Split { x, y }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ImageParams {
        ImageParams { sizes: [200, 50, 50], ..ImageParams::default() }
    }

    #[test]
    fn generation_is_seeded_and_balanced() {
        let a = DeskDataset::images(3, &small()).unwrap();
        let b = DeskDataset::images(3, &small()).unwrap();
        let c = DeskDataset::images(4, &small()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.train.x, c.train.x);
        for s in a.splits() {
            let mut counts = vec![0; 10];
            s.y.iter().for_each(|&l| counts[l as usize] += 1);
            assert!(counts.iter().all(|&k| k == s.len() / 10), "{counts:?}");
        }
    }

    #[test]
    fn splits_are_disjoint() {
        let d = DeskDataset::images(5, &small()).unwrap();
        let rows = |s: &Split| -> Vec<Vec<u64>> { s.x.chunks(64).map(|r| r.iter().map(|v| v.to_bits()).collect()).collect() };
        let train: std::collections::HashSet<Vec<u64>> = rows(&d.train).into_iter().collect();
        for s in [&d.minival, &d.val] {
            assert!(rows(s).iter().all(|r| !train.contains(r)));
        }
    }

    #[test]
    fn container_round_trip_and_tamper_detection() {
        let d = DeskDataset::images(6, &small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        assert_eq!(DeskDataset::load(dir.path()).unwrap(), d);
        let path = dir.path().join("val.bin");
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(DeskDataset::load(dir.path()), Err(Error::Integrity(_))));
    }

    #[test]
    fn csv_ingestion() {
        let mut text = String::from("x,y,label\n");
        for i in 0..40 {
            text.push_str(&format!("{},{},{}\n", i as f64 * 0.1, -(i as f64), i % 2));
        }
        let d = DeskDataset::from_csv(&text, 1).unwrap();
        assert_eq!(d.classes, 2);
        assert_eq!(d.train.len() + d.minival.len() + d.val.len(), 40);
        assert_eq!(d.train.x.len(), 2 * d.train.len());
        assert!(DeskDataset::from_csv("1,2\n", 0).is_err());
        assert!(DeskDataset::from_csv("x,y,label\n1,2,3\n1,q,0\n", 0).is_err());
    }
}
