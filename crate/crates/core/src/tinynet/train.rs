//! Distillation loss, the PAT backward pass and the SGD training loop.

use serde::{Deserialize, Serialize};

use super::data::{DeskDataset, Split};
use super::{backward, forward, Cache, Mode, Model, ParamStore, Role, BN_MOMENTUM};
use crate::error::{invalid, Error, Result};
use crate::seed;

/// Softmax temperature used for the distillation term.
pub const KD_TEMPERATURE: f64 = 4.0;
/// Weight of the distillation term.
pub const KD_TAU: f64 = 0.9;

/// Direction of the KL term between teacher and student distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(teacher || student)`.
    TeacherStudent,
    /// `KL(student || teacher)`.
    StudentTeacher,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdConfig {
    pub tau: f64,
    pub temperature: f64,
    pub direction: KlDirection,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self { tau: KD_TAU, temperature: KD_TEMPERATURE, direction: KlDirection::TeacherStudent }
    }
}

fn log_softmax(z: &[f64], t: f64) -> Vec<f64> {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / t));
    let lse = m + z.iter().map(|&v| (v / t - m).exp()).sum::<f64>().ln();
    z.iter().map(|&v| v / t - lse).collect()
}

/// Mean over the batch of `(1 - tau) * CE + tau * T^2 * KL`, and its
/// gradient with respect to the student logits.
pub fn kd_loss(logits: &[f64], labels: &[u32], teacher: Option<&[f64]>, classes: usize, kd: &KdConfig) -> Result<(f64, Vec<f64>)> {
    if !(0.0..=1.0).contains(&kd.tau) {
        return invalid(format!("tau must lie in [0, 1], got {}", kd.tau));
    }
    if !(kd.temperature > 0.0) {
        return invalid("temperature must be positive");
    }
    let n = labels.len();
    if logits.len() != n * classes || teacher.is_some_and(|t| t.len() != logits.len()) {
        return Err(Error::Shape("logit and label sizes disagree".into()));
    }
    if kd.tau > 0.0 && teacher.is_none() {
        return invalid("distillation weight is positive but no teacher logits were given");
    }
    let t = kd.temperature;
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for i in 0..n {
        let z = &logits[i * classes..(i + 1) * classes];
        let g = &mut grad[i * classes..(i + 1) * classes];
        let y = labels[i] as usize;
        if y >= classes {
            return invalid(format!("label {y} out of range"));
        }
        let ls = log_softmax(z, 1.0);
        if kd.tau < 1.0 {
            loss += (1.0 - kd.tau) * -ls[y];
            for (k, gv) in g.iter_mut().enumerate() {
                *gv += (1.0 - kd.tau) * (ls[k].exp() - if k == y { 1.0 } else { 0.0 });
            }
        }
        if kd.tau > 0.0 {
            let tz = &teacher.expect("checked above")[i * classes..(i + 1) * classes];
            let lp = log_softmax(tz, t);
            let lq = log_softmax(z, t);
            let w = kd.tau * t * t;
            match kd.direction {
                KlDirection::TeacherStudent => {
                    loss += w * lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum::<f64>();
                    for (k, gv) in g.iter_mut().enumerate() {
                        *gv += w * (lq[k].exp() - lp[k].exp()) / t;
                    }
                }
                KlDirection::StudentTeacher => {
                    let kl: f64 = lq.iter().zip(&lp).map(|(a, b)| a.exp() * (a - b)).sum();
                    loss += w * kl;
                    for (k, gv) in g.iter_mut().enumerate() {
                        let q = lq[k].exp();
                        *gv += w * q * ((lq[k] - lp[k]) - kl) / t;
                    }
                }
            }
        }
    }
    let inv = 1.0 / n as f64;
    grad.iter_mut().for_each(|v| *v *= inv);
    Ok((loss * inv, grad))
}

/// Loss and raw parameter gradients for one batch, using each slot's
/// backward rule. Gradients are not clipped here.
#[allow(clippy::too_many_arguments)]
pub fn pat_backward(
    model: &Model,
    x: &[f64],
    labels: &[u32],
    teacher_logits: Option<&[f64]>,
    kd: &KdConfig,
    mode: Mode,
) -> Result<(f64, Vec<Vec<f64>>, Cache)> {
    let cache = forward(model, x, labels.len(), mode)?;
    let (loss, dlogits) = kd_loss(cache.logits(), labels, teacher_logits, model.arch().classes, kd)?;
    let grads = backward(model, &cache, &dlogits)?;
    Ok((loss, grads, cache))
}

/// Rescales the gradients of trainable tensors to global norm at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(params: &ParamStore, grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = params
        .entries
        .iter()
        .zip(grads.iter())
        .filter(|(e, _)| e.role != Role::Buffer)
        .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|v| *v *= s);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip: f64,
    pub kd: KdConfig,
    pub schedule: Schedule,
    /// Train samples drawn per epoch; all of them when `None`.
    pub samples_per_epoch: Option<usize>,
    /// Minival samples used for snapshot selection; all when `None`.
    pub minival_limit: Option<usize>,
    pub seed: u64,
}

impl TrainConfig {
    /// ReLU teacher from scratch with plain cross-entropy.
    pub fn teacher(epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size: 128,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            clip: 1.0,
            kd: KdConfig { tau: 0.0, ..KdConfig::default() },
            schedule: Schedule::Cosine,
            samples_per_epoch: None,
            minival_limit: None,
            seed,
        }
    }

    /// PAT fine-tuning with distillation.
    pub fn finetune(epochs: usize, seed: u64) -> Self {
        Self { lr: 0.02, kd: KdConfig::default(), schedule: Schedule::Constant, ..Self::teacher(epochs, seed) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    /// Mean training loss; `None` for the starting row.
    pub loss: Option<f64>,
    pub minival_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Row 0 is the starting point, before any update.
    pub epochs: Vec<EpochRow>,
    pub best_epoch: usize,
    pub best_acc: f64,
}

/// Top-1 accuracy on a split, evaluated with running statistics.
pub fn evaluate_acc(model: &Model, split: &Split) -> Result<f64> {
    if split.is_empty() {
        return invalid("cannot evaluate on an empty split");
    }
    let c = model.arch().classes;
    let logits = model.logits(&split.x, split.len())?;
    let hits = logits
        .chunks(c)
        .zip(&split.y)
        .filter(|(z, &y)| {
            let arg = z.iter().enumerate().fold(0, |b, (k, v)| if *v > z[b] { k } else { b });
            arg == y as usize
        })
        .count();
    Ok(hits as f64 / split.len() as f64)
}

/// SGD with momentum and decoupled-from-BN weight decay. With a teacher the
/// run is PAT fine-tuning (layer BN statistics frozen); without one, all BN
/// layers use batch statistics. Returns the report and leaves the model at
/// its best-minival snapshot.
pub fn train(model: &mut Model, teacher: Option<&Model>, data: &DeskDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    if data.train.is_empty() || data.minival.is_empty() {
        return invalid("training needs non-empty train and minival splits");
    }
    if cfg.batch_size == 0 {
        return invalid("batch size must be positive");
    }
    if teacher.is_none() && cfg.kd.tau > 0.0 {
        return invalid("distillation needs a teacher");
    }
    let mode = if teacher.is_some() { Mode::PAT } else { Mode::TRAIN };
    let minival = match cfg.minival_limit {
        Some(k) => data.minival.head(k),
        None => data.minival.clone(),
    };
    let per_epoch = cfg.samples_per_epoch.unwrap_or(data.train.len()).min(data.train.len());
    let steps_per_epoch = per_epoch.div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs).max(1);
    let mut velocity = model.params().zeros();
    let start_acc = evaluate_acc(model, &minival)?;
    let mut rows = vec![EpochRow { epoch: 0, loss: None, minival_acc: start_acc }];
    let mut best = (0usize, start_acc, model.params().clone());
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut seed::stream(cfg.seed, &[seed::tag("epoch"), epoch as u64]));
        order.truncate(per_epoch);
        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let (x, y) = data.train.gather(idx);
            let tl = match teacher {
                Some(t) => Some(forward(t, &x, y.len(), Mode::EVAL)?.logits().to_vec()),
                None => None,
            };
            let (loss, mut grads, cache) = pat_backward(model, &x, &y, tl.as_deref(), &cfg.kd, mode)?;
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Diverged(format!("non-finite loss or gradient at epoch {epoch}, step {step}")));
            }
            loss_sum += loss * y.len() as f64;
            clip_grad_norm(model.params(), &mut grads, cfg.clip);
            let lr = match cfg.schedule {
                Schedule::Constant => cfg.lr,
                Schedule::Cosine => 0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos()),
            };
            model.apply_bn_updates(&cache.bn_updates, BN_MOMENTUM);
            for ((e, g), v) in model.params_mut().entries.iter_mut().zip(&grads).zip(&mut velocity) {
                if e.role == Role::Buffer {
                    continue;
                }
                let wd = if e.role == Role::Weight { cfg.weight_decay } else { 0.0 };
                for ((w, &gv), vv) in e.data.iter_mut().zip(g).zip(v.iter_mut()) {
                    *vv = cfg.momentum * *vv + gv + wd * *w;
                    *w -= lr * *vv;
                }
            }
            step += 1;
        }
        let acc = evaluate_acc(model, &minival)?;
        rows.push(EpochRow { epoch, loss: Some(loss_sum / per_epoch as f64), minival_acc: acc });
        if acc > best.1 {
            best = (epoch, acc, model.params().clone());
        }
    }
    let (best_epoch, best_acc, params) = best;
    *model.params_mut() = params;
    Ok(TrainReport { epochs: rows, best_epoch, best_acc })
}
