//! Regularized cooperative-coevolution differential evolution.
//!
//! Fits the stages of a composite Chebyshev polynomial to `0.5 * sgn(x)`.
//! Each stage contributes two blocks, its coefficient vector and its scale,
//! and every block keeps its own DE population. A shared context vector
//! holds the best assignment so far; a block candidate is scored by
//! substituting it into the context.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chebcore::{self, clenshaw, ChebPoly, CompositeSpec};
use crate::error::{invalid, Error, Result};
use crate::persist;
use crate::seed;

/// Latin hypercube sample: `n` points, one per stratum in every dimension.
pub fn lhs_init<R: Rng + ?Sized>(n: usize, bounds: &[(f64, f64)], rng: &mut R) -> Result<Vec<Vec<f64>>> {
    if n == 0 || bounds.is_empty() {
        return invalid("LHS needs n >= 1 and dim >= 1");
    }
    if let Some((lo, hi)) = bounds.iter().find(|(lo, hi)| !(lo < hi) || !lo.is_finite() || !hi.is_finite()) {
        return invalid(format!("degenerate bounds [{lo}, {hi}]"));
    }
    let mut points = vec![vec![0.0; bounds.len()]; n];
    let mut perm: Vec<usize> = (0..n).collect();
    for (d, &(lo, hi)) in bounds.iter().enumerate() {
        perm.shuffle(rng);
        let width = (hi - lo) / n as f64;
        for (p, &stratum) in points.iter_mut().zip(&perm) {
            let u: f64 = rng.gen();
            p[d] = (lo + (stratum as f64 + u) * width).min(hi);
        }
    }
    Ok(points)
}

/// Folds `v` back into `[lo, hi]` by mirror reflection at the bounds.
pub fn reflect(v: f64, lo: f64, hi: f64) -> f64 {
    if v >= lo && v <= hi {
        return v;
    }
    let w = hi - lo;
    let mut t = (v - lo).rem_euclid(2.0 * w);
    if t > w {
        t = 2.0 * w - t;
    }
    lo + t
}

/// DE mutant `x_i + f * (x_j - x_k)`.
pub fn mutant(xi: &[f64], xj: &[f64], xk: &[f64], f: f64) -> Vec<f64> {
    xi.iter().zip(xj).zip(xk).map(|((a, b), c)| a + f * (b - c)).collect()
}

/// A DE population with cached objective values.
#[derive(Debug, Clone, PartialEq)]
pub struct DePopulation {
    pub points: Vec<Vec<f64>>,
    pub fitness: Vec<f64>,
    pub bounds: Vec<(f64, f64)>,
    pub f: f64,
    pub cr: f64,
}

fn sanitize(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

impl DePopulation {
    pub fn new<O>(points: Vec<Vec<f64>>, bounds: Vec<(f64, f64)>, f: f64, cr: f64, objective: O) -> Result<Self>
    where
        O: Fn(&[f64]) -> f64 + Sync,
    {
        if points.len() < 4 {
            return invalid(format!("DE population needs at least 4 points, got {}", points.len()));
        }
        for p in &points {
            if p.len() != bounds.len() {
                return Err(Error::Shape(format!("point of dim {} vs bounds {}", p.len(), bounds.len())));
            }
            if p.iter().zip(&bounds).any(|(v, (lo, hi))| v < lo || v > hi) {
                return invalid("DE point outside its bounds");
            }
        }
        let mut pop = Self { points, fitness: Vec::new(), bounds, f, cr };
        pop.reevaluate(objective);
        Ok(pop)
    }

    pub fn reevaluate<O>(&mut self, objective: O)
    where
        O: Fn(&[f64]) -> f64 + Sync,
    {
        self.fitness = self.points.par_iter().map(|p| sanitize(objective(p))).collect();
    }

    /// Index of the best point; ties go to the lowest index.
    pub fn best_index(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.fitness.iter().enumerate() {
            if v < self.fitness[best] {
                best = i;
            }
        }
        best
    }

    pub fn best(&self) -> (&[f64], f64) {
        let i = self.best_index();
        (&self.points[i], self.fitness[i])
    }

    fn worst_index(&self) -> usize {
        let mut worst = 0;
        for (i, &v) in self.fitness.iter().enumerate() {
            if v > self.fitness[worst] {
                worst = i;
            }
        }
        worst
    }

    /// Replaces the worst member with `point`.
    pub fn inject(&mut self, point: Vec<f64>, value: f64) {
        let w = self.worst_index();
        self.points[w] = point;
        self.fitness[w] = value;
    }
}

/// One generation of DE. Trial vectors are drawn sequentially from `rng`
/// and scored in parallel, so the result is independent of thread count.
pub fn de_step<O, R>(pop: &mut DePopulation, objective: O, rng: &mut R)
where
    O: Fn(&[f64]) -> f64 + Sync,
    R: Rng + ?Sized,
{
    let n = pop.points.len();
    let trials: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let j = loop {
                let j = rng.gen_range(0..n);
                if j != i {
                    break j;
                }
            };
            let k = loop {
                let k = rng.gen_range(0..n);
                if k != i && k != j {
                    break k;
                }
            };
            let v = mutant(&pop.points[i], &pop.points[j], &pop.points[k], pop.f);
            v.into_iter()
                .zip(&pop.points[i])
                .zip(&pop.bounds)
                .map(|((vt, &xt), &(lo, hi))| {
                    let u: f64 = rng.gen();
                    if u <= pop.cr {
                        reflect(vt, lo, hi)
                    } else {
                        xt
                    }
                })
                .collect()
        })
        .collect();
    let scores: Vec<f64> = trials.par_iter().map(|u| sanitize(objective(u))).collect();
    for (i, (u, s)) in trials.into_iter().zip(scores).enumerate() {
        if s <= pop.fitness[i] {
            pop.points[i] = u;
            pop.fitness[i] = s;
        }
    }
}

/// Sampling grid for the fit objective: `n` uniform points on
/// `[-1, -eps] ∪ [eps, 1]`, half on each side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitGrid {
    pub n: usize,
    pub eps: f64,
}

impl Default for FitGrid {
    fn default() -> Self {
        Self { n: 4096, eps: 0.01 }
    }
}

impl FitGrid {
    pub fn points(&self) -> Result<Vec<f64>> {
        if self.n < 2 {
            return invalid("fit grid needs at least 2 points");
        }
        if !(0.0..1.0).contains(&self.eps) {
            return invalid(format!("dead zone {} must lie in [0, 1)", self.eps));
        }
        let half = self.n / 2;
        let right: Vec<f64> = if half == 1 {
            vec![1.0]
        } else {
            (0..half).map(|i| self.eps + (1.0 - self.eps) * i as f64 / (half - 1) as f64).collect()
        };
        let mut pts: Vec<f64> = right.iter().rev().map(|v| -v).collect();
        pts.extend(right);
        Ok(pts)
    }
}

/// `0.5 * sgn(x)`.
pub fn half_sign(x: f64) -> f64 {
    if x > 0.0 {
        0.5
    } else if x < 0.0 {
        -0.5
    } else {
        0.0
    }
}

/// Evaluates candidate stage assignments on a fixed grid.
#[derive(Debug, Clone)]
pub struct FitObjective {
    xs: Vec<f64>,
    target: Vec<f64>,
}

impl FitObjective {
    pub fn new(xs: Vec<f64>) -> Result<Self> {
        if xs.is_empty() {
            return invalid("empty fit grid");
        }
        let target = xs.iter().map(|&x| half_sign(x)).collect();
        Ok(Self { xs, target })
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    /// Mean absolute error of the chain `alphas/betas` on the grid.
    pub fn l1(&self, alphas: &[Vec<f64>], betas: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (&x, &t) in self.xs.iter().zip(&self.target) {
            let y = chain(alphas, betas, x);
            acc += (y - t).abs();
        }
        sanitize(acc / self.xs.len() as f64)
    }

    /// `(L1, Linf)` of the chain on the grid.
    pub fn errors(&self, alphas: &[Vec<f64>], betas: &[f64]) -> (f64, f64) {
        let mut acc = 0.0;
        let mut worst: f64 = 0.0;
        for (&x, &t) in self.xs.iter().zip(&self.target) {
            let e = (chain(alphas, betas, x) - t).abs();
            acc += e;
            worst = worst.max(if e.is_nan() { f64::INFINITY } else { e });
        }
        (sanitize(acc / self.xs.len() as f64), worst)
    }

    /// Stage outputs of the first `k` stages at every grid point.
    fn prefix(&self, alphas: &[Vec<f64>], betas: &[f64], k: usize) -> Vec<f64> {
        self.xs.iter().map(|&x| chain(&alphas[..k], &betas[..k], x)).collect()
    }
}

#[inline]
fn chain(alphas: &[Vec<f64>], betas: &[f64], x: f64) -> f64 {
    alphas.iter().zip(betas).fold(x, |y, (a, &b)| clenshaw(0.0, a, y) / b)
}

/// Settings for [`rccde_optimize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RccdeConfig {
    pub generations: usize,
    pub gamma: f64,
    pub f: f64,
    pub cr: f64,
    pub alpha_bounds: (f64, f64),
    pub beta_bounds: (f64, f64),
    pub beta_pop: usize,
    pub alpha_pop_per_dim: usize,
    /// Size of the LHS sample whose best point seeds the context vector.
    pub init_samples: usize,
    pub seeds: usize,
    pub seed: u64,
    pub grid: FitGrid,
}

impl Default for RccdeConfig {
    fn default() -> Self {
        Self {
            generations: 100,
            gamma: 0.01,
            f: 0.5,
            cr: 0.5,
            alpha_bounds: (-5.0, 5.0),
            beta_bounds: (1.0, 5.0),
            beta_pop: 20,
            alpha_pop_per_dim: 20,
            init_samples: 100,
            seeds: 10,
            seed: 0,
            grid: FitGrid::default(),
        }
    }
}

impl RccdeConfig {
    fn validate(&self) -> Result<()> {
        if self.generations == 0 {
            return invalid("R-CCDE needs at least one generation");
        }
        if self.seeds == 0 {
            return invalid("R-CCDE needs at least one seed");
        }
        if self.beta_pop < 4 || self.alpha_pop_per_dim == 0 || self.init_samples == 0 {
            return invalid("population sizes too small");
        }
        if !(self.beta_bounds.0 > 0.0) {
            return invalid("beta bounds must be positive");
        }
        Ok(())
    }
}

/// The best-so-far assignment of every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextVector {
    /// Merged stage degrees.
    pub degrees: Vec<u32>,
    pub alphas: Vec<Vec<f64>>,
    pub betas: Vec<f64>,
    /// Unregularized L1 error at the stored parameters.
    pub objective_value: f64,
}

impl ContextVector {
    pub fn regularizer(&self, gamma: f64) -> f64 {
        gamma * self.betas.iter().map(|b| b * b).sum::<f64>()
    }

    pub fn stages(&self) -> Result<Vec<ChebPoly>> {
        self.alphas.iter().zip(&self.betas).map(|(a, &b)| ChebPoly::new(a.clone(), b)).collect()
    }

    /// Composite for the raw genome row `degrees` whose merge gives this
    /// context's stage degrees.
    pub fn to_composite(&self, degrees: &[u32]) -> Result<CompositeSpec> {
        CompositeSpec::new(degrees.to_vec(), self.stages()?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Alpha,
    Beta,
}

/// One install step of the context vector.
///
/// `l1_*` are unregularized; `reg_*` add `gamma * sum(beta_k^2)` over all
/// stages, which differs from the block objective of a scale install by a
/// constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstallEvent {
    pub generation: usize,
    pub stage: usize,
    pub kind: BlockKind,
    pub l1_before: f64,
    pub l1_after: f64,
    pub reg_before: f64,
    pub reg_after: f64,
    pub installed: bool,
}

/// Result of one seeded run.
#[derive(Debug, Clone, PartialEq)]
pub struct RccdeRun {
    pub seed: u64,
    pub context: ContextVector,
    pub trace: Vec<InstallEvent>,
    /// Scale trajectory per generation (end of generation).
    pub betas_per_generation: Vec<Vec<f64>>,
}

/// Runs one seeded R-CCDE optimisation over merged stage degrees.
pub fn rccde_run(merged: &[u32], cfg: &RccdeConfig, run_seed: u64) -> Result<RccdeRun> {
    cfg.validate()?;
    if merged.is_empty() || merged.contains(&0) {
        return invalid("R-CCDE needs merged nonzero degrees");
    }
    let objective = FitObjective::new(cfg.grid.points()?)?;
    let kstages = merged.len();
    let gamma = cfg.gamma;
    let mut rng = seed::rng(run_seed);

    // Initial context: best point of an LHS sample over the full vector.
    let full_bounds: Vec<(f64, f64)> = merged
        .iter()
        .flat_map(|&d| std::iter::repeat_n(cfg.alpha_bounds, d as usize).chain([cfg.beta_bounds]))
        .collect();
    let split = |v: &[f64]| -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut off = 0;
        let mut alphas = Vec::with_capacity(kstages);
        let mut betas = Vec::with_capacity(kstages);
        for &d in merged {
            alphas.push(v[off..off + d as usize].to_vec());
            betas.push(v[off + d as usize]);
            off += d as usize + 1;
        }
        (alphas, betas)
    };
    let samples = lhs_init(cfg.init_samples, &full_bounds, &mut rng)?;
    let scored: Vec<f64> = samples
        .par_iter()
        .map(|s| {
            let (a, b) = split(s);
            objective.l1(&a, &b) + gamma * b.iter().map(|v| v * v).sum::<f64>()
        })
        .collect();
    let best0 = (0..samples.len()).fold(0, |b, i| if scored[i] < scored[b] { i } else { b });
    let (mut alphas, mut betas) = split(&samples[best0]);
    let mut l1 = objective.l1(&alphas, &betas);

    // One persistent population per block.
    let mut alpha_pops: Vec<DePopulation> = Vec::with_capacity(kstages);
    let mut beta_pops: Vec<DePopulation> = Vec::with_capacity(kstages);
    for &d in merged.iter() {
        let ab = vec![cfg.alpha_bounds; d as usize];
        let pts = lhs_init(cfg.alpha_pop_per_dim * d as usize, &ab, &mut rng)?;
        alpha_pops.push(DePopulation::new(pts, ab, cfg.f, cfg.cr, |_| f64::INFINITY)?);
        let bb = vec![cfg.beta_bounds];
        let pts = lhs_init(cfg.beta_pop, &bb, &mut rng)?;
        beta_pops.push(DePopulation::new(pts, bb, cfg.f, cfg.cr, |_| f64::INFINITY)?);
    }

    let mut trace = Vec::with_capacity(2 * kstages * cfg.generations);
    let mut betas_per_generation = Vec::with_capacity(cfg.generations);
    let reg = |b: &[f64]| gamma * b.iter().map(|v| v * v).sum::<f64>();

    for generation in 0..cfg.generations {
        for k in 0..kstages {
            // Coefficient block.
            let prefix = objective.prefix(&alphas, &betas, k);
            let suffix_a: Vec<Vec<f64>> = alphas[k + 1..].to_vec();
            let suffix_b: Vec<f64> = betas[k + 1..].to_vec();
            let (suffix_a, suffix_b) = (&suffix_a[..], &suffix_b[..]);
            let beta_k = betas[k];
            let n = prefix.len() as f64;
            let target = &objective.target;
            let alpha_obj = |cand: &[f64]| -> f64 {
                let mut acc = 0.0;
                for (&p, &t) in prefix.iter().zip(target) {
                    let y = clenshaw(0.0, cand, p) / beta_k;
                    acc += (chain(suffix_a, suffix_b, y) - t).abs();
                }
                acc / n
            };
            let pop = &mut alpha_pops[k];
            pop.reevaluate(alpha_obj);
            pop.inject(alphas[k].clone(), l1);
            de_step(pop, alpha_obj, &mut rng);
            let (cand, value) = pop.best();
            let before = l1;
            let installed = value <= l1;
            if installed {
                alphas[k] = cand.to_vec();
                l1 = objective.l1(&alphas, &betas);
            }
            let r = reg(&betas);
            trace.push(InstallEvent {
                generation,
                stage: k,
                kind: BlockKind::Alpha,
                l1_before: before,
                l1_after: l1,
                reg_before: before + r,
                reg_after: l1 + r,
                installed,
            });

            // Scale block, regularized.
            let sums: Vec<f64> = prefix.iter().map(|&p| clenshaw(0.0, &alphas[k], p)).collect();
            let beta_obj = |cand: &[f64]| -> f64 {
                let b = cand[0];
                let mut acc = 0.0;
                for (&s, &t) in sums.iter().zip(target) {
                    acc += (chain(suffix_a, suffix_b, s / b) - t).abs();
                }
                acc / n + gamma * b * b
            };
            let pop = &mut beta_pops[k];
            pop.reevaluate(beta_obj);
            let cur_block = l1 + gamma * betas[k] * betas[k];
            pop.inject(vec![betas[k]], cur_block);
            de_step(pop, beta_obj, &mut rng);
            let (cand, value) = pop.best();
            let (l1_before, reg_before) = (l1, l1 + reg(&betas));
            let installed = value <= cur_block;
            if installed {
                betas[k] = cand[0];
                l1 = objective.l1(&alphas, &betas);
            }
            trace.push(InstallEvent {
                generation,
                stage: k,
                kind: BlockKind::Beta,
                l1_before,
                l1_after: l1,
                reg_before,
                reg_after: l1 + reg(&betas),
                installed,
            });
        }
        betas_per_generation.push(betas.clone());
    }

    Ok(RccdeRun {
        seed: run_seed,
        context: ContextVector { degrees: merged.to_vec(), alphas, betas, objective_value: l1 },
        trace,
        betas_per_generation,
    })
}

/// Fit certificate for one composite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitCertificate {
    pub composite: CompositeSpec,
    pub grid: FitGrid,
    pub l1: f64,
    pub linf: f64,
    pub seed: u64,
    pub depth: u32,
    pub checksum: String,
}

#[derive(Serialize)]
struct CertificateBody<'a> {
    composite: &'a CompositeSpec,
    grid: &'a FitGrid,
    l1: f64,
    linf: f64,
    seed: u64,
    depth: u32,
}

impl FitCertificate {
    pub fn new(composite: CompositeSpec, grid: FitGrid, seed: u64) -> Result<Self> {
        let objective = FitObjective::new(grid.points()?)?;
        let (alphas, betas): (Vec<Vec<f64>>, Vec<f64>) =
            composite.stages().iter().map(|s| (s.alphas().to_vec(), s.beta())).unzip();
        let (l1, linf) = objective.errors(&alphas, &betas);
        let depth = composite.depth();
        let mut cert = Self { composite, grid, l1, linf, seed, depth, checksum: String::new() };
        cert.checksum = cert.compute_checksum()?;
        Ok(cert)
    }

    fn compute_checksum(&self) -> Result<String> {
        persist::checksum_json(&CertificateBody {
            composite: &self.composite,
            grid: &self.grid,
            l1: self.l1,
            linf: self.linf,
            seed: self.seed,
            depth: self.depth,
        })
    }

    /// Recomputes errors, depth and checksum and compares them with the
    /// stored values.
    pub fn verify(&self) -> Result<()> {
        let fresh = Self::new(self.composite.clone(), self.grid, self.seed)?;
        if fresh.l1 != self.l1 || fresh.linf != self.linf || fresh.depth != self.depth {
            return Err(Error::Integrity("stored fit errors do not match recomputation".into()));
        }
        if fresh.checksum != self.checksum {
            return Err(Error::Integrity("certificate checksum mismatch".into()));
        }
        Ok(())
    }

    /// Fails with [`Error::FitFailure`] when `linf` exceeds `threshold`.
    pub fn require_linf(&self, threshold: f64) -> Result<()> {
        if self.linf > threshold {
            return Err(Error::FitFailure { achieved: self.linf, threshold });
        }
        Ok(())
    }
}

/// Output of [`rccde_optimize`]: the best seeded run plus the per-seed
/// final errors.
#[derive(Debug, Clone, PartialEq)]
pub struct RccdeOutcome {
    pub best: RccdeRun,
    pub certificate: FitCertificate,
    pub seed_l1: Vec<f64>,
}

/// Runs `cfg.seeds` independent seeded runs and keeps the lowest L1.
///
/// `degrees` is a raw genome row; its merged stages are fitted.
pub fn rccde_optimize(degrees: &[u32], cfg: &RccdeConfig) -> Result<RccdeOutcome> {
    cfg.validate()?;
    chebcore::depth(degrees)?;
    let merged = chebcore::merge(degrees);
    if merged.is_empty() {
        return invalid("genome row has no nonzero stage to fit");
    }
    let runs: Vec<RccdeRun> = (0..cfg.seeds as u64)
        .into_par_iter()
        .map(|i| rccde_run(&merged, cfg, seed::derive(cfg.seed, &[i])))
        .collect::<Result<_>>()?;
    let seed_l1: Vec<f64> = runs.iter().map(|r| r.context.objective_value).collect();
    let best_i = (0..runs.len()).fold(0, |b, i| if seed_l1[i] < seed_l1[b] { i } else { b });
    let best = runs.into_iter().nth(best_i).expect("at least one seed");
    let composite = best.context.to_composite(degrees)?;
    let certificate = FitCertificate::new(composite, cfg.grid, best.seed)?;
    Ok(RccdeOutcome { best, certificate, seed_l1 })
}

/// Plain DE over the full coefficient vector of all stages at once.
/// Used as a reference for the cooperative decomposition.
pub fn joint_de(merged: &[u32], cfg: &RccdeConfig, pop_size: usize, generations: usize, run_seed: u64) -> Result<ContextVector> {
    if merged.is_empty() || merged.contains(&0) {
        return invalid("joint DE needs merged nonzero degrees");
    }
    let objective = FitObjective::new(cfg.grid.points()?)?;
    let bounds: Vec<(f64, f64)> = merged
        .iter()
        .flat_map(|&d| std::iter::repeat_n(cfg.alpha_bounds, d as usize).chain([cfg.beta_bounds]))
        .collect();
    let split = |v: &[f64]| -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut off = 0;
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for &d in merged {
            a.push(v[off..off + d as usize].to_vec());
            b.push(v[off + d as usize]);
            off += d as usize + 1;
        }
        (a, b)
    };
    let obj = |v: &[f64]| {
        let (a, b) = split(v);
        objective.l1(&a, &b)
    };
    let mut rng: ChaCha8Rng = seed::rng(run_seed);
    let pts = lhs_init(pop_size, &bounds, &mut rng)?;
    let mut pop = DePopulation::new(pts, bounds, cfg.f, cfg.cr, obj)?;
    for _ in 0..generations {
        de_step(&mut pop, obj, &mut rng);
    }
    let (best, value) = pop.best();
    let (alphas, betas) = split(best);
    Ok(ContextVector { degrees: merged.to_vec(), alphas, betas, objective_value: value })
}

/// Fits the curvature `a2` of the quadratic activation `a2 x^2 + 0.5 x`
/// to ReLU on `[-1, 1]` by one-dimensional DE on the mean absolute error.
pub fn fit_quadratic(cfg: &RccdeConfig, grid_points: usize, run_seed: u64) -> Result<(f64, f64)> {
    if grid_points < 2 {
        return invalid("quadratic fit grid needs at least 2 points");
    }
    let xs: Vec<f64> = (0..grid_points).map(|i| -1.0 + 2.0 * i as f64 / (grid_points - 1) as f64).collect();
    let obj = |c: &[f64]| {
        xs.iter().map(|&x| (c[0] * x * x + 0.5 * x - x.max(0.0)).abs()).sum::<f64>() / xs.len() as f64
    };
    let mut rng = seed::rng(run_seed);
    let bounds = vec![cfg.alpha_bounds];
    let pts = lhs_init(cfg.beta_pop, &bounds, &mut rng)?;
    let mut pop = DePopulation::new(pts, bounds, cfg.f, cfg.cr, obj)?;
    for _ in 0..cfg.generations {
        de_step(&mut pop, obj, &mut rng);
    }
    let (best, value) = pop.best();
    Ok((best[0], value))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> RccdeConfig {
        RccdeConfig {
            generations: 15,
            seeds: 2,
            grid: FitGrid { n: 256, eps: 0.01 },
            ..RccdeConfig::default()
        }
    }

    #[test]
    fn lhs_strata_one_dim() {
        let mut rng = seed::rng(1);
        let pts = lhs_init(4, &[(0.0, 1.0)], &mut rng).unwrap();
        let mut strata: Vec<usize> = pts.iter().map(|p| ((p[0] * 4.0).floor() as usize).min(3)).collect();
        strata.sort();
        assert_eq!(strata, vec![0, 1, 2, 3]);
    }

    #[test]
    fn lhs_strata_two_dims() {
        let mut rng = seed::rng(2);
        let pts = lhs_init(8, &[(-1.0, 1.0), (2.0, 6.0)], &mut rng).unwrap();
        for (d, (lo, hi)) in [(-1.0, 1.0), (2.0, 6.0)].into_iter().enumerate() {
            let mut s: Vec<usize> =
                pts.iter().map(|p| (((p[d] - lo) / (hi - lo) * 8.0).floor() as usize).min(7)).collect();
            s.sort();
            assert_eq!(s, (0..8).collect::<Vec<_>>());
        }
    }

    #[test]
    fn lhs_is_deterministic_and_validates() {
        let a = lhs_init(16, &[(0.0, 1.0); 3], &mut seed::rng(9)).unwrap();
        let b = lhs_init(16, &[(0.0, 1.0); 3], &mut seed::rng(9)).unwrap();
        assert_eq!(a, b);
        assert!(lhs_init(4, &[(1.0, 1.0)], &mut seed::rng(0)).is_err());
        assert!(lhs_init(0, &[(0.0, 1.0)], &mut seed::rng(0)).is_err());
    }

    #[test]
    fn mutant_arithmetic() {
        assert_eq!(mutant(&[1.0, 2.0], &[3.0, 4.0], &[2.0, 2.0], 0.5), vec![1.5, 3.0]);
    }

    #[test]
    fn reflect_into_box() {
        assert_eq!(reflect(1.2, 0.0, 1.0), 0.8);
        assert_eq!(reflect(-0.25, 0.0, 1.0), 0.25);
        assert!((reflect(3.3, 0.0, 1.0) - 0.7).abs() < 1e-12);
        assert_eq!(reflect(0.5, 0.0, 1.0), 0.5);
    }

    #[test]
    fn full_crossover_takes_mutant() {
        // with CR = 1 every coordinate comes from the (reflected) mutant
        let pts = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![0.5, 0.2], vec![0.3, 0.9]];
        let bounds = vec![(-10.0, 10.0); 2];
        let mut pop = DePopulation::new(pts.clone(), bounds, 0.5, 1.0, |_| 1.0).unwrap();
        let mut rng = seed::rng(3);
        // objective 0 accepts every trial, so points become the mutants
        let mut probe = rng.clone();
        de_step(&mut pop, |_| 0.0, &mut rng);
        for i in 0..4 {
            let j = loop {
                let j = probe.gen_range(0..4);
                if j != i {
                    break j;
                }
            };
            let k = loop {
                let k = probe.gen_range(0..4);
                if k != i && k != j {
                    break k;
                }
            };
            let v = mutant(&pts[i], &pts[j], &pts[k], 0.5);
            for _ in 0..2 {
                let _: f64 = probe.gen();
            }
            assert_eq!(pop.points[i], v);
        }
    }

    #[test]
    fn de_converges_on_sphere() {
        let obj = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let bounds = vec![(-5.0, 5.0); 3];
        let mut rng = seed::rng(11);
        let pts = lhs_init(20, &bounds, &mut rng).unwrap();
        let mut pop = DePopulation::new(pts, bounds, 0.5, 0.5, obj).unwrap();
        let mut last = pop.best().1;
        for _ in 0..200 {
            de_step(&mut pop, obj, &mut rng);
            let b = pop.best().1;
            assert!(b <= last);
            last = b;
        }
        assert!(last <= 1e-6, "best {last}");
    }

    #[test]
    fn population_needs_four_points() {
        let r = DePopulation::new(vec![vec![0.0]; 3], vec![(-1.0, 1.0)], 0.5, 0.5, |_| 0.0);
        assert!(r.is_err());
    }

    #[test]
    fn grid_layout() {
        let g = FitGrid { n: 8, eps: 0.1 }.points().unwrap();
        assert_eq!(g.len(), 8);
        assert_eq!(g[0], -1.0);
        assert_eq!(g[3], -0.1);
        assert_eq!(g[4], 0.1);
        assert_eq!(g[7], 1.0);
        assert!(FitGrid { n: 0, eps: 0.01 }.points().is_err());
    }

    #[test]
    fn linear_fit_beats_zero() {
        let cfg = small_cfg();
        let out = rccde_optimize(&[1], &cfg).unwrap();
        assert!(out.best.context.objective_value <= 0.5);
        // best L1 linear fit to 0.5*sgn on a dense symmetric grid is well below 0.5
        assert!(out.best.context.objective_value < 0.3);
    }

    #[test]
    fn installs_never_increase_objectives() {
        let run = rccde_run(&[3, 3], &small_cfg(), 5).unwrap();
        for ev in &run.trace {
            assert!(ev.reg_after <= ev.reg_before, "{ev:?}");
            if ev.kind == BlockKind::Alpha {
                assert!(ev.l1_after <= ev.l1_before, "{ev:?}");
            }
        }
        let ctx = &run.context;
        let obj = FitObjective::new(small_cfg().grid.points().unwrap()).unwrap();
        assert_eq!(ctx.objective_value, obj.l1(&ctx.alphas, &ctx.betas));
    }

    #[test]
    fn optimize_is_deterministic() {
        let a = rccde_optimize(&[5, 0, 7], &small_cfg()).unwrap();
        let b = rccde_optimize(&[5, 0, 7], &small_cfg()).unwrap();
        assert_eq!(a.certificate, b.certificate);
        assert_eq!(a.certificate.composite.merged_degrees(), vec![5, 7]);
    }

    #[test]
    fn optimize_rejects_bad_input() {
        assert!(rccde_optimize(&[0, 0], &small_cfg()).is_err());
        let cfg = RccdeConfig { generations: 0, ..small_cfg() };
        assert!(rccde_optimize(&[3], &cfg).is_err());
        assert!(FitObjective::new(vec![]).is_err());
    }

    #[test]
    fn certificate_round_trip_and_tamper() {
        let out = rccde_optimize(&[3], &small_cfg()).unwrap();
        let cert = out.certificate;
        cert.verify().unwrap();
        let s = serde_json::to_string(&cert).unwrap();
        let back: FitCertificate = serde_json::from_str(&s).unwrap();
        back.verify().unwrap();
        let mut bad = back.clone();
        bad.linf *= 0.5;
        assert!(matches!(bad.verify(), Err(Error::Integrity(_))));
        assert!(matches!(cert.require_linf(0.0), Err(Error::FitFailure { .. })));
    }

    #[test]
    fn quadratic_curvature_matches_closed_form() {
        // minimiser of the integral of |a t^2 - t/2| over [0, 1] is a = 2^(1/3)/2
        let cfg = RccdeConfig { generations: 60, ..RccdeConfig::default() };
        let (a2, _) = fit_quadratic(&cfg, 2001, 4).unwrap();
        assert!((a2 - 0.5 * 2f64.cbrt()).abs() < 5e-3, "{a2}");
    }
}
