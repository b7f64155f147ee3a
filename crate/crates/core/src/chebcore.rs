//! Chebyshev-basis sub-polynomials, composite polynomials built from them,
//! the degree merge rule and the multiplicative-depth model.
//!
//! A sub-polynomial of degree `d` is `(1/beta) * sum_{i=1..d} alpha_i T_i(x)`.
//! The `T_0` coefficient is absent by default; merged stages produced by
//! [`compose`] may carry one, which is stored in `alpha0`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Per-slot degree options of a composite genome row.
pub const DEGREE_LADDER: [u32; 5] = [0, 1, 3, 5, 7];
/// Number of sub-polynomial slots per activation.
pub const SLOTS: usize = 6;
/// Largest degree a single stage may have after merging.
pub const MAX_STAGE_DEGREE: u32 = 31;

/// Evaluates `c0 + sum_{i>=1} coeffs[i-1] T_i(x)` with the Clenshaw recurrence.
#[inline]
pub fn clenshaw(c0: f64, coeffs: &[f64], x: f64) -> f64 {
    let two_x = 2.0 * x;
    let mut b1 = 0.0;
    let mut b2 = 0.0;
    for &c in coeffs.iter().rev() {
        let b0 = c + two_x * b1 - b2;
        b2 = b1;
        b1 = b0;
    }
    // b1 = b_1, b2 = b_2
    c0 + x * b1 - b2
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

/// One Chebyshev-basis stage `f(x) = (alpha0 + sum alpha_i T_i(x)) / beta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ChebPolyRepr")]
pub struct ChebPoly {
    alphas: Vec<f64>,
    beta: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    alpha0: f64,
}

#[derive(Deserialize)]
struct ChebPolyRepr {
    alphas: Vec<f64>,
    beta: f64,
    #[serde(default)]
    alpha0: f64,
}

impl TryFrom<ChebPolyRepr> for ChebPoly {
    type Error = Error;

    fn try_from(r: ChebPolyRepr) -> Result<Self> {
        ChebPoly::with_constant(r.alpha0, r.alphas, r.beta)
    }
}

impl ChebPoly {
    pub fn new(alphas: Vec<f64>, beta: f64) -> Result<Self> {
        Self::with_constant(0.0, alphas, beta)
    }

    /// Builds a stage that also carries a `T_0` coefficient.
    pub fn with_constant(alpha0: f64, alphas: Vec<f64>, beta: f64) -> Result<Self> {
        if alphas.is_empty() {
            return invalid("Chebyshev stage needs degree >= 1");
        }
        if beta == 0.0 || !beta.is_finite() {
            return invalid(format!("stage scale beta must be finite and nonzero, got {beta}"));
        }
        if !alpha0.is_finite() || alphas.iter().any(|a| !a.is_finite()) {
            return invalid("non-finite Chebyshev coefficient");
        }
        Ok(Self { alphas, beta, alpha0 })
    }

    pub fn degree(&self) -> u32 {
        self.alphas.len() as u32
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn constant(&self) -> f64 {
        self.alpha0
    }

    /// Evaluates the stage; `x` outside `[-1, 1]` is allowed.
    #[inline]
    pub fn eval_unchecked(&self, x: f64) -> f64 {
        clenshaw(self.alpha0, &self.alphas, x) / self.beta
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        if !x.is_finite() {
            return invalid(format!("non-finite evaluation point {x}"));
        }
        Ok(self.eval_unchecked(x))
    }

    /// Chebyshev series `c_0..c_d` of the stage with `1/beta` applied.
    pub fn series(&self) -> Vec<f64> {
        std::iter::once(self.alpha0)
            .chain(self.alphas.iter().copied())
            .map(|c| c / self.beta)
            .collect()
    }

    /// Builds a stage (beta = 1) from a full Chebyshev series `c_0..c_d`.
    pub fn from_series(series: &[f64]) -> Result<Self> {
        if series.len() < 2 {
            return invalid("series must have degree >= 1");
        }
        Self::with_constant(series[0], series[1..].to_vec(), 1.0)
    }

    /// The same stage with its output multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            alphas: self.alphas.iter().map(|a| a * factor).collect(),
            beta: self.beta,
            alpha0: self.alpha0 * factor,
        }
    }
}

/// Evaluates a Chebyshev stage, rejecting non-finite input.
pub fn cheb_eval(p: &ChebPoly, x: f64) -> Result<f64> {
    p.eval(x)
}

/// Evaluates `stages` in order (first stage applied first).
#[inline]
pub fn eval_chain(stages: &[ChebPoly], x: f64) -> f64 {
    stages.iter().fold(x, |y, s| s.eval_unchecked(y))
}

/// Activation branch implied by a genome row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Identity,
    Quadratic,
    Composite,
}

impl Branch {
    /// Depth of the non-composite branches; composite depth depends on degrees.
    pub fn fixed_depth(self) -> Option<u32> {
        match self {
            Branch::Identity => Some(0),
            Branch::Quadratic => Some(2),
            Branch::Composite => None,
        }
    }
}

/// Product of the nonzero entries (empty product is 1).
pub fn total_degree(degrees: &[u32]) -> u64 {
    degrees.iter().filter(|&&d| d != 0).map(|&d| d as u64).product()
}

pub fn classify(degrees: &[u32]) -> Branch {
    if degrees.iter().all(|&d| d == 0) {
        Branch::Identity
    } else if total_degree(degrees) == 1 {
        Branch::Quadratic
    } else {
        Branch::Composite
    }
}

/// Drops zero slots and merges adjacent stages left to right while the
/// product stays within [`MAX_STAGE_DEGREE`].
pub fn merge(degrees: &[u32]) -> Vec<u32> {
    let mut out: Vec<u32> = Vec::new();
    for &d in degrees.iter().filter(|&&d| d != 0) {
        match out.last_mut() {
            Some(last) if (*last as u64) * (d as u64) <= MAX_STAGE_DEGREE as u64 => *last *= d,
            _ => out.push(d),
        }
    }
    out
}

#[inline]
fn ceil_log2_plus_one(d: u32) -> u32 {
    // ceil(log2(d + 1))
    let n = d as u64 + 1;
    64 - (n - 1).leading_zeros()
}

/// Multiplicative depth of an activation with the given genome row.
///
/// Identity costs 0, quadratic 2, composite `1 + sum ceil(log2(d_k + 1))`
/// over the merged stages.
pub fn depth(degrees: &[u32]) -> Result<u32> {
    if let Some(&bad) = degrees.iter().find(|&&d| d > MAX_STAGE_DEGREE) {
        return invalid(format!("stage degree {bad} exceeds {MAX_STAGE_DEGREE}"));
    }
    Ok(match classify(degrees) {
        Branch::Identity => 0,
        Branch::Quadratic => 2,
        Branch::Composite => 1 + merge(degrees).into_iter().map(ceil_log2_plus_one).sum::<u32>(),
    })
}

/// Product of two Chebyshev series using `T_m T_n = (T_{m+n} + T_{|m-n|}) / 2`.
fn series_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (m, &am) in a.iter().enumerate() {
        if am == 0.0 {
            continue;
        }
        for (n, &bn) in b.iter().enumerate() {
            let p = 0.5 * am * bn;
            out[m + n] += p;
            out[m.abs_diff(n)] += p;
        }
    }
    out
}

fn series_axpy(acc: &mut Vec<f64>, alpha: f64, x: &[f64]) {
    if acc.len() < x.len() {
        acc.resize(x.len(), 0.0);
    }
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += alpha * v;
    }
}

/// Chebyshev series of `outer(inner(x))`.
///
/// Runs Clenshaw on series-valued arguments so the result stays in the
/// Chebyshev basis throughout.
pub fn compose(outer: &ChebPoly, inner: &ChebPoly) -> ChebPoly {
    let f = inner.series();
    let c = outer.series();
    let two_f: Vec<f64> = f.iter().map(|v| 2.0 * v).collect();
    let mut b1: Vec<f64> = vec![0.0];
    let mut b2: Vec<f64> = vec![0.0];
    for k in (1..c.len()).rev() {
        let mut b0 = series_mul(&two_f, &b1);
        series_axpy(&mut b0, -1.0, &b2);
        b0[0] += c[k];
        b2 = b1;
        b1 = b0;
    }
    let mut out = series_mul(&f, &b1);
    series_axpy(&mut out, -1.0, &b2);
    out[0] += c[0];
    let degree = (outer.degree() * inner.degree()) as usize;
    out.resize(degree + 1, 0.0);
    ChebPoly::from_series(&out).expect("composition of valid stages is valid")
}

/// Applies the merge rule to concrete stages, composing coefficients of
/// merged neighbours.
pub fn merge_stages(stages: &[ChebPoly]) -> Vec<ChebPoly> {
    let mut out: Vec<ChebPoly> = Vec::new();
    for s in stages {
        match out.last_mut() {
            Some(last) if last.degree() as u64 * s.degree() as u64 <= MAX_STAGE_DEGREE as u64 => {
                *last = compose(s, last);
            }
            _ => out.push(s.clone()),
        }
    }
    out
}

/// Result of evaluating a composite with domain diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalDiagnostics {
    pub value: f64,
    /// Number of stages whose argument fell outside `[-1, 1]`.
    pub out_of_domain: usize,
}

/// A composite polynomial `f_K o ... o f_1`: the raw genome row plus one
/// stage per merged degree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CompositeRepr")]
pub struct CompositeSpec {
    degrees: Vec<u32>,
    stages: Vec<ChebPoly>,
}

#[derive(Deserialize)]
struct CompositeRepr {
    degrees: Vec<u32>,
    stages: Vec<ChebPoly>,
}

impl TryFrom<CompositeRepr> for CompositeSpec {
    type Error = Error;

    fn try_from(r: CompositeRepr) -> Result<Self> {
        CompositeSpec::new(r.degrees, r.stages)
    }
}

impl CompositeSpec {
    /// `stages` must match `merge(degrees)` one to one.
    pub fn new(degrees: Vec<u32>, stages: Vec<ChebPoly>) -> Result<Self> {
        let merged = merge(&degrees);
        if let Some(&bad) = degrees.iter().find(|&&d| d > MAX_STAGE_DEGREE) {
            return invalid(format!("degree {bad} exceeds {MAX_STAGE_DEGREE}"));
        }
        let got: Vec<u32> = stages.iter().map(ChebPoly::degree).collect();
        if got != merged {
            return invalid(format!("stage degrees {got:?} do not match merged degrees {merged:?}"));
        }
        Ok(Self { degrees, stages })
    }

    /// All-zero genome: evaluates to `x`.
    pub fn identity(slots: usize) -> Self {
        Self { degrees: vec![0; slots], stages: Vec::new() }
    }

    /// Builds from one stage per nonzero genome slot, composing stages that
    /// the merge rule joins.
    pub fn from_unmerged(degrees: Vec<u32>, stages: Vec<ChebPoly>) -> Result<Self> {
        let nonzero: Vec<u32> = degrees.iter().copied().filter(|&d| d != 0).collect();
        let got: Vec<u32> = stages.iter().map(ChebPoly::degree).collect();
        if got != nonzero {
            return invalid(format!("stage degrees {got:?} do not match nonzero slots {nonzero:?}"));
        }
        let merged = merge_stages(&stages);
        Self::new(degrees, merged)
    }

    pub fn degrees(&self) -> &[u32] {
        &self.degrees
    }

    pub fn stages(&self) -> &[ChebPoly] {
        &self.stages
    }

    pub fn merged_degrees(&self) -> Vec<u32> {
        self.stages.iter().map(ChebPoly::degree).collect()
    }

    pub fn total_degree(&self) -> u64 {
        total_degree(&self.degrees)
    }

    pub fn branch(&self) -> Branch {
        classify(&self.degrees)
    }

    pub fn depth(&self) -> u32 {
        depth(&self.degrees).expect("validated at construction")
    }

    #[inline]
    pub fn eval_unchecked(&self, x: f64) -> f64 {
        eval_chain(&self.stages, x)
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        if !x.is_finite() {
            return invalid(format!("non-finite evaluation point {x}"));
        }
        Ok(self.eval_unchecked(x))
    }

    /// Evaluates and counts stages whose input left `[-1, 1]`.
    pub fn eval_with_diagnostics(&self, x: f64) -> Result<EvalDiagnostics> {
        if !x.is_finite() {
            return invalid(format!("non-finite evaluation point {x}"));
        }
        let mut y = x;
        let mut out_of_domain = 0;
        for s in &self.stages {
            if y.abs() > 1.0 {
                out_of_domain += 1;
            }
            y = s.eval_unchecked(y);
        }
        Ok(EvalDiagnostics { value: y, out_of_domain })
    }
}

/// Evaluates a composite; zero-degree slots act as identity placeholders.
pub fn compose_eval(c: &CompositeSpec, x: f64) -> Result<f64> {
    c.eval(x)
}
