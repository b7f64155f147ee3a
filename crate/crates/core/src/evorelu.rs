//! The EvoReLU activation: identity, per-channel quadratic, or the scaled
//! composite `x * (F(x / B_in) + 0.5)`, plus its training-time gradient
//! rule and the folding of its scalings into neighbouring linear ops.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::chebcore::{classify, eval_chain, Branch, ChebPoly, CompositeSpec, SLOTS};
use crate::error::{invalid, Error, Result};

/// Initial linear coefficient of the quadratic branch.
pub const QUAD_A1: f64 = 0.5;

fn check_bound(name: &str, b: f64) -> Result<()> {
    if !(b > 0.0 && b.is_finite()) {
        return invalid(format!("{name} must be positive and finite, got {b}"));
    }
    Ok(())
}

fn default_slots() -> Vec<u32> {
    vec![0; SLOTS]
}

/// One activation layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "EvoReluRepr")]
pub struct EvoReluSpec {
    branch: Branch,
    degrees: Vec<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    composite: Option<CompositeSpec>,
    /// Per-channel `(a2, a1, a0)`; a single entry is shared by all channels.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    quad: Vec<[f64; 3]>,
    b_in: f64,
    b_out: f64,
    /// Composite-branch derivative used at exactly `x = 0`.
    zero_subgradient: f64,
    #[serde(skip)]
    overflow: Arc<AtomicU64>,
}

#[derive(Deserialize)]
struct EvoReluRepr {
    #[serde(default = "default_slots")]
    degrees: Vec<u32>,
    composite: Option<CompositeSpec>,
    #[serde(default)]
    quad: Vec<[f64; 3]>,
    b_in: f64,
    b_out: f64,
    #[serde(default)]
    zero_subgradient: f64,
    branch: Branch,
}

impl TryFrom<EvoReluRepr> for EvoReluSpec {
    type Error = Error;

    fn try_from(r: EvoReluRepr) -> Result<Self> {
        let s = EvoReluSpec {
            branch: r.branch,
            degrees: r.degrees,
            composite: r.composite,
            quad: r.quad,
            b_in: r.b_in,
            b_out: r.b_out,
            zero_subgradient: r.zero_subgradient,
            overflow: Arc::default(),
        };
        s.validate()?;
        Ok(s)
    }
}

impl PartialEq for EvoReluSpec {
    fn eq(&self, o: &Self) -> bool {
        self.branch == o.branch
            && self.degrees == o.degrees
            && self.composite == o.composite
            && self.quad == o.quad
            && self.b_in == o.b_in
            && self.b_out == o.b_out
            && self.zero_subgradient == o.zero_subgradient
    }
}

impl EvoReluSpec {
    fn validate(&self) -> Result<()> {
        check_bound("B_in", self.b_in)?;
        check_bound("B_out", self.b_out)?;
        let implied = classify(&self.degrees);
        if implied != self.branch {
            return invalid(format!("degrees {:?} imply {implied:?}, not {:?}", self.degrees, self.branch));
        }
        match self.branch {
            Branch::Identity => {}
            Branch::Quadratic => {
                if self.quad.is_empty() {
                    return invalid("quadratic branch needs coefficients");
                }
                if self.quad.iter().flatten().any(|v| !v.is_finite()) {
                    return invalid("non-finite quadratic coefficient");
                }
            }
            Branch::Composite => match &self.composite {
                Some(c) if c.degrees() == self.degrees.as_slice() => {}
                Some(_) => return invalid("composite degrees differ from genome row"),
                None => return invalid("composite branch needs a composite polynomial"),
            },
        }
        if !self.zero_subgradient.is_finite() {
            return invalid("non-finite zero subgradient");
        }
        Ok(())
    }

    pub fn identity() -> Self {
        Self {
            branch: Branch::Identity,
            degrees: default_slots(),
            composite: None,
            quad: Vec::new(),
            b_in: 1.0,
            b_out: 1.0,
            zero_subgradient: 0.0,
            overflow: Arc::default(),
        }
    }

    /// Quadratic branch with every channel initialised to `(a2, 0.5, 0)`.
    pub fn quadratic(degrees: Vec<u32>, a2: f64, channels: usize) -> Result<Self> {
        Self::quadratic_with(degrees, vec![[a2, QUAD_A1, 0.0]; channels.max(1)])
    }

    pub fn quadratic_with(degrees: Vec<u32>, quad: Vec<[f64; 3]>) -> Result<Self> {
        let s = Self {
            branch: Branch::Quadratic,
            degrees,
            composite: None,
            quad,
            b_in: 1.0,
            b_out: 1.0,
            zero_subgradient: 0.0,
            overflow: Arc::default(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn composite(composite: CompositeSpec, b_in: f64, b_out: f64) -> Result<Self> {
        let s = Self {
            branch: Branch::Composite,
            degrees: composite.degrees().to_vec(),
            composite: Some(composite),
            quad: Vec::new(),
            b_in,
            b_out,
            zero_subgradient: 0.0,
            overflow: Arc::default(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_bounds(mut self, b_in: f64, b_out: f64) -> Result<Self> {
        check_bound("B_in", b_in)?;
        check_bound("B_out", b_out)?;
        self.b_in = b_in;
        self.b_out = b_out;
        Ok(self)
    }

    pub fn with_zero_subgradient(mut self, g: f64) -> Self {
        self.zero_subgradient = g;
        self
    }

    pub fn branch(&self) -> Branch {
        self.branch
    }

    pub fn degrees(&self) -> &[u32] {
        &self.degrees
    }

    pub fn composite_spec(&self) -> Option<&CompositeSpec> {
        self.composite.as_ref()
    }

    pub fn quad(&self) -> &[[f64; 3]] {
        &self.quad
    }

    pub fn quad_mut(&mut self) -> &mut Vec<[f64; 3]> {
        &mut self.quad
    }

    pub fn b_in(&self) -> f64 {
        self.b_in
    }

    pub fn b_out(&self) -> f64 {
        self.b_out
    }

    pub fn depth(&self) -> u32 {
        match self.branch {
            Branch::Identity => 0,
            Branch::Quadratic => 2,
            Branch::Composite => self.composite.as_ref().expect("validated").depth(),
        }
    }

    /// Number of composite inputs clamped to `[-B_in, B_in]` so far.
    pub fn overflow_count(&self) -> u64 {
        self.overflow.load(Ordering::Relaxed)
    }

    pub fn reset_overflow(&self) {
        self.overflow.store(0, Ordering::Relaxed);
    }

    #[inline]
    fn quad_for(&self, channel: usize) -> [f64; 3] {
        self.quad[channel % self.quad.len()]
    }

    /// Forward value without input validation.
    #[inline]
    pub fn eval_unchecked(&self, x: f64, channel: usize) -> f64 {
        match self.branch {
            Branch::Identity => x,
            Branch::Quadratic => {
                let [a2, a1, a0] = self.quad_for(channel);
                (a2 * x + a1) * x + a0
            }
            Branch::Composite => {
                let c = self.composite.as_ref().expect("validated");
                let mut u = x / self.b_in;
                if u.abs() > 1.0 {
                    self.overflow.fetch_add(1, Ordering::Relaxed);
                    u = u.clamp(-1.0, 1.0);
                }
                let xc = u * self.b_in;
                xc * (c.eval_unchecked(u) + 0.5)
            }
        }
    }

    pub fn eval(&self, x: f64, channel: usize) -> Result<f64> {
        if !x.is_finite() {
            return invalid(format!("non-finite activation input {x}"));
        }
        Ok(self.eval_unchecked(x, channel))
    }

    /// Backward rule: exact for identity and quadratic, ReLU indicator for
    /// the composite branch.
    #[inline]
    pub fn grad(&self, x: f64, channel: usize) -> f64 {
        match self.branch {
            Branch::Identity => 1.0,
            Branch::Quadratic => {
                let [a2, a1, _] = self.quad_for(channel);
                2.0 * a2 * x + a1
            }
            Branch::Composite => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    0.0
                } else {
                    self.zero_subgradient
                }
            }
        }
    }

    /// Deployment form with `B_out` folded into the coefficients and, for
    /// the composite branch, the input already divided by `B_in`.
    pub fn export(&self) -> DeployAct {
        match self.branch {
            Branch::Identity => DeployAct::Scale { factor: 1.0 / self.b_out },
            Branch::Quadratic => DeployAct::Quadratic {
                coeffs: self.quad.iter().map(|q| q.map(|c| c / self.b_out)).collect(),
            },
            Branch::Composite => {
                let c = self.composite.as_ref().expect("validated");
                let rho = self.b_in / self.b_out;
                let mut stages = c.stages().to_vec();
                if let Some(last) = stages.last_mut() {
                    *last = last.scaled(rho);
                }
                DeployAct::Composite { stages, offset: 0.5 * rho }
            }
        }
    }
}

/// `x -> x` for identity; kept as a free function to mirror the other ops.
pub fn evorelu_eval(s: &EvoReluSpec, x: f64) -> Result<f64> {
    s.eval(x, 0)
}

pub fn evorelu_grad(s: &EvoReluSpec, x: f64) -> f64 {
    s.grad(x, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    L1,
    Linf,
}

/// Distance between the activation and exact ReLU over `grid` (channel 0).
pub fn approx_error(s: &EvoReluSpec, grid: &[f64], metric: Metric) -> Result<f64> {
    if grid.is_empty() {
        return invalid("empty error grid");
    }
    let mut acc = 0.0;
    let mut worst: f64 = 0.0;
    for &x in grid {
        let e = (s.eval(x, 0)? - x.max(0.0)).abs();
        acc += e;
        worst = worst.max(e);
    }
    Ok(match metric {
        Metric::L1 => acc / grid.len() as f64,
        Metric::Linf => worst,
    })
}

/// Folds a BatchNorm applied after a quadratic activation into its
/// coefficients.
pub fn fold_post_bn(coeffs: [f64; 3], gamma: f64, beta: f64, mean: f64, var: f64, eps: f64) -> [f64; 3] {
    let s = gamma / (var + eps).sqrt();
    [s * coeffs[0], s * coeffs[1], s * (coeffs[2] - mean) + beta]
}

/// Activation in deployment form; inputs are already scaled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DeployAct {
    /// `factor * x`.
    Scale { factor: f64 },
    /// `a2 x^2 + a1 x + a0` per channel.
    Quadratic { coeffs: Vec<[f64; 3]> },
    /// `x * (G(x) + offset)` with `G` the stage chain.
    Composite { stages: Vec<ChebPoly>, offset: f64 },
}

impl DeployAct {
    /// Evaluates the activation; composite inputs outside `[-1, 1]` are
    /// clamped like the training-time form.
    #[inline]
    pub fn eval(&self, x: f64, channel: usize) -> f64 {
        match self {
            DeployAct::Scale { factor } => factor * x,
            DeployAct::Quadratic { coeffs } => {
                let [a2, a1, a0] = coeffs[channel % coeffs.len()];
                (a2 * x + a1) * x + a0
            }
            DeployAct::Composite { stages, offset } => {
                let u = x.clamp(-1.0, 1.0);
                u * (eval_chain(stages, u) + offset)
            }
        }
    }

    /// Value of `1/B_in` the previous op must apply to its output.
    fn input_scale(spec: &EvoReluSpec) -> f64 {
        match spec.branch {
            Branch::Composite => 1.0 / spec.b_in,
            _ => 1.0,
        }
    }
}

/// A linear operation next to an activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LinearOp {
    /// `y = W x + b` with `W` stored row-major as `rows x cols`.
    Affine { weight: Vec<f64>, bias: Vec<f64>, rows: usize, cols: usize },
    Bootstrap,
}

impl LinearOp {
    pub fn affine(weight: Vec<f64>, bias: Vec<f64>, rows: usize, cols: usize) -> Result<Self> {
        if weight.len() != rows * cols || bias.len() != rows {
            return Err(Error::Shape(format!(
                "affine op {rows}x{cols} with {} weights and {} biases",
                weight.len(),
                bias.len()
            )));
        }
        Ok(LinearOp::Affine { weight, bias, rows, cols })
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            LinearOp::Bootstrap => Ok(x.to_vec()),
            LinearOp::Affine { weight, bias, rows, cols } => {
                if x.len() != *cols {
                    return Err(Error::Shape(format!("input of length {} for {cols} columns", x.len())));
                }
                Ok((0..*rows)
                    .map(|r| bias[r] + weight[r * cols..(r + 1) * cols].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
                    .collect())
            }
        }
    }

    fn scaled(&self, wf: f64, bf: f64) -> Self {
        match self {
            LinearOp::Bootstrap => LinearOp::Bootstrap,
            LinearOp::Affine { weight, bias, rows, cols } => LinearOp::Affine {
                weight: weight.iter().map(|w| w * wf).collect(),
                bias: bias.iter().map(|b| b * bf).collect(),
                rows: *rows,
                cols: *cols,
            },
        }
    }
}

/// `prev -> act -> next` with every scaling folded away.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldedPipeline {
    pub prev: LinearOp,
    pub act: DeployAct,
    pub next: LinearOp,
}

impl FoldedPipeline {
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let h = self.prev.apply(x)?;
        let a: Vec<f64> = h.iter().enumerate().map(|(c, &v)| self.act.eval(v, c)).collect();
        self.next.apply(&a)
    }
}

/// Reference pipeline with explicit scalings:
/// `prev -> x/B_in -> core -> x*B_in -> y/B_out -> y*B_out -> next`.
pub fn unfolded_forward(prev: &LinearOp, s: &EvoReluSpec, next: &LinearOp, x: &[f64]) -> Result<Vec<f64>> {
    let h = prev.apply(x)?;
    let a: Vec<f64> = h
        .iter()
        .enumerate()
        .map(|(c, &v)| {
            let y = match s.branch {
                Branch::Composite => {
                    let c_spec = s.composite.as_ref().expect("validated");
                    let u = (v / s.b_in).clamp(-1.0, 1.0);
                    (u * (c_spec.eval_unchecked(u) + 0.5)) * s.b_in
                }
                _ => s.eval_unchecked(v, c),
            };
            (y / s.b_out) * s.b_out
        })
        .collect();
    next.apply(&a)
}

/// Moves `1/B_in` into `prev` and `B_out` into `next`. The activation keeps
/// its depth and no scaling node remains.
pub fn scale_fold(s: &EvoReluSpec, prev: &LinearOp, next: &LinearOp) -> Result<FoldedPipeline> {
    let in_scale = DeployAct::input_scale(s);
    let (prev_wf, prev_bf) = match s.branch {
        Branch::Identity => (1.0, 1.0),
        _ => (in_scale, in_scale),
    };
    if in_scale != 1.0 && *prev == LinearOp::Bootstrap {
        return Err(Error::FoldTarget {
            side: "previous",
            reason: "a bootstrap cannot absorb the input scaling".into(),
        });
    }
    if *next == LinearOp::Bootstrap {
        return Err(Error::FoldTarget { side: "next", reason: "a bootstrap cannot absorb the output scaling".into() });
    }
    // the bias of `next` is not multiplied: only its input was scaled
    let folded_next = next.scaled(s.b_out, 1.0);
    Ok(FoldedPipeline { prev: prev.scaled(prev_wf, prev_bf), act: s.export(), next: folded_next })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chebcore::ChebPoly;
    use crate::seed;
    use rand::Rng;

    fn odd_composite() -> CompositeSpec {
        // a mild odd sign-like stage chain of degrees (3, 3) -> merged 9
        let f = ChebPoly::new(vec![1.2, 0.0, -0.3], 2.0).unwrap();
        CompositeSpec::from_unmerged(vec![3, 3, 0, 0, 0, 0], vec![f.clone(), f]).unwrap()
    }

    #[test]
    fn identity_examples() {
        let s = EvoReluSpec::identity();
        assert_eq!(evorelu_eval(&s, -3.2).unwrap(), -3.2);
        assert_eq!(evorelu_grad(&s, 17.0), 1.0);
        assert_eq!(s.depth(), 0);
        assert!(evorelu_eval(&s, f64::NAN).is_err());
    }

    #[test]
    fn quadratic_examples() {
        let s = EvoReluSpec::quadratic(vec![1, 0, 0, 0, 0, 0], 0.63, 4).unwrap();
        assert_eq!(evorelu_eval(&s, 0.0).unwrap(), 0.0);
        assert_eq!(s.depth(), 2);
        let s = EvoReluSpec::quadratic_with(vec![1, 0, 0, 0, 0, 0], vec![[0.3, 0.5, 0.0]]).unwrap();
        assert!((evorelu_grad(&s, 1.0) - 1.1).abs() < 1e-15);
    }

    #[test]
    fn composite_grad_is_relu_indicator() {
        let s = EvoReluSpec::composite(odd_composite(), 2.0, 1.0).unwrap();
        assert_eq!(evorelu_grad(&s, -0.7), 0.0);
        assert_eq!(evorelu_grad(&s, 0.0), 0.0);
        assert_eq!(evorelu_grad(&s, 0.3), 1.0);
        assert_eq!(s.clone().with_zero_subgradient(0.5).grad(0.0, 0), 0.5);
        let mut rng = seed::rng(5);
        for _ in 0..1000 {
            let x: f64 = rng.gen_range(-3.0..3.0);
            let relu_d = if x > 0.0 { 1.0 } else { 0.0 };
            assert_eq!(s.grad(x, 0), relu_d);
        }
    }

    #[test]
    fn composite_overflow_is_clamped_and_counted() {
        let s = EvoReluSpec::composite(odd_composite(), 2.0, 1.0).unwrap();
        let inside = s.eval(2.0, 0).unwrap();
        assert_eq!(s.overflow_count(), 0);
        assert_eq!(s.eval(5.0, 0).unwrap(), inside);
        assert_eq!(s.overflow_count(), 1);
        s.reset_overflow();
        assert_eq!(s.overflow_count(), 0);
    }

    #[test]
    fn composite_odd_identity() {
        let c = odd_composite();
        let s = EvoReluSpec::composite(c.clone(), 2.0, 1.0).unwrap();
        let mut rng = seed::rng(8);
        for _ in 0..200 {
            let x: f64 = rng.gen_range(-2.0..2.0);
            let f = c.eval(x / 2.0).unwrap();
            let lhs = s.eval(-x, 0).unwrap();
            let rhs = -x * (-f + 0.5);
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn quadratic_grad_matches_finite_differences() {
        let mut rng = seed::rng(21);
        let h = 1e-4;
        for _ in 0..500 {
            let q = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let s = EvoReluSpec::quadratic_with(vec![0, 1, 0, 0, 0, 0], vec![q]).unwrap();
            let x: f64 = rng.gen_range(-3.0..3.0);
            let fd = (s.eval(x + h, 0).unwrap() - s.eval(x - h, 0).unwrap()) / (2.0 * h);
            let g = s.grad(x, 0);
            assert!((fd - g).abs() <= 1e-4 * g.abs().max(1.0), "x {x} fd {fd} g {g}");
        }
    }

    #[test]
    fn approx_error_examples() {
        let s = EvoReluSpec::identity();
        let grid: Vec<f64> = (0..11).map(|i| -1.0 + 0.2 * i as f64).collect();
        let want = grid.iter().map(|x: &f64| x.min(0.0).abs()).sum::<f64>() / grid.len() as f64;
        assert!((approx_error(&s, &grid, Metric::L1).unwrap() - want).abs() < 1e-15);

        let sq = EvoReluSpec::quadratic_with(vec![1, 0, 0, 0, 0, 0], vec![[1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(approx_error(&sq, &[-1.0, 0.0, 1.0], Metric::Linf).unwrap(), 1.0);
        assert!(approx_error(&sq, &[], Metric::L1).is_err());
    }

    #[test]
    fn branch_validation() {
        assert!(EvoReluSpec::quadratic(vec![3, 0, 0, 0, 0, 0], 0.5, 1).is_err());
        assert!(EvoReluSpec::composite(odd_composite(), 0.0, 1.0).is_err());
        assert!(EvoReluSpec::composite(odd_composite(), 1.0, f64::INFINITY).is_err());
    }

    #[test]
    fn json_round_trip() {
        let s = EvoReluSpec::composite(odd_composite(), 2.5, 3.0).unwrap();
        let text = serde_json::to_string(&s).unwrap();
        let back: EvoReluSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
        let q = EvoReluSpec::quadratic(vec![1, 1, 0, 0, 0, 0], 0.6, 2).unwrap();
        let back: EvoReluSpec = serde_json::from_str(&serde_json::to_string(&q).unwrap()).unwrap();
        assert_eq!(back, q);
        let bad = r#"{"branch":"quadratic","degrees":[3,0,0,0,0,0],"quad":[[1,0,0]],"b_in":1,"b_out":1}"#;
        assert!(serde_json::from_str::<EvoReluSpec>(bad).is_err());
    }

    #[test]
    fn fold_examples() {
        let prev = LinearOp::affine(vec![2.0, 4.0], vec![1.0], 1, 2).unwrap();
        let next = LinearOp::affine(vec![3.0], vec![0.5], 1, 1).unwrap();
        let s = EvoReluSpec::composite(odd_composite(), 2.0, 4.0).unwrap();
        let f = scale_fold(&s, &prev, &next).unwrap();
        assert_eq!(f.prev, LinearOp::affine(vec![1.0, 2.0], vec![0.5], 1, 2).unwrap());
        assert_eq!(f.next, LinearOp::affine(vec![12.0], vec![0.5], 1, 1).unwrap());
        assert!(matches!(scale_fold(&s, &LinearOp::Bootstrap, &next), Err(Error::FoldTarget { side: "previous", .. })));
        assert!(matches!(scale_fold(&s, &prev, &LinearOp::Bootstrap), Err(Error::FoldTarget { side: "next", .. })));
        // identity and quadratic activations do not need the previous op
        let q = EvoReluSpec::quadratic(vec![1, 0, 0, 0, 0, 0], 0.6, 1).unwrap().with_bounds(1.0, 4.0).unwrap();
        assert!(scale_fold(&q, &LinearOp::Bootstrap, &next).is_ok());
    }

    #[test]
    fn post_bn_fold_matches_explicit_bn() {
        let q = [0.4, 0.5, -0.1];
        let (g, b, m, v, e) = (1.3, -0.2, 0.7, 2.5, 1e-5);
        let f = fold_post_bn(q, g, b, m, v, e);
        for x in [-2.0, -0.5, 0.0, 0.3, 1.7] {
            let y = q[0] * x * x + q[1] * x + q[2];
            let bn = g * (y - m) / (v + e).sqrt() + b;
            let folded = f[0] * x * x + f[1] * x + f[2];
            assert!((bn - folded).abs() < 1e-12);
        }
    }
}
