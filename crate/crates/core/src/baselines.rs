//! Reference activations from prior work, expressed as [`EvoReluSpec`]s so
//! they go through the same planner and network engine as searched ones.
//!
//! * MPCNN's AppReLU: a uniform composite of degrees (15, 15, 27), depth 14.
//!   The coefficients are our R-CCDE fit, not the original minimax values.
//! * AESPA's HerPN: basis-wise normalised Hermite expansion, which collapses
//!   to one quadratic per channel (depth 2).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::chebcore::SLOTS;
use crate::error::{invalid, Result};
use crate::evorelu::EvoReluSpec;
use crate::rccde::{rccde_optimize, FitCertificate, RccdeConfig};

/// Genome row of the MPCNN composite.
pub const MPCNN_DEGREES: [u32; SLOTS] = [15, 15, 27, 0, 0, 0];

/// Linf acceptance threshold for the MPCNN fit on the dead-zone grid.
pub const MPCNN_LINF_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcnnBaseline {
    pub spec: EvoReluSpec,
    pub certificate: FitCertificate,
}

/// MPCNN activation fitted with the default R-CCDE settings.
pub fn mpcnn_spec() -> Result<MpcnnBaseline> {
    mpcnn_spec_with(&RccdeConfig::default(), MPCNN_LINF_THRESHOLD)
}

/// Fits the (15, 15, 27) composite and rejects it with
/// [`crate::Error::FitFailure`] when the certificate's Linf exceeds `threshold`.
pub fn mpcnn_spec_with(cfg: &RccdeConfig, threshold: f64) -> Result<MpcnnBaseline> {
    let out = rccde_optimize(&MPCNN_DEGREES, cfg)?;
    out.certificate.require_linf(threshold)?;
    let spec = EvoReluSpec::composite(out.certificate.composite.clone(), 1.0, 1.0)?;
    Ok(MpcnnBaseline { spec, certificate: out.certificate })
}

/// Hermite coefficients of ReLU for the bases `1`, `x`, `(x^2 - 1)/sqrt 2`.
/// AESPA's write-up labels the last one f3; it multiplies h2.
pub fn hermite_coeffs() -> [f64; 3] {
    [1.0 / (2.0 * PI).sqrt(), 0.5, 1.0 / (4.0 * PI).sqrt()]
}

pub fn hermite_bases(x: f64) -> [f64; 3] {
    [1.0, x, (x * x - 1.0) / 2f64.sqrt()]
}

/// One channel of a HerPN layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HerPNParams {
    pub mu: [f64; 3],
    pub var: [f64; 3],
    pub gamma: f64,
    pub beta: f64,
    pub eps: f64,
}

impl HerPNParams {
    pub fn validate(&self) -> Result<()> {
        if self.var.iter().any(|&v| !(v >= 0.0)) || !(self.eps >= 0.0) {
            return invalid("HerPN variances and eps must be non-negative");
        }
        if self.var.iter().any(|&v| v + self.eps == 0.0) {
            return invalid("HerPN needs var + eps > 0 for every basis");
        }
        Ok(())
    }

    /// Statistics of each basis over `xs`, as frozen batch statistics.
    pub fn from_samples(xs: &[f64], gamma: f64, beta: f64, eps: f64) -> Result<Self> {
        if xs.is_empty() {
            return invalid("HerPN statistics need at least one sample");
        }
        let n = xs.len() as f64;
        let mut mu = [0.0; 3];
        let mut var = [0.0; 3];
        for i in 0..3 {
            mu[i] = xs.iter().map(|&x| hermite_bases(x)[i]).sum::<f64>() / n;
            var[i] = xs.iter().map(|&x| (hermite_bases(x)[i] - mu[i]).powi(2)).sum::<f64>() / n;
        }
        let p = Self { mu, var, gamma, beta, eps };
        p.validate()?;
        Ok(p)
    }
}

/// Basis-wise form: `gamma * sum_i f_i (h_i(x) - mu_i) / sqrt(var_i + eps) + beta`.
pub fn herpn_eval(p: &HerPNParams, x: f64) -> f64 {
    let f = hermite_coeffs();
    let h = hermite_bases(x);
    let s: f64 = (0..3).map(|i| f[i] * (h[i] - p.mu[i]) / (p.var[i] + p.eps).sqrt()).sum();
    p.gamma * s + p.beta
}

/// The same function as `a x^2 + b x + c`, returned as `[a, b, c]`.
pub fn herpn_cast(p: &HerPNParams) -> [f64; 3] {
    let f = hermite_coeffs();
    let sd = |i: usize| (p.var[i] + p.eps).sqrt();
    let a = p.gamma / (8.0 * PI * (p.var[2] + p.eps)).sqrt();
    let b = p.gamma / (2.0 * sd(1));
    let c = p.gamma * (f[0] * (1.0 - p.mu[0]) / sd(0) - f[1] * p.mu[1] / sd(1) - f[2] * (2f64.sqrt().recip() + p.mu[2]) / sd(2)) + p.beta;
    [a, b, c]
}

/// Quadratic EvoReLU carrying one cast HerPN per channel.
pub fn herpn_spec(channels: &[HerPNParams]) -> Result<EvoReluSpec> {
    if channels.is_empty() {
        return invalid("HerPN needs at least one channel");
    }
    for p in channels {
        p.validate()?;
    }
    let mut degrees = vec![0; SLOTS];
    degrees[0] = 1;
    EvoReluSpec::quadratic_with(degrees, channels.iter().map(herpn_cast).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::levelplan::{build_graph, place_policy, LevelParams, Policy};
    use rand::Rng;

    fn random_params<R: Rng>(r: &mut R) -> HerPNParams {
        HerPNParams {
            mu: [r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0)],
            var: [r.gen_range(0.0..3.0), r.gen_range(0.0..3.0), r.gen_range(0.0..3.0)],
            gamma: r.gen_range(-2.0..2.0),
            beta: r.gen_range(-2.0..2.0),
            eps: r.gen_range(1e-6..1e-2),
        }
    }

    #[test]
    fn substitution_example() {
        let p = HerPNParams { mu: [0.0; 3], var: [1.0; 3], gamma: 1.0, beta: 0.0, eps: 0.0 };
        let want = 1.0 / (2.0 * PI).sqrt() - 1.0 / (2f64.sqrt() * (4.0 * PI).sqrt());
        assert!((herpn_eval(&p, 0.0) - want).abs() < 1e-15);
        let flat = HerPNParams { gamma: 0.0, beta: 0.7, ..p };
        for x in [-3.0, 0.0, 2.5] {
            assert_eq!(herpn_eval(&flat, x), 0.7);
        }
    }

    #[test]
    fn cast_inverts_the_quadratic_coefficient() {
        let eps = 1e-5;
        let p = HerPNParams { mu: [0.0; 3], var: [1.0, 1.0, 1.0 / (8.0 * PI) - eps], gamma: 1.0, beta: 0.0, eps };
        assert!((herpn_cast(&p)[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cast_matches_basis_form_on_random_draws() {
        let mut r = crate::seed::rng(8);
        for _ in 0..1000 {
            let p = random_params(&mut r);
            let x = r.gen_range(-4.0..4.0);
            let [a, b, c] = herpn_cast(&p);
            let want = herpn_eval(&p, x);
            let got = (a * x + b) * x + c;
            assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn herpn_spec_is_depth_two_and_matches_eval() {
        let mut r = crate::seed::rng(9);
        let chans: Vec<HerPNParams> = (0..4).map(|_| random_params(&mut r)).collect();
        let s = herpn_spec(&chans).unwrap();
        assert_eq!(s.depth(), 2);
        for (c, p) in chans.iter().enumerate() {
            let x = r.gen_range(-2.0..2.0);
            assert!((s.eval(x, c).unwrap() - herpn_eval(p, x)).abs() < 1e-9);
        }
        assert!(herpn_spec(&[]).is_err());
    }

    #[test]
    fn sample_statistics_normalise_each_basis() {
        let mut r = crate::seed::rng(10);
        let xs: Vec<f64> = (0..2000).map(|_| r.gen_range(-2.0..2.0)).collect();
        // the constant basis has zero variance, so eps must be positive
        assert!(HerPNParams::from_samples(&xs, 1.0, 0.0, 0.0).is_err());
        let p = HerPNParams::from_samples(&xs, 1.0, 0.0, 1e-5).unwrap();
        assert_eq!(p.var[0], 0.0);
        assert!(p.mu[1].abs() < 0.1 && (p.var[1] - 4.0 / 3.0).abs() < 0.1);
    }

    #[test]
    fn aespa_vgg11_needs_two_bootstraps() {
        let g = build_graph("vgg11").unwrap();
        let depths = vec![2; g.num_acts()];
        assert_eq!(place_policy(&g, Policy::Aespa, &depths, &LevelParams::default()).unwrap().count, 2);
    }

    #[test]
    fn mpcnn_row_has_depth_fourteen_and_resnet20_needs_eighteen() {
        assert_eq!(crate::chebcore::depth(&MPCNN_DEGREES).unwrap(), 14);
        let g = build_graph("resnet20").unwrap();
        let depths = vec![14; g.num_acts()];
        assert_eq!(place_policy(&g, Policy::Mpcnn, &depths, &LevelParams::default()).unwrap().count, 18);
    }

    #[test]
    fn mpcnn_fit_is_deterministic_and_certified() {
        let cfg = RccdeConfig { generations: 3, seeds: 2, seed: 4, ..RccdeConfig::default() };
        let a = mpcnn_spec_with(&cfg, f64::INFINITY).unwrap();
        let b = mpcnn_spec_with(&cfg, f64::INFINITY).unwrap();
        assert_eq!(a.certificate.checksum, b.certificate.checksum);
        assert_eq!(a.spec.depth(), 14);
        assert_eq!(a.certificate.depth, 14);
        a.certificate.verify().unwrap();
        match mpcnn_spec_with(&cfg, 1e-9) {
            Err(crate::Error::FitFailure { achieved, .. }) => assert_eq!(achieved, a.certificate.linf),
            other => panic!("expected a fit failure, got {other:?}"),
        }
    }
}
