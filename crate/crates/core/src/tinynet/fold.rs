//! Export of a chain network to its deployment form: every EvoReLU input
//! and output scale is pushed into the neighbouring conv/BN or fully
//! connected layer, and quadratic post-BN layers into the coefficients.

use super::{ActBinding, Layer, Model, BN_EPS};
use crate::chebcore::Branch;
use crate::error::{invalid, Error, Result};
use crate::evorelu::{fold_post_bn, EvoReluSpec};

/// Multiplies the output of parametric layer `i` by `s`.
fn scale_output(m: &mut Model, layer: Layer, i: usize, s: f64) -> Result<()> {
    let names = match layer {
        Layer::Conv { .. } => [format!("l{i}.bn.gamma"), format!("l{i}.bn.beta")],
        _ => [format!("l{i}.fc.w"), format!("l{i}.fc.b")],
    };
    names.iter().try_for_each(|n| scale_tensor(m, n, s))
}

/// Multiplies the weights of parametric layer `i` by `s`, compensating an
/// input that arrives scaled by `1 / s`.
fn scale_input(m: &mut Model, layer: Layer, i: usize, s: f64) -> Result<()> {
    match layer {
        Layer::Conv { .. } => scale_tensor(m, &format!("l{i}.conv.w"), s),
        _ => scale_tensor(m, &format!("l{i}.fc.w"), s),
    }
}

fn scale_tensor(m: &mut Model, name: &str, s: f64) -> Result<()> {
    let p = m.params_mut();
    let idx = p.index(name).ok_or_else(|| Error::InvalidInput(format!("missing {name}")))?;
    p.get_mut(idx).iter_mut().for_each(|v| *v *= s);
    Ok(())
}

fn parametric(l: Layer) -> bool {
    matches!(l, Layer::Conv { .. } | Layer::Fc { .. })
}

/// Deployment form of a chain model whose slots are EvoReLU. The result
/// computes the same logits up to rounding.
pub fn fold_model(student: &Model) -> Result<Model> {
    if !student.arch().shortcuts.is_empty() {
        return invalid("folding is defined for chain networks only");
    }
    let layers = student.arch().layers.clone();
    let mut out = student.clone();
    let mut deployed = Vec::with_capacity(student.acts().len());
    let mut acts_in_order: Vec<(usize, usize)> =
        layers.iter().enumerate().filter_map(|(i, l)| if let Layer::Act { slot } = l { Some((*slot, i)) } else { None }).collect();
    acts_in_order.sort();
    for &(slot, i) in &acts_in_order {
        let ActBinding::Evo { spec } = &student.acts()[slot] else {
            return invalid(format!("slot {slot} is not bound to an EvoReLU"));
        };
        let spec = match spec.branch() {
            Branch::Quadratic => {
                let q = student.quad_coeffs(slot).expect("quadratic slot has coefficients");
                let get = |n: &str| student.params().get(student.params().index(&format!("a{slot}.bn.{n}")).expect("post-BN exists")).to_vec();
                let (g, b, mu, var) = (get("gamma"), get("beta"), get("mean"), get("var"));
                let folded = (0..q.len()).map(|c| fold_post_bn(q[c], g[c], b[c], mu[c], var[c], BN_EPS)).collect();
                EvoReluSpec::quadratic_with(spec.degrees().to_vec(), folded)?.with_bounds(spec.b_in(), spec.b_out())?
            }
            _ => spec.clone(),
        };
        if spec.branch() == Branch::Composite {
            match i.checked_sub(1).map(|j| layers[j]) {
                Some(l) if parametric(l) => scale_output(&mut out, l, i - 1, 1.0 / spec.b_in())?,
                _ => return Err(Error::FoldTarget { side: "previous", reason: format!("op before slot {slot} is not conv or fc") }),
            }
        }
        let next = (i + 1..layers.len()).find(|&j| parametric(layers[j]) || matches!(layers[j], Layer::Act { .. }));
        match next {
            Some(j) if parametric(layers[j]) => scale_input(&mut out, layers[j], j, spec.b_out())?,
            _ => return Err(Error::FoldTarget { side: "next", reason: format!("no conv or fc after slot {slot}") }),
        }
        deployed.push((slot, spec.export()));
    }
    deployed.sort_by_key(|d| d.0);
    let acts = deployed.into_iter().map(|(_, act)| ActBinding::Deployed { act }).collect();
    let mut params = out.params().clone();
    params.entries.retain(|e| !e.name.starts_with('a'));
    Model::from_parts(student.arch().clone(), params, acts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chebcore::{ChebPoly, CompositeSpec};
    use crate::tinynet::{Arch, Role};
    use rand::Rng;

    fn composite(seed: u64) -> CompositeSpec {
        let mut r = crate::seed::rng(seed);
        let mut poly = |d: usize| ChebPoly::new((0..d).map(|_| r.gen_range(-0.5..0.5)).collect(), r.gen_range(1.0..2.0)).unwrap();
        CompositeSpec::new(vec![3, 0, 5, 0, 0, 0], vec![poly(15)]).unwrap()
    }

    #[test]
    fn folded_chain_reproduces_logits() {
        let mut t = Model::new(Arch::desk_chain(), 21).unwrap();
        let mut r = crate::seed::rng(22);
        // non-trivial BN state everywhere
        for e in &mut t.params_mut().entries {
            if e.name.ends_with(".mean") || e.name.ends_with(".beta") {
                e.data.iter_mut().for_each(|v| *v = r.gen_range(-0.3..0.3));
            }
            if e.name.ends_with(".var") || e.name.ends_with(".gamma") {
                e.data.iter_mut().for_each(|v| *v = r.gen_range(0.5..1.5));
            }
        }
        let quad = EvoReluSpec::quadratic(vec![1, 1, 0, 0, 0, 0], 0.3, 1).unwrap().with_bounds(2.5, 1.7).unwrap();
        let comp = EvoReluSpec::composite(composite(23), 3.0, 2.0).unwrap();
        let ident = EvoReluSpec::identity().with_bounds(1.0, 4.0).unwrap();
        let mut s = t
            .rebind(vec![ActBinding::Evo { spec: comp }, ActBinding::Evo { spec: quad }, ActBinding::Evo { spec: ident }])
            .unwrap();
        for e in &mut s.params_mut().entries {
            if e.name.starts_with("a1.") && e.role != Role::Buffer {
                e.data.iter_mut().for_each(|v| *v += r.gen_range(-0.2..0.2));
            }
        }
        let f = fold_model(&s).unwrap();
        assert!(f.acts().iter().all(|a| matches!(a, ActBinding::Deployed { .. })));
        let x: Vec<f64> = (0..20 * 64).map(|_| r.gen_range(-1.5..1.5)).collect();
        let a = s.logits(&x, 20).unwrap();
        let b = f.logits(&x, 20).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() <= 1e-6 * (1.0 + u.abs()), "{u} vs {v}");
        }
    }

    #[test]
    fn folding_rejects_unsupported_networks() {
        let t = Model::new(Arch::desk_resnet(), 1).unwrap();
        let s = t.rebind(vec![ActBinding::Evo { spec: EvoReluSpec::identity() }; 8]).unwrap();
        assert!(fold_model(&s).is_err());
        let c = Model::new(Arch::desk_chain(), 1).unwrap();
        assert!(fold_model(&c).is_err(), "ReLU slots cannot be folded");
        // composite right after pooling has no previous op to absorb 1/B_in
        let mut arch = Arch::desk_chain();
        arch.layers = vec![Layer::AvgPool, Layer::Act { slot: 0 }, Layer::Fc { out: 10 }];
        let m = Model::new(arch, 1).unwrap();
        let s = m.rebind(vec![ActBinding::Evo { spec: EvoReluSpec::composite(composite(3), 2.0, 2.0).unwrap() }]).unwrap();
        assert!(matches!(fold_model(&s), Err(Error::FoldTarget { side: "previous", .. })));
    }
}
