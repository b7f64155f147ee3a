//! A small CPU network engine: conv/BN, pooling, fully connected layers
//! and activation slots bound to ReLU or EvoReLU, with forward and
//! backward passes, distillation training and a synthetic dataset.

pub mod data;
pub mod fold;
pub mod kernels;
pub mod snapshot;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::chebcore::Branch;
use crate::error::{invalid, Error, Result};
use crate::evorelu::{DeployAct, EvoReluSpec};
use crate::levelplan::{bounds_from_maxima, NetGraph, OpKind, Skip, BOUND_FLOOR, BOUND_MARGIN};
use crate::persist;
use kernels::ConvGeom;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// One main-path layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Layer {
    /// Convolution (no bias) followed by batch normalisation.
    Conv { out: usize, k: usize, stride: usize },
    Act { slot: usize },
    /// Global average pooling.
    AvgPool,
    Fc { out: usize },
}

/// Residual edge adding the output of layer `from` to the output of layer
/// `to`. With `proj` the shortcut is a strided 1x1 conv plus BN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortcut {
    pub from: usize,
    pub to: usize,
    pub proj: bool,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub name: String,
    /// `(channels, height, width)` of one input.
    pub input: [usize; 3],
    pub classes: usize,
    pub layers: Vec<Layer>,
    #[serde(default)]
    pub shortcuts: Vec<Shortcut>,
}

impl Arch {
    /// Output shape of every layer.
    pub fn shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut cur = self.input;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            cur = match *l {
                Layer::Conv { out, k, stride } => {
                    if k % 2 == 0 || stride == 0 || out == 0 {
                        return invalid(format!("layer {i}: bad conv k={k} stride={stride} out={out}"));
                    }
                    let g = ConvGeom { ci: cur[0], co: out, h: cur[1], w: cur[2], k, stride };
                    let (h, w) = g.out_hw();
                    [out, h, w]
                }
                Layer::Act { .. } => cur,
                Layer::AvgPool => [cur[0], 1, 1],
                Layer::Fc { out } => [out, 1, 1],
            };
            out.push(cur);
        }
        Ok(out)
    }

    fn validate(&self) -> Result<Vec<[usize; 3]>> {
        let shapes = self.shapes()?;
        let last = match self.layers.last() {
            Some(Layer::Fc { out }) => *out,
            _ => return invalid("architecture must end with a fully connected layer"),
        };
        if last != self.classes {
            return invalid(format!("last layer has {last} outputs for {} classes", self.classes));
        }
        for s in &self.shortcuts {
            if s.from >= s.to || s.to >= self.layers.len() || !matches!(self.layers[s.to], Layer::Conv { .. }) {
                return invalid(format!("bad shortcut {} -> {}", s.from, s.to));
            }
            let src = shapes[s.from];
            let dst = shapes[s.to];
            let ok = if s.proj {
                let g = ConvGeom { ci: src[0], co: dst[0], h: src[1], w: src[2], k: 1, stride: s.stride };
                g.out_hw() == (dst[1], dst[2])
            } else {
                src == dst
            };
            if !ok {
                return invalid(format!("shortcut {} -> {} shape mismatch", s.from, s.to));
            }
        }
        self.graph()?;
        Ok(shapes)
    }

    pub fn num_acts(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, Layer::Act { .. })).count()
    }

    /// Level-planning graph with the same op sequence.
    pub fn graph(&self) -> Result<NetGraph> {
        let ops = self
            .layers
            .iter()
            .map(|l| match *l {
                Layer::Conv { .. } => OpKind::ConvBn,
                Layer::Act { slot } => OpKind::Act { slot },
                Layer::AvgPool => OpKind::AvgPool,
                Layer::Fc { .. } => OpKind::Fc,
            })
            .collect();
        let skips = self
            .shortcuts
            .iter()
            .map(|s| Skip { from: s.from, to: s.to, depth: if s.proj { OpKind::Downsample.fixed_depth().unwrap_or(1) } else { 0 } })
            .collect();
        NetGraph::new(ops, skips)
    }

    /// Residual toy network on 8x8x1 inputs with eight activation slots.
    pub fn desk_resnet() -> Self {
        use Layer::*;
        let mut layers = vec![Conv { out: 8, k: 3, stride: 1 }, Act { slot: 0 }];
        let mut shortcuts = Vec::new();
        let mut slot = 1;
        for (width, stride) in [(8, 1), (16, 2), (16, 2)] {
            let from = layers.len() - 1;
            layers.push(Conv { out: width, k: 3, stride });
            layers.push(Act { slot });
            layers.push(Conv { out: width, k: 3, stride: 1 });
            let to = layers.len() - 1;
            layers.push(Act { slot: slot + 1 });
            slot += 2;
            shortcuts.push(Shortcut { from, to, proj: stride != 1 || width != 8, stride });
        }
        layers.extend([AvgPool, Fc { out: 16 }, Act { slot }, Fc { out: 10 }]);
        Self { name: "desk-resnet".into(), input: [1, 8, 8], classes: 10, layers, shortcuts }
    }

    /// Plain chain of conv and fully connected layers on 8x8x1 inputs.
    pub fn desk_chain() -> Self {
        use Layer::*;
        let layers = vec![
            Conv { out: 6, k: 3, stride: 1 },
            Act { slot: 0 },
            Conv { out: 8, k: 3, stride: 2 },
            Act { slot: 1 },
            AvgPool,
            Fc { out: 12 },
            Act { slot: 2 },
            Fc { out: 10 },
        ];
        Self { name: "desk-chain".into(), input: [1, 8, 8], classes: 10, layers, shortcuts: vec![] }
    }

    /// Two-hidden-layer perceptron for 2-D point data.
    pub fn mlp(inputs: usize, hidden: usize, classes: usize) -> Self {
        use Layer::*;
        let layers = vec![Fc { out: hidden }, Act { slot: 0 }, Fc { out: hidden }, Act { slot: 1 }, Fc { out: classes }];
        Self { name: "mlp".into(), input: [inputs, 1, 1], classes, layers, shortcuts: vec![] }
    }

    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "desk-resnet" => Ok(Self::desk_resnet()),
            "desk-chain" => Ok(Self::desk_chain()),
            "mlp" => Ok(Self::mlp(2, 16, 4)),
            _ => invalid(format!("unknown architecture '{name}'")),
        }
    }
}

/// What a parameter tensor is for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Trained and weight-decayed.
    Weight,
    /// Trained, not decayed (biases, BN affine, quadratic coefficients).
    Affine,
    /// Running statistics; never trained.
    Buffer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: Role,
    pub data: Vec<f64>,
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamStore {
    pub entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn index(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    fn push(&mut self, name: String, shape: Vec<usize>, role: Role, data: Vec<f64>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.push(ParamEntry { name, shape, role, data });
        self.entries.len() - 1
    }

    fn ensure(&mut self, name: String, shape: Vec<usize>, role: Role, init: impl FnOnce() -> Vec<f64>) -> usize {
        match self.index(&name) {
            Some(i) if self.entries[i].shape == shape => i,
            Some(i) => {
                self.entries[i] = ParamEntry { name, shape, role, data: init() };
                i
            }
            None => self.push(name, shape, role, init()),
        }
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.entries[i].data
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Vec<f64> {
        &mut self.entries[i].data
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn content_hash(&self) -> String {
        let mut bytes = Vec::new();
        for e in &self.entries {
            bytes.extend_from_slice(e.name.as_bytes());
            bytes.push(0);
            for d in &e.shape {
                bytes.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &e.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        persist::sha256_hex(&bytes)
    }

    /// Zeroed gradient buffers shaped like the store.
    pub fn zeros(&self) -> Vec<Vec<f64>> {
        self.entries.iter().map(|e| vec![0.0; e.data.len()]).collect()
    }
}

/// Activation implementation bound to a slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ActBinding {
    Relu,
    Evo { spec: EvoReluSpec },
    /// Exported form after folding; forward only.
    Deployed { act: DeployAct },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct BnRefs {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LayerRefs {
    Conv { w: usize, bn: BnRefs },
    Fc { w: usize, b: usize },
    None,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    layers: Vec<LayerRefs>,
    /// Projection weights and BN of each shortcut, if any.
    shortcuts: Vec<Option<(usize, BnRefs)>>,
    /// Per-slot quadratic coefficients `[C, 3]` and post-quadratic BN.
    quad: Vec<Option<(usize, BnRefs)>>,
}

/// How batch-norm statistics are taken in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Statistics of the current batch, with gradients through them.
    Batch,
    /// Running statistics, treated as constants.
    Running,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mode {
    pub layer_bn: BnMode,
    pub post_bn: BnMode,
}

impl Mode {
    pub const TRAIN: Mode = Mode { layer_bn: BnMode::Batch, post_bn: BnMode::Batch };
    /// Fine-tuning: layer statistics frozen, post-quadratic BN live.
    pub const PAT: Mode = Mode { layer_bn: BnMode::Running, post_bn: BnMode::Batch };
    pub const EVAL: Mode = Mode { layer_bn: BnMode::Running, post_bn: BnMode::Running };
}

/// Network architecture, weights and activation bindings.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: Arch,
    shapes: Vec<[usize; 3]>,
    params: ParamStore,
    acts: Vec<ActBinding>,
    layout: Layout,
}

fn bn_params(p: &mut ParamStore, prefix: &str, c: usize) -> BnRefs {
    BnRefs {
        gamma: p.ensure(format!("{prefix}.gamma"), vec![c], Role::Affine, || vec![1.0; c]),
        beta: p.ensure(format!("{prefix}.beta"), vec![c], Role::Affine, || vec![0.0; c]),
        mean: p.ensure(format!("{prefix}.mean"), vec![c], Role::Buffer, || vec![0.0; c]),
        var: p.ensure(format!("{prefix}.var"), vec![c], Role::Buffer, || vec![1.0; c]),
    }
}

impl Model {
    /// ReLU network with He-initialised weights drawn from `seed`.
    pub fn new(arch: Arch, seed: u64) -> Result<Self> {
        use rand_distr::{Distribution, StandardNormal};
        let shapes = arch.validate()?;
        let mut rng = crate::seed::stream(seed, &[crate::seed::tag("init")]);
        let mut normal = |n: usize, fan_in: usize| -> Vec<f64> {
            let s = (2.0 / fan_in as f64).sqrt();
            (0..n).map(|_| s * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect()
        };
        let mut params = ParamStore::default();
        let mut prev = arch.input;
        for (i, l) in arch.layers.iter().enumerate() {
            match *l {
                Layer::Conv { out, k, .. } => {
                    let fan = prev[0] * k * k;
                    params.push(format!("l{i}.conv.w"), vec![out, prev[0], k, k], Role::Weight, normal(out * fan, fan));
                    bn_params(&mut params, &format!("l{i}.bn"), out);
                }
                Layer::Fc { out } => {
                    let fin = prev.iter().product();
                    params.push(format!("l{i}.fc.w"), vec![out, fin], Role::Weight, normal(out * fin, fin));
                    params.push(format!("l{i}.fc.b"), vec![out], Role::Affine, vec![0.0; out]);
                }
                _ => {}
            }
            prev = shapes[i];
        }
        for (j, s) in arch.shortcuts.iter().enumerate() {
            if s.proj {
                let (ci, co) = (shapes[s.from][0], shapes[s.to][0]);
                params.push(format!("s{j}.conv.w"), vec![co, ci, 1, 1], Role::Weight, normal(co * ci, ci));
                bn_params(&mut params, &format!("s{j}.bn"), co);
            }
        }
        let acts = vec![ActBinding::Relu; arch.num_acts()];
        Self::assemble(arch, shapes, params, acts)
    }

    fn assemble(arch: Arch, shapes: Vec<[usize; 3]>, mut params: ParamStore, acts: Vec<ActBinding>) -> Result<Self> {
        if acts.len() != arch.num_acts() {
            return invalid(format!("{} bindings for {} activation slots", acts.len(), arch.num_acts()));
        }
        let find = |p: &ParamStore, name: String| p.index(&name).ok_or_else(|| Error::InvalidInput(format!("missing parameter {name}")));
        let bn = |p: &ParamStore, prefix: &str| -> Result<BnRefs> {
            Ok(BnRefs {
                gamma: find(p, format!("{prefix}.gamma"))?,
                beta: find(p, format!("{prefix}.beta"))?,
                mean: find(p, format!("{prefix}.mean"))?,
                var: find(p, format!("{prefix}.var"))?,
            })
        };
        // quadratic slots own coefficient and post-BN tensors; others must not
        let mut slot_channels = vec![0; acts.len()];
        for (i, l) in arch.layers.iter().enumerate() {
            if let Layer::Act { slot } = l {
                slot_channels[*slot] = shapes[i][0];
            }
        }
        for (slot, b) in acts.iter().enumerate() {
            let prefix = format!("a{slot}.");
            let c = slot_channels[slot];
            match b {
                ActBinding::Evo { spec } if spec.branch() == Branch::Quadratic => {
                    let q = spec.quad();
                    params.ensure(format!("a{slot}.quad"), vec![c, 3], Role::Affine, || {
                        (0..c).flat_map(|ch| q[ch % q.len()]).collect()
                    });
                    bn_params(&mut params, &format!("a{slot}.bn"), c);
                }
                _ => params.entries.retain(|e| !e.name.starts_with(&prefix)),
            }
        }
        let mut layers = Vec::with_capacity(arch.layers.len());
        for (i, l) in arch.layers.iter().enumerate() {
            layers.push(match l {
                Layer::Conv { .. } => LayerRefs::Conv { w: find(&params, format!("l{i}.conv.w"))?, bn: bn(&params, &format!("l{i}.bn"))? },
                Layer::Fc { .. } => LayerRefs::Fc { w: find(&params, format!("l{i}.fc.w"))?, b: find(&params, format!("l{i}.fc.b"))? },
                _ => LayerRefs::None,
            });
        }
        let shortcuts = arch
            .shortcuts
            .iter()
            .enumerate()
            .map(|(j, s)| if s.proj { Ok(Some((find(&params, format!("s{j}.conv.w"))?, bn(&params, &format!("s{j}.bn"))?))) } else { Ok(None) })
            .collect::<Result<_>>()?;
        let quad = acts
            .iter()
            .enumerate()
            .map(|(slot, b)| match b {
                ActBinding::Evo { spec } if spec.branch() == Branch::Quadratic => {
                    Ok(Some((find(&params, format!("a{slot}.quad"))?, bn(&params, &format!("a{slot}.bn"))?)))
                }
                _ => Ok(None),
            })
            .collect::<Result<_>>()?;
        for e in &params.entries {
            if e.data.len() != e.shape.iter().product::<usize>() {
                return Err(Error::Shape(format!("parameter {} has {} values for shape {:?}", e.name, e.data.len(), e.shape)));
            }
        }
        Ok(Self { arch, shapes, params, acts, layout: Layout { layers, shortcuts, quad } })
    }

    /// Rebuilds a model from stored weights.
    pub fn from_parts(arch: Arch, params: ParamStore, acts: Vec<ActBinding>) -> Result<Self> {
        let shapes = arch.validate()?;
        Self::assemble(arch, shapes, params, acts)
    }

    /// Same weights with new activation bindings. Quadratic slots that were
    /// already quadratic keep their trained coefficients and post-BN.
    pub fn rebind(&self, acts: Vec<ActBinding>) -> Result<Self> {
        let keep: Vec<bool> = acts
            .iter()
            .zip(&self.acts)
            .map(|(new, old)| is_quadratic(new) && is_quadratic(old))
            .collect();
        let mut params = self.params.clone();
        for (slot, k) in keep.iter().enumerate() {
            if !k {
                let prefix = format!("a{slot}.");
                params.entries.retain(|e| !e.name.starts_with(&prefix));
            }
        }
        Self::assemble(self.arch.clone(), self.shapes.clone(), params, acts)
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn acts(&self) -> &[ActBinding] {
        &self.acts
    }

    pub fn shapes(&self) -> &[[usize; 3]] {
        &self.shapes
    }

    pub fn input_len(&self) -> usize {
        self.arch.input.iter().product()
    }

    /// Channel count seen by each activation slot.
    pub fn slot_channels(&self) -> Vec<usize> {
        let mut c = vec![0; self.acts.len()];
        for (i, l) in self.arch.layers.iter().enumerate() {
            if let Layer::Act { slot } = l {
                c[*slot] = self.shapes[i][0];
            }
        }
        c
    }

    /// Quadratic coefficients currently held for `slot`, one row per channel.
    pub fn quad_coeffs(&self, slot: usize) -> Option<Vec<[f64; 3]>> {
        self.layout.quad[slot].map(|(q, _)| self.params.get(q).chunks(3).map(|r| [r[0], r[1], r[2]]).collect())
    }

    fn in_shape(&self, i: usize) -> [usize; 3] {
        if i == 0 {
            self.arch.input
        } else {
            self.shapes[i - 1]
        }
    }
}

fn is_quadratic(b: &ActBinding) -> bool {
    matches!(b, ActBinding::Evo { spec } if spec.branch() == Branch::Quadratic)
}

/// Batch statistics observed for one BN during a forward pass.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    mean_idx: usize,
    var_idx: usize,
    mean: Vec<f64>,
    var: Vec<f64>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Vec<f64>,
    var: Vec<f64>,
    batch: bool,
}

#[derive(Debug, Clone)]
enum LayerCache {
    Conv { bn: BnCache },
    Quad { pre: Vec<f64>, bn: BnCache },
    None,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    n: usize,
    input: Vec<f64>,
    outs: Vec<Vec<f64>>,
    layers: Vec<LayerCache>,
    shortcuts: Vec<Option<BnCache>>,
    pub bn_updates: Vec<BnUpdate>,
}

impl Cache {
    pub fn batch_size(&self) -> usize {
        self.n
    }

    /// Logits, `n x classes`.
    pub fn logits(&self) -> &[f64] {
        self.outs.last().expect("non-empty network")
    }

    /// Output of layer `i`.
    pub fn output(&self, i: usize) -> &[f64] {
        &self.outs[i]
    }

    /// Input of layer `i`.
    pub fn layer_input(&self, i: usize) -> &[f64] {
        if i == 0 {
            &self.input
        } else {
            &self.outs[i - 1]
        }
    }
}

fn run_bn(p: &ParamStore, r: BnRefs, z: &[f64], n: usize, c: usize, hw: usize, mode: BnMode, updates: &mut Vec<BnUpdate>) -> (Vec<f64>, BnCache) {
    let (mean, var) = match mode {
        BnMode::Batch => {
            let (m, v) = kernels::channel_stats(z, n, c, hw);
            updates.push(BnUpdate { mean_idx: r.mean, var_idx: r.var, mean: m.clone(), var: v.clone() });
            (m, v)
        }
        BnMode::Running => (p.get(r.mean).to_vec(), p.get(r.var).to_vec()),
    };
    let (y, xhat) = kernels::bn_forward(z, n, c, hw, &mean, &var, p.get(r.gamma), p.get(r.beta), BN_EPS);
    (y, BnCache { xhat, var, batch: mode == BnMode::Batch })
}

/// Runs the network on `n` inputs laid out contiguously.
pub fn forward(model: &Model, x: &[f64], n: usize, mode: Mode) -> Result<Cache> {
    if x.len() != n * model.input_len() || n == 0 {
        return Err(Error::Shape(format!("{} input values for {n} samples of {}", x.len(), model.input_len())));
    }
    let p = &model.params;
    let mut outs: Vec<Vec<f64>> = Vec::with_capacity(model.arch.layers.len());
    let mut caches = Vec::with_capacity(model.arch.layers.len());
    let mut sc_caches = vec![None; model.arch.shortcuts.len()];
    let mut updates = Vec::new();
    for (i, layer) in model.arch.layers.iter().enumerate() {
        let inp: &[f64] = if i == 0 { x } else { &outs[i - 1] };
        let [ci, h, w] = model.in_shape(i);
        let [co, ho, wo] = model.shapes[i];
        let (mut y, cache) = match (*layer, model.layout.layers[i]) {
            (Layer::Conv { k, stride, .. }, LayerRefs::Conv { w: wi, bn }) => {
                let g = ConvGeom { ci, co, h, w, k, stride };
                let z = kernels::conv_forward(&g, p.get(wi), inp, n);
                let (y, bc) = run_bn(p, bn, &z, n, co, ho * wo, mode.layer_bn, &mut updates);
                (y, LayerCache::Conv { bn: bc })
            }
            (Layer::Fc { out }, LayerRefs::Fc { w: wi, b }) => {
                (kernels::fc_forward(p.get(wi), p.get(b), inp, n, ci * h * w, out), LayerCache::None)
            }
            (Layer::AvgPool, _) => {
                let hw = h * w;
                (inp.chunks(hw).map(|c| c.iter().sum::<f64>() / hw as f64).collect(), LayerCache::None)
            }
            (Layer::Act { slot }, _) => act_forward(model, slot, inp, n, ci, h * w, mode, &mut updates)?,
            _ => unreachable!("layout mirrors the architecture"),
        };
        for (j, s) in model.arch.shortcuts.iter().enumerate().filter(|(_, s)| s.to == i) {
            let src = &outs[s.from];
            match model.layout.shortcuts[j] {
                Some((wi, bn)) => {
                    let [sc, sh, sw] = model.shapes[s.from];
                    let g = ConvGeom { ci: sc, co, h: sh, w: sw, k: 1, stride: s.stride };
                    let z = kernels::conv_forward(&g, p.get(wi), src, n);
                    let (zy, bc) = run_bn(p, bn, &z, n, co, ho * wo, mode.layer_bn, &mut updates);
                    y.iter_mut().zip(&zy).for_each(|(a, b)| *a += b);
                    sc_caches[j] = Some(bc);
                }
                None => y.iter_mut().zip(src).for_each(|(a, b)| *a += b),
            }
        }
        outs.push(y);
        caches.push(cache);
    }
    let out = outs.last().expect("non-empty network");
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged("non-finite logits".into()));
    }
    Ok(Cache { n, input: x.to_vec(), outs, layers: caches, shortcuts: sc_caches, bn_updates: updates })
}

#[allow(clippy::too_many_arguments)]
fn act_forward(model: &Model, slot: usize, x: &[f64], n: usize, c: usize, hw: usize, mode: Mode, updates: &mut Vec<BnUpdate>) -> Result<(Vec<f64>, LayerCache)> {
    let chan = |t: usize| (t / hw) % c;
    Ok(match &model.acts[slot] {
        ActBinding::Relu => (x.iter().map(|v| v.max(0.0)).collect(), LayerCache::None),
        ActBinding::Deployed { act } => (x.iter().enumerate().map(|(t, &v)| act.eval(v, chan(t))).collect(), LayerCache::None),
        ActBinding::Evo { spec } => match spec.branch() {
            Branch::Quadratic => {
                let (qi, bn) = model.layout.quad[slot].expect("quadratic slot has coefficients");
                let q = model.params.get(qi);
                let pre: Vec<f64> = x
                    .iter()
                    .enumerate()
                    .map(|(t, &v)| {
                        let ch = chan(t);
                        (q[3 * ch] * v + q[3 * ch + 1]) * v + q[3 * ch + 2]
                    })
                    .collect();
                let (y, bc) = run_bn(&model.params, bn, &pre, n, c, hw, mode.post_bn, updates);
                (y, LayerCache::Quad { pre: x.to_vec(), bn: bc })
            }
            _ => (x.iter().enumerate().map(|(t, &v)| spec.eval_unchecked(v, chan(t))).collect(), LayerCache::None),
        },
    })
}

/// Gradient of the scalar loss with respect to every parameter, given the
/// gradient at the logits. Activation slots use their backward rule: ReLU
/// indicator for ReLU and composite EvoReLU, exact derivative otherwise.
pub fn backward(model: &Model, cache: &Cache, dlogits: &[f64]) -> Result<Vec<Vec<f64>>> {
    let n = cache.n;
    if dlogits.len() != cache.logits().len() {
        return Err(Error::Shape("gradient does not match logits".into()));
    }
    let p = &model.params;
    let mut grads = p.zeros();
    let nl = model.arch.layers.len();
    let mut gout: Vec<Option<Vec<f64>>> = vec![None; nl];
    gout[nl - 1] = Some(dlogits.to_vec());
    let add_into = |slot: &mut Option<Vec<f64>>, g: Vec<f64>| match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    };
    for i in (0..nl).rev() {
        let Some(dy) = gout[i].take() else { continue };
        let [ci, h, w] = model.in_shape(i);
        let [co, ho, wo] = model.shapes[i];
        // shortcut branches ending here receive the same output gradient
        for (j, s) in model.arch.shortcuts.iter().enumerate().filter(|(_, s)| s.to == i) {
            let g = match (model.layout.shortcuts[j], &cache.shortcuts[j]) {
                (Some((wi, bn)), Some(bc)) => {
                    let (dz, dg, db) = kernels::bn_backward(&dy, &bc.xhat, n, co, ho * wo, &bc.var, p.get(bn.gamma), BN_EPS, bc.batch);
                    acc(&mut grads[bn.gamma], &dg);
                    acc(&mut grads[bn.beta], &db);
                    let [sc, sh, sw] = model.shapes[s.from];
                    let geom = ConvGeom { ci: sc, co, h: sh, w: sw, k: 1, stride: s.stride };
                    let (dx, dw) = kernels::conv_backward(&geom, p.get(wi), &cache.outs[s.from], &dz, n);
                    acc(&mut grads[wi], &dw);
                    dx
                }
                _ => dy.clone(),
            };
            add_into(&mut gout[s.from], g);
        }
        let inp = cache.layer_input(i);
        let dx = match (model.arch.layers[i], model.layout.layers[i], &cache.layers[i]) {
            (Layer::Conv { k, stride, .. }, LayerRefs::Conv { w: wi, bn }, LayerCache::Conv { bn: bc }) => {
                let (dz, dg, db) = kernels::bn_backward(&dy, &bc.xhat, n, co, ho * wo, &bc.var, p.get(bn.gamma), BN_EPS, bc.batch);
                acc(&mut grads[bn.gamma], &dg);
                acc(&mut grads[bn.beta], &db);
                let g = ConvGeom { ci, co, h, w, k, stride };
                let (dx, dw) = kernels::conv_backward(&g, p.get(wi), inp, &dz, n);
                acc(&mut grads[wi], &dw);
                dx
            }
            (Layer::Fc { out }, LayerRefs::Fc { w: wi, b }, _) => {
                let (dx, dw, db) = kernels::fc_backward(p.get(wi), inp, &dy, n, ci * h * w, out);
                acc(&mut grads[wi], &dw);
                acc(&mut grads[b], &db);
                dx
            }
            (Layer::AvgPool, _, _) => {
                let hw = h * w;
                dy.iter().flat_map(|g| std::iter::repeat_n(g / hw as f64, hw)).collect()
            }
            (Layer::Act { slot }, _, lc) => act_backward(model, slot, inp, &dy, n, ci, h * w, lc, &mut grads)?,
            _ => unreachable!("layout mirrors the architecture"),
        };
        if i > 0 {
            add_into(&mut gout[i - 1], dx);
        }
    }
    Ok(grads)
}

fn acc(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

#[allow(clippy::too_many_arguments)]
fn act_backward(
    model: &Model,
    slot: usize,
    x: &[f64],
    dy: &[f64],
    n: usize,
    c: usize,
    hw: usize,
    lc: &LayerCache,
    grads: &mut [Vec<f64>],
) -> Result<Vec<f64>> {
    let chan = |t: usize| (t / hw) % c;
    match (&model.acts[slot], lc) {
        (ActBinding::Relu, _) => Ok(x.iter().zip(dy).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect()),
        (ActBinding::Deployed { .. }, _) => invalid("deployed activations have no backward pass"),
        (ActBinding::Evo { .. }, LayerCache::Quad { pre, bn: bc }) => {
            let (qi, bn) = model.layout.quad[slot].expect("quadratic slot has coefficients");
            let p = &model.params;
            let (dq, dg, db) = kernels::bn_backward(dy, &bc.xhat, n, c, hw, &bc.var, p.get(bn.gamma), BN_EPS, bc.batch);
            acc(&mut grads[bn.gamma], &dg);
            acc(&mut grads[bn.beta], &db);
            let q = p.get(qi);
            let mut dcoef = vec![0.0; q.len()];
            let dx = pre
                .iter()
                .zip(&dq)
                .enumerate()
                .map(|(t, (&v, &g))| {
                    let ch = chan(t);
                    dcoef[3 * ch] += g * v * v;
                    dcoef[3 * ch + 1] += g * v;
                    dcoef[3 * ch + 2] += g;
                    g * (2.0 * q[3 * ch] * v + q[3 * ch + 1])
                })
                .collect();
            acc(&mut grads[qi], &dcoef);
            Ok(dx)
        }
        (ActBinding::Evo { spec }, _) => Ok(x.iter().zip(dy).enumerate().map(|(t, (&v, &g))| g * spec.grad(v, chan(t))).collect()),
    }
}

impl Model {
    /// Folds batch statistics from a forward pass into the running buffers.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate], momentum: f64) {
        for u in updates {
            for (r, b) in self.params.get_mut(u.mean_idx).iter_mut().zip(&u.mean) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
            for (r, b) in self.params.get_mut(u.var_idx).iter_mut().zip(&u.var) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
    }

    /// Logits in evaluation mode, computed in batches.
    pub fn logits(&self, x: &[f64], n: usize) -> Result<Vec<f64>> {
        let il = self.input_len();
        let mut out = Vec::with_capacity(n * self.arch.classes);
        for start in (0..n).step_by(256) {
            let m = (n - start).min(256);
            let c = forward(self, &x[start * il..(start + m) * il], m, Mode::EVAL)?;
            out.extend_from_slice(c.logits());
        }
        Ok(out)
    }

    /// Per-slot largest magnitude entering and leaving each activation on
    /// the given inputs.
    pub fn activation_maxima(&self, x: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let il = self.input_len();
        let mut pre = vec![0.0f64; self.acts.len()];
        let mut post = vec![0.0f64; self.acts.len()];
        for start in (0..n).step_by(256) {
            let m = (n - start).min(256);
            let c = forward(self, &x[start * il..(start + m) * il], m, Mode::EVAL)?;
            for (i, l) in self.arch.layers.iter().enumerate() {
                if let Layer::Act { slot } = l {
                    let amax = |v: &[f64]| v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
                    pre[*slot] = pre[*slot].max(amax(c.layer_input(i)));
                    post[*slot] = post[*slot].max(amax(c.output(i)));
                }
            }
        }
        Ok((pre, post))
    }

    /// `(B_in, B_out)` per slot from activation maxima on `x`.
    pub fn estimate_bounds(&self, x: &[f64], n: usize) -> Result<Vec<(f64, f64)>> {
        let (pre, post) = self.activation_maxima(x, n)?;
        bounds_from_maxima(&pre, &post, BOUND_MARGIN, BOUND_FLOOR)
    }

    /// Sets the post-BN of each quadratic slot in `slots` so that, on `x`,
    /// its running statistics match the quadratic output and its affine
    /// part reproduces the per-channel mean and spread of `reference`'s
    /// activation output at the same slot.
    pub fn calibrate_post_bn(&mut self, reference: &Model, x: &[f64], n: usize, slots: &[usize]) -> Result<()> {
        if reference.arch != self.arch {
            return invalid("calibration reference has a different architecture");
        }
        let cr = forward(reference, x, n, Mode::EVAL)?;
        // Layer order, one slot at a time: each slot is measured with every
        // upstream slot already calibrated.
        for i in 0..self.arch.layers.len() {
            let Layer::Act { slot } = self.arch.layers[i] else { continue };
            if !slots.contains(&slot) {
                continue;
            }
            let Some((qi, bn)) = self.layout.quad[slot] else { continue };
            let cs = forward(self, x, n, Mode::EVAL)?;
            let [c, h, w] = self.shapes[i];
            let q = self.params.get(qi).to_vec();
            let pre: Vec<f64> = cs
                .layer_input(i)
                .iter()
                .enumerate()
                .map(|(t, &v)| {
                    let ch = (t / (h * w)) % c;
                    (q[3 * ch] * v + q[3 * ch + 1]) * v + q[3 * ch + 2]
                })
                .collect();
            let (qm, qv) = kernels::channel_stats(&pre, n, c, h * w);
            let (rm, rv) = kernels::channel_stats(cr.output(i), n, c, h * w);
            *self.params.get_mut(bn.mean) = qm;
            *self.params.get_mut(bn.var) = qv;
            *self.params.get_mut(bn.gamma) = rv.iter().map(|v| (v + BN_EPS).sqrt()).collect();
            *self.params.get_mut(bn.beta) = rm;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn batch(model: &Model, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = crate::seed::rng(seed);
        (0..n * model.input_len()).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn builtin_arches_mirror_graphs() {
        let r = Arch::desk_resnet();
        let g = r.graph().unwrap();
        assert_eq!(g.num_acts(), 8);
        assert_eq!(g.ops().len(), r.layers.len());
        assert_eq!(g.skips().iter().filter(|s| s.depth == 1).count(), 2);
        assert_eq!(Arch::desk_chain().graph().unwrap().num_acts(), 3);
        assert!(Model::new(Arch::mlp(2, 8, 3), 0).is_ok());
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let mut m = Model::new(Arch::desk_chain(), 1).unwrap();
        for e in &mut m.params_mut().entries {
            if e.role != Role::Buffer {
                e.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let x = batch(&m, 3, 2);
        assert!(m.logits(&x, 3).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_student_equals_identity_teacher() {
        let m = Model::new(Arch::desk_resnet(), 3).unwrap();
        let x = batch(&m, 4, 4);
        let a = m.rebind(vec![ActBinding::Evo { spec: EvoReluSpec::identity() }; 8]).unwrap();
        let b = m.rebind(vec![ActBinding::Deployed { act: DeployAct::Scale { factor: 1.0 } }; 8]).unwrap();
        assert_eq!(a.logits(&x, 4).unwrap(), b.logits(&x, 4).unwrap());
    }

    #[test]
    fn relu_rebinding_is_bitwise_teacher() {
        let t = Model::new(Arch::desk_resnet(), 5).unwrap();
        let s = t.rebind(vec![ActBinding::Evo { spec: EvoReluSpec::quadratic(vec![1, 0, 0, 0, 0, 0], 0.3, 1).unwrap() }; 8]).unwrap();
        let back = s.rebind(vec![ActBinding::Relu; 8]).unwrap();
        assert_eq!(back.params(), t.params());
        let x = batch(&t, 5, 6);
        assert_eq!(back.logits(&x, 5).unwrap(), t.logits(&x, 5).unwrap());
    }

    #[test]
    fn forward_is_reproducible() {
        let m = Model::new(Arch::desk_resnet(), 7).unwrap();
        let m2 = Model::new(Arch::desk_resnet(), 7).unwrap();
        assert_eq!(m.params().content_hash(), m2.params().content_hash());
        let x = batch(&m, 9, 8);
        let a = forward(&m, &x, 9, Mode::TRAIN).unwrap();
        let b = forward(&m2, &x, 9, Mode::TRAIN).unwrap();
        assert_eq!(a.logits(), b.logits());
    }

    #[test]
    fn rebind_keeps_trained_quadratic_slots() {
        let t = Model::new(Arch::desk_chain(), 1).unwrap();
        let quad = |a2| ActBinding::Evo { spec: EvoReluSpec::quadratic(vec![1, 0, 0, 0, 0, 0], a2, 1).unwrap() };
        let mut s = t.rebind(vec![quad(0.3), ActBinding::Relu, quad(0.3)]).unwrap();
        let qi = s.params().index("a0.quad").unwrap();
        s.params_mut().get_mut(qi)[0] = 9.0;
        let s2 = s.rebind(vec![quad(0.3), quad(0.3), ActBinding::Relu]).unwrap();
        assert_eq!(s2.quad_coeffs(0).unwrap()[0][0], 9.0);
        assert_eq!(s2.quad_coeffs(1).unwrap()[0], [0.3, 0.5, 0.0]);
        assert!(s2.quad_coeffs(2).is_none());
        assert!(s2.params().index("a2.quad").is_none());
    }

    #[test]
    fn shape_errors() {
        let m = Model::new(Arch::desk_chain(), 1).unwrap();
        assert!(matches!(forward(&m, &[0.0; 10], 1, Mode::EVAL), Err(Error::Shape(_))));
        let mut bad = Arch::desk_chain();
        bad.classes = 3;
        assert!(Model::new(bad, 0).is_err());
    }
}
