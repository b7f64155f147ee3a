//! Computation graphs, ciphertext level accounting and bootstrap placement.
//!
//! Levels are tracked along the main op path. A skip edge `(from, to, d)`
//! takes the output of `from` (after any bootstrap placed there), spends
//! `d` levels on the shortcut, and is added to the output of `to` before
//! any bootstrap placed after `to`. The sum sits at the lower of the two
//! levels; dropping a level costs no depth.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::chebcore::SLOTS;
use crate::error::{invalid, Error, Result};

/// Level budget of the scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LevelParams {
    /// Total levels `L`.
    pub total: u32,
    /// Levels consumed inside a bootstrap, `K`.
    pub boot_cost: u32,
    /// Level of the ciphertext at the graph input.
    pub fresh: u32,
}

impl Default for LevelParams {
    fn default() -> Self {
        Self { total: 30, boot_cost: 14, fresh: 30 }
    }
}

impl LevelParams {
    /// Level right after a bootstrap, `L - K`.
    pub fn refresh(&self) -> u32 {
        self.total - self.boot_cost
    }

    fn validate(&self) -> Result<()> {
        if self.boot_cost >= self.total {
            return invalid("bootstrap cost must be below the total level budget");
        }
        if self.fresh > self.total {
            return invalid("fresh level exceeds the total budget");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OpKind {
    ConvBn,
    Downsample,
    AvgPool,
    Fc,
    Act { slot: usize },
}

impl OpKind {
    /// Fixed depth of non-activation ops.
    pub fn fixed_depth(self) -> Option<u32> {
        match self {
            OpKind::ConvBn => Some(2),
            OpKind::Downsample | OpKind::AvgPool | OpKind::Fc => Some(1),
            OpKind::Act { .. } => None,
        }
    }

    /// Whether a bootstrap may follow this op.
    pub fn is_anchor(self) -> bool {
        matches!(self, OpKind::ConvBn | OpKind::Fc | OpKind::Act { .. })
    }

    pub fn is_linear(self) -> bool {
        matches!(self, OpKind::ConvBn | OpKind::Fc)
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::ConvBn => "convbn",
            OpKind::Downsample => "downsample",
            OpKind::AvgPool => "avgpool",
            OpKind::Fc => "fc",
            OpKind::Act { .. } => "act",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpKind::Act { slot } => write!(f, "act[{slot}]"),
            k => f.write_str(k.name()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skip {
    pub from: usize,
    pub to: usize,
    /// Depth spent on the shortcut branch.
    pub depth: u32,
}

/// Main-path ops plus residual skip edges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GraphRepr", into = "GraphRepr")]
pub struct NetGraph {
    ops: Vec<OpKind>,
    skips: Vec<Skip>,
    act_ops: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct GraphRepr {
    ops: Vec<OpKind>,
    #[serde(default)]
    skips: Vec<Vec<u64>>,
}

impl TryFrom<GraphRepr> for NetGraph {
    type Error = Error;

    fn try_from(r: GraphRepr) -> Result<Self> {
        let skips = r
            .skips
            .into_iter()
            .map(|s| match s.as_slice() {
                [f, t] => Ok(Skip { from: *f as usize, to: *t as usize, depth: 0 }),
                [f, t, d] => Ok(Skip { from: *f as usize, to: *t as usize, depth: *d as u32 }),
                _ => invalid(format!("skip entry {s:?} must be [from, to] or [from, to, depth]")),
            })
            .collect::<Result<_>>()?;
        NetGraph::new(r.ops, skips)
    }
}

impl From<NetGraph> for GraphRepr {
    fn from(g: NetGraph) -> Self {
        let skips = g
            .skips
            .iter()
            .map(|s| {
                if s.depth == 0 {
                    vec![s.from as u64, s.to as u64]
                } else {
                    vec![s.from as u64, s.to as u64, s.depth as u64]
                }
            })
            .collect();
        GraphRepr { ops: g.ops, skips }
    }
}

impl NetGraph {
    pub fn new(ops: Vec<OpKind>, skips: Vec<Skip>) -> Result<Self> {
        if ops.is_empty() {
            return invalid("graph has no ops");
        }
        let mut slots: Vec<(usize, usize)> = ops
            .iter()
            .enumerate()
            .filter_map(|(i, k)| match k {
                OpKind::Act { slot } => Some((*slot, i)),
                _ => None,
            })
            .collect();
        slots.sort();
        for (expect, &(slot, _)) in slots.iter().enumerate() {
            if slot != expect {
                return invalid(format!("activation slots must be 0..M each once; found slot {slot}"));
            }
        }
        let act_ops = slots.into_iter().map(|(_, i)| i).collect();
        for s in &skips {
            if s.from >= s.to || s.to >= ops.len() {
                return invalid(format!("bad skip edge ({}, {})", s.from, s.to));
            }
        }
        Ok(Self { ops, skips, act_ops })
    }

    /// A plain chain without skips.
    pub fn chain(ops: Vec<OpKind>) -> Result<Self> {
        Self::new(ops, Vec::new())
    }

    pub fn ops(&self) -> &[OpKind] {
        &self.ops
    }

    pub fn skips(&self) -> &[Skip] {
        &self.skips
    }

    /// Op index of each activation slot.
    pub fn act_ops(&self) -> &[usize] {
        &self.act_ops
    }

    /// Number of activation slots `M`.
    pub fn num_acts(&self) -> usize {
        self.act_ops.len()
    }

    pub fn genome_dim(&self) -> usize {
        SLOTS * self.num_acts()
    }

    /// `log10` of the number of genomes, `5^(6M)`.
    pub fn search_space_log10(&self) -> f64 {
        self.genome_dim() as f64 * 5f64.log10()
    }

    /// Number of linear ops (conv or fully connected) on the main path.
    pub fn linear_op_count(&self) -> usize {
        self.ops.iter().filter(|k| k.is_linear()).count()
    }

    fn op_depth(&self, i: usize, act_depths: &[u32]) -> u32 {
        match self.ops[i] {
            OpKind::Act { slot } => act_depths[slot],
            k => k.fixed_depth().expect("non-activation op"),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn resnet(blocks_per_stage: usize) -> NetGraph {
    let mut ops = vec![OpKind::ConvBn, OpKind::Act { slot: 0 }];
    let mut skips = Vec::new();
    let mut slot = 1;
    for stage in 0..3 {
        for b in 0..blocks_per_stage {
            let input = ops.len() - 1;
            ops.push(OpKind::ConvBn);
            ops.push(OpKind::Act { slot });
            ops.push(OpKind::ConvBn);
            let to = ops.len() - 1;
            ops.push(OpKind::Act { slot: slot + 1 });
            slot += 2;
            let depth = if stage > 0 && b == 0 { OpKind::Downsample.fixed_depth().unwrap() } else { 0 };
            skips.push(Skip { from: input, to, depth });
        }
    }
    ops.push(OpKind::AvgPool);
    ops.push(OpKind::Fc);
    NetGraph::new(ops, skips).expect("built-in graph is valid")
}

fn vgg11() -> NetGraph {
    let mut ops = Vec::new();
    let mut slot = 0;
    for _ in 0..8 {
        ops.push(OpKind::ConvBn);
        ops.push(OpKind::Act { slot });
        slot += 1;
    }
    ops.push(OpKind::AvgPool);
    for _ in 0..2 {
        ops.push(OpKind::Fc);
        ops.push(OpKind::Act { slot });
        slot += 1;
    }
    ops.push(OpKind::Fc);
    NetGraph::chain(ops).expect("built-in graph is valid")
}

/// Names accepted by [`build_graph`].
pub const BUILTIN_GRAPHS: [&str; 4] = ["resnet20", "resnet32", "resnet44", "vgg11"];

/// Built-in graph by name, or a JSON config.
pub fn build_graph(name_or_json: &str) -> Result<NetGraph> {
    match name_or_json {
        "resnet20" => Ok(resnet(3)),
        "resnet32" => Ok(resnet(5)),
        "resnet44" => Ok(resnet(7)),
        "vgg11" => Ok(vgg11()),
        s if s.trim_start().starts_with('{') => NetGraph::from_json(s),
        other => invalid(format!("unknown graph '{other}'")),
    }
}

/// One row of a level trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRow {
    pub op: usize,
    pub kind: OpKind,
    pub level_before: u32,
    /// Level after the op and any skip reconciliation, before a bootstrap.
    pub level_after: u32,
    pub bootstrap_after: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelTrace {
    pub rows: Vec<TraceRow>,
    pub wasted_levels: u32,
    pub final_level: u32,
}

impl LevelTrace {
    pub fn to_csv(&self) -> String {
        crate::persist::csv_text(
            &["op", "kind", "level_before", "level_after", "bootstrap_after"],
            self.rows.iter().map(|r| {
                vec![
                    r.op.to_string(),
                    r.kind.to_string(),
                    r.level_before.to_string(),
                    r.level_after.to_string(),
                    (r.bootstrap_after as u8).to_string(),
                ]
            }),
        )
    }
}

/// Bootstrap positions (each bootstrap follows the op with that index).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub bootstrap_positions: Vec<usize>,
    pub wasted_levels: u32,
    pub count: usize,
}

impl Placement {
    fn from_trace(positions: Vec<usize>, trace: &LevelTrace) -> Self {
        Self { count: positions.len(), bootstrap_positions: positions, wasted_levels: trace.wasted_levels }
    }
}

enum Underflow {
    /// Main-path op `op` needs more levels than are left.
    Op { op: usize },
    /// Skip branch into `to` from `from` underflows.
    Skip { from: usize, to: usize },
}

fn check_inputs(g: &NetGraph, act_depths: &[u32], params: &LevelParams) -> Result<()> {
    params.validate()?;
    if act_depths.len() != g.num_acts() {
        return invalid(format!("{} activation depths for {} slots", act_depths.len(), g.num_acts()));
    }
    Ok(())
}

fn walk(
    g: &NetGraph,
    act_depths: &[u32],
    boots: &BTreeSet<usize>,
    params: &LevelParams,
) -> std::result::Result<LevelTrace, (Underflow, String)> {
    let mut level = params.fresh;
    let mut out_level = vec![0u32; g.ops.len()];
    let mut rows = Vec::with_capacity(g.ops.len());
    let mut wasted = 0;
    for (i, &kind) in g.ops.iter().enumerate() {
        let cost = g.op_depth(i, act_depths);
        let before = level;
        if cost > level {
            return Err((Underflow::Op { op: i }, format!("{kind} needs {cost} levels, {level} left")));
        }
        level -= cost;
        for s in g.skips.iter().filter(|s| s.to == i) {
            let src = out_level[s.from];
            if s.depth > src {
                return Err((
                    Underflow::Skip { from: s.from, to: i },
                    format!("shortcut from op {} needs {} levels, {src} left", s.from, s.depth),
                ));
            }
            level = level.min(src - s.depth);
        }
        let boot = boots.contains(&i);
        rows.push(TraceRow { op: i, kind, level_before: before, level_after: level, bootstrap_after: boot });
        if boot {
            wasted += level;
            level = params.refresh();
        }
        out_level[i] = level;
    }
    Ok(LevelTrace { rows, wasted_levels: wasted, final_level: level })
}

/// Walks the graph under `positions` and returns the level trace, or the
/// first op whose level would go negative.
pub fn simulate_levels(g: &NetGraph, act_depths: &[u32], positions: &[usize], params: &LevelParams) -> Result<LevelTrace> {
    check_inputs(g, act_depths, params)?;
    for &p in positions {
        match g.ops.get(p) {
            None => return invalid(format!("bootstrap position {p} out of range")),
            Some(k) if !k.is_anchor() => return invalid(format!("op {p} ({k}) cannot host a bootstrap")),
            _ => {}
        }
    }
    let boots: BTreeSet<usize> = positions.iter().copied().collect();
    walk(g, act_depths, &boots, params).map_err(|(u, reason)| {
        let op_index = match u {
            Underflow::Op { op } => op,
            Underflow::Skip { to, .. } => to,
        };
        Error::Infeasible { op_index, reason }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    /// A bootstrap after every linear op that feeds an activation, except the first.
    Mpcnn,
    /// A bootstrap after every fourth (linear, activation) pair, from the third.
    Aespa,
}

impl Policy {
    /// Uniform activation depth the policy was designed for.
    pub fn design_depth(self) -> u32 {
        match self {
            Policy::Mpcnn => 14,
            Policy::Aespa => 2,
        }
    }

    pub fn positions(self, g: &NetGraph) -> Vec<usize> {
        let feeds_act = |i: usize| g.ops[i].is_linear() && matches!(g.ops.get(i + 1), Some(OpKind::Act { .. }));
        match self {
            Policy::Mpcnn => (0..g.ops.len()).filter(|&i| feeds_act(i)).skip(1).collect(),
            Policy::Aespa => (0..g.ops.len())
                .filter(|&i| feeds_act(i))
                .enumerate()
                .filter(|(p, _)| (p + 1) % 4 == 3)
                .map(|(_, i)| i + 1)
                .collect(),
        }
    }
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mpcnn" => Ok(Policy::Mpcnn),
            "aespa" => Ok(Policy::Aespa),
            _ => invalid(format!("unknown policy '{s}'")),
        }
    }
}

/// Fixed reference placement, checked for level feasibility.
pub fn place_policy(g: &NetGraph, policy: Policy, act_depths: &[u32], params: &LevelParams) -> Result<Placement> {
    let positions = policy.positions(g);
    let trace = simulate_levels(g, act_depths, &positions, params)?;
    Ok(Placement::from_trace(positions, &trace))
}

/// Latest anchor in `(after, before)` without a bootstrap yet.
fn latest_anchor(g: &NetGraph, boots: &BTreeSet<usize>, after: Option<usize>, before: usize) -> Option<usize> {
    let lo = after.map_or(0, |a| a + 1);
    (lo..before).rev().find(|&i| g.ops[i].is_anchor() && !boots.contains(&i))
}

/// Forward greedy placement: on each underflow, bootstrap at the latest
/// anchor before the failing op (after the previous bootstrap), then
/// re-walk. Minimal on chains. Shortcuts can trap that walk in a poor
/// cadence, so on graphs with skips the exact search below is also run and
/// its placement is taken when it needs fewer bootstraps.
pub fn place_greedy(g: &NetGraph, act_depths: &[u32], params: &LevelParams) -> Result<Placement> {
    check_inputs(g, act_depths, params)?;
    let walked = greedy_walk(g, act_depths, params);
    if g.skips.is_empty() {
        return walked;
    }
    match (walked, place_exact(g, act_depths, params)) {
        (Ok(w), Some(e)) if e.count < w.count => Ok(e),
        (Ok(w), _) => Ok(w),
        (Err(_), Some(e)) => Ok(e),
        (Err(err), None) => Err(err),
    }
}

fn greedy_walk(g: &NetGraph, act_depths: &[u32], params: &LevelParams) -> Result<Placement> {
    let mut boots = BTreeSet::new();
    loop {
        match walk(g, act_depths, &boots, params) {
            Ok(trace) => return Ok(Placement::from_trace(boots.into_iter().collect(), &trace)),
            Err((Underflow::Op { op }, reason)) => {
                let last = boots.range(..op).next_back().copied();
                match latest_anchor(g, &boots, last, op) {
                    Some(a) => {
                        boots.insert(a);
                    }
                    None => return Err(Error::NoPlacement(format!("op {op}: {reason}"))),
                }
            }
            Err((Underflow::Skip { from, to }, reason)) => {
                let last = boots.range(..=from).next_back().copied();
                match latest_anchor(g, &boots, last, from + 1) {
                    Some(a) => {
                        boots.insert(a);
                    }
                    None => return Err(Error::NoPlacement(format!("skip into op {to}: {reason}"))),
                }
            }
        }
    }
}

/// Fewest bootstraps (then fewest wasted levels) by dynamic programming
/// over `(level, open shortcut source levels)`. `None` when nothing fits.
fn place_exact(g: &NetGraph, act_depths: &[u32], params: &LevelParams) -> Option<Placement> {
    type Key = (u32, Vec<u32>);
    // (bootstraps, wasted, arena node of the last bootstrap)
    type Best = (usize, u32, Option<usize>);
    let closed = u32::MAX;
    let mut arena: Vec<(Option<usize>, usize)> = Vec::new();
    let mut states: BTreeMap<Key, Best> = BTreeMap::new();
    states.insert((params.fresh, vec![closed; g.skips.len()]), (0, 0, None));
    for (i, &kind) in g.ops.iter().enumerate() {
        let cost = g.op_depth(i, act_depths);
        let mut next: BTreeMap<Key, Best> = BTreeMap::new();
        let mut offer = |key: Key, cand: Best| {
            let slot = next.entry(key).or_insert(cand);
            if (cand.0, cand.1) < (slot.0, slot.1) {
                *slot = cand;
            }
        };
        'states: for ((level, open), (count, wasted, node)) in states {
            let Some(mut level) = level.checked_sub(cost) else { continue };
            for (k, s) in g.skips.iter().enumerate().filter(|(_, s)| s.to == i) {
                match open[k].checked_sub(s.depth) {
                    Some(v) => level = level.min(v),
                    None => continue 'states,
                }
            }
            let close = |out: u32| {
                let mut o = open.clone();
                for (k, s) in g.skips.iter().enumerate() {
                    if s.to == i {
                        o[k] = closed;
                    }
                    if s.from == i {
                        o[k] = out;
                    }
                }
                o
            };
            offer((level, close(level)), (count, wasted, node));
            if kind.is_anchor() {
                arena.push((node, i));
                let refreshed = params.refresh();
                offer((refreshed, close(refreshed)), (count + 1, wasted + level, Some(arena.len() - 1)));
            }
        }
        states = next;
    }
    let (_, _, mut node) = states.into_values().min_by_key(|&(c, w, _)| (c, w))?;
    let mut positions = Vec::new();
    while let Some(n) = node {
        positions.push(arena[n].1);
        node = arena[n].0;
    }
    positions.reverse();
    let trace = walk(g, act_depths, &positions.iter().copied().collect(), params).ok()?;
    Some(Placement::from_trace(positions, &trace))
}

/// Bootstrap count of the greedy placement, the `Boot` objective.
pub fn boot_count(g: &NetGraph, act_depths: &[u32], params: &LevelParams) -> Result<usize> {
    Ok(place_greedy(g, act_depths, params)?.count)
}

/// Per-slot output bounds `(B_in, B_out)` from observed maxima, with the
/// safety margin applied and degenerate values lifted to the floor.
pub fn bounds_from_maxima(pre_max: &[f64], post_max: &[f64], margin: f64, floor: f64) -> Result<Vec<(f64, f64)>> {
    if pre_max.len() != post_max.len() {
        return Err(Error::Shape("pre/post maxima lengths differ".into()));
    }
    let lift = |m: f64| {
        let b = m * margin;
        if b.is_finite() && b >= floor {
            b
        } else {
            floor
        }
    };
    Ok(pre_max.iter().zip(post_max).map(|(&a, &b)| (lift(a), lift(b))).collect())
}

pub const BOUND_MARGIN: f64 = 1.1;
pub const BOUND_FLOOR: f64 = 1.0;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    const P: LevelParams = LevelParams { total: 30, boot_cost: 14, fresh: 30 };

    #[test]
    fn builtin_dimensions() {
        for (name, m, dim) in [("resnet20", 19, 114), ("resnet32", 31, 186), ("resnet44", 43, 258), ("vgg11", 10, 60)] {
            let g = build_graph(name).unwrap();
            assert_eq!(g.num_acts(), m, "{name}");
            assert_eq!(g.genome_dim(), dim, "{name}");
        }
        let r20 = build_graph("resnet20").unwrap();
        assert!((r20.search_space_log10() - 79.68).abs() < 0.01);
        assert!(build_graph("lenet").is_err());
    }

    #[test]
    fn json_config_round_trip() {
        let text = r#"{"ops":[{"kind":"convbn"},{"kind":"act","slot":0},{"kind":"convbn"},{"kind":"act","slot":1}],"skips":[[1,2],[0,3,1]]}"#;
        let g = build_graph(text).unwrap();
        assert_eq!(g.num_acts(), 2);
        assert_eq!(g.skips()[1], Skip { from: 0, to: 3, depth: 1 });
        let back = NetGraph::from_json(&serde_json::to_string(&g).unwrap()).unwrap();
        assert_eq!(back, g);
        let r = build_graph("resnet20").unwrap();
        assert_eq!(NetGraph::from_json(&serde_json::to_string(&r).unwrap()).unwrap(), r);
        assert!(build_graph(r#"{"ops":[{"kind":"act","slot":1}]}"#).is_err());
        assert!(build_graph(r#"{"ops":[{"kind":"convbn"}],"skips":[[0,0]]}"#).is_err());
        assert!(build_graph(r#"{"ops":[{"kind":"relu"}]}"#).is_err());
    }

    #[test]
    fn single_segment_examples() {
        let g = NetGraph::chain(vec![OpKind::ConvBn, OpKind::Act { slot: 0 }]).unwrap();
        let p = LevelParams { fresh: 16, ..P };
        let t = simulate_levels(&g, &[14], &[], &p).unwrap();
        assert_eq!(t.final_level, 0);

        let g = NetGraph::chain(vec![OpKind::Act { slot: 0 }]).unwrap();
        let p = LevelParams { fresh: 13, ..P };
        assert!(matches!(simulate_levels(&g, &[14], &[], &p), Err(Error::Infeasible { op_index: 0, .. })));
    }

    #[test]
    fn mpcnn_counts_and_feasibility() {
        for (name, want) in [("resnet20", 18), ("resnet32", 30), ("resnet44", 42), ("vgg11", 9)] {
            let g = build_graph(name).unwrap();
            let pl = place_policy(&g, Policy::Mpcnn, &vec![14; g.num_acts()], &P).unwrap();
            assert_eq!(pl.count, want, "{name}");
        }
    }

    #[test]
    fn aespa_policy_counts_and_feasibility() {
        for (name, want) in [("resnet20", 5), ("resnet32", 8), ("resnet44", 11), ("vgg11", 2)] {
            let g = build_graph(name).unwrap();
            let pl = place_policy(&g, Policy::Aespa, &vec![2; g.num_acts()], &P).unwrap();
            assert_eq!(pl.count, want, "{name}");
            let greedy = place_greedy(&g, &vec![2; g.num_acts()], &P).unwrap();
            assert!(greedy.count <= want && greedy.count + 1 >= want, "{name}: {}", greedy.count);
        }
    }

    #[test]
    fn two_act_chain_needs_one_bootstrap() {
        let g = NetGraph::chain(vec![OpKind::ConvBn, OpKind::Act { slot: 0 }, OpKind::ConvBn, OpKind::Act { slot: 1 }])
            .unwrap();
        let pl = place_greedy(&g, &[14, 14], &P).unwrap();
        assert_eq!(pl.count, 1);
        assert_eq!(brute_force_min(&g, &[14, 14], &P), Some(1));
    }

    #[test]
    fn identity_vgg_matches_chain_bound() {
        let g = build_graph("vgg11").unwrap();
        let total: u32 = g.ops().iter().filter_map(|k| k.fixed_depth()).sum();
        let bound = (total.saturating_sub(P.fresh) as f64 / P.refresh() as f64).ceil() as usize;
        assert_eq!(place_greedy(&g, &[0; 10], &P).unwrap().count, bound);
    }

    #[test]
    fn wasted_levels_zero_for_exact_segments() {
        // segments of exactly 16 levels after a 30-level start consuming 30
        let g = NetGraph::chain(vec![
            OpKind::ConvBn,
            OpKind::Act { slot: 0 },
            OpKind::ConvBn,
            OpKind::Act { slot: 1 },
            OpKind::ConvBn,
            OpKind::Act { slot: 2 },
        ])
        .unwrap();
        let t = simulate_levels(&g, &[14, 12, 14], &[3], &P).unwrap();
        assert_eq!(t.wasted_levels, 0);
        let pl = place_greedy(&g, &[14, 12, 14], &P).unwrap();
        assert_eq!(pl.bootstrap_positions, vec![3]);
        assert_eq!(pl.wasted_levels, 0);
    }

    #[test]
    fn oversized_op_has_no_placement() {
        let g = NetGraph::chain(vec![OpKind::ConvBn, OpKind::Act { slot: 0 }, OpKind::Act { slot: 1 }]).unwrap();
        assert!(matches!(place_greedy(&g, &[14, 17], &P), Err(Error::NoPlacement(_))));
    }

    #[test]
    fn trace_csv_header() {
        let g = build_graph("vgg11").unwrap();
        let t = simulate_levels(&g, &[0; 10], &[], &P).unwrap();
        let csv = t.to_csv();
        assert!(csv.starts_with("op,kind,level_before,level_after,bootstrap_after\n0,convbn,30,28,0\n"));
        assert_eq!(csv.lines().count(), g.ops().len() + 1);
    }

    #[test]
    fn non_anchor_positions_rejected() {
        let g = build_graph("vgg11").unwrap();
        let pool = g.ops().iter().position(|k| *k == OpKind::AvgPool).unwrap();
        assert!(matches!(simulate_levels(&g, &[0; 10], &[pool], &P), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn bounds_margin_and_floor() {
        let b = bounds_from_maxima(&[0.0, 2.0], &[0.5, 10.0], BOUND_MARGIN, BOUND_FLOOR).unwrap();
        assert_eq!(b[0], (1.0, 1.0));
        assert!((b[1].0 - 2.2).abs() < 1e-12 && (b[1].1 - 11.0).abs() < 1e-12);
    }

    /// Minimum bootstrap count over every anchor subset.
    pub(crate) fn brute_force_min(g: &NetGraph, depths: &[u32], p: &LevelParams) -> Option<usize> {
        let anchors: Vec<usize> = (0..g.ops().len()).filter(|&i| g.ops()[i].is_anchor()).collect();
        let mut best: Option<usize> = None;
        for mask in 0u32..(1 << anchors.len()) {
            let n = mask.count_ones() as usize;
            if best.is_some_and(|b| n >= b) {
                continue;
            }
            let pos: Vec<usize> = anchors.iter().enumerate().filter(|(b, _)| mask >> b & 1 == 1).map(|(_, &a)| a).collect();
            if simulate_levels(g, depths, &pos, p).is_ok() {
                best = Some(n);
            }
        }
        best
    }

    pub(crate) fn random_chain<R: Rng>(rng: &mut R) -> (NetGraph, Vec<u32>) {
        let len = rng.gen_range(1..=12);
        let mut ops = Vec::new();
        let mut depths = Vec::new();
        for _ in 0..len {
            let k = match rng.gen_range(0..5) {
                0 => OpKind::ConvBn,
                1 => OpKind::Fc,
                2 => OpKind::AvgPool,
                3 => OpKind::Downsample,
                _ => {
                    depths.push(rng.gen_range(0..=16));
                    OpKind::Act { slot: depths.len() - 1 }
                }
            };
            ops.push(k);
        }
        (NetGraph::chain(ops).unwrap(), depths)
    }

    #[test]
    fn greedy_matches_brute_force_on_random_chains() {
        let mut rng = seed::rng(77);
        for _ in 0..300 {
            let (g, d) = random_chain(&mut rng);
            let greedy = place_greedy(&g, &d, &P).ok().map(|p| p.count);
            assert_eq!(greedy, brute_force_min(&g, &d, &P), "{:?} {d:?}", g.ops());
        }
    }

    #[test]
    fn lowering_a_depth_never_adds_bootstraps() {
        let mut rng = seed::rng(78);
        for name in BUILTIN_GRAPHS {
            let g = build_graph(name).unwrap();
            for _ in 0..20 {
                let d: Vec<u32> = (0..g.num_acts()).map(|_| rng.gen_range(0..=14)).collect();
                let base = place_greedy(&g, &d, &P).unwrap();
                simulate_levels(&g, &d, &base.bootstrap_positions, &P).unwrap();
                let mut lower = d.clone();
                let s = rng.gen_range(0..d.len());
                lower[s] = lower[s].saturating_sub(rng.gen_range(1..=4));
                let c = place_greedy(&g, &lower, &P).unwrap().count;
                assert!(c <= base.count, "{name} {d:?} slot {s}: {c} > {}", base.count);
            }
        }
    }

    #[test]
    fn shortcut_cadence_does_not_cost_an_extra_bootstrap() {
        // the latest-anchor walk alone needs 10 here once slot 28 drops to 13
        let g = build_graph("resnet44").unwrap();
        let mut d = vec![0; g.num_acts()];
        for (s, v) in [(28, 14), (29, 1), (32, 9), (33, 4), (35, 4), (36, 8)] {
            d[s] = v;
        }
        let base = place_greedy(&g, &d, &P).unwrap().count;
        d[28] = 13;
        let lower = place_greedy(&g, &d, &P).unwrap();
        simulate_levels(&g, &d, &lower.bootstrap_positions, &P).unwrap();
        assert!(lower.count <= base);
        assert!(lower.count < greedy_walk(&g, &d, &P).unwrap().count);
    }
}
