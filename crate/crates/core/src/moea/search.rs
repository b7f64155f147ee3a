//! The outer search loop. Each generation runs a crossover phase and a
//! mutation phase; both select parents by tournament, build offspring,
//! fine-tune and score them, then merge them into the population.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ops::{crossover_mask, crossover_with_mask, mutate, Genome};
use super::pareto::{hypervolume_2d, rank_and_crowding, survivors, tournament};
use super::{Archive, Lineage, Origin, SlotCoeffs, Solution};
use crate::chebcore::{DEGREE_LADDER, SLOTS};
use crate::error::{invalid, Result};
use crate::persist;
use crate::rccde::lhs_init;
use crate::seed;

/// Everything the search needs from the problem.
///
/// Implementations must be deterministic: `fit_row` may depend only on the
/// row, and `train_eval` only on its arguments.
pub trait Evaluator: Sync {
    /// Number of activation slots `M`.
    fn num_slots(&self) -> usize;

    /// Coefficients for one genome row.
    fn fit_row(&self, row: &[u32; SLOTS]) -> Result<SlotCoeffs>;

    /// Bootstrap count of the genome's greedy placement.
    fn boot(&self, genome: &Genome) -> Result<usize>;

    /// Fine-tunes from `init` (pretrained weights when `None`) and returns
    /// the weight hash and the minival error.
    fn train_eval(&self, genome: &Genome, coeffs: &[SlotCoeffs], init: Option<&str>, seed: u64) -> Result<(String, f64)>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MosConfig {
    pub population: usize,
    pub offspring_factor: usize,
    pub generations: usize,
    pub seed: u64,
    pub tournament_arity: usize,
    pub tie_cap: usize,
    /// Second coordinate of the hypervolume reference point.
    pub hv_reference_boot: f64,
    /// Attempts to redraw an infeasible random initial genome.
    pub init_retries: usize,
}

impl Default for MosConfig {
    fn default() -> Self {
        Self {
            population: 8,
            offspring_factor: 6,
            generations: 3,
            seed: 0,
            tournament_arity: 3,
            tie_cap: 2,
            hv_reference_boot: 1.0,
            init_retries: 50,
        }
    }
}

/// One line of the per-generation metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub generation: usize,
    pub archive_size: usize,
    pub evaluated: usize,
    pub discarded: usize,
    pub hypervolume: f64,
    /// Lowest error seen for each bootstrap count in the archive.
    pub min_err_per_boot: BTreeMap<usize, f64>,
}

/// Why an offspring was dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discard {
    pub generation: usize,
    pub id: u64,
    pub genome: Genome,
    pub reason: String,
}

/// Search state after a completed generation; also the checkpoint format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MosState {
    pub config: MosConfig,
    pub generations_done: usize,
    pub next_id: u64,
    pub population: Vec<Solution>,
    pub archive: Archive,
    pub metrics: Vec<MetricsRow>,
    pub discards: Vec<Discard>,
}

impl MosState {
    pub fn metrics_csv(&self) -> String {
        persist::csv_text(
            &["generation", "archive_size", "evaluated", "discarded", "hypervolume", "min_err_per_boot"],
            self.metrics.iter().map(|m| {
                vec![
                    m.generation.to_string(),
                    m.archive_size.to_string(),
                    m.evaluated.to_string(),
                    m.discarded.to_string(),
                    format!("{:.6}", m.hypervolume),
                    m.min_err_per_boot.iter().map(|(b, e)| format!("{b}:{e:.4}")).collect::<Vec<_>>().join(";"),
                ]
            }),
        )
    }
}

struct Candidate {
    id: u64,
    genome: Genome,
    coeffs: Vec<SlotCoeffs>,
    init: Option<String>,
    lineage: Lineage,
}

const PHASE_CROSSOVER: u64 = 0;
const PHASE_MUTATION: u64 = 1;

fn uniform(m: usize, row: [u32; SLOTS]) -> Genome {
    vec![row; m]
}

/// Genomes seeded into the first population ahead of random ones.
pub fn fixed_initial_genomes(m: usize) -> Vec<Genome> {
    vec![
        uniform(m, [0; SLOTS]),
        uniform(m, [3, 3, 0, 0, 0, 0]),
        uniform(m, [3, 5, 0, 0, 0, 0]),
        uniform(m, [3, 7, 3, 5, 3, 3]),
    ]
}

fn genome_from_unit(m: usize, v: &[f64]) -> Genome {
    (0..m)
        .map(|s| std::array::from_fn(|k| DEGREE_LADDER[(v[s * SLOTS + k].floor() as usize).min(DEGREE_LADDER.len() - 1)]))
        .collect()
}

/// Fits every distinct row once, in parallel.
fn fit_rows<E: Evaluator>(eval: &E, rows: impl IntoIterator<Item = [u32; SLOTS]>) -> HashMap<[u32; SLOTS], Result<SlotCoeffs>> {
    let mut unique: Vec<[u32; SLOTS]> = rows.into_iter().collect();
    unique.sort_unstable();
    unique.dedup();
    let fitted: Vec<Result<SlotCoeffs>> = unique.par_iter().map(|r| eval.fit_row(r)).collect();
    unique.into_iter().zip(fitted).collect()
}

fn memo_key(c: &Candidate) -> Result<String> {
    persist::checksum_json(&(&c.genome, &c.coeffs, &c.init))
}

/// Scores candidates in parallel; identical candidates are scored once
/// with the seed of their first occurrence.
fn evaluate<E: Evaluator>(eval: &E, cands: Vec<Candidate>, generation: usize) -> (Vec<Solution>, Vec<Discard>) {
    let keys: Vec<String> = cands.iter().map(|c| memo_key(c).unwrap_or_default()).collect();
    let mut first: HashMap<&str, usize> = HashMap::new();
    for (i, k) in keys.iter().enumerate() {
        first.entry(k.as_str()).or_insert(i);
    }
    let mut leaders: Vec<usize> = first.values().copied().collect();
    leaders.sort_unstable();
    let results: Vec<(usize, Result<(usize, String, f64)>)> = leaders
        .par_iter()
        .map(|&i| {
            let c = &cands[i];
            let r = eval.boot(&c.genome).and_then(|boot| {
                let (w, err) = eval.train_eval(&c.genome, &c.coeffs, c.init.as_deref(), c.lineage.seed)?;
                Ok((boot, w, err))
            });
            (i, r)
        })
        .collect();
    let by_leader: HashMap<usize, &Result<(usize, String, f64)>> = results.iter().map(|(i, r)| (*i, r)).collect();
    let mut sols = Vec::new();
    let mut discards = Vec::new();
    for (i, c) in cands.into_iter().enumerate() {
        let leader = first[keys[i].as_str()];
        match by_leader[&leader] {
            Ok((boot, w, err)) => sols.push(Solution {
                id: c.id,
                genome: c.genome,
                coeffs: c.coeffs,
                weights: w.clone(),
                err: *err,
                boot: *boot,
                lineage: c.lineage,
            }),
            Err(e) => discards.push(Discard { generation, id: c.id, genome: c.genome, reason: e.to_string() }),
        }
    }
    (sols, discards)
}

fn assemble(genome: Genome, fits: &HashMap<[u32; SLOTS], Result<SlotCoeffs>>) -> std::result::Result<(Genome, Vec<SlotCoeffs>), (Genome, String)> {
    let mut coeffs = Vec::with_capacity(genome.len());
    for row in &genome {
        match &fits[row] {
            Ok(c) => coeffs.push(c.clone()),
            Err(e) => {
                let reason = format!("fit of row {row:?} failed: {e}");
                return Err((genome, reason));
            }
        }
    }
    Ok((genome, coeffs))
}

fn initial_state<E: Evaluator>(cfg: &MosConfig, eval: &E) -> Result<MosState> {
    let m = eval.num_slots();
    let n = cfg.population;
    let mut genomes: Vec<Genome> = fixed_initial_genomes(m).into_iter().take(n).collect();
    if genomes.len() < n {
        let extra = n - genomes.len();
        let bounds = vec![(0.0, DEGREE_LADDER.len() as f64); m * SLOTS];
        let rows = lhs_init(extra, &bounds, &mut seed::stream(cfg.seed, &[seed::tag("init-lhs")]))?;
        for (i, v) in rows.iter().enumerate() {
            let mut g = genome_from_unit(m, v);
            let mut attempt = 0u64;
            while eval.boot(&g).is_err() {
                if attempt as usize >= cfg.init_retries {
                    return invalid("could not draw a feasible initial genome");
                }
                let mut rng = seed::stream(cfg.seed, &[seed::tag("init-retry"), i as u64, attempt]);
                let u: Vec<f64> = (0..m * SLOTS).map(|_| rng.gen_range(0.0..DEGREE_LADDER.len() as f64)).collect();
                g = genome_from_unit(m, &u);
                attempt += 1;
            }
            genomes.push(g);
        }
    }
    let fits = fit_rows(eval, genomes.iter().flatten().copied());
    let mut cands = Vec::new();
    let mut discards = Vec::new();
    for (i, g) in genomes.into_iter().enumerate() {
        let lineage =
            Lineage { parents: vec![], generation: 0, origin: Origin::Init, seed: seed::derive(cfg.seed, &[0, 2, i as u64]) };
        match assemble(g, &fits) {
            Ok((genome, coeffs)) => cands.push(Candidate { id: i as u64, genome, coeffs, init: None, lineage }),
            Err((genome, reason)) => discards.push(Discard { generation: 0, id: i as u64, genome, reason }),
        }
    }
    let (population, mut d2) = evaluate(eval, cands, 0);
    discards.append(&mut d2);
    if population.is_empty() {
        return invalid("every initial genome failed to evaluate");
    }
    let mut archive = Archive::new(cfg.tie_cap);
    for s in &population {
        archive.insert(s.clone(), 0);
    }
    let mut state = MosState {
        config: cfg.clone(),
        generations_done: 0,
        next_id: n as u64,
        population,
        archive,
        metrics: Vec::new(),
        discards,
    };
    let evaluated = n;
    push_metrics(&mut state, 0, evaluated);
    Ok(state)
}

fn push_metrics(state: &mut MosState, generation: usize, evaluated: usize) {
    let pts: Vec<[f64; 2]> = state.archive.members().iter().map(|s| s.objectives()).collect();
    let mut min_err: BTreeMap<usize, f64> = BTreeMap::new();
    for s in state.archive.members() {
        let e = min_err.entry(s.boot).or_insert(f64::INFINITY);
        *e = e.min(s.err);
    }
    let discarded = state.discards.iter().filter(|d| d.generation == generation).count();
    state.metrics.push(MetricsRow {
        generation,
        archive_size: state.archive.len(),
        evaluated,
        discarded,
        hypervolume: hypervolume_2d(&pts, [1.0, state.config.hv_reference_boot]),
        min_err_per_boot: min_err,
    });
}

fn select_parents(cfg: &MosConfig, pop: &[Solution], generation: usize, phase: u64) -> Vec<usize> {
    let pts: Vec<Vec<f64>> = pop.iter().map(|s| s.objectives().to_vec()).collect();
    let (rank, crowd) = rank_and_crowding(&pts);
    let mut rng = seed::stream(cfg.seed, &[generation as u64, phase, seed::tag("select")]);
    (0..cfg.population * cfg.offspring_factor).map(|_| tournament(&rank, &crowd, cfg.tournament_arity, &mut rng)).collect()
}

fn merge_population(cfg: &MosConfig, state: &mut MosState, children: Vec<Solution>, generation: usize) {
    for c in &children {
        state.archive.insert(c.clone(), generation);
    }
    let mut all = std::mem::take(&mut state.population);
    all.extend(children);
    let pts: Vec<Vec<f64>> = all.iter().map(|s| s.objectives().to_vec()).collect();
    let keep = survivors(&pts, cfg.population);
    state.population = keep.into_iter().map(|i| all[i].clone()).collect();
}

fn crossover_phase<E: Evaluator>(cfg: &MosConfig, eval: &E, state: &mut MosState, generation: usize) -> Result<usize> {
    let parents = select_parents(cfg, &state.population, generation, PHASE_CROSSOVER);
    let mut cands = Vec::with_capacity(parents.len());
    for (p, pair) in parents.chunks_exact(2).enumerate() {
        let (a, b) = (&state.population[pair[0]], &state.population[pair[1]]);
        let mut rng = seed::stream(cfg.seed, &[generation as u64, PHASE_CROSSOVER, p as u64]);
        let mask = crossover_mask(a.genome.len(), &mut rng);
        let (g1, g2) = crossover_with_mask(&a.genome, &b.genome, &mask)?;
        let (c1, c2) = crossover_with_mask(&a.coeffs, &b.coeffs, &mask)?;
        for (g, c) in [(g1, c1), (g2, c2)] {
            let id = state.next_id;
            state.next_id += 1;
            let idx = cands.len() as u64;
            cands.push(Candidate {
                id,
                genome: g,
                coeffs: c,
                init: None,
                lineage: Lineage {
                    parents: vec![a.id, b.id],
                    generation,
                    origin: Origin::Crossover,
                    seed: seed::derive(cfg.seed, &[generation as u64, PHASE_CROSSOVER, idx]),
                },
            });
        }
    }
    let n = cands.len();
    let (children, mut discards) = evaluate(eval, cands, generation);
    state.discards.append(&mut discards);
    merge_population(cfg, state, children, generation);
    Ok(n)
}

fn mutation_phase<E: Evaluator>(cfg: &MosConfig, eval: &E, state: &mut MosState, generation: usize) -> Result<usize> {
    let parents = select_parents(cfg, &state.population, generation, PHASE_MUTATION);
    let mutated: Vec<(usize, Genome)> = parents
        .iter()
        .enumerate()
        .map(|(j, &p)| {
            let mut rng = seed::stream(cfg.seed, &[generation as u64, PHASE_MUTATION, j as u64]);
            (p, mutate(&state.population[p].genome, &mut rng))
        })
        .collect();
    // only rows that changed are refitted
    let changed = mutated
        .iter()
        .flat_map(|(p, g)| g.iter().zip(&state.population[*p].genome).filter(|(a, b)| a != b).map(|(a, _)| *a))
        .collect::<Vec<_>>();
    let fits = fit_rows(eval, changed);
    let mut cands = Vec::with_capacity(mutated.len());
    for (j, (p, genome)) in mutated.into_iter().enumerate() {
        let parent = &state.population[p];
        let id = state.next_id;
        state.next_id += 1;
        let mut coeffs = Vec::with_capacity(genome.len());
        let mut failure = None;
        for (row, (old_row, old_c)) in genome.iter().zip(parent.genome.iter().zip(&parent.coeffs)) {
            if row == old_row {
                coeffs.push(old_c.clone());
            } else {
                match &fits[row] {
                    Ok(c) => coeffs.push(c.clone()),
                    Err(e) => {
                        failure = Some(format!("fit of row {row:?} failed: {e}"));
                        break;
                    }
                }
            }
        }
        if let Some(reason) = failure {
            state.discards.push(Discard { generation, id, genome, reason });
            continue;
        }
        cands.push(Candidate {
            id,
            genome,
            coeffs,
            init: Some(parent.weights.clone()),
            lineage: Lineage {
                parents: vec![parent.id],
                generation,
                origin: Origin::Mutation,
                seed: seed::derive(cfg.seed, &[generation as u64, PHASE_MUTATION, j as u64]),
            },
        });
    }
    let n = cands.len();
    let (children, mut discards) = evaluate(eval, cands, generation);
    state.discards.append(&mut discards);
    merge_population(cfg, state, children, generation);
    Ok(n)
}

fn validate(cfg: &MosConfig) -> Result<()> {
    if cfg.population == 0 || cfg.offspring_factor == 0 || cfg.tournament_arity == 0 {
        return invalid("population, offspring factor and tournament arity must be positive");
    }
    Ok(())
}

/// Runs the search from scratch. `on_generation` sees the state after the
/// initial population and after every generation (checkpoint hook).
pub fn mos_run<E, F>(cfg: &MosConfig, eval: &E, mut on_generation: F) -> Result<MosState>
where
    E: Evaluator,
    F: FnMut(&MosState) -> Result<()>,
{
    validate(cfg)?;
    let state = initial_state(cfg, eval)?;
    on_generation(&state)?;
    mos_resume(cfg, eval, state, on_generation)
}

/// Continues a search from a checkpointed state.
pub fn mos_resume<E, F>(cfg: &MosConfig, eval: &E, mut state: MosState, mut on_generation: F) -> Result<MosState>
where
    E: Evaluator,
    F: FnMut(&MosState) -> Result<()>,
{
    validate(cfg)?;
    if state.config.seed != cfg.seed || state.config.population != cfg.population {
        return invalid("checkpoint was produced with a different seed or population size");
    }
    state.config.generations = cfg.generations;
    while state.generations_done < cfg.generations {
        let generation = state.generations_done + 1;
        let a = crossover_phase(cfg, eval, &mut state, generation)?;
        let b = mutation_phase(cfg, eval, &mut state, generation)?;
        state.generations_done = generation;
        push_metrics(&mut state, generation, a + b);
        on_generation(&state)?;
    }
    Ok(state)
}
