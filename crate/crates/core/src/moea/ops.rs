//! Variation operators on layerwise degree genomes.

use rand::Rng;

use crate::chebcore::{DEGREE_LADDER, SLOTS};
use crate::error::{Error, Result};

/// One degree row per activation slot.
pub type Genome = Vec<[u32; SLOTS]>;

/// Probability of moving one rung down the ladder.
pub const P_DOWN: f64 = 0.5;
/// Probability of moving one rung up the ladder.
pub const P_UP: f64 = 0.3;

/// Slot-wise uniform crossover: slot `m` is swapped between the children
/// when `mask[m]` is true. Works on any per-slot payload.
pub fn crossover_with_mask<T: Clone>(a: &[T], b: &[T], mask: &[bool]) -> Result<(Vec<T>, Vec<T>)> {
    if a.len() != b.len() || a.len() != mask.len() {
        return Err(Error::Shape(format!("crossover of {} and {} slots with mask {}", a.len(), b.len(), mask.len())));
    }
    let mut c1 = Vec::with_capacity(a.len());
    let mut c2 = Vec::with_capacity(a.len());
    for ((x, y), &swap) in a.iter().zip(b).zip(mask) {
        if swap {
            c1.push(y.clone());
            c2.push(x.clone());
        } else {
            c1.push(x.clone());
            c2.push(y.clone());
        }
    }
    Ok((c1, c2))
}

/// Draws a swap mask with probability 0.5 per slot.
pub fn crossover_mask<R: Rng + ?Sized>(slots: usize, rng: &mut R) -> Vec<bool> {
    (0..slots).map(|_| rng.gen_bool(0.5)).collect()
}

/// Genome crossover with a freshly drawn mask.
pub fn crossover<R: Rng + ?Sized>(a: &Genome, b: &Genome, rng: &mut R) -> Result<(Genome, Genome)> {
    let mask = crossover_mask(a.len(), rng);
    crossover_with_mask(a, b, &mask)
}

fn rung(d: u32) -> usize {
    DEGREE_LADDER.iter().position(|&v| v == d).unwrap_or_else(|| panic!("degree {d} is not on the ladder"))
}

/// Moves one entry according to a uniform draw `u`: down for `u < P_DOWN`,
/// up for the next `P_UP`, otherwise unchanged. Clamped at the ladder ends.
pub fn mutate_entry(d: u32, u: f64) -> u32 {
    let r = rung(d);
    if u < P_DOWN {
        DEGREE_LADDER[r.saturating_sub(1)]
    } else if u < P_DOWN + P_UP {
        DEGREE_LADDER[(r + 1).min(DEGREE_LADDER.len() - 1)]
    } else {
        d
    }
}

/// Independent per-entry mutation of every degree in the genome.
pub fn mutate<R: Rng + ?Sized>(g: &Genome, rng: &mut R) -> Genome {
    g.iter().map(|row| row.map(|d| mutate_entry(d, rng.gen()))).collect()
}

/// Whether every entry lies on the degree ladder.
pub fn on_ladder(g: &Genome) -> bool {
    g.iter().flatten().all(|d| DEGREE_LADDER.contains(d))
}
