//! Multi-objective search over layerwise activation genomes.
//!
//! A solution is scored by `(error, bootstraps)`, both minimised. The
//! search keeps a population truncated by non-dominated rank and crowding
//! and an external archive of every non-dominated solution it evaluated.

pub mod ops;
pub mod pareto;
pub mod search;

use serde::{Deserialize, Serialize};

use crate::rccde::FitCertificate;

pub use ops::Genome;
pub use pareto::{crowding, dominates, nds, tournament};
pub use search::{mos_resume, mos_run, Evaluator, MosConfig, MosState};

/// Fitted coefficients of one activation slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "branch", rename_all = "lowercase")]
pub enum SlotCoeffs {
    Identity,
    Quadratic { a2: f64 },
    Composite { certificate: Box<FitCertificate> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Init,
    Crossover,
    Mutation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lineage {
    pub parents: Vec<u64>,
    pub generation: usize,
    pub origin: Origin,
    pub seed: u64,
}

/// An evaluated genome with its coefficients and weight snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub id: u64,
    pub genome: Genome,
    pub coeffs: Vec<SlotCoeffs>,
    /// Content hash of the fine-tuned weights.
    pub weights: String,
    /// `1 - accuracy` on the minival split.
    pub err: f64,
    pub boot: usize,
    pub lineage: Lineage,
}

impl Solution {
    pub fn objectives(&self) -> [f64; 2] {
        [self.err, self.boot as f64]
    }

    pub fn accuracy(&self) -> f64 {
        1.0 - self.err
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Inserted,
    Evicted,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveEvent {
    pub generation: usize,
    pub kind: EventKind,
    pub id: u64,
    /// Id of the inserted solution that caused an eviction.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub by: Option<u64>,
    pub objectives: [f64; 2],
}

/// External archive of mutually non-dominated solutions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Archive {
    members: Vec<Solution>,
    /// Maximum number of distinct genomes kept per objective pair.
    tie_cap: usize,
    events: Vec<ArchiveEvent>,
}

impl Archive {
    pub fn new(tie_cap: usize) -> Self {
        Self { members: Vec::new(), tie_cap: tie_cap.max(1), events: Vec::new() }
    }

    pub fn members(&self) -> &[Solution] {
        &self.members
    }

    pub fn events(&self) -> &[ArchiveEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    fn log(&mut self, generation: usize, kind: EventKind, s: &Solution, by: Option<u64>) {
        self.events.push(ArchiveEvent { generation, kind, id: s.id, by, objectives: s.objectives() });
    }

    /// Inserts `s` unless a member dominates it, a member has the same
    /// genome and objectives, or its objective cell is full. Returns
    /// whether it was inserted.
    pub fn insert(&mut self, s: Solution, generation: usize) -> bool {
        let o = s.objectives();
        let blocked = self.members.iter().any(|m| dominates(&m.objectives(), &o))
            || self.members.iter().any(|m| m.objectives() == o && m.genome == s.genome)
            || self.members.iter().filter(|m| m.objectives() == o).count() >= self.tie_cap;
        if blocked {
            self.log(generation, EventKind::Rejected, &s, None);
            return false;
        }
        let (evicted, kept): (Vec<Solution>, Vec<Solution>) =
            std::mem::take(&mut self.members).into_iter().partition(|m| dominates(&o, &m.objectives()));
        self.members = kept;
        self.log(generation, EventKind::Inserted, &s, None);
        for m in &evicted {
            self.log(generation, EventKind::Evicted, m, Some(s.id));
        }
        self.members.push(s);
        true
    }

    /// No member dominates another.
    pub fn is_mutually_non_dominated(&self) -> bool {
        self.members
            .iter()
            .all(|a| self.members.iter().all(|b| !dominates(&a.objectives(), &b.objectives())))
    }

    /// Replays the event log: every eviction must name an inserted
    /// solution that dominates the evicted one, and the replayed member set
    /// must equal the current one.
    pub fn replay_check(&self) -> bool {
        let mut live: Vec<(u64, [f64; 2])> = Vec::new();
        let mut inserted: std::collections::HashMap<u64, [f64; 2]> = Default::default();
        for e in &self.events {
            match e.kind {
                EventKind::Inserted => {
                    inserted.insert(e.id, e.objectives);
                    live.push((e.id, e.objectives));
                }
                EventKind::Evicted => {
                    let Some(by) = e.by.and_then(|b| inserted.get(&b).copied()) else {
                        return false;
                    };
                    if !dominates(&by, &e.objectives) {
                        return false;
                    }
                    let before = live.len();
                    live.retain(|(id, _)| *id != e.id);
                    if live.len() + 1 != before {
                        return false;
                    }
                }
                EventKind::Rejected => {}
            }
        }
        let mut a: Vec<u64> = live.into_iter().map(|(id, _)| id).collect();
        let mut b: Vec<u64> = self.members.iter().map(|m| m.id).collect();
        a.sort_unstable();
        b.sort_unstable();
        a == b
    }

    /// Members sorted by bootstrap count, then error.
    pub fn sorted(&self) -> Vec<&Solution> {
        let mut v: Vec<&Solution> = self.members.iter().collect();
        v.sort_by(|a, b| a.boot.cmp(&b.boot).then(a.err.total_cmp(&b.err)).then(a.id.cmp(&b.id)));
        v
    }

    /// One JSON line per member, sorted as in [`Archive::sorted`].
    pub fn to_jsonl(&self) -> crate::Result<String> {
        let mut out = String::new();
        for s in self.sorted() {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str, tie_cap: usize) -> crate::Result<Self> {
        let mut a = Self::new(tie_cap);
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let s: Solution = serde_json::from_str(line)?;
            a.members.push(s);
        }
        Ok(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sol(id: u64, err: f64, boot: usize, g: u32) -> Solution {
        Solution {
            id,
            genome: vec![[g, 0, 0, 0, 0, 0]],
            coeffs: vec![SlotCoeffs::Identity],
            weights: String::new(),
            err,
            boot,
            lineage: Lineage { parents: vec![], generation: 0, origin: Origin::Init, seed: 0 },
        }
    }

    #[test]
    fn archive_rules() {
        let mut a = Archive::new(2);
        assert!(a.insert(sol(0, 0.3, 5, 1), 0));
        assert!(!a.insert(sol(1, 0.4, 6, 3), 0));
        assert!(a.insert(sol(2, 0.2, 7, 3), 0));
        assert!(a.insert(sol(3, 0.1, 4, 5), 0));
        assert_eq!(a.len(), 1);
        assert!(a.insert(sol(4, 0.1, 4, 7), 1));
        assert!(!a.insert(sol(5, 0.1, 4, 0), 1), "tie cap");
        assert!(!a.insert(sol(6, 0.1, 4, 7), 1), "same genome and objectives");
        assert!(a.is_mutually_non_dominated());
        assert!(a.replay_check());
        let kinds: Vec<EventKind> = a.events().iter().map(|e| e.kind).collect();
        assert_eq!(kinds.iter().filter(|k| **k == EventKind::Evicted).count(), 2);
    }

    #[test]
    fn jsonl_round_trip() {
        let mut a = Archive::new(2);
        a.insert(sol(0, 0.3, 5, 1), 0);
        a.insert(sol(1, 0.5, 1, 3), 0);
        let text = a.to_jsonl().unwrap();
        assert_eq!(text.lines().count(), 2);
        let back = Archive::from_jsonl(&text, 2).unwrap();
        assert_eq!(back.members().len(), 2);
        assert_eq!(back.sorted()[0].id, 1);
    }
}
