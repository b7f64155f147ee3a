//! Polynomial replacements for ReLU under leveled homomorphic encryption:
//! Chebyshev composites, a cooperative-coevolution fitter, level planning
//! with bootstrap placement, and a multi-objective search over per-layer
//! activation choices.

pub mod baselines;
pub mod chebcore;
pub mod desk;
pub mod error;
pub mod evorelu;
pub mod levelplan;
pub mod moea;
pub mod persist;
pub mod rccde;
pub mod seed;
pub mod tinynet;

pub use error::{Error, Result};
