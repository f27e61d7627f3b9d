//! Monte Carlo laboratory for the uncovered set of simple random walk on the
//! torus `Z_n^d` (`d ≥ 3`), its excursion-based Bernoulli surrogate, the
//! Chen–Stein total-variation bound, and high points of the discrete
//! Gaussian free field.

pub mod chenstein;
pub mod cli;
pub mod error;
pub mod excursion;
pub mod gff;
pub mod hitting;
pub mod lattice;
pub mod oracle;
pub mod rng;
pub mod stats;
pub mod uncovered;
pub mod walk;

pub use error::{Error, Result};
