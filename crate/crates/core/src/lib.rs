//! Finite-difference laboratory for continuum Anderson-type random
//! Schrödinger operators `H_ω = -Δ + V0 + Σ_k ω_k u(· - k)`.

pub mod error;
pub mod floquet;
pub mod hs;
pub mod ids;
pub mod lattice;
pub mod linalg;
pub mod probes;
pub mod stats;

pub use error::{Error, Result};
