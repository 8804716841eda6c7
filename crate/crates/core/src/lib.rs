//! Numerical toolkit for multi-parameter Fourier integral operators
//! `Tf(x) = ∫ e^{2πiΦ(x,ξ)} σ(x,ξ) f̂(ξ) dξ` with factorized phases.

pub mod atom;
pub mod decomp;
pub mod error;
pub mod evaluator;
pub mod fourier;
pub mod lattice;
pub mod phase;
pub mod region;
pub mod symbol;
pub mod verify;

pub use error::{Error, Result};
