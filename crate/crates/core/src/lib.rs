//! papforge: construction of generalizable parallel algorithm portfolios
//! (PAPs) for binary optimization problems.
//!
//! Given a handful of training instances, the library co-evolves a portfolio
//! of BRKGA configurations against a population of learned instance
//! surrogates. Each surrogate couples a shared variational autoencoder and a
//! hypernetwork with a per-instance embedding; perturbing the embedding with
//! an evolution strategy synthesizes new, harder instances without any
//! domain-specific generator. A classic two-population baseline using a
//! domain generator plug-in is included for comparison, together with
//! landscape-feature extraction, PCA projection, and surrogate-fidelity
//! verification tooling.

pub mod aac;
pub mod analysis;
pub mod coevolution;
pub mod nir;
pub mod pgpe;

pub mod brkga;

pub mod error;
pub mod neural;

pub mod portfolio;
pub mod problems;
pub mod seeds;

pub use error::{Error, Result};
