//! Numerical laboratory for studying stochastic gradient descent as
//! anomalous diffusion on a fractal loss landscape.
//!
//! The crate is organised around the quantities that the diffusion picture
//! relates to each other:
//!
//! * [`nn`] and [`trainer`] produce weight trajectories `w(t)` together with
//!   their displacement `R(t) = ||w(t) - w(0)||`.
//! * [`llc`] estimates the local learning coefficient `λ(w)` with localized
//!   SGLD and checks it against brute-force volume scaling on toy potentials.
//! * [`analysis`] fits `log R` against `log t` and turns the slope into the
//!   spectral and walker dimensions, the effective diffusion coefficient and
//!   the `d_s <= λ` inequality verdicts.
//! * [`bench`] certifies the dimension estimators on Sierpinski gaskets and
//!   regular lattices where every exponent is known exactly.
//! * [`ffpe`] solves the time-fractional Fokker-Planck equation in one
//!   dimension and checks its stationary states against the Boltzmann form.

// Guards are written `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod bench;
pub mod config;
pub mod data;
mod error;
pub mod ffpe;
pub mod llc;
pub mod manifest;
pub mod nn;
pub mod rng;
pub mod stats;
pub mod trainer;
pub mod validation;

pub use error::{Error, Result};
