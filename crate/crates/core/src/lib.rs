//! Numerical toolkit for non-homogeneous dyadic harmonic analysis.
//!
//! The crate works with finite atomic measures on `R^N` standing in for a
//! measure of `d`-dimensional growth. Everything is an exact finite sum:
//! randomly shifted dyadic systems, `b`-adapted Haar bases, truncated
//! Calderón–Zygmund operators and their matrix coefficients, Carleson and
//! BMO functionals, and tangent-martingale decoupling diagnostics.
//!
//! Pairings `<g, f>` are bilinear (`sum_x w_x g(x) f(x)`) unless a function
//! name says otherwise.

pub mod carleson;
pub mod config;
pub mod decoupling;
pub mod dyadic;
pub mod error;
pub mod estimator;
pub mod field;
pub mod filtration;
pub mod haar;
pub mod kernel;
pub mod measure;
pub mod output;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
pub use field::{NormSpace, VectorField, C64};
