//! A simulation and diagnostics laboratory for stochastic functional
//! differential equations with superlinearly dissipative drift.
//!
//! The equation under study is
//!
//! ```text
//! dx(t) = ( f(x(t)) + g(x_t) ) dt + h(x_t) dB(t),   x_0 = phi,
//! ```
//!
//! where `x_t(theta) = x(t + theta)` on `[-r, 0]` is the segment (history
//! window), f grows superlinearly inward, and g, h are Lipschitz functionals
//! of the segment. The crate integrates the segment process with schemes
//! that stay stable under superlinear drift, estimates the invariant measure
//! of the segment process by time averaging, and turns the quantitative
//! estimates behind its existence (stochastic-convolution bounds, the
//! Lyapunov contraction, moment bounds, modulus-of-continuity and coupled
//! continuity diagnostics) into measurable Monte Carlo experiments.

pub mod diagnostics;
pub mod error;
pub mod factorization;
pub mod integrate;
pub mod linalg;
pub mod lyapunov;
pub mod measure;
pub mod model;
pub mod noise;
pub mod segment;
pub mod special;
pub mod stats;

pub use error::{Error, Result};
