//! Numerical core for the optimal control of a chemotactic Cahn–Hilliard
//! tumor-growth model with relaxation terms.
//!
//! The state system couples a chemical potential `μ`, an order parameter `φ`
//! (healthy tissue at −1, tumor at +1), and a nutrient `σ`:
//!
//! ```text
//! α ∂ₜμ + ∂ₜφ − Δμ = (Pσ − A − u) h(φ)
//!        μ = β ∂ₜφ − Δφ + F′(φ) − χσ
//!   ∂ₜσ − Δσ = −χΔφ + B(σₛ − σ) − Dσ h(φ) + w
//! ```
//!
//! with homogeneous Neumann conditions. The crate provides a fully implicit
//! solver, its exact tangent and adjoint steppers, the tracking cost with
//! its reduced gradient, a projected-gradient optimizer over a control box,
//! and a battery of verification probes.
//!
//! Everything here is `no_std` (with `alloc`); file formats and the CLI live
//! in the `tumorctl` crate.

#![no_std]
#![forbid(unsafe_code)]
// `!(x > 0.0)` rejects NaN along with nonpositive values; index loops mirror the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod banded;
pub mod cost;
mod error;
pub mod grid;
pub mod optimizer;
pub mod potentials;
pub mod presets;
pub mod problem;
pub mod sensitivity;
pub mod state;
pub mod verification;

pub use error::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;
