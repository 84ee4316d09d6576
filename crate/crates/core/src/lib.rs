//! Numerical laboratory for stochastic recursive optimal control with
//! pointwise and distributed state delay.
//!
//! The state `X` is driven by a delay equation whose coefficients see the
//! current state, the exponentially weighted window average
//! `X₁(t) = ∫_{−δ}^0 e^{λτ}X(t+τ)dτ` and the delayed state `X₂(t) = X(t−δ)`.
//! The cost is the initial value of a backward equation. The crate covers
//!
//! * forward simulation ([`sdde`]) and backward regression ([`bsdde`]),
//! * the dynamic-programming side: generalized Hamiltonian, HJB residuals and
//!   the compatibility system for finite-dimensional reduction ([`hjb`]),
//! * the maximum-principle side: Hamiltonian and adjoint processes ([`pmp`]),
//! * the closed-form consumption/portfolio problem with wealth memory
//!   ([`merton`]) and the cross-checks tying everything together ([`verify`]).

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod bsdde;
pub mod delay;
pub mod error;
pub mod hjb;
pub mod merton;
pub mod model;
pub mod optimize;
pub mod pmp;
pub mod sdde;
pub mod seed;
pub mod stats;
pub mod verify;

pub use error::{LabError, Result};
pub use model::{Control, ControlBox, FeedbackPolicy, ModelParams, SimConfig, StructuredModel, X1Method};

/// Float formatting used by every CSV/JSON artifact: 17 significant digits,
/// enough to round-trip an `f64` exactly.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}
