//! Passivity-based PI control for bilinear systems `ẋ = A x + d(t) + Σ uᵢ Bᵢ x`.
//!
//! The crate is organised around the control pipeline:
//!
//! * [`bilinear`] holds the plant representation, the quadratic storage
//!   certificate (`P = Pᵀ > 0`, `sym(PA) ≤ 0`, `sym(PBᵢ) = 0`), the passive
//!   output map and the tracking rank test.
//! * [`control`] implements the PI law driven by the passive output, its
//!   `tanh`-shaped variant and a conditional-integration anti-windup PI.
//! * [`sim`] runs fixed-step RK4 closed loops with zero-order-hold inputs and
//!   evaluates the dissipation and Lyapunov monitors on the resulting traces.
//! * [`boost`] and [`mmc`] instantiate the framework on the averaged
//!   AC–DC boost PFC and the four-state modular multilevel converter.
//! * [`metrics`] computes THD, power factor and tracking-error figures.
//! * [`props`] generates randomized certified systems and checks the
//!   dissipation/Lyapunov/convergence properties in bulk.
//!
//! With the default `parallel` feature, batch work (property suites, scenario
//! batches, harmonic extraction) is spread over a rayon pool. Without it the
//! same entry points run sequentially.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bilinear;
pub mod boost;
pub mod control;
mod error;
pub mod metrics;
pub mod mmc;
mod parallel;
pub mod props;
pub mod sim;

pub use error::{Error, Result};
pub use parallel::Execution;
