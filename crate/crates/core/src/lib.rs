//! Online shielding for safe control of polynomial dynamical systems.
//!
//! The crate is organized bottom-up:
//!
//! - [`polyalg`]: multivariate polynomials, truncated Taylor arithmetic and
//!   Taylor surrogates of smooth dynamics.
//! - [`dynamics`]: the cart-pole and bicycle benchmarks, safe regions and LQR
//!   target maps.
//! - [`lqr`]: linearization and discrete-time LQR synthesis.
//! - [`certify`]: invariant sublevel sets of the LQR cost-to-go, certified by
//!   sum-of-squares programs (solved with a small interior-point SDP solver)
//!   or, for linear reduced models, in closed form.
//! - [`policy`]: MLP policies trained with backpropagation through time.
//! - [`shield`]: recoverability checks and the runtime shield loop.
//! - [`harness`]: experiments, metrics and CSV/SVG emission.

pub mod certify;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod lqr;
pub mod policy;
pub mod polyalg;
pub mod shield;

pub use error::{Error, Result};
