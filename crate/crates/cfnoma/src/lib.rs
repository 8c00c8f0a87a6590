//! Downlink cell-free massive MIMO-NOMA: simulation, closed-form spectral
//! efficiency, user clustering, and sum-SE power optimization.
//!
//! Crate layout:
//! - [`model`]: topology generation, three-slope path loss, shadowing, and
//!   MMSE channel-estimation statistics.
//! - [`clustering`]: k-means family user clustering, silhouette-based cluster
//!   count selection, distance-pairing baselines, decode ordering.
//! - [`sse`]: closed-form SINR/SE/sum-SE for the cell-free and collocated
//!   systems plus the fractional fixed power allocation.
//! - [`mc`]: Monte Carlo small-scale-fading oracle that re-derives every
//!   SINR term empirically and checks the closed forms.
//! - [`ia`]: successive convex approximation for sum-SE maximization; builds
//!   one second-order cone subproblem per iteration and solves it with the
//!   embedded interior-point method from the `socp` crate.
//! - [`scenario`] / [`sweep`]: experiment configuration, deterministic
//!   seeding, CSV emission, and result reduction for the `cfnoma` binary.

pub mod clustering;
pub mod error;
pub mod ia;
pub mod mc;
pub mod model;
pub mod scenario;
pub mod seeds;
pub mod sse;
pub mod sweep;

pub use error::{Error, Result};
