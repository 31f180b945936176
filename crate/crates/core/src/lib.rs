//! Microgrid secondary-control simulation with physics-guided detection of
//! communication-level data-integrity attacks and spanning-tree topology
//! switching for mitigation.
//!
//! The crate is organized around the closed loop it simulates:
//!
//! - [`grid`]: reduced-order N-DG plant under droop control, RK4 integration.
//! - [`comm`]: communication capability graph, FDI/MITM attack injection,
//!   measurement routing under a spanning arborescence, and arborescence
//!   enumeration/counting.
//! - [`control`]: leader-follower consensus secondary controller and the
//!   fused abnormality signal derived from its outputs.
//! - [`estimator`]: dataset generation, noise infusion, and a small
//!   feed-forward network trained to estimate the abnormality from routed
//!   measurements.
//! - [`engine`]: runtime detection, hold, topology search and switching.
//! - [`scenario`]: scenario configuration files and experiment harness
//!   plumbing used by the CLI.

pub mod comm;
pub mod control;
pub mod engine;
pub mod error;
pub mod estimator;
pub mod grid;
pub mod scenario;

pub use error::{Error, Result};
