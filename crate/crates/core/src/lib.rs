//! Hard-ball gas on the flat unit torus: event-driven flow, tangent dynamics,
//! collision combinatorics, and the stability audits built on top of them.
//!
//! The crate is generic over the working scalar (`f32` or `f64`) through the
//! [`Scalar`] trait; the `*64` aliases at the root fix the default precision
//! used by the command line harness and the acceptance tests.

#![allow(clippy::needless_range_loop)]

pub mod error;
pub mod flow;
pub mod linalg;
pub mod neutral;
pub mod phase;
pub mod sample;
pub mod scalar;
pub mod symbolic;
pub mod tangent;

pub use error::CoreError;
pub use scalar::Scalar;

/// Default working precision.
pub type Real = f64;

pub type SystemParams64 = phase::SystemParams<f64>;
pub type PhasePoint64 = phase::PhasePoint<f64>;
pub type ReducedVector64 = phase::ReducedVector<f64>;
pub type Trajectory64 = flow::Trajectory<f64>;
pub type CollisionRecord64 = flow::CollisionRecord<f64>;
pub type TangentVector64 = tangent::TangentVector<f64>;
