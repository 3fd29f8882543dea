//! Differentiable agent-based simulation of a station-based bike-sharing
//! system, and the machinery to fit time-varying station discounts so that
//! user trips rebalance the bicycle inventory.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`]: scalar reverse-mode AD tape.
//! * [`sampling`]: Gumbel-Softmax / truncated count relaxations and exact
//!   hard samplers.
//! * [`demand`], [`network`], [`choice`]: trip demand field, station
//!   geometry and pricing policy, destination choice model.
//! * [`simulator`]: relaxed (estimation) and exact (evaluation) simulation.
//! * [`optim`]: AD gradient descent, finite-difference gradient descent and
//!   differential evolution over a shared objective.
//! * [`scenarios`]: declarative scenario files and the builtin scenarios.
//! * [`gradcheck`]: AD versus central-difference gradient comparison.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![cfg_attr(test, allow(clippy::needless_range_loop))]

pub mod autodiff;
pub mod choice;
pub mod demand;
pub mod error;
pub mod gradcheck;
pub mod network;
pub mod noise;
pub mod optim;
pub mod sampling;
pub mod scenarios;
pub mod simulator;

pub use error::{Error, Result};
