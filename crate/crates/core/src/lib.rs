//! SPMe lithium-ion cell model, a P2D reference plant, finite-difference
//! sensitivities and Fisher-information experiment design.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod campaign;
pub mod config;
pub mod doe;
pub mod error;
pub mod io;
pub mod estimator;
pub mod model;
pub mod optim;
pub mod p2d;
pub mod plant;
pub mod report;
pub mod sensitivity;
pub mod units;

pub use error::{Error, Result};
