//! One-step conditional action generators trained against a drift field,
//! with exact-likelihood PPO fine-tuning that keeps deployment at a single
//! network evaluation per control decision.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod actor;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dbpo;
pub mod drift;
pub mod env;
pub mod error;
pub mod eval;
pub mod nn;
pub mod optim;
pub mod policy;
pub mod trainer;

pub use error::{Error, Result};
