//! Lifelong reinforcement learning with an offline distillation phase.
//!
//! An agent collects experience with MPO while the environment dynamics drift
//! through a schedule, keeps every transition, and at the end distills the
//! whole replay buffer into one policy with CRR. The `diagnostics` module
//! reproduces the dataset-imbalance analyses on top of the same machinery.

mod binio;
pub mod agent;
pub mod algos;
pub mod config;
pub mod diagnostics;
pub mod env;
pub mod pipeline;
pub mod error;
pub mod numnet;
pub mod replay;

pub use error::{OdpError, Result};
