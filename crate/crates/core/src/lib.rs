//! Architecture search for parameter-efficient tuning by first-order pruning.
//!
//! An over-provisioned set of bias deltas and low-rank weight updates is
//! trained on a frozen transformer while a `-θ·∂L/∂θ` pruning score is
//! averaged over every optimizer step. Units are then pruned to a parameter
//! budget in increasing-score order, survivors are reset to their exact
//! initial values, and the pruned architecture is retrained and evaluated.

pub mod autodiff;
pub mod cli;
pub mod criterion;
pub mod data;
pub mod error;
pub mod model;
pub mod pet;
pub mod pipeline;
pub mod report;
pub mod train;

pub use error::{Error, Result};
