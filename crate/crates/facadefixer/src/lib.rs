//! Facade defect inspection pipeline: expert gateway, on-disk memory bank,
//! dataset IO, recomposition and curation drivers, and the checkpointing
//! run executor behind the `facadefixer` CLI.

pub mod bank_store;
pub mod curate;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod fixtures;
pub mod gateway;
pub mod imageio;
pub mod pipeline;
pub mod recompose;

pub use error::{Error, Result};
pub use facadefixer_core;
