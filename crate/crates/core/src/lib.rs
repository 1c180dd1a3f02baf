//! Algorithms behind the facade inspection pipeline: box and mask geometry,
//! ensemble fusion, candidate adjudication, the defect memory bank index,
//! generative recomposition, data curation, metrics and task planning.
//!
//! The crate is `no_std` (with `alloc`). Anything that touches a file,
//! socket or clock lives in the `facadefixer` crate.
#![no_std]

extern crate alloc;

pub mod adjudication;
pub mod curation;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod hash;
pub mod memory;
pub mod mock;
pub mod plan;
pub mod prompt;
pub mod recompose;

pub use error::{Error, Result};
