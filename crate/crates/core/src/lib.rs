//! Filter recommendation by pairwise aesthetic response learning.
//!
//! The crate covers the whole pipeline: a bank of 22 photo filters, dataset
//! construction with a degree-3 pairing design, crowdsourcing protocol logic,
//! a small reverse-mode autodiff engine, the column architectures, the
//! pairwise and category-aware objectives, SGD training and top-K evaluation.

pub mod annotation;
pub mod autodiff;
pub mod dataset;
pub mod evaluation;
pub mod error;
pub mod filters;
pub mod imagecore;
pub mod manifest;
pub mod models;
pub mod objectives;
pub mod pipeline;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
