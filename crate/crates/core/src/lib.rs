//! Generator attribution toolkit: signature-controlled synthetic generators,
//! a corruption battery, attribution classifiers, the experiment protocols
//! built on them, and a harness for querying multimodal chat models.

pub mod classifiers;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod imageio;
pub mod mllmattr;
pub mod report;
pub mod seed;
pub mod synthgen;
pub mod transforms;

pub use error::{Error, Result};
