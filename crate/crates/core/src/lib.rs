//! Sparse knowledge-graph completion with a weight-free attention GCN over
//! entities and a relation-mixing reasoning block.

pub mod checkpoint;
pub mod entity_updater;
pub mod error;
pub mod evaluation;
pub mod explain;
pub mod kgdata;
pub mod model;
pub mod numcore;
pub mod relation_reasoner;
pub mod rng;
pub mod scoring;
pub mod selfcheck;
pub mod synthetic;
pub mod training;

pub use error::{Error, NumError, Result};
