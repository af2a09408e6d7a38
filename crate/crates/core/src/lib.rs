//! Template mixtures, deformable part models and exemplar part models, with
//! exhaustive reference inference and a data-scaling experiment harness.

pub mod cluster;
pub mod data_io;
pub mod detect;
pub mod error;
pub mod eval;
pub mod features;
pub mod geom;
pub mod harness;
pub mod map;
pub mod partmodel;
pub mod registry;
pub mod synthdata;
pub mod train;

pub use error::{Error, Result};
