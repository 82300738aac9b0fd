//! Source-free adaptation of a patch-transformer segmenter to adverse
//! conditions by alternating condition-embedding learning and feature
//! restoration.

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod dataset_io;
pub mod error;
pub mod losses;
pub mod model;
pub mod optim;
pub mod overrides;
pub mod params;
pub mod queue;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
pub use frest_autograd as autograd;
