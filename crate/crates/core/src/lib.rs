pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod stgraph;
pub mod training;

pub use error::{Error, Result};
