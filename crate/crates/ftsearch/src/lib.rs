//! temporary build stub
pub mod error;
pub mod gnn;
pub mod graph;
pub mod finetune;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod strategy;
pub mod tensor;

pub use error::{FtError, Result};
