pub mod attention;
pub mod check;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
mod error;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod params;
pub mod tensor;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::{DasNet, ModelConfig};
pub use tensor::Tensor;
pub use train::{evaluate, gradcheck, load_dataset, predict, train, Checkpoint, Dataset, Example};
