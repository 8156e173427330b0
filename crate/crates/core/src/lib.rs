pub mod assign;
pub mod blocks;
pub mod boxes;
pub mod checkpoint;
pub mod data;
pub mod decode;
pub mod error;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod params;
pub mod profiler;
pub mod trainer;
pub mod verify;

pub use error::{DetError, Result};
