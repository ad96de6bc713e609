//! Detection transformer with dense object-container initialization.

pub mod ablation;
pub mod attention;
pub mod backbone;
pub mod boxes;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod heads;
pub mod loss;
pub mod matching;
pub mod model;
pub mod nn;
pub mod train;
pub mod transformer;
pub mod viz;

pub use boxes::BoxCXCYWH;
pub use config::{InitStrategy, ModelConfig, ObjectnessMode, RefDim, TrainConfig};
pub use error::{DetrError, Result};
pub use model::{Detector, ForwardOutput};
