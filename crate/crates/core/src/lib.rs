//! Semi-supervised conditional VAE for survival-group classification of 3D
//! categorical segmentation volumes.

pub mod autodiff;
pub mod checkpoint;
pub mod distributions;
pub mod error;
pub mod evaluation;
pub mod networks;
pub mod objectives;
pub mod regimes;
pub mod rng;
pub mod synthdata;
pub mod training;
pub mod types;
pub mod volumes;

pub use error::{Error, Result};
pub use types::SurvivalClass;
