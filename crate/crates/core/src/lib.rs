//! A small CPU deep-learning framework for salient object detection with
//! centralized information interaction and relative global calibration.

pub mod backbone;
pub mod data;
pub mod decoder;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod interactors;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{ModelConfig, SodModel};
pub use tensor::{no_grad, Buffer, Float, Parameter, Shape, Tensor};
