#![no_std]

extern crate alloc;

pub mod attention;
pub mod audit;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod vse;

pub use error::{Error, Result};
pub use model::{Captioner, ModelConfig};
pub use params::{Bound, ParamId, ParamSet};
pub use scalar::{Dd, Real};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
