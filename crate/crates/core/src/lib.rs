pub mod camera;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod loss;
pub mod lss;
pub mod masking;
pub mod model;
pub mod optim;
pub mod probe;
pub mod rng;
pub mod scene;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, VarId};
