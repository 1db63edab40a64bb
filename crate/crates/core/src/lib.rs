pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod tensor;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use gradcheck::grad_check;
pub use tensor::Tensor;
pub mod ccr;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod difference;
pub mod encoder;
pub mod eval;
pub mod layers;
pub mod model;
pub mod optim;
pub mod scenes;
pub mod train;
pub mod vocab;
