pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiments;
pub mod network;
pub mod norm;
pub mod optim;
pub mod stats;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Binary, GradientMap, Reduction, Tape, Unary, Var};
pub use tensor::Tensor;
