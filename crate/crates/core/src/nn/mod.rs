//! Tensors, reverse-mode differentiation and the SGD training primitives.

mod conv;
mod gemm;
pub mod init;
pub mod io;
mod optim;
mod params;
mod schedule;
mod tape;
mod tensor;

pub use optim::OptimizerState;
pub use params::ParamSet;
pub use schedule::LrSchedule;
pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;
