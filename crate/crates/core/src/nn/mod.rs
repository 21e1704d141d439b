//! Minimal tensor autodiff used by the denoiser.

mod optim;
mod tape;
mod tensor;

pub use optim::{Adam, Ema};
pub use tape::{ParamSet, Tape, Var};
pub use tensor::{matmul, Float, Tensor};
