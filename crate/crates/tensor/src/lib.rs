//! f64 tensors with a small reverse-mode autodiff tape, convolution kernels
//! and an Adam optimizer. Sized for desk-scale GAN training on the CPU.

pub mod kernels;
pub mod optim;
pub mod par;
pub mod params;
pub mod tape;
pub mod tensor;

pub use optim::{Adam, AdamConfig};
pub use params::{Bound, BufferId, ParamId, ParamSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
