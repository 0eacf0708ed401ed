//! Tensors, reverse-mode differentiation, RMSprop and random streams.

mod gradcheck;
mod optim;
mod real;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_many, TapeFn};
pub use optim::{rmsprop_step, RmsPropConfig, RmsPropState};
pub use real::{DType, Real};
pub use rng::Rng;
pub use tape::{Grads, NodeId, Tape, Var};
pub use tensor::Tensor;
