//! Dense tensor arithmetic with reverse-mode differentiation and plain SGD.
//!
//! The op set is closed: embedding lookup, 1-D and column-wise 2-D
//! convolution, max-pool over time, matrix multiply, ReLU, elementwise
//! square, dot, means, softmax cross-entropy, and the stacking/broadcast
//! glue between them. Each recorded graph lives on one [`Tape`]; parameters
//! live in a [`ParameterStore`] and receive gradients from
//! [`Tape::backward`].

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, GradCheckReport, LossFn, ParamCheck};
pub use tape::{NodeId, Tape};
pub use tensor::{ParameterStore, Role, Tensor};
