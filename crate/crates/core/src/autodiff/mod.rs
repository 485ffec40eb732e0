//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod adam;
pub mod checkpoint;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig};
pub use gradcheck::{check_gradients, relative_error, GradCheckReport, ParamCheck};
pub use params::{GradMap, Init, ParamEntry, ParameterStore};
pub use tape::{NodeGrads, NodeId, Op, Tape};
pub use tensor::Tensor;
