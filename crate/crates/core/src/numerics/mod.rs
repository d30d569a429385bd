//! Tensor algebra, reverse-mode differentiation, and optimization.

mod adam;
mod checkpoint;
mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod params;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{Checkpoint, DTYPE_TAG, FORMAT_VERSION};
pub use gradcheck::{grad_check, grad_check_many, GradCheckReport};
pub use graph::{AttnSegment, AttnSpec, Graph, Var};
pub use params::{Param, ParamGroup, ParamStore};
pub use tensor::Tensor;
