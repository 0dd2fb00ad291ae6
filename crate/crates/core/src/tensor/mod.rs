//! Dense tensors, reverse-mode differentiation, and the gradient checker.

pub mod element;
pub mod gradcheck;
pub mod kernels;
pub mod param;
pub mod serialize;
mod tape;
mod value;

pub use element::{count_multiplies, Counted, DType, Element, StorageElement};
pub use kernels::{Conv2dSpec, PoolKind};
pub use param::{seeded_rng, ParamBuilder, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use value::Tensor;
