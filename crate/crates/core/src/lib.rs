//! LSAT: a Siamese CISA transformer for bi-temporal change detection.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors with a define-by-run autodiff tape.
//! * [`attention`]: cross-dimension interactive self-attention (CISA), the
//!   transformer block built on it, and a vanilla spatial attention baseline.
//! * [`enhance`]: the structure-aware enhancement module (SAEM), SimAM and the
//!   attention-based fusion module (AFM).
//! * [`network`]: the Siamese U-shaped model, checkpoints and the profiler.
//! * [`train`]: losses, AdamW, metrics and the training/evaluation loops.
//! * [`data`]: synthetic change pairs, PNG loading, tiling and augmentation.
//! * [`profile`]: closed-form MAC and parameter counts.
//! * [`gradsuite`]: the finite-difference gradient sweep.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod data;
pub mod enhance;
pub mod error;
pub mod gradsuite;
pub mod layers;
pub mod network;
pub mod profile;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Element, ParamId, ParamStore, Tape, Tensor, Var};
