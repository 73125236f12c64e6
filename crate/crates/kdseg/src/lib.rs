//! Teacher-student distillation for semantic segmentation, desk scale.
//!
//! A compact student segmentation network is trained under the guidance of a
//! frozen, higher-capacity teacher: the teacher's per-pixel class
//! probabilities and its local logit-consistency structure regularize the
//! student's cross-entropy training, optionally extended with
//! teacher-pseudo-labeled unlabeled images. Everything runs on a minimal
//! reverse-mode autodiff tensor core written from scratch.

pub mod dataset;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod models;
pub mod pseudo;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use scalar::Scalar;
pub use tensor::tape::{Tape, TensorId};
pub use tensor::{Tensor, TensorError};
