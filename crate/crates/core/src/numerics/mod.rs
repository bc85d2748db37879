//! Dense math primitives shared by every other module: a validated tensor,
//! softmax and matrix square roots, seeded layers with backward passes, and
//! the finite-difference gradient checker.

pub mod attention;
pub mod conv;
pub mod gradcheck;
pub mod layers;
pub mod linalg;
pub mod tensor;

pub use attention::{attend, self_attention, self_attention_backward, AttentionCache, AttentionGrads, AttentionParams};
pub use conv::{Conv2d, Conv2dGrads};
pub use gradcheck::{grad_check, Differentiable, Objective};
pub use layers::{gelu, LinearGrads, LinearLayer, Mlp, MlpGrads, Parameters};
pub use linalg::{psd_sqrt, sigmoid, softmax, symmetric_eigen};
pub use tensor::{dot, l2_norm, Tensor};
