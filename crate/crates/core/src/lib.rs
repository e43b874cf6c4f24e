//! Dual-branch contrastive learning engine for emoticon prediction.
//!
//! Two from-scratch transformer encoders map image-text pairs onto a
//! shared unit hypersphere: a patch-based visual branch with a class
//! token, and a text branch with a clipped relative-distance attention
//! bias. Training combines a temperature-scaled symmetric contrastive
//! loss over each batch's similarity matrix with a cross-entropy head
//! over ten emoticon labels. All math runs on `f64` through a
//! define-by-run reverse-mode differentiation graph, so every analytic
//! gradient can be checked against central finite differences.

pub mod contrastive;
pub mod data;
pub mod encoders;
pub mod error;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{GradMap, Graph, NodeId, Tensor};
