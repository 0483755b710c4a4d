//! Dual-encoder answer retrieval enhanced with question–answer
//! cross-embeddings.
//!
//! A Dual-Encoders model (independent question and answer towers scored by
//! inner product) is trained jointly with a Cross-Encoders teacher whose
//! embeddings see the matched counterpart through cross-attention. The
//! teacher's neighbourhood geometry is transferred to the dual tower by
//! aligning conditional neighbour distributions (the Geometry Alignment
//! Mechanism, GAM). At inference only the dual tower runs, so answers are
//! indexed offline and each query costs one encoding plus one
//! matrix-vector product.

pub mod aggregator;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod cross_attention;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod layers;
pub mod losses;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{EndxError, Result};
pub use tensor::{Real, Tensor};
