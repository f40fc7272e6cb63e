//! countlab-core: multi-class density counting for IHC-like images.
//!
//! The crate implements the full desk-scale pipeline: synthetic data with
//! exact point ground truth, ranked global-to-local patch groups, rank-aware
//! teacher selection over a frozen teacher pool, distillation into a compact
//! student encoder, semantic-anchor density heads for multi-class counting,
//! the training objectives (ranking, cross-entropy, distribution matching
//! with entropic optimal transport, spatial exclusivity), and the evaluation
//! metric suite (MAE / RMSE / TPS / WMSE / QWK).

pub mod anchors;
pub mod commands;
pub mod config;
pub mod datamodel;
pub mod densityhead;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod ot;
pub mod patchgroup;
pub mod persist;
pub mod rats;
pub mod render;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod train;

pub use error::{CoreError, Result};
