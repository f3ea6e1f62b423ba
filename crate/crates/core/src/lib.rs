//! Feature-map denoising for vision transformers.
//!
//! Stage one fits, per image, a coordinate network for the clean semantics
//! plus a shared positional artifact map and a small residual predictor to
//! many augmented views. Stage two trains a single transformer block with
//! learned positional embeddings to map raw features to the stage-one clean
//! maps in one forward pass. The crate also carries the measurement tools
//! (position MIC, KNN segmentation, clustering, prominence maps), a synthetic
//! benchmark with known decomposition, and the DVTF interchange format.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod field_models;
pub mod interchange;
pub mod par;
pub mod rng;
pub mod stage1;
pub mod stage2;
pub mod synthetic;
pub mod view_sampler;
pub mod viz;

pub use error::{Error, Result};
pub use interchange::{Checkpoint, FeatureMap, LabelMap, Record, ViewSet, ViewTransform};
pub use par::ExecMode;
