//! Reverse-mode differentiation engine and optimizers.
//!
//! Values are computed in double precision; feature maps and checkpoints are
//! stored as 32-bit reals at the file boundary.

mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{lr_schedule, Adam, AdamConfig, AdamState, Schedule, LINEAR_FLOOR};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{
    bilinear_taps, cosine, Grad, GridAlign, Gradients, SparseRows, Tape, Var, COS_EPS, LN_EPS,
    LN_ZERO_VAR,
};
pub use tensor::Tensor;

