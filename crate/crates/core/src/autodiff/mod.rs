//! Reverse-mode differentiation, parameter storage and the Adam optimizer.

mod adam;
mod checkpoint;
mod ops;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use ops::{argmax, concat_cols, matmul_raw, softplus};
pub use params::{Bound, Param, ParamGroup, ParamId, ParamStore};
pub use tape::{BackwardFn, GradCtx, Gradients, Tape, Var};
pub use tensor::{lit, Real, Tensor};
