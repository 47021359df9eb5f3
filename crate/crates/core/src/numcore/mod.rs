//! Numeric substrate: dense tensors, attention-model kernels, a reverse-mode
//! tape, parameter storage with Adam, checkpoints and finite-difference
//! gradient checking.

pub mod checkpoint;
pub mod gradcheck;
pub mod ops;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use ops::{attention_weights, layer_norm, linear, mha, softmax_masked, MASK_SENTINEL};
pub use params::{AdamConfig, ParamId, ParamStore};
pub use tape::{RowPool, Tape, Var};
pub use tensor::{Scalar, Tensor2};
