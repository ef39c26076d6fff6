//! Tape-based reverse-mode differentiation over 2-D arrays.
//!
//! Only the operations the networks need are provided. Every value on the
//! tape is a matrix; vectors are `1 x d` rows and scalars are `1 x 1`.

mod checkpoint;
mod layers;
mod optim;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

pub use checkpoint::{
    read_checkpoint, write_checkpoint, Checkpoint, OptimizerBlock, TensorBlock, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use layers::{shared_mlp_layer, BatchNorm, BnUpdate, BoundLayer, LayerParams, LayerSpec, Linear, MlpStack};
pub use optim::{adam_step, lr_schedule, step_decay, AdamState};
pub use tape::{softmax_rows, NodeId, Tape};

/// Floating-point element type usable on the tape.
pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Train or eval behavior for batch norm and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;
