//! Differentiable primitives, losses and the optimizer.

mod adam;
mod ops;
mod tape;

pub use adam::{adam_step, lr_at, lr_at_with, AdamConfig, AdamState, LR_HALVING_PERIOD};
pub use ops::{affine, mape_sq_loss, mse_loss, sine_act};
pub use tape::{NodeKind, Tape, ValueId};
