//! Denoiser contract, a small trainable implementation, and its training loop.

mod checkpoint;
mod toy;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CheckpointMeta,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use toy::{ForwardCache, Params, ToyDenoiser};
pub use train::{
    batch_loss, batch_loss_on_draw, draw_batch, init_model, sgd_step, smoothed_ratio, train,
    BatchDraw, BatchLoss, HistoryEntry, TimeSampling, TrainConfig, TrainOutcome, T_MAX, T_MIN,
};

use crate::kernel::TokenSeq;
use crate::scalar::Simplex;

/// Predicts a clean-token distribution for every position of a noisy sequence.
///
/// Every returned distribution puts exactly zero mass on the mask token.
pub trait Denoiser {
    fn vocab_size(&self) -> usize;

    fn mask_id(&self) -> usize;

    fn predict(&self, zt: &TokenSeq, t: f64) -> Vec<Simplex>;
}
