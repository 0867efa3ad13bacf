//! Per-pixel classifier, its losses, the optimizer and the training routine.

mod adam;
mod checkpoint;
mod loss;
mod net;
mod train;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use loss::{full_sup_loss, loss_and_logit_grad, masked_full_sup_loss, point_loss, LossKind, IOU_SMOOTH, PROB_FLOOR};
pub use net::{mc_sample_seed, DropoutMode, LayerShape, NetSpec, PredictorParams, ProbMap};
pub use train::{loss_and_grad, predict_mask, train_cycle, Example, Supervision, TrainConfig, TrainReport};

use crate::data_model::ImageSlice;
use crate::error::Result;

/// Anything that maps a slice to per-pixel class probabilities.
///
/// Uncertainty estimation and evaluation only need this; the reference
/// network is one implementation.
pub trait PixelClassifier {
    fn num_classes(&self) -> usize;

    fn forward(&self, image: &ImageSlice, mode: DropoutMode) -> Result<ProbMap>;

    /// `n` stochastic passes; sample `i` uses seed [`mc_sample_seed`]`(seed, i)`.
    fn mc_samples(&self, image: &ImageSlice, n: usize, seed: u64) -> Result<Vec<ProbMap>> {
        (0..n)
            .map(|i| self.forward(image, DropoutMode::Stochastic(mc_sample_seed(seed, i))))
            .collect()
    }
}

impl PixelClassifier for PredictorParams {
    fn num_classes(&self) -> usize {
        PredictorParams::num_classes(self)
    }

    fn forward(&self, image: &ImageSlice, mode: DropoutMode) -> Result<ProbMap> {
        PredictorParams::forward(self, image, mode)
    }

    fn mc_samples(&self, image: &ImageSlice, n: usize, seed: u64) -> Result<Vec<ProbMap>> {
        self.mc_forward(image, n, seed)
    }
}
