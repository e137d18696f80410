//! Victim classifiers and the synthetic motion dataset they are trained on.

mod cnn;
mod data;
mod external;

pub use cnn::{accuracy, train_victim, CnnConfig, ToyCnn, TrainConfig, TrainReport};
pub use data::{frame_dataset, generate_dataset, Dataset, Motion, Sample, SyntheticVideoSpec};
pub use external::{wrap_external, ExternalModel, FeatureFn, LogitsFn, Preprocess, VjpFn};

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::{Float, Tensor};

/// What an attack needs from a model under attack.
///
/// Inputs are `[C, T, W, H]` videos in `[0, 1]`. `logits` never returns
/// probabilities.
pub trait Classifier<T: Float>: Send + Sync {
    fn num_classes(&self) -> usize;

    fn logits(&self, x: &Tensor<T>) -> Result<Vec<T>>;

    /// Penultimate activations, one row per output frame: `[rows, feature_dim]`.
    fn features(&self, x: &Tensor<T>) -> Result<Tensor<T>>;

    fn feature_dim(&self) -> usize;

    fn is_differentiable(&self) -> bool;

    /// Logits recorded on `tape` so gradients can flow back into `x`.
    fn logits_on_tape<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>>;

    fn predict(&self, x: &Tensor<T>) -> Result<(usize, T)> {
        let p = crate::tape::softmax(&self.logits(x)?);
        let (i, &c) = p
            .iter()
            .enumerate()
            .fold((0, &p[0]), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
        Ok((i, c))
    }
}
