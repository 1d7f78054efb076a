//! The trainable noise predictor: an abstract interface, a small
//! convolutional reference network with handwritten backpropagation, a
//! linear predictor used to validate the gradient path, and a
//! finite-difference gradient checker.

mod conv;
mod grad_check;
mod linear;
mod refnet;
mod time_embed;

pub use conv::{
    conv3x3_backward_input, conv3x3_backward_weights, conv3x3_forward, ConvShape,
};
pub use grad_check::grad_check;
pub use linear::LinearPredictor;
pub use refnet::{reference_net, ModelConfig, RefNet};
pub use time_embed::TimeEmbedding;

use crate::core::ImageTensor;
use crate::Result;

/// Per-forward activation record consumed by [`NoisePredictor::backward`].
///
/// Contents are model-specific; callers only thread it through unchanged.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    buffers: Vec<Vec<f64>>,
}

impl Trace {
    pub fn new(buffers: Vec<Vec<f64>>) -> Self {
        Trace { buffers }
    }

    pub fn buffers(&self) -> &[Vec<f64>] {
        &self.buffers
    }
}

/// A trainable function predicting the noise injected into `x_t`.
///
/// Implementations guarantee:
/// - the prediction has exactly `x.len()` elements (output shape = input
///   shape);
/// - `forward` is deterministic given parameters, input, and timestep;
/// - parameters are exposed as a flat `f32` vector for optimizers and
///   checkpoints, while forward/backward arithmetic runs in `f64` so
///   finite-difference gradient checks are not drowned by rounding noise.
pub trait NoisePredictor: Send + Sync {
    /// Predicts the injected noise for `x` at timestep `t`.
    fn forward(&self, x: &ImageTensor, t: usize) -> Result<Vec<f64>> {
        Ok(self.forward_traced(x, t)?.0)
    }

    /// Like [`NoisePredictor::forward`], also returning the activation
    /// record needed by [`NoisePredictor::backward`].
    fn forward_traced(&self, x: &ImageTensor, t: usize) -> Result<(Vec<f64>, Trace)>;

    /// Given dLoss/dPrediction for the same `(x, t)` that produced `trace`,
    /// returns dLoss/dParameters as a flat vector.
    fn backward(&self, x: &ImageTensor, t: usize, trace: &Trace, upstream: &[f64])
        -> Result<Vec<f64>>;

    /// Flat parameter vector (checkpoint and optimizer representation).
    fn params(&self) -> &[f32];

    /// Replaces the parameter vector; the length must match.
    fn set_params(&mut self, params: &[f32]) -> Result<()>;

    fn param_count(&self) -> usize {
        self.params().len()
    }
}
