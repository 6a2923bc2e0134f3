//! From-scratch dense and LSTM networks with exact reverse-mode gradients.
//!
//! Everything here is generic over [`Scalar`]; the service instantiates it
//! with `f64`. Models expose their parameters as an ordered list of slices
//! ([`Parameters`]) so the optimizer and the model-file codec share one
//! layout.

mod activation;
mod adam;
mod dense;
mod ffnn;
mod init;
mod loss;
mod lstm;
mod matrix;
pub mod model_file;
mod recurrent;

pub use activation::{elu, sigmoid, Activation};
pub use adam::{AdamConfig, AdamState};
pub use dense::{DenseGrad, DenseLayer};
pub use ffnn::{FeedForward, FeedForwardGrad};
pub use init::{xavier_init, xavier_limit, xavier_uniform};
pub use loss::{mae, msle, msle_grad, msle_guarded, msle_guarded_grad, LOG_GUARD};
pub use lstm::{Gate, LstmCell, LstmGrad, GATES};
pub use matrix::{axpy, dot, Matrix};
pub use recurrent::{LstmNetwork, LstmNetworkGrad};

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NeuralError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("domain error: {0}")]
    Domain(String),
}

/// Ordered view of a model's (or gradient's) trainable values.
///
/// A model and its gradient type list their blocks in the same order.
pub trait Parameters<S: Scalar> {
    fn param_slices(&self) -> Vec<&[S]>;

    fn param_slices_mut(&mut self) -> Vec<&mut [S]>;

    fn num_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    fn flatten(&self) -> Vec<S> {
        self.param_slices().concat()
    }

    /// Overwrites every parameter from a flat vector in `flatten` order.
    fn assign_flat(&mut self, values: &[S]) -> Result<(), NeuralError> {
        let n = self.num_params();
        if values.len() != n {
            return Err(NeuralError::LengthMismatch(n, values.len()));
        }
        let mut offset = 0;
        for block in self.param_slices_mut() {
            let len = block.len();
            block.copy_from_slice(&values[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }
}
