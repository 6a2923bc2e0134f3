use rand::Rng;

use crate::scalar::Scalar;

use super::init::xavier_uniform;
use super::matrix::Matrix;
use super::{Activation, NeuralError, Parameters};

/// Fully connected layer computing `activation(W·x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<S> {
    pub weights: Matrix<S>,
    pub bias: Vec<S>,
    pub activation: Activation,
}

/// Gradient of a loss with respect to one [`DenseLayer`].
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad<S> {
    pub weights: Matrix<S>,
    pub bias: Vec<S>,
}

/// Values kept from the forward pass of one sample.
#[derive(Debug, Clone)]
pub(crate) struct DenseCache<S> {
    pub pre: Vec<S>,
    pub out: Vec<S>,
}

impl<S: Scalar> DenseLayer<S> {
    pub fn new(weights: Matrix<S>, bias: Vec<S>, activation: Activation) -> Result<Self, NeuralError> {
        if bias.len() != weights.rows() {
            return Err(NeuralError::ShapeMismatch {
                expected: format!("bias of length {}", weights.rows()),
                got: format!("bias of length {}", bias.len()),
            });
        }
        Ok(DenseLayer {
            weights,
            bias,
            activation,
        })
    }

    /// Xavier-uniform weights, zero bias.
    pub fn xavier<R: Rng + ?Sized>(inputs: usize, outputs: usize, activation: Activation, rng: &mut R) -> Self {
        DenseLayer {
            weights: xavier_uniform(inputs, outputs, rng),
            bias: vec![S::zero(); outputs],
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }

    pub fn forward(&self, x: &[S]) -> Result<Vec<S>, NeuralError> {
        self.check_input(x.len())?;
        Ok(self.forward_cached(x).out)
    }

    /// Applies the layer to every row of `batch` (batch × inputs).
    pub fn forward_batch(&self, batch: &Matrix<S>) -> Result<Matrix<S>, NeuralError> {
        self.check_input(batch.cols())?;
        let mut out = Matrix::zeros(batch.rows(), self.outputs());
        for r in 0..batch.rows() {
            let y = self.forward_cached(batch.row(r)).out;
            out.row_mut(r).copy_from_slice(&y);
        }
        Ok(out)
    }

    pub(crate) fn check_input(&self, len: usize) -> Result<(), NeuralError> {
        if len != self.inputs() {
            return Err(NeuralError::ShapeMismatch {
                expected: format!("input of length {}", self.inputs()),
                got: format!("input of length {len}"),
            });
        }
        Ok(())
    }

    pub(crate) fn forward_cached(&self, x: &[S]) -> DenseCache<S> {
        let mut pre = self.bias.clone();
        self.weights.gemv_acc(x, &mut pre);
        let out = pre.iter().map(|&z| self.activation.apply(z)).collect();
        DenseCache { pre, out }
    }

    /// Accumulates parameter gradients for one sample and returns `∂L/∂x`.
    ///
    /// `upstream` is `∂L/∂out` for the sample whose forward values are in `cache`.
    pub(crate) fn backward_acc(&self, x: &[S], cache: &DenseCache<S>, upstream: &[S], grad: &mut DenseGrad<S>) -> Vec<S> {
        let delta: Vec<S> = upstream
            .iter()
            .zip(cache.pre.iter().zip(&cache.out))
            .map(|(&g, (&z, &a))| g * self.activation.derivative(z, a))
            .collect();
        grad.weights.outer_acc(&delta, x);
        for (b, &d) in grad.bias.iter_mut().zip(&delta) {
            *b += d;
        }
        let mut dx = vec![S::zero(); self.inputs()];
        self.weights.gemv_t_acc(&delta, &mut dx);
        dx
    }

    pub fn zero_grad(&self) -> DenseGrad<S> {
        DenseGrad {
            weights: Matrix::zeros(self.outputs(), self.inputs()),
            bias: vec![S::zero(); self.outputs()],
        }
    }
}

impl<S: Scalar> Parameters<S> for DenseLayer<S> {
    fn param_slices(&self) -> Vec<&[S]> {
        vec![self.weights.as_slice(), &self.bias]
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [S]> {
        vec![self.weights.as_mut_slice(), &mut self.bias]
    }
}

impl<S: Scalar> Parameters<S> for DenseGrad<S> {
    fn param_slices(&self) -> Vec<&[S]> {
        vec![self.weights.as_slice(), &self.bias]
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [S]> {
        vec![self.weights.as_mut_slice(), &mut self.bias]
    }
}
