use rand::Rng;

use crate::scalar::Scalar;

use super::dense::{DenseCache, DenseGrad, DenseLayer};
use super::loss::{msle_guarded, msle_guarded_grad};
use super::matrix::Matrix;
use super::{Activation, NeuralError, Parameters};

/// Stack of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward<S> {
    pub layers: Vec<DenseLayer<S>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardGrad<S> {
    pub layers: Vec<DenseGrad<S>>,
}

impl<S: Scalar> FeedForward<S> {
    pub fn new(layers: Vec<DenseLayer<S>>) -> Result<Self, NeuralError> {
        if layers.is_empty() {
            return Err(NeuralError::Empty);
        }
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(NeuralError::ShapeMismatch {
                    expected: format!("layer with {} inputs", pair[0].outputs()),
                    got: format!("layer with {} inputs", pair[1].inputs()),
                });
            }
        }
        Ok(FeedForward { layers })
    }

    /// `inputs → hidden[0] → … → outputs`, hidden layers use `hidden_activation`
    /// and the output layer is linear.
    pub fn xavier<R: Rng + ?Sized>(
        inputs: usize,
        hidden: &[usize],
        outputs: usize,
        hidden_activation: Activation,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = inputs;
        for &h in hidden {
            layers.push(DenseLayer::xavier(fan_in, h, hidden_activation, rng));
            fan_in = h;
        }
        layers.push(DenseLayer::xavier(fan_in, outputs, Activation::Linear, rng));
        FeedForward { layers }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::outputs)
    }

    pub fn forward(&self, x: &[S]) -> Result<Vec<S>, NeuralError> {
        self.layers[0].check_input(x.len())?;
        Ok(self.forward_unchecked(x))
    }

    pub(crate) fn forward_unchecked(&self, x: &[S]) -> Vec<S> {
        let mut a = x.to_vec();
        for layer in &self.layers {
            a = layer.forward_cached(&a).out;
        }
        a
    }

    /// One row per sample in, one row per sample out.
    pub fn forward_batch(&self, batch: &Matrix<S>) -> Result<Matrix<S>, NeuralError> {
        self.layers[0].check_input(batch.cols())?;
        let mut out = Matrix::zeros(batch.rows(), self.outputs());
        for r in 0..batch.rows() {
            out.row_mut(r).copy_from_slice(&self.forward_unchecked(batch.row(r)));
        }
        Ok(out)
    }

    pub(crate) fn forward_trace(&self, x: &[S]) -> Vec<DenseCache<S>> {
        let mut caches: Vec<DenseCache<S>> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let input = if l == 0 { x } else { &caches[l - 1].out };
            let c = layer.forward_cached(input);
            caches.push(c);
        }
        caches
    }

    pub fn zero_grad(&self) -> FeedForwardGrad<S> {
        FeedForwardGrad {
            layers: self.layers.iter().map(DenseLayer::zero_grad).collect(),
        }
    }

    /// Backpropagates `∂L/∂out` for one sample, accumulating into `grad`, and
    /// returns `∂L/∂x`.
    pub(crate) fn backward_sample(&self, x: &[S], caches: &[DenseCache<S>], upstream: Vec<S>, grad: &mut FeedForwardGrad<S>) -> Vec<S> {
        let mut up = upstream;
        for l in (0..self.layers.len()).rev() {
            let input = if l == 0 { x } else { &caches[l - 1].out };
            up = self.layers[l].backward_acc(input, &caches[l], &up, &mut grad.layers[l]);
        }
        up
    }

    /// Mean training MSLE (see [`msle_guarded`]) over the batch and its exact
    /// gradient.
    ///
    /// `targets` holds `batch.rows() × outputs` values, row-major.
    pub fn backprop_msle(&self, batch: &Matrix<S>, targets: &[S]) -> Result<(S, FeedForwardGrad<S>), NeuralError> {
        self.layers[0].check_input(batch.cols())?;
        if targets.len() != batch.rows() * self.outputs() {
            return Err(NeuralError::LengthMismatch(batch.rows() * self.outputs(), targets.len()));
        }
        let traces: Vec<Vec<DenseCache<S>>> = (0..batch.rows()).map(|r| self.forward_trace(batch.row(r))).collect();
        let preds: Vec<S> = traces
            .iter()
            .flat_map(|t| t.last().expect("non-empty network").out.iter().copied())
            .collect();
        let loss = msle_guarded(targets, &preds)?;
        let dpred = msle_guarded_grad(targets, &preds)?;
        let k = self.outputs();
        let mut grad = self.zero_grad();
        for (r, trace) in traces.iter().enumerate() {
            self.backward_sample(batch.row(r), trace, dpred[r * k..(r + 1) * k].to_vec(), &mut grad);
        }
        Ok((loss, grad))
    }
}

impl<S: Scalar> Parameters<S> for FeedForward<S> {
    fn param_slices(&self) -> Vec<&[S]> {
        self.layers.iter().flat_map(|l| l.param_slices()).collect()
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [S]> {
        self.layers.iter_mut().flat_map(|l| l.param_slices_mut()).collect()
    }
}

impl<S: Scalar> Parameters<S> for FeedForwardGrad<S> {
    fn param_slices(&self) -> Vec<&[S]> {
        self.layers.iter().flat_map(|l| l.param_slices()).collect()
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [S]> {
        self.layers.iter_mut().flat_map(|l| l.param_slices_mut()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_targets_give_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = FeedForward::<f64>::xavier(5, &[4], 1, Activation::Elu, &mut rng);
        let batch = Matrix::from_vec(3, 5, (0..15).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let targets: Vec<f64> = net.forward_batch(&batch).unwrap().into_vec();
        let (loss, grad) = net.backprop_msle(&batch, &targets).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.flatten().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn mismatched_layers_rejected() {
        let a = DenseLayer::<f64>::new(Matrix::zeros(3, 2), vec![0.0; 3], Activation::Elu).unwrap();
        let b = DenseLayer::<f64>::new(Matrix::zeros(1, 4), vec![0.0; 1], Activation::Linear).unwrap();
        assert!(FeedForward::new(vec![a, b]).is_err());
        assert!(matches!(FeedForward::<f64>::new(vec![]), Err(NeuralError::Empty)));
    }
}
