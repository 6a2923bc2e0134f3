use rand::Rng;

use crate::scalar::Scalar;

use super::ffnn::{FeedForward, FeedForwardGrad};
use super::loss::{msle_guarded, msle_guarded_grad};
use super::lstm::{LstmCell, LstmGrad, StepCache};
use super::matrix::Matrix;
use super::{Activation, NeuralError, Parameters};

/// A single LSTM layer whose final hidden state feeds a dense head.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmNetwork<S> {
    pub cell: LstmCell<S>,
    pub head: FeedForward<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmNetworkGrad<S> {
    pub cell: LstmGrad<S>,
    pub head: FeedForwardGrad<S>,
}

impl<S: Scalar> LstmNetwork<S> {
    pub fn new(cell: LstmCell<S>, head: FeedForward<S>) -> Result<Self, NeuralError> {
        if head.inputs() != cell.hidden_size() {
            return Err(NeuralError::ShapeMismatch {
                expected: format!("head with {} inputs", cell.hidden_size()),
                got: format!("head with {} inputs", head.inputs()),
            });
        }
        Ok(LstmNetwork { cell, head })
    }

    /// LSTM(`hidden`) → Dense(`dense`, `dense_activation`) → Dense(`outputs`, linear).
    pub fn xavier<R: Rng + ?Sized>(
        inputs: usize,
        hidden: usize,
        dense: usize,
        outputs: usize,
        dense_activation: Activation,
        rng: &mut R,
    ) -> Self {
        let cell = LstmCell::xavier(inputs, hidden, rng);
        let head = FeedForward::xavier(hidden, &[dense], outputs, dense_activation, rng);
        LstmNetwork { cell, head }
    }

    pub fn inputs(&self) -> usize {
        self.cell.input_size()
    }

    fn check_window(&self, window: &Matrix<S>) -> Result<(), NeuralError> {
        if window.cols() != self.inputs() || window.rows() == 0 {
            return Err(NeuralError::ShapeMismatch {
                expected: format!("window of L ≥ 1 rows × {} features", self.inputs()),
                got: format!("{} × {}", window.rows(), window.cols()),
            });
        }
        Ok(())
    }

    fn run(&self, window: &Matrix<S>) -> Vec<StepCache<S>> {
        let h = self.cell.hidden_size();
        let mut steps: Vec<StepCache<S>> = Vec::with_capacity(window.rows());
        let zeros = vec![S::zero(); h];
        for t in 0..window.rows() {
            let (hp, cp) = match steps.last() {
                Some(s) => (s.h.as_slice(), s.c.as_slice()),
                None => (zeros.as_slice(), zeros.as_slice()),
            };
            let s = self.cell.step_cached(window.row(t), hp, cp);
            steps.push(s);
        }
        steps
    }

    /// Prediction for one `L × D` window (oldest row first).
    pub fn forward(&self, window: &Matrix<S>) -> Result<Vec<S>, NeuralError> {
        self.check_window(window)?;
        let steps = self.run(window);
        Ok(self.head.forward_unchecked(&steps.last().expect("L ≥ 1").h))
    }

    pub fn zero_grad(&self) -> LstmNetworkGrad<S> {
        LstmNetworkGrad {
            cell: self.cell.zero_grad(),
            head: self.head.zero_grad(),
        }
    }

    /// Mean MSLE over a batch of windows with gradients by backpropagation
    /// through time. `targets` is `windows.len() × outputs`, row-major.
    pub fn backprop_msle(&self, windows: &[&Matrix<S>], targets: &[S]) -> Result<(S, LstmNetworkGrad<S>), NeuralError> {
        let k = self.head.outputs();
        if targets.len() != windows.len() * k {
            return Err(NeuralError::LengthMismatch(windows.len() * k, targets.len()));
        }
        for w in windows {
            self.check_window(w)?;
        }
        let runs: Vec<Vec<StepCache<S>>> = windows.iter().map(|w| self.run(w)).collect();
        let head_traces: Vec<_> = runs
            .iter()
            .map(|steps| {
                let x = steps.last().expect("L ≥ 1").h.clone();
                let trace = self.head.forward_trace(&x);
                (x, trace)
            })
            .collect();
        let preds: Vec<S> = head_traces
            .iter()
            .flat_map(|(_, t)| t.last().expect("non-empty head").out.iter().copied())
            .collect();
        let loss = msle_guarded(targets, &preds)?;
        let dpred = msle_guarded_grad(targets, &preds)?;

        let mut grad = self.zero_grad();
        let h = self.cell.hidden_size();
        for (b, (steps, (x, trace))) in runs.iter().zip(&head_traces).enumerate() {
            let mut dh = self
                .head
                .backward_sample(x, trace, dpred[b * k..(b + 1) * k].to_vec(), &mut grad.head);
            let mut dc = vec![S::zero(); h];
            for step in steps.iter().rev() {
                let (dh_prev, dc_prev) = self.cell.backward_step(step, &dh, &dc, &mut grad.cell);
                dh = dh_prev;
                dc = dc_prev;
            }
        }
        Ok((loss, grad))
    }
}

impl<S: Scalar> Parameters<S> for LstmNetwork<S> {
    fn param_slices(&self) -> Vec<&[S]> {
        let mut v = self.cell.param_slices();
        v.extend(self.head.param_slices());
        v
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [S]> {
        let mut v = self.cell.param_slices_mut();
        v.extend(self.head.param_slices_mut());
        v
    }
}

impl<S: Scalar> Parameters<S> for LstmNetworkGrad<S> {
    fn param_slices(&self) -> Vec<&[S]> {
        let mut v = self.cell.param_slices();
        v.extend(self.head.param_slices());
        v
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [S]> {
        let mut v = self.cell.param_slices_mut();
        v.extend(self.head.param_slices_mut());
        v
    }
}
