//! Long short-term memory cell.
//!
//! Gate order is fixed everywhere (storage, model files, gradients):
//! input, forget, output, candidate.

use rand::Rng;

use crate::scalar::Scalar;

use super::activation::sigmoid;
use super::init::xavier_uniform;
use super::matrix::Matrix;
use super::{NeuralError, Parameters};

pub const GATES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Input = 0,
    Forget = 1,
    Output = 2,
    Candidate = 3,
}

impl Gate {
    pub const ALL: [Gate; GATES] = [Gate::Input, Gate::Forget, Gate::Output, Gate::Candidate];

    pub fn name(self) -> &'static str {
        match self {
            Gate::Input => "input",
            Gate::Forget => "forget",
            Gate::Output => "output",
            Gate::Candidate => "candidate",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell<S> {
    /// `H × D` per gate.
    pub input_weights: [Matrix<S>; GATES],
    /// `H × H` per gate.
    pub recurrent_weights: [Matrix<S>; GATES],
    pub biases: [Vec<S>; GATES],
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmGrad<S> {
    pub input_weights: [Matrix<S>; GATES],
    pub recurrent_weights: [Matrix<S>; GATES],
    pub biases: [Vec<S>; GATES],
}

/// Everything one step needs for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct StepCache<S> {
    pub x: Vec<S>,
    pub h_prev: Vec<S>,
    pub c_prev: Vec<S>,
    /// Post-activation gate values in [`Gate`] order.
    pub gates: [Vec<S>; GATES],
    pub tanh_c: Vec<S>,
    pub c: Vec<S>,
    pub h: Vec<S>,
}

impl<S: Scalar> LstmCell<S> {
    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        LstmCell {
            input_weights: std::array::from_fn(|_| Matrix::zeros(hidden_size, input_size)),
            recurrent_weights: std::array::from_fn(|_| Matrix::zeros(hidden_size, hidden_size)),
            biases: std::array::from_fn(|_| vec![S::zero(); hidden_size]),
        }
    }

    /// Xavier-uniform input and recurrent matrices, zero biases except the
    /// forget gate, which starts at 1.
    pub fn xavier<R: Rng + ?Sized>(input_size: usize, hidden_size: usize, rng: &mut R) -> Self {
        let input_weights = std::array::from_fn(|_| xavier_uniform(input_size, hidden_size, rng));
        let recurrent_weights = std::array::from_fn(|_| xavier_uniform(hidden_size, hidden_size, rng));
        let mut biases: [Vec<S>; GATES] = std::array::from_fn(|_| vec![S::zero(); hidden_size]);
        biases[Gate::Forget as usize].iter_mut().for_each(|b| *b = S::one());
        LstmCell {
            input_weights,
            recurrent_weights,
            biases,
        }
    }

    pub fn from_parts(
        input_weights: [Matrix<S>; GATES],
        recurrent_weights: [Matrix<S>; GATES],
        biases: [Vec<S>; GATES],
    ) -> Result<Self, NeuralError> {
        let h = biases[0].len();
        let d = input_weights[0].cols();
        for k in 0..GATES {
            let ok = input_weights[k].shape() == (h, d)
                && recurrent_weights[k].shape() == (h, h)
                && biases[k].len() == h;
            if !ok {
                return Err(NeuralError::ShapeMismatch {
                    expected: format!("gate {} with W {h}x{d}, U {h}x{h}, b {h}", Gate::ALL[k].name()),
                    got: format!(
                        "W {:?}, U {:?}, b {}",
                        input_weights[k].shape(),
                        recurrent_weights[k].shape(),
                        biases[k].len()
                    ),
                });
            }
        }
        Ok(LstmCell {
            input_weights,
            recurrent_weights,
            biases,
        })
    }

    pub fn input_size(&self) -> usize {
        self.input_weights[0].cols()
    }

    pub fn hidden_size(&self) -> usize {
        self.biases[0].len()
    }

    /// One recurrence step, returning `(h_t, c_t)`.
    pub fn step(&self, x: &[S], h_prev: &[S], c_prev: &[S]) -> Result<(Vec<S>, Vec<S>), NeuralError> {
        let (d, h) = (self.input_size(), self.hidden_size());
        if x.len() != d || h_prev.len() != h || c_prev.len() != h {
            return Err(NeuralError::ShapeMismatch {
                expected: format!("x[{d}], h[{h}], c[{h}]"),
                got: format!("x[{}], h[{}], c[{}]", x.len(), h_prev.len(), c_prev.len()),
            });
        }
        let cache = self.step_cached(x, h_prev, c_prev);
        Ok((cache.h, cache.c))
    }

    pub(crate) fn step_cached(&self, x: &[S], h_prev: &[S], c_prev: &[S]) -> StepCache<S> {
        let gates: [Vec<S>; GATES] = std::array::from_fn(|k| {
            let mut z = self.biases[k].clone();
            self.input_weights[k].gemv_acc(x, &mut z);
            self.recurrent_weights[k].gemv_acc(h_prev, &mut z);
            if k == Gate::Candidate as usize {
                z.iter_mut().for_each(|v| *v = v.tanh());
            } else {
                z.iter_mut().for_each(|v| *v = sigmoid(*v));
            }
            z
        });
        let [i, f, o, g] = &gates;
        let c: Vec<S> = (0..c_prev.len()).map(|j| f[j] * c_prev[j] + i[j] * g[j]).collect();
        let tanh_c: Vec<S> = c.iter().map(|v| v.tanh()).collect();
        let h = o.iter().zip(&tanh_c).map(|(&o, &t)| o * t).collect();
        StepCache {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            c_prev: c_prev.to_vec(),
            gates,
            tanh_c,
            c,
            h,
        }
    }

    /// Backward through one step.
    ///
    /// Takes `∂L/∂h_t` and `∂L/∂c_t` (the latter from the following step),
    /// accumulates parameter gradients and returns `(∂L/∂h_{t-1}, ∂L/∂c_{t-1})`.
    pub(crate) fn backward_step(&self, cache: &StepCache<S>, dh: &[S], dc_next: &[S], grad: &mut LstmGrad<S>) -> (Vec<S>, Vec<S>) {
        let one = S::one();
        let [i, f, o, g] = &cache.gates;
        let n = dh.len();
        let mut dz: [Vec<S>; GATES] = std::array::from_fn(|_| vec![S::zero(); n]);
        let mut dc_prev = vec![S::zero(); n];
        for j in 0..n {
            let t = cache.tanh_c[j];
            let dc = dc_next[j] + dh[j] * o[j] * (one - t * t);
            dz[Gate::Output as usize][j] = dh[j] * t * o[j] * (one - o[j]);
            dz[Gate::Input as usize][j] = dc * g[j] * i[j] * (one - i[j]);
            dz[Gate::Candidate as usize][j] = dc * i[j] * (one - g[j] * g[j]);
            dz[Gate::Forget as usize][j] = dc * cache.c_prev[j] * f[j] * (one - f[j]);
            dc_prev[j] = dc * f[j];
        }
        let mut dh_prev = vec![S::zero(); n];
        for k in 0..GATES {
            grad.input_weights[k].outer_acc(&dz[k], &cache.x);
            grad.recurrent_weights[k].outer_acc(&dz[k], &cache.h_prev);
            for (b, &d) in grad.biases[k].iter_mut().zip(&dz[k]) {
                *b += d;
            }
            self.recurrent_weights[k].gemv_t_acc(&dz[k], &mut dh_prev);
        }
        (dh_prev, dc_prev)
    }

    pub fn zero_grad(&self) -> LstmGrad<S> {
        let z = Self::zeros(self.input_size(), self.hidden_size());
        LstmGrad {
            input_weights: z.input_weights,
            recurrent_weights: z.recurrent_weights,
            biases: z.biases,
        }
    }
}

macro_rules! lstm_params {
    ($t:ident) => {
        impl<S: Scalar> Parameters<S> for $t<S> {
            fn param_slices(&self) -> Vec<&[S]> {
                let mut v: Vec<&[S]> = Vec::with_capacity(3 * GATES);
                v.extend(self.input_weights.iter().map(|m| m.as_slice()));
                v.extend(self.recurrent_weights.iter().map(|m| m.as_slice()));
                v.extend(self.biases.iter().map(|b| b.as_slice()));
                v
            }

            fn param_slices_mut(&mut self) -> Vec<&mut [S]> {
                let mut v: Vec<&mut [S]> = Vec::with_capacity(3 * GATES);
                v.extend(self.input_weights.iter_mut().map(|m| m.as_mut_slice()));
                v.extend(self.recurrent_weights.iter_mut().map(|m| m.as_mut_slice()));
                v.extend(self.biases.iter_mut().map(|b| b.as_mut_slice()));
                v
            }
        }
    };
}

lstm_params!(LstmCell);
lstm_params!(LstmGrad);
