//! ADAM optimizer with bias-corrected moment estimates.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

use super::{NeuralError, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<S>,
    v: Vec<S>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        assert!(
            (0.0..1.0).contains(&config.beta1) && (0.0..1.0).contains(&config.beta2),
            "ADAM betas must lie in [0, 1)"
        );
        AdamState {
            config,
            step: 0,
            m: vec![S::zero(); num_params],
            v: vec![S::zero(); num_params],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[S] {
        &self.m
    }

    pub fn second_moment(&self) -> &[S] {
        &self.v
    }

    /// One update of a flat parameter vector.
    pub fn step(&mut self, params: &mut [S], grads: &[S]) -> Result<(), NeuralError> {
        self.step_slices(&mut [params], &[grads])
    }

    /// Updates a model in place from a gradient with the same parameter layout.
    pub fn step_model<P, G>(&mut self, model: &mut P, grads: &G) -> Result<(), NeuralError>
    where
        P: Parameters<S> + ?Sized,
        G: Parameters<S> + ?Sized,
    {
        let mut params = model.param_slices_mut();
        let grads = grads.param_slices();
        self.step_slices(&mut params, &grads)
    }

    fn step_slices(&mut self, params: &mut [&mut [S]], grads: &[&[S]]) -> Result<(), NeuralError> {
        let total: usize = params.iter().map(|p| p.len()).sum();
        let total_g: usize = grads.iter().map(|g| g.len()).sum();
        if total != self.m.len() || total_g != total || params.len() != grads.len() {
            return Err(NeuralError::ShapeMismatch {
                expected: format!("{} parameters", self.m.len()),
                got: format!("{total} parameters and {total_g} gradients"),
            });
        }
        for (p, g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(NeuralError::ShapeMismatch {
                    expected: format!("gradient block of length {}", p.len()),
                    got: format!("length {}", g.len()),
                });
            }
        }

        self.step += 1;
        let c = self.config;
        let b1 = S::of(c.beta1);
        let b2 = S::of(c.beta2);
        let one = S::one();
        let bias1 = S::of(1.0 - c.beta1.powi(self.step as i32));
        let bias2 = S::of(1.0 - c.beta2.powi(self.step as i32));
        let lr = S::of(c.learning_rate);
        let eps = S::of(c.epsilon);

        let mut offset = 0;
        for (p, g) in params.iter_mut().zip(grads) {
            let m = &mut self.m[offset..offset + p.len()];
            let v = &mut self.v[offset..offset + p.len()];
            for (((theta, &gi), mi), vi) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            offset += p.len();
        }
        Ok(())
    }
}
