use super::{ParamStore, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for every parameter of one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamState<F> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<F>>,
    second: Vec<Vec<F>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &ParamStore<F>, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| vec![F::zero(); t.numel()]).collect();
        AdamState {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// One bias-corrected update using the gradients held in `params`.
    pub fn step(&mut self, params: &mut ParamStore<F>) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                params.len()
            )));
        }
        for (i, t) in params.tensors_mut().iter().enumerate() {
            if t.grad().is_none() {
                return Err(Error::Contract(format!("parameter #{i} has no gradient")));
            }
            if t.numel() != self.first[i].len() {
                return Err(Error::Contract(format!(
                    "parameter #{i} changed size since optimizer creation"
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let b1 = F::of(c.beta1);
        let b2 = F::of(c.beta2);
        let one = F::one();
        let bias1 = F::of(1.0 - c.beta1.powf(self.step as f64));
        let bias2 = F::of(1.0 - c.beta2.powf(self.step as f64));
        let lr = F::of(c.learning_rate);
        let eps = F::of(c.eps);
        for (i, t) in params.tensors_mut().iter_mut().enumerate() {
            let (data, grad) = t.data_and_grad_mut();
            let grad = grad.expect("checked above");
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for j in 0..data.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
