use crate::error::{contract, Result};
use crate::nn::{Parameter, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Consecutive non-improving validation epochs tolerated.
    pub patience: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 64,
            max_epochs: 200,
            patience: 5,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        contract!(
            self.learning_rate >= 0.0 && self.learning_rate.is_finite(),
            "learning rate must be non-negative, got {}",
            self.learning_rate
        );
        contract!(self.batch_size >= 1, "batch size must be positive");
        contract!(self.max_epochs >= 1, "max_epochs must be positive");
        contract!(self.patience >= 1, "patience must be at least 1");
        contract!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0,
            "invalid Adam moments"
        );
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// Adam with bias-corrected moments over a chosen subset of parameters.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    indices: Vec<usize>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: &OptimConfig, params: &[Parameter], indices: Vec<usize>) -> Self {
        let m: Vec<Tensor> = indices.iter().map(|&i| Tensor::zeros(params[i].value.shape())).collect();
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            indices,
            v: m.clone(),
            m,
        }
    }

    pub fn all(cfg: &OptimConfig, params: &[Parameter]) -> Self {
        Self::new(cfg, params, (0..params.len()).collect())
    }

    /// θ ← θ − lr · m̂ / (√v̂ + ε)
    pub fn step(&mut self, params: &mut [Parameter]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (slot, &i) in self.indices.iter().enumerate() {
            let p = &mut params[i];
            let m = self.m[slot].data_mut();
            let v = self.v[slot].data_mut();
            for (((theta, g), mi), vi) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *theta -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_hand_stepped_quadratic() {
        // f(θ) = (θ − 3)², θ₀ = 0
        let cfg = OptimConfig {
            learning_rate: 0.1,
            ..OptimConfig::default()
        };
        let mut params = vec![Parameter::new("theta", Tensor::from_vec(vec![0.0]))];
        let mut adam = Adam::all(&cfg, &params);
        let (mut theta, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=10 {
            let g = 2.0 * (params[0].value.data()[0] - 3.0);
            params[0].grad = Tensor::from_vec(vec![g]);
            adam.step(&mut params);

            let g = 2.0 * (theta - 3.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mhat = m / (1.0 - 0.9f64.powi(t));
            let vhat = v / (1.0 - 0.999f64.powi(t));
            theta -= 0.1 * mhat / (vhat.sqrt() + 1e-8);
            assert!((params[0].value.data()[0] - theta).abs() < 1e-15);
        }
        // first Adam step moves by ~lr
        assert!(theta > 0.9);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let cfg = OptimConfig {
            learning_rate: 0.0,
            ..OptimConfig::default()
        };
        let mut params = vec![Parameter::new("w", Tensor::from_vec(vec![1.5, -2.0]))];
        params[0].grad = Tensor::from_vec(vec![10.0, -3.0]);
        let mut adam = Adam::all(&cfg, &params);
        adam.step(&mut params);
        assert_eq!(params[0].value.data(), &[1.5, -2.0]);
    }
}
