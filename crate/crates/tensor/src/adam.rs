use crate::error::{Result, TensorError};
use crate::params::{Gradients, Parameters};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &Parameters) -> Self {
        let zeros = || -> Vec<Vec<f64>> { params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect() };
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, index: usize) -> &[f64] {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f64] {
        &self.v[index]
    }

    pub fn step(&mut self, params: &mut Parameters, grads: &Gradients) -> Result<()> {
        if grads.len() != params.len() || params.len() != self.m.len() {
            let missing = params
                .ids()
                .nth(grads.len().min(self.m.len()))
                .map(|id| params.name(id).to_string())
                .unwrap_or_default();
            return Err(TensorError::MissingGrad(missing));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for id in params.ids() {
            let g = grads.get(id);
            let i = id.index();
            if g.len() != self.m[i].len() {
                return Err(TensorError::MissingGrad(params.name(id).to_string()));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = params.get_mut(id).data_mut();
            for j in 0..g.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(value: f64) -> Parameters {
        let mut p = Parameters::new();
        p.add("w", Tensor::scalar(value));
        p
    }

    fn grads_of(params: &Parameters, g: f64) -> Gradients {
        let mut grads = Gradients::zeros_like(params);
        let mut tape = crate::Tape::new();
        let b = params.bind(&mut tape);
        let w = b.var(params.find("w").unwrap());
        let s = tape.scale(w, g);
        let loss = tape.sum(s);
        tape.backward(loss).unwrap();
        grads.accumulate(params, &tape, &b, 1.0).unwrap();
        grads
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = scalar_store(2.0);
        let grads = grads_of(&params, 1.0);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &params);
        adam.step(&mut params, &grads).unwrap();
        // m_hat = 1, v_hat = 1 on the first step
        let expected = 2.0 - 0.1 / (1.0 + 1e-8);
        assert!((params.get(params.find("w").unwrap()).data()[0] - expected).abs() < 1e-15);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_param_and_decays_moments() {
        let mut params = scalar_store(1.5);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &params);
        let g = grads_of(&params, 1.0);
        adam.step(&mut params, &g).unwrap();
        let after_first = params.get(params.find("w").unwrap()).data()[0];
        let (m1, v1) = (adam.first_moment(0)[0], adam.second_moment(0)[0]);

        // A zero gradient still moves the parameter through momentum, so
        // check the pure zero-gradient case on a fresh optimizer.
        let zero = Gradients::zeros_like(&params);
        let mut fresh = Adam::new(AdamConfig::with_lr(0.1), &params);
        fresh.step(&mut params, &zero).unwrap();
        assert_eq!(params.get(params.find("w").unwrap()).data()[0], after_first);

        adam.step(&mut params, &zero).unwrap();
        assert!((adam.first_moment(0)[0] - 0.9 * m1).abs() < 1e-15);
        assert!((adam.second_moment(0)[0] - 0.999 * v1).abs() < 1e-15);
    }

    #[test]
    fn mismatched_gradients_are_rejected() {
        let mut params = scalar_store(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &params);
        let empty = Gradients::zeros_like(&Parameters::new());
        assert!(matches!(
            adam.step(&mut params, &empty),
            Err(TensorError::MissingGrad(_))
        ));
    }
}
