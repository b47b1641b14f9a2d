use serde::{Deserialize, Serialize};

use super::Matrix;

/// A trainable tensor with its gradient and Adam moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub value: Matrix,
    pub grad: Matrix,
    first_moment: Matrix,
    second_moment: Matrix,
    step: u64,
    /// Whether decoupled weight decay applies. False for biases and layer-norm gains.
    pub decay: bool,
}

impl Parameter {
    pub fn new(value: Matrix, decay: bool) -> Self {
        let (r, c) = value.shape();
        Self {
            value,
            grad: Matrix::zeros(r, c),
            first_moment: Matrix::zeros(r, c),
            second_moment: Matrix::zeros(r, c),
            step: 0,
            decay,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    pub fn len(&self) -> usize {
        self.value.as_slice().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Anything that owns an ordered, named list of trainable parameters.
pub trait Parameterized {
    fn parameters(&self) -> Vec<(String, &Parameter)>;
    fn parameters_mut(&mut self) -> Vec<(String, &mut Parameter)>;

    fn zero_grad(&mut self) {
        for (_, p) in self.parameters_mut() {
            p.zero_grad();
        }
    }

    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, p)| p.len()).sum()
    }
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn step_parameter(&self, p: &mut Parameter) {
        p.step += 1;
        let t = p.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = if p.decay {
            self.lr * self.weight_decay
        } else {
            0.0
        };
        let theta = p.value.as_mut_slice();
        let g = p.grad.as_slice();
        let m = p.first_moment.as_mut_slice();
        let v = p.second_moment.as_mut_slice();
        for i in 0..theta.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            theta[i] -= decay * theta[i] + self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }

    pub fn step<P: Parameterized + ?Sized>(&self, model: &mut P) {
        for (_, p) in model.parameters_mut() {
            self.step_parameter(p);
        }
    }
}
