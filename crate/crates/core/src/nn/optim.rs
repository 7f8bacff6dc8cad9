// SPDX-License-Identifier: MIT OR Apache-2.0

use super::{Parameterized, Scalar};

/// Adaptive moment estimation over every parameter of a model.
///
/// Moment buffers are matched to parameters by visit order, so the optimizer
/// must always be stepped with the same model.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients.
    pub fn step<S: Scalar, M: Parameterized<S> + ?Sized>(&mut self, model: &mut M) {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        let (lr, b1, b2, eps) = (self.learning_rate, self.beta1, self.beta2, self.eps);
        let first = &mut self.first;
        let second = &mut self.second;
        let mut idx = 0;
        model.visit_params("", &mut |_, p| {
            if first.len() <= idx {
                first.push(vec![0.0; p.value.len()]);
                second.push(vec![0.0; p.value.len()]);
            }
            let (m, v) = (&mut first[idx], &mut second[idx]);
            assert_eq!(m.len(), p.value.len(), "optimizer used with a different model");
            for i in 0..p.value.len() {
                let g = p.grad[i].as_f64();
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mh = m[i] / bias1;
                let vh = v[i] / bias2;
                let updated = p.value[i].as_f64() - lr * mh / (vh.sqrt() + eps);
                p.value[i] = S::from_f64_lossy(updated);
            }
            idx += 1;
        });
    }
}
