//! Adam optimizer over a [`ParamSet`].

use crate::params::ParamSet;

/// Adam with the standard defaults (lr is caller-chosen).
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamSet) -> Self {
        let m = (0..params.len())
            .map(|i| vec![0.0; params.tensor(i).numel()])
            .collect();
        let v = (0..params.len())
            .map(|i| vec![0.0; params.tensor(i).numel()])
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    /// One update. `grads[i]` is the gradient for parameter `i` (None means
    /// no gradient flowed, treated as zero). Frozen parameters are skipped
    /// entirely: no state decay, no movement.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Vec<f64>>], trainable: &[bool]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            if !trainable[i] {
                continue;
            }
            let n = params.tensor(i).numel();
            let zero;
            let g: &[f64] = match &grads[i] {
                Some(g) => g,
                None => {
                    zero = vec![0.0; n];
                    &zero
                }
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let data = &mut params.tensor_mut(i).data;
            for j in 0..n {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
