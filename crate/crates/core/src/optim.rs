//! First-order optimizers over lists of tensors.

use crate::tensor::Tensor;

/// Adam with optional decoupled weight decay (AdamW when `weight_decay > 0`).
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, step: 0, m: vec![], v: vec![] }
    }

    /// AdamW with the customary default decay of 0.01.
    pub fn adamw(lr: f64) -> Self {
        Self { weight_decay: 0.01, ..Self::new(lr) }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                if self.weight_decay > 0.0 {
                    *w -= self.lr * self.weight_decay * *w;
                }
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![Tensor::from_vec(vec![3.0, -2.0])];
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g = p[0].map(|x| 2.0 * (x - 1.0));
            opt.step(&mut p, &[g]);
        }
        for &x in p[0].data() {
            assert!((x - 1.0).abs() < 1e-3, "{x}");
        }
    }

    #[test]
    fn first_adam_step_has_magnitude_lr() {
        let mut p = vec![Tensor::from_vec(vec![0.0, 0.0])];
        let mut opt = Adam::new(0.1);
        opt.step(&mut p, &[Tensor::from_vec(vec![5.0, -0.01])]);
        assert!((p[0].data()[0] + 0.1).abs() < 1e-6);
        assert!((p[0].data()[1] - 0.1).abs() < 1e-4);
    }
}
