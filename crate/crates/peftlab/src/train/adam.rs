//! Adam with bias correction. Moments are kept in f64; parameter
//! storage stays in the training precision.

use crate::real::Real;
use crate::tensor::Param;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Real>(
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
        params: &[(String, Param<T>)],
    ) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
        }
    }

    /// One update over the same parameter list (and order) the optimizer
    /// was built with. Parameters without gradient are left untouched.
    pub fn step<T: Real>(&mut self, params: &[(String, Param<T>)]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (slot, (_, p)) in params.iter().enumerate() {
            let grad = {
                let t = p.borrow();
                match t.grad() {
                    Some(g) => g.to_vec(),
                    None => continue,
                }
            };
            let mut t = p.borrow_mut();
            let data = t.data_mut();
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            for i in 0..data.len() {
                let mut g = grad[i].as_f64();
                if self.weight_decay > 0.0 {
                    g += self.weight_decay * data[i].as_f64();
                }
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let update = self.lr * m_hat / (v_hat.sqrt() + self.eps);
                data[i] = T::from_f64(data[i].as_f64() - update);
            }
        }
    }
}
