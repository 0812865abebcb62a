use ndarray::{ArrayD, Zip};

use crate::tensor::Tensor;

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Adam {
        Adam { lr, beta1, beta2, eps, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Updates `params` in place from `grads` (same order, same shapes).
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[ArrayD<f64>]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| ArrayD::zeros(g.raw_dim())).collect();
            self.v = grads.iter().map(|g| ArrayD::zeros(g.raw_dim())).collect();
        }
        assert_eq!(self.m.len(), params.len(), "optimizer was built for a different parameter set");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let step_size = self.lr / bc1;
        for (i, p) in params.iter_mut().enumerate() {
            let taken = std::mem::replace(&mut **p, Tensor::scalar(0.0));
            let mut value = taken.into_value();
            Zip::from(&mut value)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(&grads[i])
                .for_each(|w, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= step_size * *m / ((*v / bc2).sqrt() + eps);
                });
            **p = Tensor::param(value);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad;

    #[test]
    fn minimizes_a_quadratic() {
        let mut w = Tensor::param(ndarray::arr1(&[3.0, -2.0]).into_dyn());
        let mut opt = Adam::new(0.1, 0.9, 0.999, 1e-8);
        for _ in 0..500 {
            let loss = w.square().sum();
            let g = grad(&loss, &[&w], false).remove(0).into_value();
            opt.update(&mut [&mut w], &[g]);
        }
        assert!(w.to_vec().iter().all(|x| x.abs() < 1e-2), "{:?}", w.to_vec());
    }
}
