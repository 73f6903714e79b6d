use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::nn::ParamSet;

/// Adam with bias correction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros: Vec<Mat> = params.values().iter().map(|p| Mat::zeros(p.dim())).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    /// The update Adam would apply for `grads`, advancing its moment estimates.
    pub fn direction(&mut self, grads: &[Mat]) -> Vec<Mat> {
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        grads
            .iter()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .map(|(g, (m, v))| {
                let mut delta = Mat::zeros(g.dim());
                Zip::from(&mut delta).and(g).and(m).and(v).for_each(|d, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *d = -lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                });
                delta
            })
            .collect()
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Mat]) {
        let delta = self.direction(grads);
        params.apply(&delta, 1.0);
    }
}
