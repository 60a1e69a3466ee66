//! SGD-with-momentum and Adam, operating on `Params` + aligned `Grads`.

use super::{Grads, Params};

#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32, params: &dyn Params) -> Self {
        let mut velocity = Vec::new();
        params.visit_params(&mut |p| velocity.push(vec![0.0f32; p.len()]));
        Sgd {
            lr,
            momentum,
            velocity,
        }
    }

    pub fn step(&mut self, params: &mut dyn Params, grads: &Grads) {
        assert_eq!(self.velocity.len(), grads.0.len(), "optimizer slot mismatch");
        let mut idx = 0;
        params.visit_params_mut(&mut |p| {
            let v = &mut self.velocity[idx];
            let g = &grads.0[idx];
            assert_eq!(p.len(), g.len());
            for i in 0..p.len() {
                v[i] = self.momentum * v[i] + g[i];
                p[i] -= self.lr * v[i];
            }
            idx += 1;
        });
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32, params: &dyn Params) -> Self {
        let mut m = Vec::new();
        params.visit_params(&mut |p| m.push(vec![0.0f32; p.len()]));
        let v = m.clone();
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

    pub fn step(&mut self, params: &mut dyn Params, grads: &Grads) {
        assert_eq!(self.m.len(), grads.0.len(), "optimizer slot mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let mut idx = 0;
        params.visit_params_mut(&mut |p| {
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let g = &grads.0[idx];
            assert_eq!(p.len(), g.len());
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            idx += 1;
        });
    }
}
