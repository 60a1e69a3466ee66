//! Fully-connected layer.

use super::{Grads, Params};
use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Axis};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct Linear {
    /// (out, in)
    pub w: Array2<f32>,
    pub b: Array1<f32>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Linear {
            w: super::init::he_linear(out_dim, in_dim, rng),
            b: super::init::zero_bias(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.dim().1
    }

    pub fn out_dim(&self) -> usize {
        self.w.dim().0
    }

    /// y = x . wT + b for a batch x of shape (B, in).
    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        let (b, in_dim) = x.dim();
        assert_eq!(in_dim, self.in_dim(), "linear input dim mismatch");
        let mut y = Array2::zeros((b, self.out_dim()));
        general_mat_mul(1.0, &x.view(), &self.w.t(), 0.0, &mut y.view_mut());
        for mut row in y.axis_iter_mut(Axis(0)) {
            row += &self.b;
        }
        y
    }

    pub fn backward(&self, x: &Array2<f32>, dy: &Array2<f32>) -> (Array2<f32>, Grads) {
        let (b, _) = x.dim();
        assert_eq!(dy.dim(), (b, self.out_dim()));
        let mut dw = Array2::zeros(self.w.dim());
        general_mat_mul(1.0, &dy.t(), &x.view(), 0.0, &mut dw.view_mut());
        let db = dy.sum_axis(Axis(0));
        let mut dx = Array2::zeros(x.dim());
        general_mat_mul(1.0, &dy.view(), &self.w.view(), 0.0, &mut dx.view_mut());
        let grads = Grads(vec![dw.into_raw_vec_and_offset().0, db.to_vec()]);
        (dx, grads)
    }

    /// Input gradient only.
    pub fn backward_data(&self, dy: &Array2<f32>) -> Array2<f32> {
        let mut dx = Array2::zeros((dy.dim().0, self.in_dim()));
        general_mat_mul(1.0, &dy.view(), &self.w.view(), 0.0, &mut dx.view_mut());
        dx
    }
}

impl Params for Linear {
    fn visit_params(&self, f: &mut dyn FnMut(&[f32])) {
        f(self.w.as_slice().expect("standard layout"));
        f(self.b.as_slice().expect("standard layout"));
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f32])) {
        f(self.w.as_slice_mut().expect("standard layout"));
        f(self.b.as_slice_mut().expect("standard layout"));
    }
}
