//! 2-D convolution kernels (im2col + GEMM) and depthwise convolution.
//!
//! Batch work is parallelized over fixed-size chunks; weight-gradient
//! partials are collected per chunk and reduced in chunk order, keeping
//! every result bit-identical across thread counts.

use super::{Grads, Params, BATCH_CHUNK};
use ndarray::linalg::general_mat_mul;
use ndarray::parallel::prelude::*;
use ndarray::{Array1, Array2, Array3, Array4, ArrayView3, ArrayViewMut3, Axis};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct Conv2d {
    /// (out_c, in_c, k, k)
    pub w: Array4<f32>,
    pub b: Array1<f32>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Conv2d {
            w: super::init::he_conv(out_c, in_c, k, rng),
            b: super::init::zero_bias(out_c),
            stride,
            pad,
        }
    }

    /// Same-shape conv whose weights start at zero (residual-tail init).
    pub fn new_zeroed(in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize) -> Self {
        Conv2d {
            w: Array4::zeros((out_c, in_c, k, k)),
            b: super::init::zero_bias(out_c),
            stride,
            pad,
        }
    }

    pub fn kernel(&self) -> usize {
        self.w.dim().2
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Array4<f32>) -> Array4<f32> {
        let (b, in_c, h, w) = x.dim();
        let (out_c, wc_in, k, _) = self.w.dim();
        assert_eq!(in_c, wc_in, "conv channel mismatch");
        let (oh, ow) = self.out_hw(h, w);
        let mut out = Array4::zeros((b, out_c, oh, ow));
        let w_mat = flatten_kernel(&self.w);

        out.axis_chunks_iter_mut(Axis(0), BATCH_CHUNK)
            .into_par_iter()
            .zip(x.axis_chunks_iter(Axis(0), BATCH_CHUNK).into_par_iter())
            .for_each(|(mut oc, xc)| {
                let mut cols = Array2::zeros((in_c * k * k, oh * ow));
                for bi in 0..xc.len_of(Axis(0)) {
                    im2col(
                        xc.index_axis(Axis(0), bi),
                        k,
                        self.stride,
                        self.pad,
                        &mut cols,
                    );
                    let mut o = oc.index_axis_mut(Axis(0), bi);
                    let mut o_mat = o
                        .view_mut()
                        .into_shape_with_order((out_c, oh * ow))
                        .expect("contiguous output");
                    general_mat_mul(1.0, &w_mat, &cols.view(), 0.0, &mut o_mat);
                    for (c, mut row) in o_mat.axis_iter_mut(Axis(0)).enumerate() {
                        let bias = self.b[c];
                        row.mapv_inplace(|v| v + bias);
                    }
                }
            });
        out
    }

    /// Returns (dx, grads) where grads holds [dW, db] for this layer.
    pub fn backward(&self, x: &Array4<f32>, dy: &Array4<f32>) -> (Array4<f32>, Grads) {
        let (b, in_c, h, w) = x.dim();
        let (out_c, _, k, _) = self.w.dim();
        let (oh, ow) = self.out_hw(h, w);
        assert_eq!(dy.dim(), (b, out_c, oh, ow), "conv dy shape mismatch");
        let w_mat = flatten_kernel(&self.w);
        let mut dx = Array4::zeros((b, in_c, h, w));

        let partials: Vec<(Array2<f32>, Array1<f32>)> = dx
            .axis_chunks_iter_mut(Axis(0), BATCH_CHUNK)
            .into_par_iter()
            .zip(x.axis_chunks_iter(Axis(0), BATCH_CHUNK).into_par_iter())
            .zip(dy.axis_chunks_iter(Axis(0), BATCH_CHUNK).into_par_iter())
            .map(|((mut dxc, xc), dyc)| {
                let mut cols = Array2::zeros((in_c * k * k, oh * ow));
                let mut dcols = Array2::zeros((in_c * k * k, oh * ow));
                let mut dw = Array2::zeros((out_c, in_c * k * k));
                let mut db = Array1::zeros(out_c);
                for bi in 0..xc.len_of(Axis(0)) {
                    im2col(
                        xc.index_axis(Axis(0), bi),
                        k,
                        self.stride,
                        self.pad,
                        &mut cols,
                    );
                    let dy_img = dyc.index_axis(Axis(0), bi);
                    let dy_mat = dy_img
                        .into_shape_with_order((out_c, oh * ow))
                        .expect("contiguous dy");
                    // dW += dy . colsT
                    general_mat_mul(1.0, &dy_mat, &cols.t(), 1.0, &mut dw.view_mut());
                    for (c, row) in dy_mat.axis_iter(Axis(0)).enumerate() {
                        db[c] += row.sum();
                    }
                    // dcols = wT . dy
                    general_mat_mul(1.0, &w_mat.t(), &dy_mat, 0.0, &mut dcols.view_mut());
                    col2im_accumulate(
                        &dcols,
                        k,
                        self.stride,
                        self.pad,
                        dxc.index_axis_mut(Axis(0), bi),
                    );
                }
                (dw, db)
            })
            .collect();

        let mut dw_total = Array2::<f32>::zeros((out_c, in_c * k * k));
        let mut db_total = Array1::<f32>::zeros(out_c);
        for (dw, db) in partials {
            dw_total += &dw;
            db_total += &db;
        }
        let grads = Grads(vec![dw_total.into_raw_vec_and_offset().0, db_total.to_vec()]);
        (dx, grads)
    }

    /// Input gradient only (no weight gradients).
    pub fn backward_data(
        &self,
        dy: &Array4<f32>,
        in_dim: (usize, usize, usize, usize),
    ) -> Array4<f32> {
        let (b, in_c, h, w) = in_dim;
        let (out_c, _, k, _) = self.w.dim();
        let (oh, ow) = self.out_hw(h, w);
        assert_eq!(dy.dim(), (b, out_c, oh, ow), "conv dy shape mismatch");
        let w_mat = flatten_kernel(&self.w);
        let mut dx = Array4::zeros((b, in_c, h, w));
        dx.axis_chunks_iter_mut(Axis(0), BATCH_CHUNK)
            .into_par_iter()
            .zip(dy.axis_chunks_iter(Axis(0), BATCH_CHUNK).into_par_iter())
            .for_each(|(mut dxc, dyc)| {
                let mut dcols = Array2::zeros((in_c * k * k, oh * ow));
                for bi in 0..dyc.len_of(Axis(0)) {
                    let dy_img = dyc.index_axis(Axis(0), bi);
                    let dy_mat = dy_img
                        .into_shape_with_order((out_c, oh * ow))
                        .expect("contiguous dy");
                    general_mat_mul(1.0, &w_mat.t(), &dy_mat, 0.0, &mut dcols.view_mut());
                    col2im_accumulate(
                        &dcols,
                        k,
                        self.stride,
                        self.pad,
                        dxc.index_axis_mut(Axis(0), bi),
                    );
                }
            });
        dx
    }
}

impl Params for Conv2d {
    fn visit_params(&self, f: &mut dyn FnMut(&[f32])) {
        f(self.w.as_slice().expect("standard layout"));
        f(self.b.as_slice().expect("standard layout"));
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f32])) {
        f(self.w.as_slice_mut().expect("standard layout"));
        f(self.b.as_slice_mut().expect("standard layout"));
    }
}

fn flatten_kernel(w: &Array4<f32>) -> Array2<f32> {
    let (out_c, in_c, k, _) = w.dim();
    w.view()
        .into_shape_with_order((out_c, in_c * k * k))
        .expect("contiguous kernel")
        .to_owned()
}

/// Unfold one image (C, H, W) into (C*k*k, OH*OW). `cols` is fully
/// rewritten, including the zero padding region.
fn im2col(x: ArrayView3<f32>, k: usize, stride: usize, pad: usize, cols: &mut Array2<f32>) {
    let (c_n, h, w) = x.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    debug_assert_eq!(cols.dim(), (c_n * k * k, oh * ow));
    cols.fill(0.0);
    let cols_slice = cols.as_slice_mut().expect("standard layout");
    for c in 0..c_n {
        let plane = x.index_axis(Axis(0), c);
        let plane = plane.to_slice();
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let crow = &mut cols_slice[row * oh * ow..(row + 1) * oh * ow];
                for ohi in 0..oh {
                    let ih = (ohi * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let ih = ih as usize;
                    match plane {
                        Some(ps) => {
                            let xrow = &ps[ih * w..(ih + 1) * w];
                            for owi in 0..ow {
                                let iw = (owi * stride + kj) as isize - pad as isize;
                                if iw >= 0 && iw < w as isize {
                                    crow[ohi * ow + owi] = xrow[iw as usize];
                                }
                            }
                        }
                        None => {
                            for owi in 0..ow {
                                let iw = (owi * stride + kj) as isize - pad as isize;
                                if iw >= 0 && iw < w as isize {
                                    crow[ohi * ow + owi] = x[[c, ih, iw as usize]];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Fold gradient columns back onto the (C, H, W) input gradient.
fn col2im_accumulate(
    dcols: &Array2<f32>,
    k: usize,
    stride: usize,
    pad: usize,
    mut dx: ArrayViewMut3<f32>,
) {
    let (c_n, h, w) = dx.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let dsl = dcols.as_slice().expect("standard layout");
    for c in 0..c_n {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let crow = &dsl[row * oh * ow..(row + 1) * oh * ow];
                for ohi in 0..oh {
                    let ih = (ohi * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let ih = ih as usize;
                    for owi in 0..ow {
                        let iw = (owi * stride + kj) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            dx[[c, ih, iw as usize]] += crow[ohi * ow + owi];
                        }
                    }
                }
            }
        }
    }
}

/// Depthwise 3x3 (or kxk) convolution: one kernel per channel.
#[derive(Debug, Clone)]
pub struct DepthwiseConv2d {
    /// (c, k, k)
    pub w: Array3<f32>,
    pub b: Array1<f32>,
    pub stride: usize,
    pub pad: usize,
}

impl DepthwiseConv2d {
    pub fn new(c: usize, k: usize, stride: usize, pad: usize, rng: &mut impl Rng) -> Self {
        DepthwiseConv2d {
            w: super::init::he_depthwise(c, k, rng),
            b: super::init::zero_bias(c),
            stride,
            pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.w.dim().1;
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Array4<f32>) -> Array4<f32> {
        let (b, c_n, h, w) = x.dim();
        let (wc, k, _) = self.w.dim();
        assert_eq!(c_n, wc, "depthwise channel mismatch");
        let (oh, ow) = self.out_hw(h, w);
        let mut out = Array4::zeros((b, c_n, oh, ow));
        out.axis_chunks_iter_mut(Axis(0), BATCH_CHUNK)
            .into_par_iter()
            .zip(x.axis_chunks_iter(Axis(0), BATCH_CHUNK).into_par_iter())
            .for_each(|(mut oc, xc)| {
                for bi in 0..xc.len_of(Axis(0)) {
                    for c in 0..c_n {
                        let xp = xc.index_axis(Axis(0), bi);
                        let xp = xp.index_axis(Axis(0), c);
                        let mut op = oc.index_axis_mut(Axis(0), bi);
                        let mut op = op.index_axis_mut(Axis(0), c);
                        let bias = self.b[c];
                        for ohi in 0..oh {
                            for owi in 0..ow {
                                let mut acc = bias;
                                for ki in 0..k {
                                    let ih =
                                        (ohi * self.stride + ki) as isize - self.pad as isize;
                                    if ih < 0 || ih >= h as isize {
                                        continue;
                                    }
                                    for kj in 0..k {
                                        let iw = (owi * self.stride + kj) as isize
                                            - self.pad as isize;
                                        if iw >= 0 && iw < w as isize {
                                            acc += self.w[[c, ki, kj]]
                                                * xp[[ih as usize, iw as usize]];
                                        }
                                    }
                                }
                                op[[ohi, owi]] = acc;
                            }
                        }
                    }
                }
            });
        out
    }

    pub fn backward(&self, x: &Array4<f32>, dy: &Array4<f32>) -> (Array4<f32>, Grads) {
        let (b, c_n, h, w) = x.dim();
        let (_, k, _) = self.w.dim();
        let (oh, ow) = self.out_hw(h, w);
        assert_eq!(dy.dim(), (b, c_n, oh, ow));
        let mut dx = Array4::zeros((b, c_n, h, w));

        let partials: Vec<(Array3<f32>, Array1<f32>)> = dx
            .axis_chunks_iter_mut(Axis(0), BATCH_CHUNK)
            .into_par_iter()
            .zip(x.axis_chunks_iter(Axis(0), BATCH_CHUNK).into_par_iter())
            .zip(dy.axis_chunks_iter(Axis(0), BATCH_CHUNK).into_par_iter())
            .map(|((mut dxc, xc), dyc)| {
                let mut dw = Array3::<f32>::zeros((c_n, k, k));
                let mut db = Array1::<f32>::zeros(c_n);
                for bi in 0..xc.len_of(Axis(0)) {
                    for c in 0..c_n {
                        let xp = xc.index_axis(Axis(0), bi);
                        let xp = xp.index_axis(Axis(0), c);
                        let dyp = dyc.index_axis(Axis(0), bi);
                        let dyp = dyp.index_axis(Axis(0), c);
                        let mut dxp = dxc.index_axis_mut(Axis(0), bi);
                        let mut dxp = dxp.index_axis_mut(Axis(0), c);
                        for ohi in 0..oh {
                            for owi in 0..ow {
                                let g = dyp[[ohi, owi]];
                                if g == 0.0 {
                                    continue;
                                }
                                db[c] += g;
                                for ki in 0..k {
                                    let ih =
                                        (ohi * self.stride + ki) as isize - self.pad as isize;
                                    if ih < 0 || ih >= h as isize {
                                        continue;
                                    }
                                    for kj in 0..k {
                                        let iw = (owi * self.stride + kj) as isize
                                            - self.pad as isize;
                                        if iw >= 0 && iw < w as isize {
                                            let xv = xp[[ih as usize, iw as usize]];
                                            dw[[c, ki, kj]] += g * xv;
                                            dxp[[ih as usize, iw as usize]] +=
                                                g * self.w[[c, ki, kj]];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                (dw, db)
            })
            .collect();

        let mut dw_total = Array3::<f32>::zeros((c_n, k, k));
        let mut db_total = Array1::<f32>::zeros(c_n);
        for (dw, db) in partials {
            dw_total += &dw;
            db_total += &db;
        }
        let grads = Grads(vec![dw_total.into_raw_vec_and_offset().0, db_total.to_vec()]);
        (dx, grads)
    }

    /// Input gradient only.
    pub fn backward_data(
        &self,
        dy: &Array4<f32>,
        in_dim: (usize, usize, usize, usize),
    ) -> Array4<f32> {
        let (b, c_n, h, w) = in_dim;
        let (_, k, _) = self.w.dim();
        let (oh, ow) = self.out_hw(h, w);
        assert_eq!(dy.dim(), (b, c_n, oh, ow));
        let mut dx = Array4::zeros((b, c_n, h, w));
        dx.axis_chunks_iter_mut(Axis(0), BATCH_CHUNK)
            .into_par_iter()
            .zip(dy.axis_chunks_iter(Axis(0), BATCH_CHUNK).into_par_iter())
            .for_each(|(mut dxc, dyc)| {
                for bi in 0..dyc.len_of(Axis(0)) {
                    for c in 0..c_n {
                        let dyp = dyc.index_axis(Axis(0), bi);
                        let dyp = dyp.index_axis(Axis(0), c);
                        let mut dxp = dxc.index_axis_mut(Axis(0), bi);
                        let mut dxp = dxp.index_axis_mut(Axis(0), c);
                        for ohi in 0..oh {
                            for owi in 0..ow {
                                let g = dyp[[ohi, owi]];
                                if g == 0.0 {
                                    continue;
                                }
                                for ki in 0..k {
                                    let ih =
                                        (ohi * self.stride + ki) as isize - self.pad as isize;
                                    if ih < 0 || ih >= h as isize {
                                        continue;
                                    }
                                    for kj in 0..k {
                                        let iw = (owi * self.stride + kj) as isize
                                            - self.pad as isize;
                                        if iw >= 0 && iw < w as isize {
                                            dxp[[ih as usize, iw as usize]] +=
                                                g * self.w[[c, ki, kj]];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            });
        dx
    }
}

impl Params for DepthwiseConv2d {
    fn visit_params(&self, f: &mut dyn FnMut(&[f32])) {
        f(self.w.as_slice().expect("standard layout"));
        f(self.b.as_slice().expect("standard layout"));
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f32])) {
        f(self.w.as_slice_mut().expect("standard layout"));
        f(self.b.as_slice_mut().expect("standard layout"));
    }
}
