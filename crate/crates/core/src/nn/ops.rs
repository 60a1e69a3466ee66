//! Activation, pooling, and loss primitives.

use ndarray::{Array2, Array4, ArrayView2, Axis};

pub fn relu_inplace(x: &mut Array4<f32>) {
    x.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
}

/// dx = dy where the forward *output* was positive. Using the output is
/// equivalent to gating on the pre-activation for ReLU.
pub fn relu_backward_inplace(dy: &mut Array4<f32>, y: &Array4<f32>) {
    ndarray::Zip::from(dy).and(y).for_each(|d, &o| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
}

/// Average-pool each (H, W) plane down to (out, out). H and W must be
/// divisible by `out`.
pub fn avg_pool_to(x: &Array4<f32>, out: usize) -> Array4<f32> {
    let (b, c, h, w) = x.dim();
    assert!(
        h % out == 0 && w % out == 0,
        "pool target {out} must divide input {h}x{w}"
    );
    let (th, tw) = (h / out, w / out);
    let scale = 1.0 / (th * tw) as f32;
    let mut y = Array4::zeros((b, c, out, out));
    for bi in 0..b {
        for ci in 0..c {
            let plane = x.index_axis(Axis(0), bi);
            let plane = plane.index_axis(Axis(0), ci);
            for oh in 0..out {
                for ow in 0..out {
                    let mut acc = 0.0f32;
                    for ih in oh * th..(oh + 1) * th {
                        for iw in ow * tw..(ow + 1) * tw {
                            acc += plane[[ih, iw]];
                        }
                    }
                    y[[bi, ci, oh, ow]] = acc * scale;
                }
            }
        }
    }
    y
}

pub fn avg_pool_backward(dy: &Array4<f32>, in_h: usize, in_w: usize) -> Array4<f32> {
    let (b, c, oh, ow) = dy.dim();
    let (th, tw) = (in_h / oh, in_w / ow);
    let scale = 1.0 / (th * tw) as f32;
    let mut dx = Array4::zeros((b, c, in_h, in_w));
    for bi in 0..b {
        for ci in 0..c {
            for poh in 0..oh {
                for pow in 0..ow {
                    let g = dy[[bi, ci, poh, pow]] * scale;
                    for ih in poh * th..(poh + 1) * th {
                        for iw in pow * tw..(pow + 1) * tw {
                            dx[[bi, ci, ih, iw]] = g;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Global average pool: (B, C, H, W) -> (B, C).
pub fn global_avg_pool(x: &Array4<f32>) -> Array2<f32> {
    let (b, c, h, w) = x.dim();
    let scale = 1.0 / (h * w) as f32;
    let mut y = Array2::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            let mut acc = 0.0f32;
            let plane = x.index_axis(Axis(0), bi);
            let plane = plane.index_axis(Axis(0), ci);
            for v in plane.iter() {
                acc += v;
            }
            y[[bi, ci]] = acc * scale;
        }
    }
    y
}

pub fn global_avg_pool_backward(dy: &Array2<f32>, h: usize, w: usize) -> Array4<f32> {
    let (b, c) = dy.dim();
    let scale = 1.0 / (h * w) as f32;
    let mut dx = Array4::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            let g = dy[[bi, ci]] * scale;
            dx.index_axis_mut(Axis(0), bi)
                .index_axis_mut(Axis(0), ci)
                .fill(g);
        }
    }
    dx
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: ArrayView2<f32>) -> Array2<f32> {
    let mut probs = logits.to_owned();
    for mut row in probs.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    probs
}

/// Shannon entropy (natural log) of one probability row.
pub fn entropy_nats(p: &[f32]) -> f64 {
    let mut h = 0f64;
    for &v in p {
        if v > 0.0 {
            let v = v as f64;
            h -= v * v.ln();
        }
    }
    h
}

/// Mean cross-entropy over the batch plus d(loss)/d(logits).
///
/// Loss is accumulated in f64 so batch sums stay oracle-comparable.
pub fn cross_entropy_mean(logits: ArrayView2<f32>, labels: &[usize]) -> (f64, Array2<f32>) {
    let (b, _k) = logits.dim();
    assert_eq!(b, labels.len(), "batch/label count mismatch");
    let mut dlogits = softmax(logits);
    let inv_b = 1.0 / b as f32;
    let mut loss = 0f64;
    for (i, &y) in labels.iter().enumerate() {
        let p = dlogits[[i, y]].max(1e-30);
        loss -= (p as f64).ln();
        dlogits[[i, y]] -= 1.0;
    }
    dlogits.mapv_inplace(|v| v * inv_b);
    (loss / b as f64, dlogits)
}

/// Mean cross-entropy only (no gradient).
pub fn cross_entropy_value(logits: ArrayView2<f32>, labels: &[usize]) -> f64 {
    let (b, _) = logits.dim();
    assert_eq!(b, labels.len());
    let probs = softmax(logits);
    let mut loss = 0f64;
    for (i, &y) in labels.iter().enumerate() {
        loss -= (probs[[i, y]].max(1e-30) as f64).ln();
    }
    loss / b as f64
}

/// Top-1 predictions per row (ties -> lowest index).
pub fn argmax_rows(logits: ArrayView2<f32>) -> Vec<usize> {
    logits
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            let mut best_v = f32::NEG_INFINITY;
            for (i, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = array![[1.0f32, 2.0, 3.0], [-5.0, 0.0, 5.0]];
        let p = softmax(logits.view());
        for row in p.axis_iter(Axis(0)) {
            let s: f32 = row.sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_k() {
        let logits = Array2::zeros((4, 10));
        let labels = vec![0, 3, 7, 9];
        let (loss, _) = cross_entropy_mean(logits.view(), &labels);
        assert!((loss - (10f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_difference() {
        let mut logits = array![[0.3f32, -0.7, 1.2], [0.0, 0.5, -0.2]];
        let labels = vec![2, 0];
        let (_, d) = cross_entropy_mean(logits.view(), &labels);
        let h = 1e-3f32;
        for i in 0..2 {
            for j in 0..3 {
                let orig = logits[[i, j]];
                logits[[i, j]] = orig + h;
                let lp = cross_entropy_value(logits.view(), &labels);
                logits[[i, j]] = orig - h;
                let lm = cross_entropy_value(logits.view(), &labels);
                logits[[i, j]] = orig;
                let fd = (lp - lm) / (2.0 * h as f64);
                assert!(
                    (fd - d[[i, j]] as f64).abs() < 1e-4,
                    "fd={fd} analytic={}",
                    d[[i, j]]
                );
            }
        }
    }

    #[test]
    fn avg_pool_round_trip_shapes() {
        let x = Array4::from_shape_fn((2, 3, 8, 8), |(b, c, h, w)| {
            (b * 100 + c * 10 + h + w) as f32 * 0.01
        });
        let y = avg_pool_to(&x, 4);
        assert_eq!(y.dim(), (2, 3, 4, 4));
        let dx = avg_pool_backward(&y, 8, 8);
        assert_eq!(dx.dim(), (2, 3, 8, 8));
        // distributing pooled gradients preserves total mass
        let sy: f32 = y.sum();
        let sdx: f32 = dx.sum();
        assert!((sy - sdx).abs() < 1e-3);
    }

    #[test]
    fn entropy_extremes() {
        assert!(entropy_nats(&[1.0, 0.0, 0.0]) < 1e-12);
        let u = [0.25f32; 4];
        assert!((entropy_nats(&u) - (4f64).ln()).abs() < 1e-6);
    }
}
