//! Minimal CPU neural-network kernels with explicit backward passes.
//!
//! Everything here is deterministic: parallel work is split into fixed-size
//! batch chunks whose partial results are reduced in chunk order, so outputs
//! and gradients are bit-identical regardless of thread count.

pub mod conv;
pub mod init;
pub mod linear;
pub mod ops;
pub mod optim;

pub use conv::{Conv2d, DepthwiseConv2d};
pub use linear::Linear;
pub use optim::{Adam, Sgd};

use sha2::{Digest, Sha256};

/// Fixed batch-chunk size for parallel kernels. Not tied to the thread
/// count: changing `--jobs` must never change any computed value.
pub const BATCH_CHUNK: usize = 8;

/// Anything that owns a flat, canonically ordered list of parameter tensors.
pub trait Params {
    /// Visit every parameter tensor as a flat slice, in canonical order.
    fn visit_params(&self, f: &mut dyn FnMut(&[f32]));
    /// Mutable variant; must visit in the same order as `visit_params`.
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f32]));

    fn num_param_tensors(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_| n += 1);
        n
    }

    fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }
}

/// Per-tensor gradient buffers aligned with a `Params` visit order.
#[derive(Debug, Clone)]
pub struct Grads(pub Vec<Vec<f32>>);

impl Grads {
    /// Zero-filled gradient buffers matching `params`.
    pub fn zeros_like(params: &dyn Params) -> Self {
        let mut slots = Vec::new();
        params.visit_params(&mut |p| slots.push(vec![0.0f32; p.len()]));
        Grads(slots)
    }

    pub fn add_assign(&mut self, other: &Grads) {
        assert_eq!(self.0.len(), other.0.len(), "grad slot count mismatch");
        for (a, b) in self.0.iter_mut().zip(other.0.iter()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        for slot in &mut self.0 {
            for g in slot.iter_mut() {
                *g *= s;
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        let mut acc = 0f64;
        for slot in &self.0 {
            for g in slot {
                acc += (*g as f64) * (*g as f64);
            }
        }
        acc.sqrt()
    }

    /// Rescale so the global L2 norm does not exceed `max_norm`. Returns
    /// the pre-clip norm. Keeps gradient spikes from killing ReLU nets
    /// that carry no normalization layers.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.l2_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale((max_norm / norm) as f32);
        }
        norm
    }
}

/// SHA-256 over the little-endian bytes of every parameter, in visit order.
///
/// Equal checksums mean bit-identical parameters; used by the frozen-backbone
/// and frozen-IC training contracts.
pub fn param_checksum(params: &dyn Params) -> String {
    let mut hasher = Sha256::new();
    params.visit_params(&mut |p| {
        for v in p {
            hasher.update(v.to_le_bytes());
        }
    });
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        use std::fmt::Write;
        let _ = write!(s, "{b:02x}");
    }
    s
}
