//! Desk-scale convolutional backbones with an enumerable block structure,
//! plus supervised backbone training.
//!
//! A backbone is an ordered stack of feature blocks followed by a global
//! average pool and one fully-connected head. Blocks are addressable by
//! index 1..=N so internal classifiers can attach between them.

use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::nn::ops::{
    argmax_rows, cross_entropy_mean, global_avg_pool, global_avg_pool_backward,
    relu_backward_inplace, relu_inplace,
};
use crate::nn::{Conv2d, DepthwiseConv2d, Grads, Linear, Params, Sgd};
use ndarray::{Array2, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// One feature block. Every variant maps (B, C_in, H, W) -> (B, C_out, H', W')
/// and ends in a ReLU.
#[derive(Debug, Clone)]
pub enum Block {
    /// conv 3x3 (stride 1 or 2) + ReLU
    Conv { conv: Conv2d },
    /// pre-activation-free residual block: relu(skip(x) + c2(relu(c1(x))))
    /// where `c2` starts at zero and `skip` is identity or a strided 1x1.
    Residual {
        c1: Conv2d,
        c2: Conv2d,
        proj: Option<Conv2d>,
    },
    /// depthwise 3x3 + ReLU + pointwise 1x1 + ReLU
    DwSep {
        dw: DepthwiseConv2d,
        pw: Conv2d,
    },
}

/// Per-block intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub enum BlockCache {
    Conv,
    Residual { inner: Array4<f32> },
    DwSep { inner: Array4<f32> },
}

impl Block {
    pub fn out_channels(&self) -> usize {
        match self {
            Block::Conv { conv } => conv.w.dim().0,
            Block::Residual { c2, .. } => c2.w.dim().0,
            Block::DwSep { pw, .. } => pw.w.dim().0,
        }
    }

    pub fn stride(&self) -> usize {
        match self {
            Block::Conv { conv } => conv.stride,
            Block::Residual { c1, .. } => c1.stride,
            Block::DwSep { dw, .. } => dw.stride,
        }
    }

    pub fn forward(&self, x: &Array4<f32>) -> Array4<f32> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &Array4<f32>) -> (Array4<f32>, BlockCache) {
        match self {
            Block::Conv { conv } => {
                let mut y = conv.forward(x);
                relu_inplace(&mut y);
                (y, BlockCache::Conv)
            }
            Block::Residual { c1, c2, proj } => {
                let mut inner = c1.forward(x);
                relu_inplace(&mut inner);
                let mut y = c2.forward(&inner);
                match proj {
                    Some(p) => y += &p.forward(x),
                    None => y += x,
                }
                relu_inplace(&mut y);
                (y, BlockCache::Residual { inner })
            }
            Block::DwSep { dw, pw } => {
                let mut inner = dw.forward(x);
                relu_inplace(&mut inner);
                let mut y = pw.forward(&inner);
                relu_inplace(&mut y);
                (y, BlockCache::DwSep { inner })
            }
        }
    }

    /// Backward through the block. `y` is the block output, `dy` the
    /// gradient at the output. Weight gradients are skipped when
    /// `want_params` is false (input-gradient-only paths).
    pub fn backward(
        &self,
        x: &Array4<f32>,
        y: &Array4<f32>,
        cache: &BlockCache,
        mut dy: Array4<f32>,
        want_params: bool,
    ) -> (Array4<f32>, Grads) {
        relu_backward_inplace(&mut dy, y);
        match (self, cache) {
            (Block::Conv { conv }, BlockCache::Conv) => {
                if want_params {
                    conv.backward(x, &dy)
                } else {
                    (conv.backward_data(&dy, x.dim()), Grads(vec![]))
                }
            }
            (Block::Residual { c1, c2, proj }, BlockCache::Residual { inner }) => {
                // dy is the grad at the pre-relu sum
                let (mut dinner, g2) = if want_params {
                    c2.backward(inner, &dy)
                } else {
                    (c2.backward_data(&dy, inner.dim()), Grads(vec![]))
                };
                relu_backward_inplace(&mut dinner, inner);
                let (dx_main, g1) = if want_params {
                    c1.backward(x, &dinner)
                } else {
                    (c1.backward_data(&dinner, x.dim()), Grads(vec![]))
                };
                let mut dx = dx_main;
                let mut slots = Vec::new();
                match proj {
                    Some(p) => {
                        let (dx_skip, gp) = if want_params {
                            p.backward(x, &dy)
                        } else {
                            (p.backward_data(&dy, x.dim()), Grads(vec![]))
                        };
                        dx += &dx_skip;
                        slots.extend(g1.0);
                        slots.extend(g2.0);
                        slots.extend(gp.0);
                    }
                    None => {
                        dx += &dy;
                        slots.extend(g1.0);
                        slots.extend(g2.0);
                    }
                }
                (dx, Grads(slots))
            }
            (Block::DwSep { dw, pw }, BlockCache::DwSep { inner }) => {
                let (mut dinner, gpw) = if want_params {
                    pw.backward(inner, &dy)
                } else {
                    (pw.backward_data(&dy, inner.dim()), Grads(vec![]))
                };
                relu_backward_inplace(&mut dinner, inner);
                let (dx, gdw) = if want_params {
                    dw.backward(x, &dinner)
                } else {
                    (dw.backward_data(&dinner, x.dim()), Grads(vec![]))
                };
                let mut slots = gdw.0;
                slots.extend(gpw.0);
                (dx, Grads(slots))
            }
            _ => unreachable!("cache variant mismatch"),
        }
    }
}

impl Params for Block {
    fn visit_params(&self, f: &mut dyn FnMut(&[f32])) {
        match self {
            Block::Conv { conv } => conv.visit_params(f),
            Block::Residual { c1, c2, proj } => {
                c1.visit_params(f);
                c2.visit_params(f);
                if let Some(p) = proj {
                    p.visit_params(f);
                }
            }
            Block::DwSep { dw, pw } => {
                dw.visit_params(f);
                pw.visit_params(f);
            }
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f32])) {
        match self {
            Block::Conv { conv } => conv.visit_params_mut(f),
            Block::Residual { c1, c2, proj } => {
                c1.visit_params_mut(f);
                c2.visit_params_mut(f);
                if let Some(p) = proj {
                    p.visit_params_mut(f);
                }
            }
            Block::DwSep { dw, pw } => {
                dw.visit_params_mut(f);
                pw.visit_params_mut(f);
            }
        }
    }
}

/// A vanilla feed-forward classifier: N feature blocks, then global average
/// pooling and a single fully-connected head.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub arch_name: String,
    pub num_classes: usize,
    pub input_shape: (usize, usize, usize),
    pub blocks: Vec<Block>,
    pub head: Linear,
}

/// Everything the backward pass needs from one training forward pass.
pub struct BackboneCache {
    /// Post-block activations, `block_outputs[l-1]` is the output of block l.
    pub block_outputs: Vec<Array4<f32>>,
    pub block_caches: Vec<BlockCache>,
    /// Pooled features feeding the head.
    pub gap: Array2<f32>,
}

impl Backbone {
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// (C, H, W) of the output of every block for this backbone's input shape.
    pub fn feature_shapes(&self) -> Vec<(usize, usize, usize)> {
        let (_, mut h, mut w) = self.input_shape;
        let mut shapes = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let s = b.stride();
            h /= s;
            w /= s;
            shapes.push((b.out_channels(), h, w));
        }
        shapes
    }

    /// Inference pass returning logits only.
    pub fn forward_logits(&self, x: &Array4<f32>) -> Array2<f32> {
        let mut cur = x.clone();
        for b in &self.blocks {
            cur = b.forward(&cur);
        }
        self.head.forward(&global_avg_pool(&cur))
    }

    /// Inference pass keeping every block output (for multi-exit heads).
    pub fn forward_blocks(&self, x: &Array4<f32>) -> (Vec<Array4<f32>>, Array2<f32>) {
        let mut outputs = Vec::with_capacity(self.blocks.len());
        let mut cur = x.clone();
        for b in &self.blocks {
            cur = b.forward(&cur);
            outputs.push(cur.clone());
        }
        let logits = self.head.forward(&global_avg_pool(&cur));
        (outputs, logits)
    }

    /// Training forward pass with caches.
    pub fn forward_train(&self, x: &Array4<f32>) -> (BackboneCache, Array2<f32>) {
        let mut outputs = Vec::with_capacity(self.blocks.len());
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut cur = x.clone();
        for b in &self.blocks {
            let (y, c) = b.forward_cached(&cur);
            outputs.push(y.clone());
            caches.push(c);
            cur = y;
        }
        let gap = global_avg_pool(&cur);
        let logits = self.head.forward(&gap);
        (
            BackboneCache {
                block_outputs: outputs,
                block_caches: caches,
                gap,
            },
            logits,
        )
    }

    /// Full backward pass. Gradient sources can be attached at the head
    /// (`dlogits`) and/or at any block output (`dblocks[l-1]`), which is how
    /// internal classifiers feed gradients into the trunk. Returns parameter
    /// gradients in canonical order (blocks 1..N, then head) when
    /// `want_params`, and the input gradient when `want_input`.
    pub fn backward(
        &self,
        x: &Array4<f32>,
        cache: &BackboneCache,
        dlogits: Option<&Array2<f32>>,
        mut dblocks: Vec<Option<Array4<f32>>>,
        want_params: bool,
        want_input: bool,
    ) -> (Option<Grads>, Option<Array4<f32>>) {
        let n = self.blocks.len();
        assert!(dblocks.is_empty() || dblocks.len() == n, "dblocks length");
        if dblocks.is_empty() {
            dblocks = (0..n).map(|_| None).collect();
        }

        let last = &cache.block_outputs[n - 1];
        let (_, _, fh, fw) = last.dim();
        // head slots are always present (zeroed if the head got no gradient)
        // so slot counts stay canonical across gradient sources
        let mut head_grads = Grads::zeros_like(&self.head);
        let mut dcur = match dlogits {
            Some(dl) => {
                let (dgap, g) = self.head.backward(&cache.gap, dl);
                if want_params {
                    head_grads = g;
                }
                global_avg_pool_backward(&dgap, fh, fw)
            }
            None => Array4::zeros(last.dim()),
        };

        let mut per_block_rev: Vec<Grads> = Vec::with_capacity(n);
        for l in (1..=n).rev() {
            if let Some(extra) = dblocks[l - 1].take() {
                dcur += &extra;
            }
            let input = if l == 1 { x } else { &cache.block_outputs[l - 2] };
            let skip_input_grad = l == 1 && !want_input;
            if skip_input_grad {
                // still need parameter grads for block 1
                let (_, g) = self.blocks[l - 1].backward(
                    input,
                    &cache.block_outputs[l - 1],
                    &cache.block_caches[l - 1],
                    dcur.clone(),
                    want_params,
                );
                per_block_rev.push(g);
                dcur = Array4::zeros((0, 0, 0, 0));
            } else {
                let (dx, g) = self.blocks[l - 1].backward(
                    input,
                    &cache.block_outputs[l - 1],
                    &cache.block_caches[l - 1],
                    dcur,
                    want_params,
                );
                per_block_rev.push(g);
                dcur = dx;
            }
        }

        let grads = if want_params {
            let mut slots = Vec::new();
            for g in per_block_rev.into_iter().rev() {
                slots.extend(g.0);
            }
            slots.extend(head_grads.0);
            Some(Grads(slots))
        } else {
            None
        };
        let dx = if want_input { Some(dcur) } else { None };
        (grads, dx)
    }

    pub fn predict(&self, x: &Array4<f32>) -> Vec<usize> {
        argmax_rows(self.forward_logits(x).view())
    }

    pub fn param_checksum(&self) -> String {
        crate::nn::param_checksum(self)
    }
}

impl Params for Backbone {
    fn visit_params(&self, f: &mut dyn FnMut(&[f32])) {
        for b in &self.blocks {
            b.visit_params(f);
        }
        self.head.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f32])) {
        for b in &mut self.blocks {
            b.visit_params_mut(f);
        }
        self.head.visit_params_mut(f);
    }
}

/// Registered architectures. Block counts follow the residual/conv block
/// boundary convention, giving at least 8 insertion points everywhere.
pub const ARCHS: [(&str, usize); 3] = [
    ("resnet-mini", 14),
    ("vgg-mini", 10),
    ("mobilenet-mini", 12),
];

pub fn registered_archs() -> Vec<&'static str> {
    ARCHS.iter().map(|(n, _)| *n).collect()
}

pub fn arch_block_count(arch: &str) -> Result<usize> {
    ARCHS
        .iter()
        .find(|(n, _)| *n == arch)
        .map(|(_, c)| *c)
        .ok_or_else(|| Error::UnknownArch(arch.to_string()))
}

/// Build a randomly initialized backbone. Same (arch, num_classes, seed)
/// always produces bit-identical parameters.
pub fn build_backbone(arch: &str, num_classes: usize, seed: u64) -> Result<Backbone> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input_shape = (3, 32, 32);
    let blocks = match arch {
        "resnet-mini" => resnet_mini_blocks(&mut rng),
        "vgg-mini" => vgg_mini_blocks(&mut rng),
        "mobilenet-mini" => mobilenet_mini_blocks(&mut rng),
        other => return Err(Error::UnknownArch(other.to_string())),
    };
    let final_c = blocks.last().expect("non-empty").out_channels();
    let head = Linear::new(final_c, num_classes, &mut rng);
    let bb = Backbone {
        arch_name: arch.to_string(),
        num_classes,
        input_shape,
        blocks,
        head,
    };
    debug_assert_eq!(bb.num_blocks(), arch_block_count(arch)?);
    Ok(bb)
}

fn residual(c: usize, rng: &mut ChaCha8Rng) -> Block {
    Block::Residual {
        c1: Conv2d::new(c, c, 3, 1, 1, rng),
        c2: Conv2d::new_zeroed(c, c, 3, 1, 1),
        proj: None,
    }
}

fn residual_down(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Block {
    Block::Residual {
        c1: Conv2d::new(cin, cout, 3, 2, 1, rng),
        c2: Conv2d::new_zeroed(cout, cout, 3, 1, 1),
        proj: Some(Conv2d::new(cin, cout, 1, 2, 0, rng)),
    }
}

fn resnet_mini_blocks(rng: &mut ChaCha8Rng) -> Vec<Block> {
    let mut blocks = vec![Block::Conv {
        conv: Conv2d::new(3, 8, 3, 1, 1, rng),
    }];
    for _ in 0..4 {
        blocks.push(residual(8, rng));
    }
    blocks.push(residual_down(8, 16, rng));
    for _ in 0..3 {
        blocks.push(residual(16, rng));
    }
    blocks.push(residual_down(16, 32, rng));
    for _ in 0..4 {
        blocks.push(residual(32, rng));
    }
    blocks
}

fn vgg_mini_blocks(rng: &mut ChaCha8Rng) -> Vec<Block> {
    let plan: [(usize, usize, usize); 10] = [
        (3, 8, 1),
        (8, 8, 1),
        (8, 16, 2),
        (16, 16, 1),
        (16, 24, 2),
        (24, 24, 1),
        (24, 32, 2),
        (32, 32, 1),
        (32, 32, 1),
        (32, 32, 1),
    ];
    plan.iter()
        .map(|&(cin, cout, s)| Block::Conv {
            conv: Conv2d::new(cin, cout, 3, s, 1, rng),
        })
        .collect()
}

fn mobilenet_mini_blocks(rng: &mut ChaCha8Rng) -> Vec<Block> {
    let mut blocks = vec![Block::Conv {
        conv: Conv2d::new(3, 8, 3, 1, 1, rng),
    }];
    let plan: [(usize, usize, usize); 11] = [
        (8, 8, 1),
        (8, 16, 2),
        (16, 16, 1),
        (16, 16, 1),
        (16, 32, 2),
        (32, 32, 1),
        (32, 32, 1),
        (32, 32, 1),
        (32, 32, 2),
        (32, 32, 1),
        (32, 32, 1),
    ];
    for &(cin, cout, s) in &plan {
        blocks.push(Block::DwSep {
            dw: DepthwiseConv2d::new(cin, 3, s, 1, rng),
            pw: Conv2d::new(cin, cout, 1, 1, 0, rng),
        });
    }
    blocks
}

/// Attacker IC budget: n = floor(p * N) for an exit-layer ratio p in (0, 1).
pub fn num_attack_ics(n_layers: usize, p: f64) -> Result<usize> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::out_of_range("exit-layer ratio p", "(0, 1)", p));
    }
    if n_layers == 0 {
        return Err(Error::out_of_range("layer count N", "[1, inf)", 0.0));
    }
    Ok(((p * n_layers as f64) + 1e-9).floor() as usize)
}

/// Backbone training hyper-parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSpec {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            epochs: 5,
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::out_of_range("epochs", "[1, inf)", self.epochs as f64));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::out_of_range(
                "learning_rate",
                "(0, inf)",
                self.learning_rate,
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::out_of_range("momentum", "[0, 1)", self.momentum));
        }
        if self.batch_size < 1 {
            return Err(Error::out_of_range("batch_size", "[1, inf)", 0.0));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Deterministic epoch shuffling + batching helper shared by training loops.
pub fn shuffled_batches(
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64));
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Gather one batch as an owned (images, labels) pair.
pub fn gather_batch(data: &LabeledImageSet, idx: &[usize]) -> (Array4<f32>, Vec<usize>) {
    let (c, h, w) = data.image_shape();
    let mut images = Array4::zeros((idx.len(), c, h, w));
    let mut labels = Vec::with_capacity(idx.len());
    for (dst, &src) in idx.iter().enumerate() {
        images
            .index_axis_mut(Axis(0), dst)
            .assign(&data.image(src));
        labels.push(data.labels()[src]);
    }
    (images, labels)
}

/// Global gradient-norm ceiling used by every backbone-updating loop.
/// The desk-scale nets carry no normalization layers, so a single spike
/// can cascade into dead ReLUs; clipping keeps SGD stable.
pub const GRAD_CLIP: f64 = 2.0;

/// Supervised training with SGD + momentum. Returns the trained model and
/// per-epoch loss/accuracy history.
pub fn train_backbone(
    mut model: Backbone,
    data: &LabeledImageSet,
    spec: &TrainSpec,
) -> Result<(Backbone, Vec<EpochStats>)> {
    spec.validate()?;
    if data.num_classes() != model.num_classes {
        return Err(Error::ClassMismatch {
            model: model.num_classes,
            data: data.num_classes(),
        });
    }
    if data.is_empty() {
        return Err(Error::InsufficientData { need: 1, got: 0 });
    }
    let mut opt = Sgd::new(spec.learning_rate as f32, spec.momentum as f32, &model);
    let mut history = Vec::with_capacity(spec.epochs);
    for epoch in 0..spec.epochs {
        let mut loss_sum = 0f64;
        let mut correct = 0usize;
        for batch in shuffled_batches(data.len(), spec.batch_size, spec.seed, epoch) {
            let (images, labels) = gather_batch(data, &batch);
            let (cache, logits) = model.forward_train(&images);
            let (loss, dlogits) = cross_entropy_mean(logits.view(), &labels);
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            loss_sum += loss * batch.len() as f64;
            correct += argmax_rows(logits.view())
                .iter()
                .zip(labels.iter())
                .filter(|(p, y)| p == y)
                .count();
            let (grads, _) =
                model.backward(&images, &cache, Some(&dlogits), Vec::new(), true, false);
            let mut grads = grads.expect("param grads requested");
            grads.clip_global_norm(GRAD_CLIP);
            opt.step(&mut model, &grads);
        }
        history.push(EpochStats {
            epoch: epoch + 1,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        });
    }
    Ok((model, history))
}
