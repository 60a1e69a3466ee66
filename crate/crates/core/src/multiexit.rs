//! Multi-exit (shallow-deep) models: internal classifiers attached at block
//! boundaries, confidence-threshold early-exit inference, and the edge/cloud
//! partition view.

use crate::error::{Error, Result};
use crate::models::{Backbone, Block};
use crate::nn::ops::{avg_pool_backward, avg_pool_to, softmax};
use crate::nn::{Adam, Grads, Linear, Params};
use ndarray::{Array2, Array3, Array4, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Spatial grid the IC reducer pools down to before its single FC layer.
pub const IC_POOL: usize = 4;

/// One internal classifier: average-pool the block's feature map to a 4x4
/// grid, flatten, and apply a single fully-connected layer.
#[derive(Debug, Clone)]
pub struct InternalClassifier {
    /// Block index (1-based) whose output this IC reads.
    pub location: usize,
    pub fc: Linear,
}

impl InternalClassifier {
    pub fn new(location: usize, feature_channels: usize, num_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        InternalClassifier {
            location,
            fc: Linear::new(feature_channels * IC_POOL * IC_POOL, num_classes, rng),
        }
    }

    /// Pool + flatten the feature map this IC reads.
    pub fn reduce(&self, feat: &Array4<f32>) -> Array2<f32> {
        let (b, c, _, _) = feat.dim();
        let pooled = avg_pool_to(feat, IC_POOL);
        pooled
            .into_shape_with_order((b, c * IC_POOL * IC_POOL))
            .expect("contiguous pooled features")
    }

    pub fn logits(&self, feat: &Array4<f32>) -> Array2<f32> {
        self.fc.forward(&self.reduce(feat))
    }

    /// Gradient of this IC's logits pushed back onto its feature map.
    pub fn backward_to_feature(
        &self,
        feat_dim: (usize, usize, usize, usize),
        dlogits: &Array2<f32>,
    ) -> Array4<f32> {
        let (b, c, h, w) = feat_dim;
        let dflat = self.fc.backward_data(dlogits);
        let dpooled = dflat
            .into_shape_with_order((b, c, IC_POOL, IC_POOL))
            .expect("contiguous pooled grad");
        avg_pool_backward(&dpooled, h, w)
    }
}

impl Params for InternalClassifier {
    fn visit_params(&self, f: &mut dyn FnMut(&[f32])) {
        self.fc.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f32])) {
        self.fc.visit_params_mut(f);
    }
}

impl Params for Vec<InternalClassifier> {
    fn visit_params(&self, f: &mut dyn FnMut(&[f32])) {
        for ic in self {
            ic.visit_params(f);
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f32])) {
        for ic in self {
            ic.visit_params_mut(f);
        }
    }
}

/// Early-exit rule: take the first IC (ascending location) whose max
/// softmax probability strictly exceeds the threshold. `Disabled` forces
/// the final head. A threshold of 1.0 also cleanly disables early exits
/// even under float saturation, because the comparison is strict.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ExitPolicy {
    Disabled,
    Threshold(f64),
}

impl ExitPolicy {
    pub fn validate(&self) -> Result<()> {
        if let ExitPolicy::Threshold(t) = self {
            if !(0.0..=1.0).contains(t) {
                return Err(Error::out_of_range("exit threshold", "[0, 1]", *t));
            }
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        match self {
            ExitPolicy::Disabled => "disabled".to_string(),
            ExitPolicy::Threshold(t) => format!("tau={t}"),
        }
    }
}

/// A backbone with internal classifiers attached at strictly increasing
/// block locations.
#[derive(Debug, Clone)]
pub struct MultiExitModel {
    pub backbone: Backbone,
    pub ics: Vec<InternalClassifier>,
}

impl MultiExitModel {
    pub fn ic_locations(&self) -> Vec<usize> {
        self.ics.iter().map(|ic| ic.location).collect()
    }

    pub fn ic_at(&self, location: usize) -> Option<&InternalClassifier> {
        self.ics.iter().find(|ic| ic.location == location)
    }

    /// Sentinel exit index meaning "final head": N + 1.
    pub fn final_exit_index(&self) -> usize {
        self.backbone.num_blocks() + 1
    }

    pub fn ic_param_checksum(&self) -> String {
        crate::nn::param_checksum(&self.ics)
    }
}

/// Attach freshly initialized ICs at the given ascending block locations.
/// Backbone parameters are not touched.
pub fn attach_ics(backbone: Backbone, locations: &[usize], seed: u64) -> Result<MultiExitModel> {
    let n = backbone.num_blocks();
    if locations.is_empty() {
        return Err(Error::InvalidLocations("empty location list".into()));
    }
    for pair in locations.windows(2) {
        if pair[1] <= pair[0] {
            return Err(Error::InvalidLocations(format!(
                "locations must be strictly increasing, got {} then {}",
                pair[0], pair[1]
            )));
        }
    }
    if locations[0] < 1 || *locations.last().unwrap() > n {
        return Err(Error::InvalidLocations(format!(
            "locations must lie in 1..={n}"
        )));
    }
    let shapes = backbone.feature_shapes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ics = locations
        .iter()
        .map(|&loc| {
            let (c, _, _) = shapes[loc - 1];
            InternalClassifier::new(loc, c, backbone.num_classes, &mut rng)
        })
        .collect();
    Ok(MultiExitModel { backbone, ics })
}

/// Train only the IC parameters (Adam), leaving the backbone bit-identical.
/// Returns the model and the per-epoch IC loss (sum over exits of the
/// per-sample mean cross-entropy).
///
/// The backbone is frozen, so each image's reduced features are constant
/// across epochs; they are computed once and cached, which makes training
/// the ICs to convergence cheap.
pub fn train_ics(
    model: MultiExitModel,
    data: &crate::data::LabeledImageSet,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<(MultiExitModel, Vec<f64>)> {
    train_ics_wd(model, data, epochs, lr, batch_size, seed, IC_WEIGHT_DECAY)
}

/// Default L2 penalty for IC training. Ridge-regularized probes have a
/// unique optimum, so independently trained ICs on same-distribution data
/// land on nearly the same classifier, and confidences cannot saturate by
/// unbounded weight growth.
pub const IC_WEIGHT_DECAY: f64 = 5e-4;

/// `train_ics` with an explicit weight-decay coefficient.
pub fn train_ics_wd(
    mut model: MultiExitModel,
    data: &crate::data::LabeledImageSet,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
    weight_decay: f64,
) -> Result<(MultiExitModel, Vec<f64>)> {
    if data.num_classes() != model.backbone.num_classes {
        return Err(Error::ClassMismatch {
            model: model.backbone.num_classes,
            data: data.num_classes(),
        });
    }
    if lr <= 0.0 {
        return Err(Error::out_of_range("ic learning rate", "(0, inf)", lr));
    }
    if epochs == 0 {
        return Ok((model, Vec::new()));
    }

    // one frozen-backbone pass: cache reduced features per IC
    let mut features: Vec<Array2<f32>> = model
        .ics
        .iter()
        .map(|ic| Array2::zeros((data.len(), ic.fc.in_dim())))
        .collect();
    let mut start = 0;
    let fwd_batch = 64usize;
    while start < data.len() {
        let end = (start + fwd_batch).min(data.len());
        let idx: Vec<usize> = (start..end).collect();
        let (images, _) = crate::models::gather_batch(data, &idx);
        let (outputs, _) = model.backbone.forward_blocks(&images);
        for (fi, ic) in model.ics.iter().enumerate() {
            let flat = ic.reduce(&outputs[ic.location - 1]);
            features[fi]
                .slice_mut(ndarray::s![start..end, ..])
                .assign(&flat);
        }
        start = end;
    }

    let mut opt = Adam::new(lr as f32, &model.ics);
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut loss_sum = 0f64;
        for batch in crate::models::shuffled_batches(data.len(), batch_size, seed, epoch) {
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels()[i]).collect();
            let mut slots: Vec<Vec<f32>> = Vec::new();
            let mut batch_loss = 0f64;
            for (fi, ic) in model.ics.iter().enumerate() {
                let mut flat = Array2::zeros((batch.len(), ic.fc.in_dim()));
                for (dst, &src) in batch.iter().enumerate() {
                    flat.row_mut(dst).assign(&features[fi].row(src));
                }
                let logits = ic.fc.forward(&flat);
                let (loss, dlogits) =
                    crate::nn::ops::cross_entropy_mean(logits.view(), &labels);
                batch_loss += loss;
                let (_, mut g) = ic.fc.backward(&flat, &dlogits);
                if weight_decay > 0.0 {
                    let wd = weight_decay as f32;
                    let wslice = ic.fc.w.as_slice().expect("standard layout");
                    for (gv, wv) in g.0[0].iter_mut().zip(wslice.iter()) {
                        *gv += wd * wv;
                    }
                }
                slots.extend(g.0);
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    loss: batch_loss,
                });
            }
            loss_sum += batch_loss * batch.len() as f64;
            opt.step(&mut model.ics, &Grads(slots));
        }
        history.push(loss_sum / data.len() as f64);
    }
    Ok((model, history))
}

/// Remove all ICs, leaving the backbone with its current parameters.
pub fn strip_ics(model: MultiExitModel) -> Backbone {
    model.backbone
}

/// The early-exit decision for one sample given per-exit probabilities.
fn decide_exit(
    per_exit: &[(usize, f32, usize)], // (exit_index, confidence, label) for ICs in order
    final_conf: f32,
    final_label: usize,
    final_exit: usize,
    policy: ExitPolicy,
) -> (usize, usize, f32) {
    if let ExitPolicy::Threshold(tau) = policy {
        for &(exit, conf, label) in per_exit {
            if conf as f64 > tau {
                return (label, exit, conf);
            }
        }
    }
    (final_label, final_exit, final_conf)
}

/// Early-exit inference over a batch; returns (label, exit_index,
/// confidence) per sample. `exit_index` is the IC's block location, or
/// N + 1 when the sample reached the final head.
pub fn predict_early_exit_batch(
    model: &MultiExitModel,
    images: &Array4<f32>,
    policy: ExitPolicy,
) -> Result<Vec<(usize, usize, f32)>> {
    Ok(predict_with_logits(model, images, policy)?.0)
}

/// As `predict_early_exit_batch`, but also returns each sample's logits at
/// the exit that was taken (used for top-k ranking).
pub fn predict_with_logits(
    model: &MultiExitModel,
    images: &Array4<f32>,
    policy: ExitPolicy,
) -> Result<(Vec<(usize, usize, f32)>, Array2<f32>)> {
    policy.validate()?;
    let (b, c, h, w) = images.dim();
    let (ec, eh, ew) = (
        model.backbone.input_shape.0,
        model.backbone.input_shape.1,
        model.backbone.input_shape.2,
    );
    if (c, h, w) != (ec, eh, ew) {
        return Err(Error::shape_mismatch(
            format!("{:?}", (ec, eh, ew)),
            format!("{:?}", (c, h, w)),
        ));
    }
    let (outputs, final_logits) = model.backbone.forward_blocks(images);
    let final_probs = softmax(final_logits.view());
    let mut ic_logits: Vec<Array2<f32>> = Vec::with_capacity(model.ics.len());
    let mut ic_probs: Vec<Array2<f32>> = Vec::with_capacity(model.ics.len());
    for ic in &model.ics {
        let logits = ic.logits(&outputs[ic.location - 1]);
        ic_probs.push(softmax(logits.view()));
        ic_logits.push(logits);
    }
    let final_exit = model.final_exit_index();
    let k = model.backbone.num_classes;
    let mut results = Vec::with_capacity(b);
    let mut taken_logits = Array2::zeros((b, k));
    for i in 0..b {
        let exits: Vec<(usize, f32, usize)> = model
            .ics
            .iter()
            .zip(ic_probs.iter())
            .map(|(ic, probs)| {
                let row = probs.index_axis(Axis(0), i);
                let (label, conf) = max_prob(row.as_slice().unwrap());
                (ic.location, conf, label)
            })
            .collect();
        let frow = final_probs.index_axis(Axis(0), i);
        let (flabel, fconf) = max_prob(frow.as_slice().unwrap());
        let decision = decide_exit(&exits, fconf, flabel, final_exit, policy);
        let row_src = if decision.1 == final_exit {
            final_logits.index_axis(Axis(0), i)
        } else {
            let ic_idx = model
                .ics
                .iter()
                .position(|ic| ic.location == decision.1)
                .expect("taken exit exists");
            ic_logits[ic_idx].index_axis(Axis(0), i)
        };
        taken_logits.index_axis_mut(Axis(0), i).assign(&row_src);
        results.push(decision);
    }
    Ok((results, taken_logits))
}

/// Single-image early-exit inference.
pub fn predict_early_exit(
    model: &MultiExitModel,
    x: ArrayView3<f32>,
    policy: ExitPolicy,
) -> Result<(usize, usize, f32)> {
    let batch = x.to_owned().insert_axis(Axis(0));
    Ok(predict_early_exit_batch(model, &batch, policy)?[0])
}

fn max_prob(p: &[f32]) -> (usize, f32) {
    let mut best = 0;
    let mut best_v = f32::NEG_INFINITY;
    for (i, &v) in p.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    (best, best_v)
}

/// Pick the largest threshold for which at least `early_fraction` of the
/// given samples exit at some IC. The per-sample statistic is the maximum
/// IC confidence over all exits.
pub fn calibrate_threshold(
    model: &MultiExitModel,
    data: &crate::data::LabeledImageSet,
    early_fraction: f64,
) -> Result<f64> {
    if model.ics.is_empty() || data.is_empty() {
        return Err(Error::InsufficientData { need: 1, got: 0 });
    }
    let (outputs, _) = model.backbone.forward_blocks(data.images());
    let mut max_conf = vec![0f32; data.len()];
    for ic in &model.ics {
        let probs = softmax(ic.logits(&outputs[ic.location - 1]).view());
        for (i, row) in probs.axis_iter(Axis(0)).enumerate() {
            let (_, conf) = max_prob(row.as_slice().unwrap());
            if conf > max_conf[i] {
                max_conf[i] = conf;
            }
        }
    }
    let mut sorted = max_conf.clone();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let need = ((early_fraction * data.len() as f64).ceil() as usize)
        .clamp(1, data.len());
    let tau = (sorted[need - 1] as f64 - 1e-6).clamp(0.0, 1.0);
    Ok(tau)
}

/// Edge-resident part of a partitioned multi-exit model: blocks 1..=cut and
/// every IC located at or before the cut.
#[derive(Debug, Clone)]
pub struct EdgePart {
    pub blocks: Vec<Block>,
    pub ics: Vec<InternalClassifier>,
    pub cut: usize,
}

/// Cloud-resident remainder: blocks cut+1..=N, later ICs, and the head.
#[derive(Debug, Clone)]
pub struct CloudPart {
    pub blocks: Vec<Block>,
    pub ics: Vec<InternalClassifier>,
    pub head: Linear,
    pub cut: usize,
    pub total_blocks: usize,
}

/// Outcome of running the edge part on one sample.
#[derive(Debug, Clone)]
pub enum EdgeOutcome {
    /// The sample exited on the edge.
    Exit {
        label: usize,
        exit_index: usize,
        confidence: f32,
    },
    /// The sample's activation must be forwarded to the cloud.
    Forward { activation: Array3<f32> },
}

impl EdgePart {
    pub fn run(&self, x: ArrayView3<f32>, policy: ExitPolicy) -> EdgeOutcome {
        let mut cur = x.to_owned().insert_axis(Axis(0));
        let mut ic_iter = self.ics.iter().peekable();
        for (bi, block) in self.blocks.iter().enumerate() {
            cur = block.forward(&cur);
            let loc = bi + 1;
            while let Some(ic) = ic_iter.peek() {
                if ic.location != loc {
                    break;
                }
                let probs = softmax(ic.logits(&cur).view());
                let row = probs.index_axis(Axis(0), 0);
                let (label, conf) = max_prob(row.as_slice().unwrap());
                if let ExitPolicy::Threshold(tau) = policy {
                    if conf as f64 > tau {
                        return EdgeOutcome::Exit {
                            label,
                            exit_index: loc,
                            confidence: conf,
                        };
                    }
                }
                ic_iter.next();
            }
        }
        EdgeOutcome::Forward {
            activation: cur.remove_axis(Axis(0)),
        }
    }
}

impl CloudPart {
    pub fn run(&self, activation: Array3<f32>, policy: ExitPolicy) -> (usize, usize, f32) {
        let mut cur = activation.insert_axis(Axis(0));
        let mut ic_iter = self.ics.iter().peekable();
        for (bi, block) in self.blocks.iter().enumerate() {
            cur = block.forward(&cur);
            let loc = self.cut + bi + 1;
            while let Some(ic) = ic_iter.peek() {
                if ic.location != loc {
                    break;
                }
                let probs = softmax(ic.logits(&cur).view());
                let row = probs.index_axis(Axis(0), 0);
                let (label, conf) = max_prob(row.as_slice().unwrap());
                if let ExitPolicy::Threshold(tau) = policy {
                    if conf as f64 > tau {
                        return (label, loc, conf);
                    }
                }
                ic_iter.next();
            }
        }
        let logits = self
            .head
            .forward(&crate::nn::ops::global_avg_pool(&cur));
        let row = logits.index_axis(Axis(0), 0);
        let probs = softmax(row.insert_axis(Axis(0)));
        let prow = probs.index_axis(Axis(0), 0);
        let (label, conf) = max_prob(prow.as_slice().unwrap());
        (label, self.total_blocks + 1, conf)
    }
}

/// Split a multi-exit model after block `cut`. At least one IC must sit at
/// or before the cut, otherwise the edge side would never exit anything.
pub fn partition(model: &MultiExitModel, cut: usize) -> Result<(EdgePart, CloudPart)> {
    let n = model.backbone.num_blocks();
    if cut < 1 || cut > n {
        return Err(Error::InvalidLocations(format!("cut must lie in 1..={n}")));
    }
    if !model.ics.iter().any(|ic| ic.location <= cut) {
        return Err(Error::CutWithoutIc { cut });
    }
    let edge = EdgePart {
        blocks: model.backbone.blocks[..cut].to_vec(),
        ics: model
            .ics
            .iter()
            .filter(|ic| ic.location <= cut)
            .cloned()
            .collect(),
        cut,
    };
    let cloud = CloudPart {
        blocks: model.backbone.blocks[cut..].to_vec(),
        ics: model
            .ics
            .iter()
            .filter(|ic| ic.location > cut)
            .cloned()
            .collect(),
        head: model.backbone.head.clone(),
        cut,
        total_blocks: n,
    };
    Ok((edge, cloud))
}

/// Run a partitioned model end to end on one sample; behaviourally
/// identical to `predict_early_exit` on the unpartitioned model.
pub fn run_partitioned(
    edge: &EdgePart,
    cloud: &CloudPart,
    x: ArrayView3<f32>,
    policy: ExitPolicy,
) -> (usize, usize, f32) {
    match edge.run(x, policy) {
        EdgeOutcome::Exit {
            label,
            exit_index,
            confidence,
        } => (label, exit_index, confidence),
        EdgeOutcome::Forward { activation } => cloud.run(activation, policy),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_dataset_with, DatasetRegistry, Split};
    use crate::models::build_backbone;
    use crate::nn::param_checksum;
    use rand::Rng;

    fn toy_model(seed: u64) -> MultiExitModel {
        let bb = build_backbone("vgg-mini", 4, seed).unwrap();
        attach_ics(bb, &[2, 4, 6, 8], seed + 1).unwrap()
    }

    fn random_images(n: usize, seed: u64) -> Array4<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((n, 3, 32, 32), |_| rng.gen_range(0.0..=1.0f32))
    }

    #[test]
    fn attach_validates_locations() {
        let bb = build_backbone("vgg-mini", 4, 1).unwrap();
        assert!(attach_ics(bb.clone(), &[], 0).is_err());
        assert!(attach_ics(bb.clone(), &[3, 3, 5], 0).is_err());
        assert!(attach_ics(bb.clone(), &[5, 3], 0).is_err());
        assert!(attach_ics(bb.clone(), &[0, 2], 0).is_err());
        assert!(attach_ics(bb.clone(), &[2, 11], 0).is_err());
        let m = attach_ics(bb, &(1..=8).collect::<Vec<_>>(), 0).unwrap();
        assert_eq!(m.ics.len(), 8); // n = floor(0.8 * 10)
    }

    #[test]
    fn attach_leaves_backbone_untouched_and_is_seed_deterministic() {
        let bb = build_backbone("vgg-mini", 4, 1).unwrap();
        let before = param_checksum(&bb);
        let m1 = attach_ics(bb.clone(), &[2, 5], 9).unwrap();
        let m2 = attach_ics(bb, &[2, 5], 9).unwrap();
        assert_eq!(param_checksum(&m1.backbone), before);
        assert_eq!(m1.ic_param_checksum(), m2.ic_param_checksum());
    }

    #[test]
    fn strip_round_trip_preserves_backbone() {
        let bb = build_backbone("vgg-mini", 4, 1).unwrap();
        let before = param_checksum(&bb);
        let m = attach_ics(bb, &[1, 3], 2).unwrap();
        let back = strip_ics(m);
        assert_eq!(param_checksum(&back), before);
    }

    #[test]
    fn disabled_policy_matches_vanilla_prediction() {
        let m = toy_model(3);
        let images = random_images(32, 5);
        let vanilla = m.backbone.predict(&images);
        let results = predict_early_exit_batch(&m, &images, ExitPolicy::Disabled).unwrap();
        let final_exit = m.final_exit_index();
        for (r, v) in results.iter().zip(vanilla.iter()) {
            assert_eq!(r.0, *v);
            assert_eq!(r.1, final_exit);
        }
    }

    #[test]
    fn zero_threshold_always_exits_at_first_ic() {
        let m = toy_model(4);
        let images = random_images(8, 6);
        for (_, exit, _) in
            predict_early_exit_batch(&m, &images, ExitPolicy::Threshold(0.0)).unwrap()
        {
            assert_eq!(exit, 2); // first IC location
        }
    }

    #[test]
    fn threshold_one_never_exits_early() {
        let m = toy_model(4);
        let images = random_images(8, 6);
        let final_exit = m.final_exit_index();
        for (_, exit, _) in
            predict_early_exit_batch(&m, &images, ExitPolicy::Threshold(1.0)).unwrap()
        {
            assert_eq!(exit, final_exit);
        }
    }

    #[test]
    fn exit_index_is_monotone_in_threshold() {
        let m = toy_model(7);
        let images = random_images(16, 8);
        let grid: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
        let mut prev: Option<Vec<usize>> = None;
        for tau in grid {
            let exits: Vec<usize> =
                predict_early_exit_batch(&m, &images, ExitPolicy::Threshold(tau))
                    .unwrap()
                    .iter()
                    .map(|r| r.1)
                    .collect();
            if let Some(p) = prev {
                for (a, b) in p.iter().zip(exits.iter()) {
                    assert!(b >= a, "exit index decreased as tau increased");
                }
            }
            prev = Some(exits);
        }
    }

    #[test]
    fn ic_training_freezes_backbone_and_reduces_loss() {
        let dir = tempfile::tempdir().unwrap();
        let reg = DatasetRegistry::builtin();
        let data = load_dataset_with(&reg, "synth2", Split::Train, dir.path()).unwrap();
        let bb = build_backbone("vgg-mini", 2, 11).unwrap();
        // pre-train the backbone a little so features carry signal
        let (bb, _) = crate::models::train_backbone(
            bb,
            &data,
            &crate::models::TrainSpec {
                epochs: 2,
                learning_rate: 0.01,
                momentum: 0.9,
                batch_size: 32,
                seed: 1,
            },
        )
        .unwrap();
        let backbone_sum = param_checksum(&bb);
        let m = attach_ics(bb, &[2, 4, 6], 3).unwrap();
        let (m, losses) = train_ics(m, &data, 10, 3e-3, 32, 5).unwrap();
        assert_eq!(param_checksum(&m.backbone), backbone_sum, "backbone moved");
        assert!(
            losses.last().unwrap() < losses.first().unwrap(),
            "IC loss did not decrease: {losses:?}"
        );
        // every IC reaches good accuracy on the separable task
        let (outputs, _) = m.backbone.forward_blocks(data.images());
        for ic in &m.ics {
            let logits = ic.logits(&outputs[ic.location - 1]);
            let preds = crate::nn::ops::argmax_rows(logits.view());
            let acc = preds
                .iter()
                .zip(data.labels())
                .filter(|(p, y)| p == y)
                .count() as f64
                / data.len() as f64;
            assert!(acc >= 0.9, "IC at {} only reached {acc}", ic.location);
        }
    }

    #[test]
    fn zero_epoch_training_changes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let reg = DatasetRegistry::builtin();
        let data = load_dataset_with(&reg, "synth2", Split::Train, dir.path()).unwrap();
        let bb = build_backbone("vgg-mini", 2, 1).unwrap();
        let m = attach_ics(bb, &[2, 4], 3).unwrap();
        let ic_sum = m.ic_param_checksum();
        let bb_sum = param_checksum(&m.backbone);
        let (m, losses) = train_ics(m, &data, 0, 1e-3, 32, 5).unwrap();
        assert!(losses.is_empty());
        assert_eq!(m.ic_param_checksum(), ic_sum);
        assert_eq!(param_checksum(&m.backbone), bb_sum);
    }

    #[test]
    fn partition_requires_an_edge_side_ic() {
        let m = toy_model(2);
        assert!(partition(&m, 1).is_err()); // first IC sits at block 2
        assert!(partition(&m, 0).is_err());
        assert!(partition(&m, 99).is_err());
        assert!(partition(&m, 2).is_ok());
    }

    #[test]
    fn partition_composition_equals_monolithic_inference() {
        let m = toy_model(6);
        let images = random_images(100, 13);
        for cut in [2, 5, 10] {
            let (edge, cloud) = partition(&m, cut).unwrap();
            if cut == 10 {
                assert!(cloud.blocks.is_empty(), "cut at N leaves only the head");
            }
            for tau in [ExitPolicy::Threshold(0.3), ExitPolicy::Threshold(0.6)] {
                let whole = predict_early_exit_batch(&m, &images, tau).unwrap();
                for (i, expected) in whole.iter().enumerate() {
                    let got = run_partitioned(&edge, &cloud, images.index_axis(Axis(0), i), tau);
                    assert_eq!(got.0, expected.0, "label mismatch at cut {cut}");
                    assert_eq!(got.1, expected.1, "exit mismatch at cut {cut}");
                }
            }
        }
    }

    #[test]
    fn calibrated_threshold_hits_early_fraction() {
        let dir = tempfile::tempdir().unwrap();
        let reg = DatasetRegistry::builtin();
        let data = load_dataset_with(&reg, "synth2", Split::Train, dir.path()).unwrap();
        let bb = build_backbone("vgg-mini", 2, 17).unwrap();
        let (bb, _) = crate::models::train_backbone(
            bb,
            &data,
            &crate::models::TrainSpec {
                epochs: 2,
                learning_rate: 0.01,
                momentum: 0.9,
                batch_size: 32,
                seed: 1,
            },
        )
        .unwrap();
        let m = attach_ics(bb, &[2, 4, 6], 3).unwrap();
        let (m, _) = train_ics(m, &data, 8, 3e-3, 32, 5).unwrap();
        let tau = calibrate_threshold(&m, &data, 0.5).unwrap();
        let results =
            predict_early_exit_batch(&m, data.images(), ExitPolicy::Threshold(tau)).unwrap();
        let final_exit = m.final_exit_index();
        let early = results.iter().filter(|r| r.1 != final_exit).count();
        assert!(
            early as f64 / data.len() as f64 >= 0.5,
            "only {early}/{} exited early at tau={tau}",
            data.len()
        );
    }
}
