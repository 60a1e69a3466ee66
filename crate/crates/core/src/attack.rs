//! Deployment-stage backdoor injection for multi-exit conversions.
//!
//! The attacker turns a clean backbone into a surrogate multi-exit model,
//! trains the surrogate ICs on clean data, then freezes them and optimizes
//! the backbone so that (a) every surrogate exit maps triggered inputs to
//! the target label and (b) the final head stays accurate on clean data.
//! Stripping the ICs afterwards yields a vanilla model whose backdoor is
//! dormant until someone re-attaches exits.
//!
//! A classic data-poisoning baseline is included as the positive control
//! for the defense bench.

use crate::data::{poison_dataset, LabeledImageSet};
use crate::error::{Error, Result};
use crate::models::{
    gather_batch, num_attack_ics, shuffled_batches, train_backbone, Backbone, TrainSpec,
};
use crate::multiexit::{attach_ics, strip_ics, train_ics, MultiExitModel};
use crate::nn::ops::cross_entropy_mean;
use crate::nn::{Adam, Grads, Params};
use crate::trigger::TriggerSpec;
use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

/// Every attacker hyper-parameter of the injection workflow.
#[derive(Debug, Clone)]
pub struct AttackConfig {
    /// Exit-layer ratio p in (0, 1); the attacker uses n = floor(p * N) ICs.
    pub exit_layer_ratio: f64,
    /// Stealth weight lambda >= 0.
    pub lambda: f64,
    pub ic_epochs: usize,
    pub ic_lr: f64,
    /// L2 penalty for surrogate-IC training. Strong decay keeps probe
    /// weights aligned with class-centroid contrasts, which is what makes
    /// the injected shortcut carry over to independently trained ICs.
    pub ic_weight_decay: f64,
    pub inject_epochs: usize,
    pub inject_lr: f64,
    pub target_label: usize,
    /// Fraction of the attacker set stamped + relabeled when building the
    /// poisoned copy.
    pub poison_fraction: f64,
    pub trigger: TriggerSpec,
    pub batch_size: usize,
    pub seed: u64,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.exit_layer_ratio > 0.0 && self.exit_layer_ratio < 1.0) {
            return Err(Error::out_of_range(
                "exit_layer_ratio",
                "(0, 1)",
                self.exit_layer_ratio,
            ));
        }
        if self.lambda < 0.0 {
            return Err(Error::out_of_range("lambda", "[0, inf)", self.lambda));
        }
        if self.ic_epochs < 1 || self.inject_epochs < 1 {
            return Err(Error::out_of_range("epochs", "[1, inf)", 0.0));
        }
        if self.ic_lr <= 0.0 || self.inject_lr <= 0.0 {
            return Err(Error::out_of_range("learning rate", "(0, inf)", 0.0));
        }
        if !(self.poison_fraction > 0.0 && self.poison_fraction <= 1.0) {
            return Err(Error::out_of_range(
                "poison_fraction",
                "(0, 1]",
                self.poison_fraction,
            ));
        }
        if self.batch_size < 1 {
            return Err(Error::out_of_range("batch_size", "[1, inf)", 0.0));
        }
        Ok(())
    }
}

/// Cross-entropy of every attacker exit (locations 1..=floor(p*N)) against
/// the given labels: per-exit mean over the batch, summed over exits.
/// The model must carry an IC at every summed location.
pub fn backdoor_loss(
    model: &MultiExitModel,
    images: &Array4<f32>,
    labels: &[usize],
    p: f64,
) -> Result<f64> {
    let n_b = num_attack_ics(model.backbone.num_blocks(), p)?;
    let (outputs, _) = model.backbone.forward_blocks(images);
    let mut total = 0f64;
    for loc in 1..=n_b {
        let ic = model.ic_at(loc).ok_or(Error::MissingIc(loc))?;
        let logits = ic.logits(&outputs[loc - 1]);
        total += crate::nn::ops::cross_entropy_value(logits.view(), labels);
    }
    Ok(total)
}

/// Clean cross-entropy of everything past the attacker's exit range: ICs
/// located beyond floor(p*N) (if any) plus the final head.
pub fn stealth_loss(
    model: &MultiExitModel,
    images: &Array4<f32>,
    labels: &[usize],
    p: f64,
) -> Result<f64> {
    let n_b = num_attack_ics(model.backbone.num_blocks(), p)?;
    let (outputs, final_logits) = model.backbone.forward_blocks(images);
    let mut total = 0f64;
    for ic in &model.ics {
        if ic.location > n_b {
            let logits = ic.logits(&outputs[ic.location - 1]);
            total += crate::nn::ops::cross_entropy_value(logits.view(), labels);
        }
    }
    total += crate::nn::ops::cross_entropy_value(final_logits.view(), labels);
    Ok(total)
}

/// Combined injection objective: backdoor loss on the poisoned batch plus
/// lambda times the stealth loss on the clean batch.
pub fn combined_loss(
    model: &MultiExitModel,
    poisoned: (&Array4<f32>, &[usize]),
    clean: (&Array4<f32>, &[usize]),
    config: &AttackConfig,
) -> Result<f64> {
    let lb = backdoor_loss(model, poisoned.0, poisoned.1, config.exit_layer_ratio)?;
    let ls = stealth_loss(model, clean.0, clean.1, config.exit_layer_ratio)?;
    Ok(lb + config.lambda * ls)
}

/// Backbone gradients of `backdoor_loss` (ICs stay frozen: their gradients
/// are never materialized). Returns (loss, grads).
pub fn backdoor_loss_grads(
    model: &MultiExitModel,
    images: &Array4<f32>,
    labels: &[usize],
    p: f64,
) -> Result<(f64, Grads)> {
    let n_b = num_attack_ics(model.backbone.num_blocks(), p)?;
    for loc in 1..=n_b {
        if model.ic_at(loc).is_none() {
            return Err(Error::MissingIc(loc));
        }
    }
    let (cache, _) = model.backbone.forward_train(images);
    let n = model.backbone.num_blocks();
    let mut dblocks: Vec<Option<Array4<f32>>> = (0..n).map(|_| None).collect();
    let mut loss = 0f64;
    for loc in 1..=n_b {
        let ic = model.ic_at(loc).expect("checked above");
        let feat = &cache.block_outputs[loc - 1];
        let logits = ic.logits(feat);
        let (l, dlogits) = cross_entropy_mean(logits.view(), labels);
        loss += l;
        let dfeat = ic.backward_to_feature(feat.dim(), &dlogits);
        dblocks[loc - 1] = Some(match dblocks[loc - 1].take() {
            Some(mut acc) => {
                acc += &dfeat;
                acc
            }
            None => dfeat,
        });
    }
    let (grads, _) = model
        .backbone
        .backward(images, &cache, None, dblocks, true, false);
    Ok((loss, grads.expect("param grads requested")))
}

/// Backbone gradients of `stealth_loss`. Returns (loss, grads).
pub fn stealth_loss_grads(
    model: &MultiExitModel,
    images: &Array4<f32>,
    labels: &[usize],
    p: f64,
) -> Result<(f64, Grads)> {
    let n_b = num_attack_ics(model.backbone.num_blocks(), p)?;
    let (cache, final_logits) = model.backbone.forward_train(images);
    let n = model.backbone.num_blocks();
    let mut dblocks: Vec<Option<Array4<f32>>> = (0..n).map(|_| None).collect();
    let mut loss = 0f64;
    for ic in &model.ics {
        if ic.location > n_b {
            let feat = &cache.block_outputs[ic.location - 1];
            let logits = ic.logits(feat);
            let (l, dlogits) = cross_entropy_mean(logits.view(), labels);
            loss += l;
            let dfeat = ic.backward_to_feature(feat.dim(), &dlogits);
            dblocks[ic.location - 1] = Some(dfeat);
        }
    }
    let (head_loss, dlogits) = cross_entropy_mean(final_logits.view(), labels);
    loss += head_loss;
    let (grads, _) =
        model
            .backbone
            .backward(images, &cache, Some(&dlogits), dblocks, true, false);
    Ok((loss, grads.expect("param grads requested")))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InjectEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub backdoor_loss: f64,
    pub stealth_loss: f64,
    pub lr: f64,
}

/// Structured record of one injection run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InjectionLog {
    pub ic_locations: Vec<usize>,
    pub ic_loss_history: Vec<f64>,
    /// IC parameter checksum when Step 2 starts / ends; equal by contract.
    pub ic_checksum_start: String,
    pub ic_checksum_end: String,
    pub epochs: Vec<InjectEpoch>,
}

/// Full injection workflow: attach and train surrogate ICs on clean data
/// (backbone frozen), then freeze the ICs and update the backbone against
/// the combined objective, and finally strip the ICs.
pub fn inject_backdoor(
    backbone: Backbone,
    attacker_data: &LabeledImageSet,
    config: &AttackConfig,
) -> Result<(Backbone, InjectionLog)> {
    config.validate()?;
    if attacker_data.num_classes() != backbone.num_classes {
        return Err(Error::ClassMismatch {
            model: backbone.num_classes,
            data: attacker_data.num_classes(),
        });
    }
    if attacker_data.len() < config.batch_size {
        return Err(Error::InsufficientData {
            need: config.batch_size,
            got: attacker_data.len(),
        });
    }
    if config.target_label >= backbone.num_classes {
        return Err(Error::InvalidLabel {
            label: config.target_label,
            num_classes: backbone.num_classes,
        });
    }

    let n = backbone.num_blocks();
    let n_b = num_attack_ics(n, config.exit_layer_ratio)?;
    let poisoned = poison_dataset(
        attacker_data,
        &config.trigger,
        config.target_label,
        config.poison_fraction,
        config.seed,
    )?;

    // Step 1: transform into a surrogate multi-exit model and train the ICs.
    let locations: Vec<usize> = (1..=n_b).collect();
    let model = attach_ics(backbone, &locations, config.seed ^ 0xA11C_E5ED)?;
    let (mut model, ic_loss_history) = crate::multiexit::train_ics_wd(
        model,
        attacker_data,
        config.ic_epochs,
        config.ic_lr,
        config.batch_size,
        config.seed ^ 0x1C_5EED,
        config.ic_weight_decay,
    )?;

    // Step 2: freeze the ICs, update the backbone against L_B + lambda L_S.
    let ic_checksum_start = model.ic_param_checksum();
    let mut opt = Adam::new(config.inject_lr as f32, &model.backbone);
    let mut epochs = Vec::with_capacity(config.inject_epochs);
    for epoch in 0..config.inject_epochs {
        let pbatches = shuffled_batches(
            poisoned.len(),
            config.batch_size,
            config.seed ^ 0xB0_D00D,
            epoch,
        );
        let cbatches = shuffled_batches(
            attacker_data.len(),
            config.batch_size,
            config.seed ^ 0xC1_EA4A,
            epoch,
        );
        let mut lb_sum = 0f64;
        let mut ls_sum = 0f64;
        let mut weight = 0f64;
        for (pb, cb) in pbatches.iter().zip(cbatches.iter()) {
            let (pimg, plab) = gather_batch(&poisoned, pb);
            let (cimg, clab) = gather_batch(attacker_data, cb);
            let (lb, gb) = backdoor_loss_grads(&model, &pimg, &plab, config.exit_layer_ratio)?;
            let (ls, mut gs) =
                stealth_loss_grads(&model, &cimg, &clab, config.exit_layer_ratio)?;
            if !(lb.is_finite() && ls.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    loss: lb + ls,
                });
            }
            let mut grads = gb;
            gs.scale(config.lambda as f32);
            grads.add_assign(&gs);
            grads.clip_global_norm(crate::models::GRAD_CLIP);
            opt.step(&mut model.backbone, &grads);
            lb_sum += lb * pb.len() as f64;
            ls_sum += ls * cb.len() as f64;
            weight += pb.len() as f64;
        }
        let lb = lb_sum / weight;
        let ls = ls_sum / weight;
        epochs.push(InjectEpoch {
            epoch: epoch + 1,
            loss: lb + config.lambda * ls,
            backdoor_loss: lb,
            stealth_loss: ls,
            lr: config.inject_lr,
        });
    }
    let ic_checksum_end = model.ic_param_checksum();
    debug_assert_eq!(ic_checksum_start, ic_checksum_end);

    // Step 3: strip the ICs and release the vanilla model.
    let log = InjectionLog {
        ic_locations: locations,
        ic_loss_history,
        ic_checksum_start,
        ic_checksum_end,
        epochs,
    };
    Ok((strip_ics(model), log))
}

/// Classic data-poisoning baseline: retrain the backbone on a dataset
/// poisoned at `config.poison_fraction`. The result is a conventionally
/// backdoored vanilla model, used as the defense bench's positive control.
pub fn badnets_baseline(
    backbone: Backbone,
    train_data: &LabeledImageSet,
    config: &AttackConfig,
    train_spec: &TrainSpec,
) -> Result<Backbone> {
    config.validate()?;
    let poisoned = poison_dataset(
        train_data,
        &config.trigger,
        config.target_label,
        config.poison_fraction,
        config.seed,
    )?;
    let (model, _) = train_backbone(backbone, &poisoned, train_spec)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_backbone;
    use crate::multiexit::attach_ics;
    use crate::trigger::{make_checkerboard_trigger, Corner};
    use ndarray::Axis;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_config() -> AttackConfig {
        AttackConfig {
            exit_layer_ratio: 0.8,
            lambda: 1.0,
            ic_epochs: 1,
            ic_lr: 1e-3,
            ic_weight_decay: 5e-4,
            inject_epochs: 1,
            inject_lr: 1e-3,
            target_label: 0,
            poison_fraction: 1.0,
            trigger: make_checkerboard_trigger(7, (3, 32, 32), Corner::BottomRight).unwrap(),
            batch_size: 8,
            seed: 1,
        }
    }

    /// 2-exit toy model on vgg-mini: ICs at the first floor(0.8*10)=8
    /// locations would be the attacker layout; for oracle math we use a
    /// tiny p so only exits 1 and 2 are summed.
    fn toy_two_exit() -> MultiExitModel {
        let bb = build_backbone("vgg-mini", 4, 21).unwrap();
        attach_ics(bb, &[1, 2], 22).unwrap()
    }

    fn random_batch(n: usize, k: usize, seed: u64) -> (Array4<f32>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = ndarray::Array4::from_shape_fn((n, 3, 32, 32), |_| rng.gen_range(0.0..1.0f32));
        let labels = (0..n).map(|_| rng.gen_range(0..k)).collect();
        (images, labels)
    }

    /// Scalar (f64) cross-entropy oracle over explicit logits.
    fn ce_oracle(logits: &Array2<f32>, labels: &[usize]) -> f64 {
        let mut total = 0f64;
        for (row, &y) in logits.axis_iter(Axis(0)).zip(labels.iter()) {
            let row: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        total / labels.len() as f64
    }

    #[test]
    fn backdoor_loss_requires_contiguous_ics() {
        let bb = build_backbone("vgg-mini", 4, 2).unwrap();
        let m = attach_ics(bb, &[1, 3], 3).unwrap(); // missing IC at 2
        let (images, labels) = random_batch(4, 4, 5);
        assert!(matches!(
            backdoor_loss(&m, &images, &labels, 0.8),
            Err(Error::MissingIc(2))
        ));
    }

    #[test]
    fn one_hot_exit_gives_near_zero_loss() {
        let mut m = toy_two_exit();
        // force both ICs to produce a huge logit for class 0
        for ic in &mut m.ics {
            ic.fc.w.fill(0.0);
            ic.fc.b.fill(0.0);
            ic.fc.b[0] = 50.0;
        }
        let (images, _) = random_batch(4, 4, 6);
        let labels = vec![0; 4];
        let loss = backdoor_loss(&m, &images, &labels, 0.21).unwrap();
        assert!(loss < 1e-6, "loss={loss}");
    }

    #[test]
    fn uniform_logits_give_n_ln_k_per_sample() {
        let mut m = toy_two_exit();
        for ic in &mut m.ics {
            ic.fc.w.fill(0.0);
            ic.fc.b.fill(0.0);
        }
        let (images, labels) = random_batch(6, 4, 7);
        // p=0.21 on N=10 blocks -> floor = 2 exits summed
        let loss = backdoor_loss(&m, &images, &labels, 0.21).unwrap();
        let expect = 2.0 * (4f64).ln();
        assert!((loss - expect).abs() < 1e-9, "loss={loss} expect={expect}");

        // stealth side: uniform head
        let mut m2 = toy_two_exit();
        m2.backbone.head.w.fill(0.0);
        m2.backbone.head.b.fill(0.0);
        let ls = stealth_loss(&m2, &images, &labels, 0.21).unwrap();
        assert!((ls - (4f64).ln()).abs() < 1e-9, "ls={ls}");
    }

    #[test]
    fn losses_match_scalar_oracle_to_1e6() {
        let m = toy_two_exit();
        let (images, labels) = random_batch(8, 4, 8);
        let p = 0.21; // floor(0.21 * 10) = 2 exits
        let lb = backdoor_loss(&m, &images, &labels, p).unwrap();
        let (outputs, final_logits) = m.backbone.forward_blocks(&images);
        let mut oracle = 0f64;
        for loc in 1..=2usize {
            let ic = m.ic_at(loc).unwrap();
            oracle += ce_oracle(&ic.logits(&outputs[loc - 1]), &labels);
        }
        assert!((lb - oracle).abs() < 1e-6, "lb={lb} oracle={oracle}");

        let ls = stealth_loss(&m, &images, &labels, p).unwrap();
        let head_oracle = ce_oracle(&final_logits, &labels);
        assert!((ls - head_oracle).abs() < 1e-6, "ls={ls} oracle={head_oracle}");

        // combined with lambda = 2: a + 2b by scalar arithmetic
        let cfg = AttackConfig {
            lambda: 2.0,
            exit_layer_ratio: p,
            ..test_config()
        };
        let (cimg, clab) = random_batch(8, 4, 9);
        let combined = combined_loss(&m, (&images, &labels), (&cimg, &clab), &cfg).unwrap();
        let ls_clean = stealth_loss(&m, &cimg, &clab, p).unwrap();
        assert!((combined - (lb + 2.0 * ls_clean)).abs() < 1e-9);
    }

    #[test]
    fn lambda_zero_ignores_the_clean_batch() {
        let m = toy_two_exit();
        let cfg = AttackConfig {
            lambda: 0.0,
            exit_layer_ratio: 0.21,
            ..test_config()
        };
        let (pimg, plab) = random_batch(4, 4, 10);
        let (c1, l1) = random_batch(4, 4, 11);
        let (c2, l2) = random_batch(4, 4, 12);
        let a = combined_loss(&m, (&pimg, &plab), (&c1, &l1), &cfg).unwrap();
        let b = combined_loss(&m, (&pimg, &plab), (&c2, &l2), &cfg).unwrap();
        assert_eq!(a, b, "clean batch leaked into lambda=0 loss");
        let lb = backdoor_loss(&m, &pimg, &plab, 0.21).unwrap();
        assert_eq!(a, lb);
    }

    #[test]
    fn combined_gradient_matches_finite_difference() {
        // central-difference directional derivative along the normalized
        // analytic gradient must reproduce the gradient norm
        let mut m = toy_two_exit();
        let p = 0.21;
        let lambda = 1.0;
        let (pimg, plab) = random_batch(6, 4, 13);
        let (cimg, clab) = random_batch(6, 4, 14);

        let (_, gb) = backdoor_loss_grads(&m, &pimg, &plab, p).unwrap();
        let (_, mut gs) = stealth_loss_grads(&m, &cimg, &clab, p).unwrap();
        gs.scale(lambda as f32);
        let mut grads = gb;
        grads.add_assign(&gs);
        let gnorm = grads.l2_norm();
        assert!(gnorm > 1e-3, "degenerate gradient");

        let h = 1e-3f64;
        let mut shift = |m: &mut MultiExitModel, sign: f64| {
            let mut idx = 0;
            m.backbone.visit_params_mut(&mut |pm| {
                let g = &grads.0[idx];
                for (w, gv) in pm.iter_mut().zip(g.iter()) {
                    *w += (sign * h * (*gv as f64) / gnorm) as f32;
                }
                idx += 1;
            });
        };
        let loss = |m: &MultiExitModel| -> f64 {
            backdoor_loss(m, &pimg, &plab, p).unwrap()
                + lambda * stealth_loss(m, &cimg, &clab, p).unwrap()
        };
        shift(&mut m, 1.0);
        let lp = loss(&m);
        shift(&mut m, -2.0);
        let lm = loss(&m);
        shift(&mut m, 1.0);
        let fd = (lp - lm) / (2.0 * h);
        let rel = (fd - gnorm).abs() / gnorm;
        assert!(
            rel <= 1e-3,
            "finite-difference mismatch: fd={fd} |g|={gnorm} rel={rel}"
        );
    }

    #[test]
    fn injection_freezes_ics_and_preserves_architecture() {
        let dir = tempfile::tempdir().unwrap();
        let reg = crate::data::DatasetRegistry::builtin();
        let data =
            crate::data::load_dataset_with(&reg, "synth2", crate::data::Split::Train, dir.path())
                .unwrap();
        let bb = build_backbone("vgg-mini", 2, 31).unwrap();
        let in_shapes: Vec<usize> = {
            let mut v = Vec::new();
            bb.visit_params(&mut |p| v.push(p.len()));
            v
        };
        let cfg = AttackConfig {
            target_label: 1,
            ic_epochs: 1,
            inject_epochs: 2,
            batch_size: 32,
            ..test_config()
        };
        let (backdoored, log) = inject_backdoor(bb, &data, &cfg).unwrap();
        assert_eq!(log.ic_checksum_start, log.ic_checksum_end, "ICs moved");
        assert_eq!(log.epochs.len(), 2);
        assert_eq!(log.ic_locations, (1..=8).collect::<Vec<_>>());
        assert_eq!(backdoored.arch_name, "vgg-mini");
        assert_eq!(backdoored.num_classes, 2);
        let out_shapes: Vec<usize> = {
            let mut v = Vec::new();
            backdoored.visit_params(&mut |p| v.push(p.len()));
            v
        };
        assert_eq!(in_shapes, out_shapes, "tensor shapes changed");
    }

    #[test]
    fn injection_rejects_insufficient_data() {
        let dir = tempfile::tempdir().unwrap();
        let reg = crate::data::DatasetRegistry::builtin();
        let data =
            crate::data::load_dataset_with(&reg, "synth2", crate::data::Split::Test, dir.path())
                .unwrap();
        let small = crate::data::subsample(&data, 0.05, 1).unwrap(); // 6 items
        let bb = build_backbone("vgg-mini", 2, 31).unwrap();
        let cfg = AttackConfig {
            batch_size: 32,
            target_label: 1,
            ..test_config()
        };
        assert!(matches!(
            inject_backdoor(bb, &small, &cfg),
            Err(Error::InsufficientData { .. })
        ));
    }
}
