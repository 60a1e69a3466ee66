//! Attack and accuracy metrics plus the victim-side simulation sweep.

use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::models::{num_attack_ics, Backbone};
use crate::multiexit::{
    attach_ics, calibrate_threshold, predict_with_logits, train_ics, ExitPolicy, MultiExitModel,
};
use crate::nn::ops::softmax;
use crate::trigger::{apply_trigger_batch, TriggerSpec};
use ndarray::{Array2, Array4, Axis};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// A model under evaluation: a vanilla backbone (final head only) or a
/// multi-exit model governed by an exit policy.
#[derive(Clone, Copy)]
pub enum ModelRef<'a> {
    Vanilla(&'a Backbone),
    MultiExit(&'a MultiExitModel, ExitPolicy),
}

impl<'a> ModelRef<'a> {
    /// Per-sample (label, exit_index, confidence, logits-at-taken-exit).
    fn predict(&self, images: &Array4<f32>) -> Result<(Vec<(usize, usize, f32)>, Array2<f32>)> {
        match self {
            ModelRef::Vanilla(bb) => {
                let logits = bb.forward_logits(images);
                let probs = softmax(logits.view());
                let final_exit = bb.num_blocks() + 1;
                let results = probs
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
                        (best, final_exit, best_v)
                    })
                    .collect();
                Ok((results, logits))
            }
            ModelRef::MultiExit(m, policy) => predict_with_logits(m, images, *policy),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ModelRef::Vanilla(bb) => bb.num_classes,
            ModelRef::MultiExit(m, _) => m.backbone.num_classes,
        }
    }
}

/// Attack success rate: stamp the trigger onto every test input and return
/// the fraction predicted as the target label. Samples whose true label
/// already equals the target are excluded from the count, so a dormant
/// model that keeps classifying them correctly does not inflate the rate.
pub fn compute_asr(
    model: ModelRef<'_>,
    test_set: &LabeledImageSet,
    trigger: &TriggerSpec,
    target_label: usize,
    _policy_hint: Option<ExitPolicy>,
) -> Result<f64> {
    if test_set.is_empty() {
        return Err(Error::InsufficientData { need: 1, got: 0 });
    }
    let triggered = apply_trigger_batch(test_set.images(), trigger)?;
    let (results, _) = model.predict(&triggered)?;
    let mut hits = 0usize;
    let mut total = 0usize;
    for (r, &y) in results.iter().zip(test_set.labels().iter()) {
        if y == target_label {
            continue;
        }
        total += 1;
        if r.0 == target_label {
            hits += 1;
        }
    }
    if total == 0 {
        return Err(Error::InsufficientData { need: 1, got: 0 });
    }
    Ok(hits as f64 / total as f64)
}

/// Top-k accuracy: fraction of samples whose true label ranks within the k
/// highest logits (ties broken toward lower class indices).
pub fn compute_acc(model: ModelRef<'_>, test_set: &LabeledImageSet, k: usize) -> Result<f64> {
    let num_classes = model.num_classes();
    if k < 1 || k >= num_classes {
        return Err(Error::out_of_range(
            "top-k",
            format!("[1, {})", num_classes),
            k as f64,
        ));
    }
    if test_set.is_empty() {
        return Err(Error::InsufficientData { need: 1, got: 0 });
    }
    let (_, logits) = model.predict(test_set.images())?;
    let mut hits = 0usize;
    for (row, &y) in logits.axis_iter(Axis(0)).zip(test_set.labels().iter()) {
        let ly = row[y];
        let mut rank = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > ly || (v == ly && j < y) {
                rank += 1;
            }
        }
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / test_set.len() as f64)
}

/// Exit histogram of clean-test inference: exit index -> sample count.
pub fn exit_histogram(
    model: ModelRef<'_>,
    test_set: &LabeledImageSet,
) -> Result<BTreeMap<usize, usize>> {
    let (results, _) = model.predict(test_set.images())?;
    let mut hist = BTreeMap::new();
    for (_, exit, _) in results {
        *hist.entry(exit).or_insert(0usize) += 1;
    }
    Ok(hist)
}

/// How the victim's exit threshold is chosen.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum PolicySpec {
    /// Use this policy as given.
    Fixed(ExitPolicy),
    /// Calibrate the threshold on victim data so that at least this
    /// fraction of clean samples exits early.
    CalibrateEarlyFraction(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalContext {
    pub model_id: String,
    pub dataset_id: String,
    pub policy: String,
    pub n_v: Option<usize>,
    pub trigger_id: String,
    pub seed: u64,
}

/// ACC / ASR / exit-histogram bundle persisted per experiment cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc_topk: BTreeMap<usize, f64>,
    pub asr: f64,
    pub exit_histogram: BTreeMap<usize, usize>,
    pub context: EvalContext,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        for (&k, &v) in &self.acc_topk {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::out_of_range(format!("acc_top{k}"), "[0, 1]", v));
            }
        }
        if !(0.0..=1.0).contains(&self.asr) {
            return Err(Error::out_of_range("asr", "[0, 1]", self.asr));
        }
        Ok(())
    }
}

/// Simulate a victim converting the released model: attach fresh ICs at
/// blocks N_v..=floor(p*N), train them on the victim's clean data with the
/// backbone frozen, then evaluate clean accuracy, ASR, and the exit
/// histogram on the test set.
#[allow(clippy::too_many_arguments)]
pub fn victim_simulation(
    backdoored: &Backbone,
    victim_data: &LabeledImageSet,
    test_set: &LabeledImageSet,
    n_v: usize,
    p: f64,
    policy: PolicySpec,
    trigger: &TriggerSpec,
    target_label: usize,
    seed: u64,
    ic_epochs: usize,
    ic_lr: f64,
    batch_size: usize,
) -> Result<EvalReport> {
    let n = backdoored.num_blocks();
    let n_attack = num_attack_ics(n, p)?;
    if n_v < 2 || n_v > n_attack {
        return Err(Error::InvalidLocations(format!(
            "N_v must lie in 2..={n_attack}, got {n_v}"
        )));
    }
    let backbone_sum = backdoored.param_checksum();
    let locations: Vec<usize> = (n_v..=n_attack).collect();
    let model = attach_ics(backdoored.clone(), &locations, seed)?;
    let (model, _) = train_ics(model, victim_data, ic_epochs, ic_lr, batch_size, seed)?;
    assert_eq!(
        model.backbone.param_checksum(),
        backbone_sum,
        "victim IC training must not touch the backbone"
    );

    let policy = match policy {
        PolicySpec::Fixed(p) => p,
        PolicySpec::CalibrateEarlyFraction(frac) => {
            ExitPolicy::Threshold(calibrate_threshold(&model, victim_data, frac)?)
        }
    };
    let mref = ModelRef::MultiExit(&model, policy);
    let mut acc_topk = BTreeMap::new();
    acc_topk.insert(1, compute_acc(mref, test_set, 1)?);
    if model.backbone.num_classes > 5 {
        acc_topk.insert(5, compute_acc(mref, test_set, 5)?);
    }
    let asr = compute_asr(mref, test_set, trigger, target_label, None)?;
    let hist = exit_histogram(mref, test_set)?;
    let report = EvalReport {
        acc_topk,
        asr,
        exit_histogram: hist,
        context: EvalContext {
            model_id: backdoored.arch_name.clone(),
            dataset_id: test_set.name.clone(),
            policy: policy.describe(),
            n_v: Some(n_v),
            trigger_id: trigger.name.clone(),
            seed,
        },
    };
    report.validate()?;
    Ok(report)
}
