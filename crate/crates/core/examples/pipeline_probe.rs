use exitbench_core::attack::{inject_backdoor, AttackConfig};
use exitbench_core::data::{load_dataset_with, subsample, DatasetRegistry, Split};
use exitbench_core::eval::{compute_acc, compute_asr, victim_simulation, ModelRef, PolicySpec};
use exitbench_core::models::{build_backbone, train_backbone, TrainSpec};
use exitbench_core::trigger::{make_checkerboard_trigger, Corner};
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let reg = DatasetRegistry::builtin();
    let cache = std::env::temp_dir().join("exitbench-probe");
    let train = load_dataset_with(&reg, "cifar10-small", Split::Train, &cache).unwrap();
    let test = load_dataset_with(&reg, "cifar10-small", Split::Test, &cache).unwrap();
    println!("[{:6.1}s] data: train {} test {}", t0.elapsed().as_secs_f64(), train.len(), test.len());

    let bb = build_backbone("resnet-mini", 10, 100).unwrap();
    let spec = TrainSpec { epochs: 12, learning_rate: 0.01, momentum: 0.9, batch_size: 64, seed: 100 };
    let (clean, hist) = train_backbone(bb, &train, &spec).unwrap();
    if let Some(h) = hist.last() { println!("  final epoch {}: loss {:.4} acc {:.4}", h.epoch, h.loss, h.accuracy); }
    let clean_acc = compute_acc(ModelRef::Vanilla(&clean), &test, 1).unwrap();
    println!("[{:6.1}s] clean backbone test acc {:.4}", t0.elapsed().as_secs_f64(), clean_acc);

    let trigger = make_checkerboard_trigger(7, (3, 32, 32), Corner::BottomRight).unwrap();
    let attacker_data = subsample(&train, 0.5, 41).unwrap();
    let cfg = AttackConfig {
        exit_layer_ratio: 0.8,
        lambda: 1.0,
        ic_epochs: 60,
        ic_lr: 3e-3,
        inject_epochs: 10,
        inject_lr: 3e-4,
        target_label: 0,
        poison_fraction: 1.0,
        trigger: trigger.clone(),
        batch_size: 64,
        seed: 42,
    };
    let (backdoored, log) = inject_backdoor(clean.clone(), &attacker_data, &cfg).unwrap();
    println!("[{:6.1}s] injection done; ic losses {:?}", t0.elapsed().as_secs_f64(),
        log.ic_loss_history.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>());
    for e in &log.epochs {
        println!("  inject epoch {}: L {:.4} L_B {:.4} L_S {:.4}", e.epoch, e.loss, e.backdoor_loss, e.stealth_loss);
    }

    let bd_acc = compute_acc(ModelRef::Vanilla(&backdoored), &test, 1).unwrap();
    let bd_asr = compute_asr(ModelRef::Vanilla(&backdoored), &test, &trigger, 0, None).unwrap();
    println!("[{:6.1}s] backdoored vanilla: acc {:.4} (drop {:.4}), asr {:.4}",
        t0.elapsed().as_secs_f64(), bd_acc, clean_acc - bd_acc, bd_asr);

    let victim_data = subsample(&train, 0.5, 77).unwrap();
    // per-exit diagnostics for one victim model
    {
        use exitbench_core::multiexit::{attach_ics, train_ics};
        use exitbench_core::trigger::apply_trigger_batch;
        use exitbench_core::nn::ops::softmax;
        use ndarray::Axis;
        let locs: Vec<usize> = (2..=11).collect();
        let m = attach_ics(backdoored.clone(), &locs, 999).unwrap();
        let (m, _) = train_ics(m, &victim_data, 60, 3e-3, 64, 999).unwrap();
        let (outs, _) = m.backbone.forward_blocks(test.images());
        let trig_imgs = apply_trigger_batch(test.images(), &trigger).unwrap();
        let (touts, _) = m.backbone.forward_blocks(&trig_imgs);
        for ic in &m.ics {
            let probs = softmax(ic.logits(&outs[ic.location - 1]).view());
            let mut confs: Vec<f32> = Vec::new();
            let mut correct = 0usize;
            for (i, row) in probs.axis_iter(Axis(0)).enumerate() {
                let (mut best, mut bv) = (0usize, f32::MIN);
                for (j, &v) in row.iter().enumerate() { if v > bv { bv = v; best = j; } }
                confs.push(bv);
                if best == test.labels()[i] { correct += 1; }
            }
            confs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let q = |f: f64| confs[(f * (confs.len() - 1) as f64) as usize];
            let tprobs = softmax(ic.logits(&touts[ic.location - 1]).view());
            let mut t_target = 0usize; let mut t_conf_sum = 0f64; let mut tn = 0usize;
            for (i, row) in tprobs.axis_iter(Axis(0)).enumerate() {
                if test.labels()[i] == 0 { continue; }
                tn += 1;
                let (mut best, mut bv) = (0usize, f32::MIN);
                for (j, &v) in row.iter().enumerate() { if v > bv { bv = v; best = j; } }
                if best == 0 { t_target += 1; t_conf_sum += bv as f64; }
            }
            println!("  exit@{:2}: clean acc {:.3} conf q25/q50/q75/q90 {:.3}/{:.3}/{:.3}/{:.3} | trig->y_t {:.3} (mean conf {:.3})",
                ic.location, correct as f64 / test.len() as f64, q(0.25), q(0.5), q(0.75), q(0.9),
                t_target as f64 / tn as f64, if t_target > 0 { t_conf_sum / t_target as f64 } else { 0.0 });
        }
    }
    for n_v in [2usize, 3, 4] {
        let report = victim_simulation(
            &backdoored, &victim_data, &test, n_v, 0.8,
            PolicySpec::CalibrateEarlyFraction(0.5),
            &trigger, 0, 1000 + n_v as u64, 60, 3e-3, 64,
        ).unwrap();
        println!("[{:6.1}s] victim N_v={}: acc {:.4} asr {:.4} policy {} hist {:?}",
            t0.elapsed().as_secs_f64(), n_v, report.acc_topk[&1], report.asr,
            report.context.policy, report.exit_histogram);
    }
}
