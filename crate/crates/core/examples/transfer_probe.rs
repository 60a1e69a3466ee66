use exitbench_core::attack::{inject_backdoor, AttackConfig};
use exitbench_core::data::{load_dataset_with, subsample, DatasetRegistry, Split};
use exitbench_core::eval::{compute_acc, compute_asr, ModelRef};
use exitbench_core::models::{build_backbone, train_backbone, TrainSpec};
use exitbench_core::multiexit::{
    attach_ics, calibrate_threshold, predict_early_exit_batch, train_ics_wd, ExitPolicy,
};
use exitbench_core::nn::ops::softmax;
use exitbench_core::trigger::{apply_trigger_batch, make_checkerboard_trigger, Corner};
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let reg = DatasetRegistry::builtin();
    let cache = std::env::temp_dir().join("exitbench-probe");
    let train = load_dataset_with(&reg, "cifar10-small", Split::Train, &cache).unwrap();
    let test = load_dataset_with(&reg, "cifar10-small", Split::Test, &cache).unwrap();

    let bb = build_backbone("resnet-mini", 10, 100).unwrap();
    let spec = TrainSpec { epochs: 12, learning_rate: 0.01, momentum: 0.9, batch_size: 64, seed: 100 };
    let (clean, _) = train_backbone(bb, &train, &spec).unwrap();
    let clean_acc = compute_acc(ModelRef::Vanilla(&clean), &test, 1).unwrap();
    println!("[{:5.0}s] clean acc {:.3}", t0.elapsed().as_secs_f64(), clean_acc);

    let trigger = make_checkerboard_trigger(7, (3, 32, 32), Corner::BottomRight).unwrap();
    let attacker_data = subsample(&train, 0.5, 41).unwrap();
    let victim_data = subsample(&train, 0.5, 77).unwrap();

    for wd in [5e-3f64, 2e-2, 5e-2] {
        let cfg = AttackConfig {
            exit_layer_ratio: 0.8, lambda: 1.0,
            ic_epochs: 80, ic_lr: 3e-3, ic_weight_decay: wd,
            inject_epochs: 10, inject_lr: 3e-4,
            target_label: 0, poison_fraction: 1.0,
            trigger: trigger.clone(), batch_size: 64, seed: 42,
        };
        let (backdoored, log) = inject_backdoor(clean.clone(), &attacker_data, &cfg).unwrap();
        let bd_asr = compute_asr(ModelRef::Vanilla(&backdoored), &test, &trigger, 0, None).unwrap();
        let bd_acc = compute_acc(ModelRef::Vanilla(&backdoored), &test, 1).unwrap();
        println!("[{:5.0}s] wd={wd}: final L_B {:.3}; vanilla acc {:.3} asr {:.3}",
            t0.elapsed().as_secs_f64(), log.epochs.last().unwrap().backdoor_loss, bd_acc, bd_asr);

        let locs: Vec<usize> = (2..=11).collect();
        let m = attach_ics(backdoored.clone(), &locs, 999).unwrap();
        let (m, _) = train_ics_wd(m, &victim_data, 80, 3e-3, 64, 999, wd).unwrap();
        let tau = calibrate_threshold(&m, &victim_data, 0.5).unwrap();
        let policy = ExitPolicy::Threshold(tau);
        let res = predict_early_exit_batch(&m, test.images(), policy).unwrap();
        let acc = res.iter().zip(test.labels()).filter(|(r, y)| r.0 == **y).count() as f64 / test.len() as f64;
        let trig_imgs = apply_trigger_batch(test.images(), &trigger).unwrap();
        let tres = predict_early_exit_batch(&m, &trig_imgs, policy).unwrap();
        let mut hit = 0; let mut n = 0;
        let mut exit_hist = std::collections::BTreeMap::new();
        for (r, &y) in tres.iter().zip(test.labels()) {
            if y == 0 { continue; }
            n += 1;
            if r.0 == 0 { hit += 1; }
            *exit_hist.entry(r.1).or_insert(0usize) += 1;
        }
        println!("         victim tau {:.3} acc {:.3} ASR {:.3} trig exits {:?}",
            tau, acc, hit as f64 / n as f64, exit_hist);
        let _ = (&attach_ics, &train_ics_wd, &softmax, &apply_trigger_batch);
    }
}
