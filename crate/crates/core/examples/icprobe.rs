use exitbench_core::data::{load_dataset_with, DatasetRegistry, Split};
use exitbench_core::models::{build_backbone, train_backbone, TrainSpec};
use exitbench_core::multiexit::{attach_ics, train_ics};
use ndarray::Axis;

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let reg = DatasetRegistry::builtin();
    let data = load_dataset_with(&reg, "synth2", Split::Train, dir.path()).unwrap();
    let bb = build_backbone("vgg-mini", 2, 11).unwrap();
    let (bb, hist) = train_backbone(bb, &data, &TrainSpec { epochs: 2, learning_rate: 0.01, momentum: 0.9, batch_size: 32, seed: 1 }).unwrap();
    println!("backbone hist: {:?}", hist.iter().map(|h| (h.loss, h.accuracy)).collect::<Vec<_>>());
    let (outputs, _) = bb.forward_blocks(data.images());
    for (i, o) in outputs.iter().enumerate() {
        let mean = o.mean().unwrap();
        let max = o.iter().cloned().fold(f32::MIN, f32::max);
        let frac_zero = o.iter().filter(|&&v| v == 0.0).count() as f32 / o.len() as f32;
        // per-class mean of block output
        let mut m0 = 0.0; let mut m1 = 0.0; let mut n0 = 0; let mut n1 = 0;
        for (bi, img) in o.axis_iter(Axis(0)).enumerate() {
            let m = img.mean().unwrap();
            if data.labels()[bi] == 0 { m0 += m; n0 += 1; } else { m1 += m; n1 += 1; }
        }
        println!("block {}: mean {:.4} max {:.3} zero% {:.2} | class means {:.4} vs {:.4}", i+1, mean, max, frac_zero, m0 / n0 as f32, m1 / n1 as f32);
    }
    let m = attach_ics(bb, &[2, 4, 6], 3).unwrap();
    let (m, losses) = train_ics(m, &data, 10, 3e-3, 32, 5).unwrap();
    println!("ic losses: {:?}", losses);
    let (outputs, _) = m.backbone.forward_blocks(data.images());
    for ic in &m.ics {
        let logits = ic.logits(&outputs[ic.location - 1]);
        let preds = exitbench_core::nn::ops::argmax_rows(logits.view());
        let acc = preds.iter().zip(data.labels()).filter(|(p, y)| p == y).count() as f64 / data.len() as f64;
        println!("ic@{} acc {:.3}", ic.location, acc);
    }
}
