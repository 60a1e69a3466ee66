use exitbench_core::data::{load_dataset_with, subsample, DatasetRegistry, Split};
use exitbench_core::models::{build_backbone, train_backbone, TrainSpec};

fn main() {
    let reg = DatasetRegistry::builtin();
    let cache = std::env::temp_dir().join("exitbench-probe");
    let train = load_dataset_with(&reg, "cifar10-small", Split::Train, &cache).unwrap();
    let small = subsample(&train, 0.5, 1).unwrap();
    for lr in [0.02, 0.01, 0.005, 0.002, 0.001] {
        let bb = build_backbone("resnet-mini", 10, 100).unwrap();
        let spec = TrainSpec { epochs: 4, learning_rate: lr, momentum: 0.9, batch_size: 64, seed: 100 };
        match train_backbone(bb, &small, &spec) {
            Ok((_, hist)) => {
                let accs: Vec<String> = hist.iter().map(|h| format!("{:.3}", h.accuracy)).collect();
                println!("lr {lr}: accs {accs:?}");
            }
            Err(e) => println!("lr {lr}: error {e}"),
        }
    }
}
