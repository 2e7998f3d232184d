// scratch probe, will be replaced by the real examples
use cogo::data::procedural_splits;
use cogo::train::{train_model, TrainConfig};
use cogo::vit::{ModelSpec, Variant};
use std::time::Instant;

fn main() {
    let splits = procedural_splits(7, 200);
    println!("train {} images", splits.train.len());
    for (lr, epochs) in [(0.5f32, 20usize), (1.0, 20)] {
        let spec = ModelSpec::tiny(Variant::VitTiny);
        let cfg = TrainConfig {
            epochs,
            lr,
            seed: 1,
            ..Default::default()
        };
        let t0 = Instant::now();
        let (_, ckpt) = train_model(&spec, &splits.train, &splits.val, &cfg).unwrap();
        println!(
            "lr {lr} x{epochs}ep: val acc {:.3} in {:.0}s, losses {:?}",
            ckpt.meta.final_accuracy,
            t0.elapsed().as_secs_f32(),
            ckpt.meta
                .per_epoch_loss
                .iter()
                .map(|l| (l * 100.0).round() / 100.0)
                .collect::<Vec<f32>>()
        );
    }
}
