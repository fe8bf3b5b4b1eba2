//! Trains a small wide residual network on the synthetic dataset and
//! reports per-epoch accuracy.

use amd_distill::data::{synth_splits, SynthSpec};
use amd_distill::nn::ModelSpec;
use amd_distill::train::{train_teacher, TrainConfig};

fn main() -> amd_distill::Result<()> {
    let spec = SynthSpec::default();
    let (train, test) = synth_splits(&spec)?;
    let model = ModelSpec::wrn(10, 4, spec.classes).with_input([spec.channels, spec.size, spec.size]);
    let cfg = TrainConfig {
        batch_size: 64,
        ..TrainConfig::compressed(8)
    };
    let run = train_teacher(&model, &train, &test, &cfg, None)?;
    for e in &run.record.epochs {
        println!(
            "epoch {:>2}  lr {:.4}  loss {:.4}  train {:.3}  test {:.3}  {:.1}s",
            e.epoch, e.lr, e.losses.total, e.train_acc, e.test_acc, e.wall_time_s
        );
    }
    println!("best test accuracy {:.3}", run.record.best_test_acc());
    Ok(())
}
