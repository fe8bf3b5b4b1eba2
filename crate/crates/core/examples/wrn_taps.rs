//! Runs a WRN16-1 forward pass and lists its parameter count and tap shapes.

use amd_distill::nn::{Mode, Model, ModelSpec};
use amd_distill::tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> amd_distill::Result<()> {
    for (depth, width) in [(16, 1), (16, 3), (40, 2)] {
        let spec = ModelSpec::wrn(depth, width, 10);
        let model = Model::<f32>::new(spec.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        println!("{} {} parameters", spec.name(), model.param_count());
    }

    let model = Model::<f32>::new(ModelSpec::wrn(16, 1, 10), &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::ones(&[2, 3, 32, 32]));
    let out = model.forward(&mut tape, x, Mode::Eval)?;
    println!("logits {:?}", tape.shape(out.logits)?);
    for tap in &out.taps {
        println!("{} {:?}", tap.layer, tape.shape(tap.activation)?);
    }
    Ok(())
}
