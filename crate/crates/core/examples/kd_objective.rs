//! Evaluates the full training objective on a random batch and prints each
//! weighted term.

use amd_distill::amd::{AmdConfig, LayerPairing};
use amd_distill::kd::{total_loss, LossWeights, Targets, TeacherSignal};
use amd_distill::nn::{Mode, Model, ModelSpec};
use amd_distill::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> amd_distill::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input = [3, 16, 16];
    let teacher = Model::<f32>::new(ModelSpec::wrn(10, 2, 10).with_input(input), &mut rng)?;
    let student = Model::<f32>::new(ModelSpec::wrn(10, 1, 10).with_input(input), &mut rng)?;
    let pairing = LayerPairing::by_group(teacher.spec(), student.spec())?;
    let x: Vec<f64> = (0..4 * 3 * 256).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = Tensor::<f32>::from_f64(&[4, 3, 16, 16], &x)?;

    for (name, amd) in [
        ("global", AmdConfig::default()),
        ("global+local", AmdConfig { use_local: true, ..AmdConfig::default() }),
        ("global+local, masked", AmdConfig { use_local: true, use_mask: true, ..AmdConfig::default() }),
    ] {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let t = teacher.forward_frozen(&mut tape, xv)?;
        let s = student.forward(&mut tape, xv, Mode::Train)?;
        let (loss, parts) = total_loss(
            &mut tape,
            s.logits,
            &Targets::Labels(vec![0, 3, 5, 9]),
            &s.taps,
            Some(TeacherSignal { logits: t.logits, taps: &t.taps }),
            &pairing,
            &LossWeights::default(),
            &amd,
        )?;
        tape.backward(loss)?;
        println!(
            "{name:<22} total {:.4}  ce {:.4}  kd {:.4}  amd {:.3e} (a {:.3e} p {:.3e} n {:.3e})",
            parts.total, parts.ce_weighted, parts.kd_weighted, parts.amd_weighted, parts.amd_a, parts.amd_p, parts.amd_n
        );
    }
    Ok(())
}
