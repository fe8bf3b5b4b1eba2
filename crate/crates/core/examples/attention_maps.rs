//! Attention map of a random activation, its positive and negative maps, the
//! four local quadrants and the masked negative map.

use amd_distill::attention::{attention_map, mask_negative, normalize_pair, split_local, LocalMode};
use amd_distill::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn print_map(name: &str, t: &Tensor<f64>, w: usize) {
    println!("{name}");
    for row in t.data().chunks(w) {
        println!("  {}", row.iter().map(|v| format!("{v:6.3}")).collect::<Vec<_>>().join(" "));
    }
}

fn main() -> amd_distill::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let act: Vec<f64> = (0..4 * 4 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::from_f64(&[1, 4, 4, 4], &act)?);
    let f = attention_map(&mut tape, a, 2.0)?;
    let pair = normalize_pair(&mut tape, f, "group1", false)?;
    print_map("Q_p", tape.value(pair.q_pos)?, 4);
    print_map("Q_n", tape.value(pair.q_neg)?, 4);
    let masked = mask_negative(&mut tape, &pair, 0.5)?;
    print_map("Q_n masked at 0.5", tape.value(masked.q_neg)?, 4);
    for (k, q) in split_local(&mut tape, &pair, LocalMode::Renormalize, false)?.iter().enumerate() {
        print_map(&format!("quadrant {k} Q_p"), tape.value(q.q_pos)?, 2);
    }
    Ok(())
}
