//! Angular knowledge over a grid of positive values for several margins.

use amd_distill::amd::angular_knowledge;
use amd_distill::attention::{AttentionPair, Scope};
use amd_distill::tensor::{Tape, Tensor};

fn main() -> amd_distill::Result<()> {
    let qp: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let qn: Vec<f64> = qp.iter().map(|q| 1.0 - q).collect();
    println!("q_pos  {}", qp.iter().map(|v| format!("{v:>8.2}")).collect::<String>());
    for m in [1.0, 1.35, 2.0] {
        let mut tape = Tape::<f64>::new();
        let shape = [1, 1, 1, qp.len()];
        let q_pos = tape.constant(Tensor::from_f64(&shape, &qp)?);
        let q_neg = tape.constant(Tensor::from_f64(&shape, &qn)?);
        let pair = AttentionPair {
            f: q_pos,
            q_pos,
            q_neg,
            layer: "grid".into(),
            scope: Scope::Global,
            masked: false,
        };
        let g = angular_knowledge(&mut tape, &pair, 64.0, m)?;
        let row: String = tape.value(g)?.data().iter().map(|v| format!("{v:>8.2}")).collect();
        println!("m={m:<4} {row}");
    }
    Ok(())
}
