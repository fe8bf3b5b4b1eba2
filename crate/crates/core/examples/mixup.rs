//! Mixes a small batch with a Beta-sampled coefficient and shows the soft
//! targets.

use amd_distill::data::{mixup_batch, one_hot, MixupConfig};
use amd_distill::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> amd_distill::Result<()> {
    let x = Tensor::<f64>::from_f64(&[4, 1, 1, 2], &[0.0, 0.0, 1.0, 1.0, 0.5, 0.0, 0.0, 0.5])?;
    let y = one_hot::<f64>(&[0, 1, 2, 1], 3)?;
    let cfg = MixupConfig { enabled: true, alpha: 0.2 };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..3 {
        let m = mixup_batch(&x, &y, &cfg, &mut rng)?;
        println!("lambda {:.3}  partner {:?}", m.lambda, m.perm);
        for (xi, yi) in m.x.data().chunks(2).zip(m.y.data().chunks(3)) {
            println!("  x {xi:.3?}  y {yi:.3?}");
        }
    }
    Ok(())
}
