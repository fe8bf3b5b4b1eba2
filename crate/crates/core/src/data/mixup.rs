use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{lit, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixupConfig {
    pub enabled: bool,
    /// Parameter of the symmetric Beta distribution.
    pub alpha: f64,
}

impl Default for MixupConfig {
    fn default() -> Self {
        MixupConfig {
            enabled: false,
            alpha: 0.2,
        }
    }
}

impl MixupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("mixup alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }

    pub fn sample_lambda<R: Rng>(&self, rng: &mut R) -> Result<f64> {
        self.validate()?;
        let beta = Beta::new(self.alpha, self.alpha).map_err(|e| Error::Config(format!("mixup beta: {e}")))?;
        Ok(beta.sample(rng))
    }
}

#[derive(Debug, Clone)]
pub struct MixedBatch<T> {
    pub x: Tensor<T>,
    pub y: Tensor<T>,
    pub lambda: f64,
    pub perm: Vec<usize>,
}

/// `n×classes` one-hot rows.
pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        data[i * classes + y] = T::one();
    }
    Tensor::new(&[labels.len(), classes], data)
}

/// Draws `λ ~ Beta(α, α)` and a random partner for each sample.
pub fn mixup_batch<T: Scalar, R: Rng>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    cfg: &MixupConfig,
    rng: &mut R,
) -> Result<MixedBatch<T>> {
    let n = x.shape().first().copied().unwrap_or(0);
    if n < 2 {
        return Err(Error::Data(format!("mixup needs a batch of at least 2, got {n}")));
    }
    let lambda = cfg.sample_lambda(rng)?;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    mixup_with(x, y, lambda, &perm)
}

/// `x̃ = λ·x + (1−λ)·x[perm]`, and the same for the targets.
pub fn mixup_with<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, lambda: f64, perm: &[usize]) -> Result<MixedBatch<T>> {
    let n = x.shape().first().copied().unwrap_or(0);
    if y.shape().first() != Some(&n) || perm.len() != n || perm.iter().any(|&p| p >= n) {
        return Err(Error::shape("mixup", x.shape(), y.shape()));
    }
    let mix = |t: &Tensor<T>| -> Result<Tensor<T>> {
        let row = t.numel() / n;
        let (a, b): (T, T) = (lit(lambda), lit(1.0 - lambda));
        let src = t.data();
        let mut out = Vec::with_capacity(t.numel());
        for (i, &j) in perm.iter().enumerate() {
            let (ri, rj) = (&src[i * row..(i + 1) * row], &src[j * row..(j + 1) * row]);
            out.extend(ri.iter().zip(rj).map(|(&u, &v)| a * u + b * v));
        }
        Tensor::new(t.shape(), out)
    };
    Ok(MixedBatch {
        x: mix(x)?,
        y: mix(y)?,
        lambda,
        perm: perm.to_vec(),
    })
}
