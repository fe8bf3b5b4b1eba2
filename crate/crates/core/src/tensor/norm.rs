use super::tape::Op;
use super::{check_finite, lit, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<T>,
}

#[derive(Debug)]
pub(crate) struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    /// Batch statistics contribute to the input gradient only in training mode.
    batch_stats: bool,
}

fn dims(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2] * shape[3])
}

impl<T: Scalar> Tape<T> {
    /// Batch normalization over `n×c×h×w` using batch statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let (xi, gi, bi) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let shape = self.shape_of(xi).to_vec();
        self.check_bn_shapes(&shape, gi, bi)?;
        let (n, c, hw) = dims(&shape);
        let m = n * hw;
        let xd = self.data(xi);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for s_i in 0..n {
                for &v in &xd[(s_i * c + ch) * hw..(s_i * c + ch + 1) * hw] {
                    s = s + v;
                }
            }
            let mu = s / lit::<T>(m as f64);
            let mut ss = T::zero();
            for s_i in 0..n {
                for &v in &xd[(s_i * c + ch) * hw..(s_i * c + ch + 1) * hw] {
                    ss = ss + (v - mu) * (v - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = ss / lit::<T>(m as f64);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let unbiased = if m > 1 {
            var.iter().map(|&v| v * lit::<T>(m as f64 / (m - 1) as f64)).collect()
        } else {
            var.clone()
        };
        let (out, xhat) = self.bn_apply(xi, gi, bi, &mean, &inv_std);
        check_finite("batch_norm", &out)?;
        let value = Tensor::new(&shape, out)?;
        let cache = BnCache {
            xhat,
            inv_std,
            batch_stats: true,
        };
        let y = self.push(
            value,
            Op::BatchNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                cache,
            },
            &[xi, gi, bi],
        );
        Ok((y, BatchStats { mean, var: unbiased }))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (xi, gi, bi) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let shape = self.shape_of(xi).to_vec();
        self.check_bn_shapes(&shape, gi, bi)?;
        if running_mean.len() != shape[1] || running_var.len() != shape[1] {
            return Err(Error::shape("batch_norm", &shape, &[running_mean.len()]));
        }
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (out, xhat) = self.bn_apply(xi, gi, bi, running_mean, &inv_std);
        check_finite("batch_norm", &out)?;
        let value = Tensor::new(&shape, out)?;
        let cache = BnCache {
            xhat,
            inv_std,
            batch_stats: false,
        };
        Ok(self.push(
            value,
            Op::BatchNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                cache,
            },
            &[xi, gi, bi],
        ))
    }

    fn check_bn_shapes(&self, shape: &[usize], gi: usize, bi: usize) -> Result<()> {
        if shape.len() != 4 {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: "batch_norm expects n×c×h×w".into(),
            });
        }
        for idx in [gi, bi] {
            if self.shape_of(idx) != [shape[1]] {
                return Err(Error::shape("batch_norm", shape, self.shape_of(idx)));
            }
        }
        Ok(())
    }

    fn bn_apply(&self, xi: usize, gi: usize, bi: usize, mean: &[T], inv_std: &[T]) -> (Vec<T>, Vec<T>) {
        let shape = self.shape_of(xi);
        let (n, c, hw) = dims(shape);
        let (xd, gd, bd) = (self.data(xi), self.data(gi), self.data(bi));
        let mut out = vec![T::zero(); xd.len()];
        let mut xhat = vec![T::zero(); xd.len()];
        for s in 0..n {
            for ch in 0..c {
                let r = (s * c + ch) * hw..(s * c + ch + 1) * hw;
                for ((o, h), &v) in out[r.clone()].iter_mut().zip(&mut xhat[r.clone()]).zip(&xd[r]) {
                    *h = (v - mean[ch]) * inv_std[ch];
                    *o = *h * gd[ch] + bd[ch];
                }
            }
        }
        (out, xhat)
    }
}

pub(crate) fn batch_norm_backward<T: Scalar>(
    shape: &[usize],
    gamma: &[T],
    cache: &BnCache<T>,
    g: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, c, hw) = dims(shape);
    let m = lit::<T>((n * hw) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for s in 0..n {
        for ch in 0..c {
            let r = (s * c + ch) * hw..(s * c + ch + 1) * hw;
            for (&gv, &h) in g[r.clone()].iter().zip(&cache.xhat[r]) {
                dgamma[ch] = dgamma[ch] + gv * h;
                dbeta[ch] = dbeta[ch] + gv;
            }
        }
    }
    let mut dx = vec![T::zero(); g.len()];
    for s in 0..n {
        for ch in 0..c {
            let r = (s * c + ch) * hw..(s * c + ch + 1) * hw;
            let k = gamma[ch] * cache.inv_std[ch];
            for ((d, &gv), &h) in dx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&cache.xhat[r]) {
                *d = if cache.batch_stats {
                    k * (gv - dbeta[ch] / m - h * dgamma[ch] / m)
                } else {
                    k * gv
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}
