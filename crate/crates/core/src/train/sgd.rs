use crate::error::{Error, Result};
use crate::nn::Param;
use crate::tensor::{lit, Scalar};

/// One momentum-SGD update over parallel slices of parameters, gradients
/// and velocity buffers:
/// `v ← μ·v + g + wd·p`, `p ← p − lr·v`.
///
/// Every gradient is checked before anything is written, so a non-finite
/// gradient leaves all state untouched.
pub fn sgd_step<T: Scalar>(
    params: &mut [Param<T>],
    grads: &[Vec<T>],
    velocity: &mut [Vec<T>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() || velocity.len() != params.len() {
        return Err(Error::shape("sgd_step", &[params.len()], &[grads.len(), velocity.len()]));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(velocity.iter()) {
        if g.len() != p.value.numel() || v.len() != p.value.numel() {
            return Err(Error::shape("sgd_step", p.value.shape(), &[g.len(), v.len()]));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient { param: p.name.clone() });
        }
    }
    let (lr, mu, wd): (T, T, T) = (lit(lr), lit(momentum), lit(weight_decay));
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((w, &gi), vi) in p.value.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = mu * *vi + gi + wd * *w;
            *w = *w - lr * *vi;
        }
    }
    Ok(())
}

/// Momentum buffers for one model.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(params: &[Param<T>], momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: params.iter().map(|p| vec![T::zero(); p.value.numel()]).collect(),
        }
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut [Param<T>], grads: &[Vec<T>], lr: f64) -> Result<()> {
        sgd_step(params, grads, &mut self.velocity, lr, self.momentum, self.weight_decay)
    }
}
