//! Response-based distillation and the combined objective.

use serde::{Deserialize, Serialize};

use crate::amd::{amd_feature_loss, AmdConfig, LayerPairing};
use crate::error::{Error, Result};
use crate::nn::FeatureMap;
use crate::tensor::{lit, Scalar, Tape, Tensor, Var};

/// Classification targets: hard labels or per-class probabilities.
#[derive(Debug, Clone)]
pub enum Targets<T> {
    Labels(Vec<usize>),
    /// `n×J` rows summing to one (mixup produces these).
    Soft(Tensor<T>),
}

impl<T: Scalar> Targets<T> {
    fn dense(&self, n: usize, classes: usize) -> Result<Tensor<T>> {
        match self {
            Targets::Labels(labels) => {
                if labels.len() != n {
                    return Err(Error::shape("cross_entropy", &[labels.len()], &[n]));
                }
                let mut data = vec![T::zero(); n * classes];
                for (i, &y) in labels.iter().enumerate() {
                    if y >= classes {
                        return Err(Error::LabelOutOfRange { label: y, classes });
                    }
                    data[i * classes + y] = T::one();
                }
                Tensor::new(&[n, classes], data)
            }
            Targets::Soft(t) => {
                if t.shape() != [n, classes] {
                    return Err(Error::shape("cross_entropy", t.shape(), &[n, classes]));
                }
                Ok(t.clone())
            }
        }
    }
}

/// Row-wise `z − logsumexp(z)` for `n×J` logits.
pub fn log_softmax<T: Scalar>(tape: &mut Tape<T>, z: Var) -> Result<Var> {
    let shape = tape.shape(z)?.to_vec();
    if shape.len() != 2 {
        return Err(Error::InvalidShape {
            shape,
            reason: "logits must be n×J".into(),
        });
    }
    let lse = tape.logsumexp(z, &[1])?;
    let lse = tape.reshape(lse, &[shape[0], 1])?;
    let lse = tape.broadcast_to(lse, &shape)?;
    tape.sub(z, lse)
}

/// Mean over the batch of `−Σ_j t_j log softmax(z)_j`.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, targets: &Targets<T>) -> Result<Var> {
    let shape = tape.shape(logits)?.to_vec();
    let lsm = log_softmax(tape, logits)?;
    let dense = targets.dense(shape[0], shape[1])?;
    let t = tape.constant(dense);
    let picked = tape.mul(lsm, t)?;
    let total = tape.sum_all(picked)?;
    tape.mul_scalar(total, lit(-1.0 / shape[0] as f64))
}

/// `τ² · KL(softmax(a_T/τ) ‖ softmax(a_S/τ))`, batch mean. The teacher
/// logits are detached first.
pub fn kd_kl<T: Scalar>(tape: &mut Tape<T>, teacher: Var, student: Var, tau: f64) -> Result<Var> {
    let (ts, ss) = (tape.shape(teacher)?.to_vec(), tape.shape(student)?.to_vec());
    if ts != ss || ts.len() != 2 {
        return Err(Error::shape("kd_kl", &ts, &ss));
    }
    let inv: T = lit(1.0 / tau);
    let teacher = tape.detach(teacher)?;
    let zt = tape.mul_scalar(teacher, inv)?;
    let zs = tape.mul_scalar(student, inv)?;
    let lp = log_softmax(tape, zt)?;
    let lq = log_softmax(tape, zs)?;
    let p = tape.exp(lp)?;
    let diff = tape.sub(lp, lq)?;
    let terms = tape.mul(p, diff)?;
    let total = tape.sum_all(terms)?;
    tape.mul_scalar(total, lit(tau * tau / ts[0] as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.1,
            lambda2: 0.9,
            tau: 4.0,
        }
    }
}

impl LossWeights {
    /// Classic `(1 − λ)·CE + λ·KD` weighting.
    pub fn complementary(lambda: f64, tau: f64) -> Self {
        LossWeights {
            lambda1: 1.0 - lambda,
            lambda2: lambda,
            tau,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got λ1={} λ2={}",
                self.lambda1, self.lambda2
            )));
        }
        if !(self.tau >= 1.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be at least 1, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Raw and weighted values of each objective term.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub kd: f64,
    pub amd: f64,
    pub ce_weighted: f64,
    pub kd_weighted: f64,
    pub amd_weighted: f64,
    pub total: f64,
    /// Weighted A/P/N parts of the raw AMD term.
    pub amd_a: f64,
    pub amd_p: f64,
    pub amd_n: f64,
}

/// Teacher-side inputs; absent for plain supervised training.
pub struct TeacherSignal<'a> {
    pub logits: Var,
    pub taps: &'a [FeatureMap],
}

/// `λ1·CE + λ2·KD + γ·AMD`. Without a teacher only the CE term exists; with
/// one, every term is evaluated even at zero weight so the logged parts are
/// always present.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    student_logits: Var,
    targets: &Targets<T>,
    student_taps: &[FeatureMap],
    teacher: Option<TeacherSignal<'_>>,
    pairing: &LayerPairing,
    weights: &LossWeights,
    amd: &AmdConfig,
) -> Result<(Var, LossBreakdown)> {
    let ce = cross_entropy(tape, student_logits, targets)?;
    let mut total = tape.mul_scalar(ce, lit(weights.lambda1))?;
    let mut b = LossBreakdown {
        ce: tape.item(ce)?.as_f64(),
        ..Default::default()
    };
    b.ce_weighted = tape.item(total)?.as_f64();

    if let Some(t) = teacher {
        let kd = kd_kl(tape, t.logits, student_logits, weights.tau)?;
        let kd_w = tape.mul_scalar(kd, lit(weights.lambda2))?;
        total = tape.add(total, kd_w)?;
        b.kd = tape.item(kd)?.as_f64();
        b.kd_weighted = tape.item(kd_w)?.as_f64();

        let feat = amd_feature_loss(tape, t.taps, student_taps, pairing, amd)?;
        let amd_w = tape.mul_scalar(feat.loss, lit(amd.gamma))?;
        total = tape.add(total, amd_w)?;
        b.amd = tape.item(feat.loss)?.as_f64();
        b.amd_weighted = tape.item(amd_w)?.as_f64();
        let (a, p, n) = feat.weighted_components(amd);
        b.amd_a = a;
        b.amd_p = p;
        b.amd_n = n;
    }
    b.total = tape.item(total)?.as_f64();
    Ok((total, b))
}
