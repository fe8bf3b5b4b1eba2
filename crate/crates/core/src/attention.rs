//! Spatial attention maps and their positive/negative decomposition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{lit, Scalar, Tape, Tensor, Var};

/// Added to a map's norm when the guard is enabled.
pub const NORM_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Global,
    /// Quadrant index in row-major order: top-left, top-right, bottom-left,
    /// bottom-right.
    Local(usize),
}

/// How local quadrants obtain their positive/negative maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocalMode {
    /// Normalize each quadrant of the raw map on its own.
    #[default]
    Renormalize,
    /// Slice the globally normalized maps.
    Slice,
}

#[derive(Debug, Clone)]
pub struct AttentionPair {
    /// Raw map `f`, `n×1×h×w`.
    pub f: Var,
    pub q_pos: Var,
    pub q_neg: Var,
    pub layer: String,
    pub scope: Scope,
    /// Set once the negative map has been thresholded; `q_pos + q_neg = 1`
    /// no longer holds.
    pub masked: bool,
}

/// `f = Σ_c |A_c|^d` over the channel axis, kept as `n×1×h×w`.
pub fn attention_map<T: Scalar>(tape: &mut Tape<T>, a: Var, d: f64) -> Result<Var> {
    let shape = tape.shape(a)?.to_vec();
    if shape.len() != 4 {
        return Err(Error::InvalidShape {
            shape,
            reason: "attention map needs an n×c×h×w activation".into(),
        });
    }
    if d < 1.0 {
        return Err(Error::Config(format!("attention power must be at least 1, got {d}")));
    }
    let powered = if d == 2.0 {
        tape.mul(a, a)?
    } else {
        let m = tape.abs(a)?;
        tape.pow(m, lit(d))?
    };
    let f = tape.sum(powered, &[1])?;
    tape.reshape(f, &[shape[0], 1, shape[2], shape[3]])
}

/// Divides every sample of `x` (`n×…`) by its Frobenius norm.
///
/// With `guard` the norm is `sqrt(Σx² + g²)` for a tiny `g`, which keeps
/// all-zero samples finite; without it an all-zero sample is an error.
pub fn frobenius_normalize<T: Scalar>(tape: &mut Tape<T>, x: Var, guard: bool) -> Result<Var> {
    let shape = tape.shape(x)?.to_vec();
    let n = shape[0];
    let axes: Vec<usize> = (1..shape.len()).collect();
    let sq = tape.mul(x, x)?;
    let mut ss = tape.sum(sq, &axes)?;
    if guard {
        ss = tape.add_scalar(ss, lit(NORM_GUARD * NORM_GUARD))?;
    } else if let Some(sample) = tape.value(ss)?.data().iter().position(|&v| v <= T::zero()) {
        return Err(Error::DegenerateAttention { sample });
    }
    let norm = tape.sqrt(ss)?;
    let mut col = vec![1; shape.len()];
    col[0] = n;
    let norm = tape.reshape(norm, &col)?;
    let norm = tape.broadcast_to(norm, &shape)?;
    tape.div(x, norm)
}

/// `q_pos = f / ‖f‖_F` per sample, `q_neg = 1 − q_pos`.
pub fn normalize_pair<T: Scalar>(tape: &mut Tape<T>, f: Var, layer: &str, guard: bool) -> Result<AttentionPair> {
    pair_with_scope(tape, f, layer, Scope::Global, guard)
}

fn pair_with_scope<T: Scalar>(
    tape: &mut Tape<T>,
    f: Var,
    layer: &str,
    scope: Scope,
    guard: bool,
) -> Result<AttentionPair> {
    let q_pos = frobenius_normalize(tape, f, guard)?;
    let neg = tape.neg(q_pos)?;
    let q_neg = tape.add_scalar(neg, T::one())?;
    Ok(AttentionPair {
        f,
        q_pos,
        q_neg,
        layer: layer.to_string(),
        scope,
        masked: false,
    })
}

fn quadrant<T: Scalar>(tape: &mut Tape<T>, x: Var, k: usize) -> Result<Var> {
    let shape = tape.shape(x)?;
    let (h2, w2) = (shape[2] / 2, shape[3] / 2);
    let rows = tape.slice(x, 2, (k / 2) * h2, h2)?;
    tape.slice(rows, 3, (k % 2) * w2, w2)
}

/// Splits a global pair into its four `h/2×w/2` quadrants.
pub fn split_local<T: Scalar>(
    tape: &mut Tape<T>,
    pair: &AttentionPair,
    mode: LocalMode,
    guard: bool,
) -> Result<[AttentionPair; 4]> {
    let shape = tape.shape(pair.f)?;
    let (h, w) = (shape[2], shape[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::OddSpatial { height: h, width: w });
    }
    let mut out = Vec::with_capacity(4);
    for k in 0..4 {
        let f = quadrant(tape, pair.f, k)?;
        let p = match mode {
            LocalMode::Renormalize => pair_with_scope(tape, f, &pair.layer, Scope::Local(k), guard)?,
            LocalMode::Slice => AttentionPair {
                f,
                q_pos: quadrant(tape, pair.q_pos, k)?,
                q_neg: quadrant(tape, pair.q_neg, k)?,
                layer: pair.layer.clone(),
                scope: Scope::Local(k),
                masked: pair.masked,
            },
        };
        out.push(p);
    }
    Ok(out.try_into().expect("four quadrants"))
}

/// Keeps negative entries above `threshold` and zeroes the rest.
pub fn mask_negative<T: Scalar>(tape: &mut Tape<T>, pair: &AttentionPair, threshold: f64) -> Result<AttentionPair> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("mask threshold must lie in (0, 1), got {threshold}")));
    }
    let t: T = lit(threshold);
    let q = tape.value(pair.q_neg)?;
    let mask: Vec<T> = q
        .data()
        .iter()
        .map(|&v| if v > t { T::one() } else { T::zero() })
        .collect();
    let mask = tape.constant(Tensor::new(q.shape(), mask)?);
    let q_neg = tape.mul(pair.q_neg, mask)?;
    Ok(AttentionPair {
        q_neg,
        masked: true,
        ..pair.clone()
    })
}

/// Average-pools the larger of two raw maps down to the smaller one's size.
pub fn align_spatial<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<(Var, Var)> {
    let (sa, sb) = (tape.shape(a)?.to_vec(), tape.shape(b)?.to_vec());
    if sa[..2] != sb[..2] {
        return Err(Error::shape("align_spatial", &sa, &sb));
    }
    if sa[2..] == sb[2..] {
        return Ok((a, b));
    }
    let factor = |big: &[usize], small: &[usize]| -> Option<usize> {
        let k = big[2] / small[2];
        (k > 1 && big[2] == k * small[2] && big[3] == k * small[3]).then_some(k)
    };
    if let Some(k) = factor(&sa, &sb) {
        Ok((tape.avg_pool2d(a, k)?, b))
    } else if let Some(k) = factor(&sb, &sa) {
        Ok((a, tape.avg_pool2d(b, k)?))
    } else {
        Err(Error::shape("align_spatial", &sa, &sb))
    }
}
