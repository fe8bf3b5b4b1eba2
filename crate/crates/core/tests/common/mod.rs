//! Scalar reference implementations, written straight from the formulas
//! with plain loops over `f64`. Nothing here touches the tape.
#![allow(dead_code)]

use rand::Rng;

pub const ACOS_EPS: f64 = 1e-12;

/// Activation of one sample, `c×h×w` row-major.
#[derive(Debug, Clone)]
pub struct Act {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Act {
    pub fn random<R: Rng>(rng: &mut R, c: usize, h: usize, w: usize) -> Self {
        Act {
            c,
            h,
            w,
            data: (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }
}

/// `f[y][x] = Σ_c |A[c][y][x]|^d`.
pub fn attention(a: &Act, d: f64) -> Vec<f64> {
    let hw = a.h * a.w;
    let mut f = vec![0.0; hw];
    for ch in 0..a.c {
        for i in 0..hw {
            f[i] += a.data[ch * hw + i].abs().powf(d);
        }
    }
    f
}

pub fn frob(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn normalized(v: &[f64]) -> Vec<f64> {
    let n = frob(v);
    v.iter().map(|x| x / n).collect()
}

/// `(q_pos, q_neg)` of a raw map.
pub fn pos_neg(f: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let qp = normalized(f);
    let qn = qp.iter().map(|q| 1.0 - q).collect();
    (qp, qn)
}

fn clamp(q: f64) -> f64 {
    q.clamp(-1.0 + ACOS_EPS, 1.0 - ACOS_EPS)
}

/// Literal log-ratio form, exponentials and all.
pub fn g_literal(qp: f64, qn: f64, s: f64, m: f64) -> f64 {
    let tp = clamp(qp).acos();
    let tn = clamp(qn).acos();
    let num = (s * (m * tp).cos()).exp();
    let den = num + (s * tn.cos()).exp();
    (num / den).ln()
}

/// Same quantity as `-ln(1 + e^(b - a))`, which does not round to zero
/// when the positive side dominates.
pub fn g_stable(qp: f64, qn: f64, s: f64, m: f64) -> f64 {
    let a = s * (m * clamp(qp).acos()).cos();
    let b = s * clamp(qn).acos().cos();
    -(b - a).exp().ln_1p()
}

pub fn g_map(qp: &[f64], qn: &[f64], s: f64, m: f64) -> Vec<f64> {
    qp.iter().zip(qn).map(|(&p, &n)| g_stable(p, n, s, m)).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Per-layer components for one layer: batch means of the three squared
/// distances between renormalized maps. `maps_*[i] = (q_pos, q_neg)` of sample i.
pub fn layer_components(
    maps_t: &[(Vec<f64>, Vec<f64>)],
    maps_s: &[(Vec<f64>, Vec<f64>)],
    s: f64,
    m: f64,
) -> (f64, f64, f64) {
    let n = maps_t.len() as f64;
    let (mut a, mut p, mut q) = (0.0, 0.0, 0.0);
    for ((tp, tn), (sp, sn)) in maps_t.iter().zip(maps_s) {
        let gt = normalized(&g_map(tp, tn, s, m));
        let gs = normalized(&g_map(sp, sn, s, m));
        a += sq_dist(&gt, &gs);
        p += sq_dist(&normalized(tp), &normalized(sp));
        q += sq_dist(&normalized(tn), &normalized(sn));
    }
    (a / n, p / n, q / n)
}

/// Loss over layers: `Σ (a + p + n) / (3·|L|)`.
pub fn am_loss(layers: &[(f64, f64, f64)]) -> f64 {
    layers.iter().map(|(a, p, n)| a + p + n).sum::<f64>() / (3.0 * layers.len() as f64)
}

/// Raw per-sample attention maps for a batch of activations.
pub fn batch_maps(acts: &[Act], d: f64) -> Vec<Vec<f64>> {
    acts.iter().map(|a| attention(a, d)).collect()
}

/// Quadrant `k` of an `h×w` map, row-major quadrant order.
pub fn quadrant(f: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let (h2, w2) = (h / 2, w / 2);
    let (r0, c0) = ((k / 2) * h2, (k % 2) * w2);
    let mut out = Vec::with_capacity(h2 * w2);
    for r in r0..r0 + h2 {
        for c in c0..c0 + w2 {
            out.push(f[r * w + c]);
        }
    }
    out
}

pub fn mask(qn: &[f64], t: f64) -> Vec<f64> {
    qn.iter().map(|&v| if v > t { v } else { 0.0 }).collect()
}

/// `-mean log softmax(z)[y]`.
pub fn cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (z, &y) in logits.iter().zip(labels) {
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        total += -(z[y].exp() / denom).ln();
    }
    total / logits.len() as f64
}

pub fn softmax(z: &[f64], tau: f64) -> Vec<f64> {
    let e: Vec<f64> = z.iter().map(|v| (v / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `τ² · mean KL(softmax(t/τ) ‖ softmax(s/τ))`.
pub fn kd_kl(teacher: &[Vec<f64>], student: &[Vec<f64>], tau: f64) -> f64 {
    let mut total = 0.0;
    for (t, s) in teacher.iter().zip(student) {
        let p = softmax(t, tau);
        let q = softmax(s, tau);
        total += p.iter().zip(&q).map(|(pi, qi)| pi * (pi / qi).ln()).sum::<f64>();
    }
    tau * tau * total / teacher.len() as f64
}

pub fn rel(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

pub mod drive;
