//! Self-check suite: library results against plain-loop reference
//! implementations, plus finite-difference gradient checks. Runs offline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::amd::{am_loss_with_fault, amd_feature_loss, angular_knowledge, AmdConfig, Fault, LayerPairing};
use crate::attention::{attention_map, normalize_pair, AttentionPair};
use crate::error::Result;
use crate::kd::{cross_entropy, kd_kl, Targets};
use crate::nn::FeatureMap;
use crate::tensor::{grad_check, Tape, Tensor, Var};

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed error.
    pub error: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<24} {:>6} {:>12} {:>10}\n", "check", "result", "error", "tol");
        for c in &self.checks {
            s.push_str(&format!(
                "{:<24} {:>6} {:>12.3e} {:>10.0e}\n",
                c.name,
                if c.passed { "pass" } else { "FAIL" },
                c.error,
                c.tolerance
            ));
        }
        s
    }
}

fn rel(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn check(name: &'static str, error: f64, tolerance: f64) -> Check {
    Check {
        name,
        passed: error.is_finite() && error <= tolerance,
        error,
        tolerance,
    }
}

fn failed(name: &'static str, tolerance: f64) -> Check {
    Check {
        name,
        passed: false,
        error: f64::INFINITY,
        tolerance,
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn matmul_check(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (m, k, n) = (5, 7, 3);
    let a = uniform(rng, m * k, -1.0, 1.0);
    let b = uniform(rng, k * n, -1.0, 1.0);
    let mut tape = Tape::<f64>::new();
    let av = tape.constant(Tensor::from_f64(&[m, k], &a)?);
    let bv = tape.constant(Tensor::from_f64(&[k, n], &b)?);
    let c = tape.matmul(av, bv)?;
    let got = tape.value(c)?.data().to_vec();
    let mut worst = 0.0f64;
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * n + j];
            }
            worst = worst.max((s - got[i * n + j]).abs());
        }
    }
    Ok(worst)
}

fn conv_check(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n, c, h, w, o, k, pad) = (2, 3, 8, 8, 4, 3, 1);
    let x = uniform(rng, n * c * h * w, -1.0, 1.0);
    let kern = uniform(rng, o * c * k * k, -1.0, 1.0);
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(Tensor::from_f64(&[n, c, h, w], &x)?);
    let kv = tape.constant(Tensor::from_f64(&[o, c, k, k], &kern)?);
    let y = tape.conv2d(xv, kv, 1, pad)?;
    let got = tape.value(y)?.data().to_vec();
    let mut worst = 0.0f64;
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..h {
                for ox in 0..w {
                    let mut s = 0.0;
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = oy as isize + ky as isize - pad as isize;
                                let ix = ox as isize + kx as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                s += x[((b * c + ic) * h + iy as usize) * w + ix as usize]
                                    * kern[((oc * c + ic) * k + ky) * k + kx];
                            }
                        }
                    }
                    worst = worst.max((s - got[((b * o + oc) * h + oy) * w + ox]).abs());
                }
            }
        }
    }
    Ok(worst)
}

fn logsumexp_check() -> Result<f64> {
    let (hi, lo) = (64.0 * 0.82, 6.4);
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(Tensor::from_f64(&[2], &[hi, lo])?);
    let l = tape.logsumexp(v, &[])?;
    let want = hi + (lo - hi).exp().ln_1p();
    let e1 = rel(tape.item(l)?, want);
    let v = tape.constant(Tensor::from_f64(&[2], &[3.5, 3.5])?);
    let l = tape.logsumexp(v, &[])?;
    let e2 = rel(tape.item(l)?, 3.5 + std::f64::consts::LN_2);
    Ok(e1.max(e2))
}

fn composite_gradient(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = Tensor::from_f64(&[2, 3], &uniform(rng, 6, -0.9, 0.9))?;
    let report = grad_check(
        |tape, x| {
            let c = tape.cos(x)?;
            let e = tape.exp(x)?;
            let ce = tape.mul(c, e)?;
            let a = tape.acos(x)?;
            let s = tape.add(ce, a)?;
            let l = tape.logsumexp(s, &[1])?;
            tape.sum_all(l)
        },
        &x,
        1e-5,
        1e-6,
    )?;
    Ok(report.max_rel_error)
}

// Reference forms, straight from the definitions.

fn ref_attention(act: &[f64], c: usize, hw: usize) -> Vec<f64> {
    (0..hw).map(|i| (0..c).map(|ch| act[ch * hw + i].powi(2)).sum()).collect()
}

fn ref_normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Literal `log(e^a / (e^a + e^b))`.
fn ref_g(qp: f64, qn: f64, s: f64, m: f64) -> f64 {
    let eps = 1e-12;
    let tp = qp.clamp(-1.0 + eps, 1.0 - eps).acos();
    let tn = qn.clamp(-1.0 + eps, 1.0 - eps).acos();
    // ln(e^a / (e^a + e^b)) = -ln(1 + e^(b - a))
    -(s * (tn.cos() - (m * tp).cos())).exp().ln_1p()
}

fn ref_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `(a, p, n)` batch means for one layer.
fn ref_components(t: &[Vec<f64>], s: &[Vec<f64>], c: (usize, usize), hw: usize, sm: (f64, f64)) -> (f64, f64, f64) {
    let mut acc = (0.0, 0.0, 0.0);
    for (ta, sa) in t.iter().zip(s) {
        let qtp = ref_normalize(&ref_attention(ta, c.0, hw));
        let qsp = ref_normalize(&ref_attention(sa, c.1, hw));
        let qtn: Vec<f64> = qtp.iter().map(|q| 1.0 - q).collect();
        let qsn: Vec<f64> = qsp.iter().map(|q| 1.0 - q).collect();
        let gt: Vec<f64> = qtp.iter().zip(&qtn).map(|(&p, &n)| ref_g(p, n, sm.0, sm.1)).collect();
        let gs: Vec<f64> = qsp.iter().zip(&qsn).map(|(&p, &n)| ref_g(p, n, sm.0, sm.1)).collect();
        acc.0 += ref_sq(&ref_normalize(&gt), &ref_normalize(&gs));
        acc.1 += ref_sq(&ref_normalize(&qtp), &ref_normalize(&qsp));
        acc.2 += ref_sq(&ref_normalize(&qtn), &ref_normalize(&qsn));
    }
    let n = t.len() as f64;
    (acc.0 / n, acc.1 / n, acc.2 / n)
}

fn g_check() -> Result<f64> {
    let mut worst = 0.0f64;
    for &(s, m) in &[(1.0, 1.0), (30.0, 1.35), (64.0, 1.35), (64.0, 2.0)] {
        let qp: Vec<f64> = (1..20).map(|i| i as f64 / 20.0).collect();
        let qn: Vec<f64> = qp.iter().map(|q| 1.0 - q).collect();
        let mut tape = Tape::<f64>::new();
        let shape = [1, 1, 1, qp.len()];
        let pair = AttentionPair {
            f: tape.constant(Tensor::from_f64(&shape, &qp)?),
            q_pos: tape.constant(Tensor::from_f64(&shape, &qp)?),
            q_neg: tape.constant(Tensor::from_f64(&shape, &qn)?),
            layer: "grid".into(),
            scope: crate::attention::Scope::Global,
            masked: false,
        };
        let g = angular_knowledge(&mut tape, &pair, s, m)?;
        for (i, &v) in tape.value(g)?.data().iter().enumerate() {
            let want = ref_g(qp[i], qn[i], s, m);
            worst = worst.max((v - want).abs() / v.abs().max(want.abs()).max(1e-10));
        }
    }
    Ok(worst)
}

struct AmdFixture {
    n: usize,
    /// Per layer: channels (teacher, student), side length.
    layers: Vec<(usize, usize, usize)>,
    teacher: Vec<Vec<Vec<f64>>>,
    student: Vec<Vec<Vec<f64>>>,
}

fn amd_fixture(rng: &mut ChaCha8Rng) -> AmdFixture {
    let n = 3;
    let layers = vec![(4, 2, 4), (3, 5, 2)];
    let mut gen = |c: usize, side: usize| -> Vec<Vec<f64>> { (0..n).map(|_| uniform(rng, c * side * side, -1.0, 1.0)).collect() };
    let teacher = layers.iter().map(|&(ct, _, side)| gen(ct, side)).collect();
    let student = layers.iter().map(|&(_, cs, side)| gen(cs, side)).collect();
    AmdFixture {
        n,
        layers,
        teacher,
        student,
    }
}

fn stack(n: usize, c: usize, side: usize, acts: &[Vec<f64>]) -> Result<Tensor<f64>> {
    Tensor::from_f64(&[n, c, side, side], &acts.concat())
}

/// Library A/P/N totals and loss on the fixture.
fn library_components(fx: &AmdFixture, cfg: &AmdConfig, fault: Fault) -> Result<((f64, f64, f64), f64)> {
    let mut tape = Tape::<f64>::new();
    let mut tp = Vec::new();
    let mut sp = Vec::new();
    for (l, &(ct, cs, side)) in fx.layers.iter().enumerate() {
        let at = tape.constant(stack(fx.n, ct, side, &fx.teacher[l])?);
        let as_ = tape.constant(stack(fx.n, cs, side, &fx.student[l])?);
        let ft = attention_map(&mut tape, at, 2.0)?;
        let fs = attention_map(&mut tape, as_, 2.0)?;
        tp.push(normalize_pair(&mut tape, ft, "t", false)?);
        sp.push(normalize_pair(&mut tape, fs, "s", false)?);
    }
    let loss = am_loss_with_fault(&mut tape, &tp, &sp, cfg, fault)?;
    Ok((loss.totals(), tape.item(loss.loss)?))
}

fn amd_component_checks(rng: &mut ChaCha8Rng, fault: Fault, out: &mut Vec<Check>) -> Result<()> {
    let fx = amd_fixture(rng);
    let cfg = AmdConfig::default();
    let mut want = (0.0, 0.0, 0.0);
    for (l, &(ct, cs, side)) in fx.layers.iter().enumerate() {
        let c = ref_components(&fx.teacher[l], &fx.student[l], (ct, cs), side * side, (cfg.s, cfg.m));
        want = (want.0 + c.0, want.1 + c.1, want.2 + c.2);
    }
    let want_loss = (want.0 + want.1 + want.2) / (3.0 * fx.layers.len() as f64);
    let (got, loss) = library_components(&fx, &cfg, fault)?;
    out.push(check("amd.component_a", rel(got.0, want.0), 1e-6));
    out.push(check("amd.component_p", rel(got.1, want.1), 1e-6));
    out.push(check("amd.component_n", rel(got.2, want.2), 1e-6));
    out.push(check("amd.loss", rel(loss, want_loss), 1e-6));
    Ok(())
}

fn amd_gradient(rng: &mut ChaCha8Rng, fault: Fault) -> Result<f64> {
    let fx = amd_fixture(rng);
    let cfg = AmdConfig {
        use_local: true,
        use_mask: true,
        ..AmdConfig::default()
    };
    let (ct, cs, side) = fx.layers[0];
    let teacher = stack(fx.n, ct, side, &fx.teacher[0])?;
    let x = stack(fx.n, cs, side, &fx.student[0])?;
    let pairing = LayerPairing {
        pairs: vec![("group1".into(), "group1".into())],
    };
    let f = |tape: &mut Tape<f64>, xv: Var| -> Result<Var> {
        let tv = tape.constant(teacher.clone());
        let t = [FeatureMap {
            layer: "group1",
            activation: tv,
        }];
        let s = [FeatureMap {
            layer: "group1",
            activation: xv,
        }];
        if fault == Fault::None {
            Ok(amd_feature_loss(tape, &t, &s, &pairing, &cfg)?.loss)
        } else {
            let (tp, sp) = crate::amd::build_pairs(tape, &t, &s, &pairing, &cfg)?;
            Ok(am_loss_with_fault(tape, &tp, &sp, &cfg, fault)?.loss)
        }
    };
    Ok(grad_check(f, &x, 1e-5, 1e-4)?.max_rel_error)
}

fn kd_checks(rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
    let (n, j) = (4, 6);
    let t = uniform(rng, n * j, -4.0, 4.0);
    let s = uniform(rng, n * j, -4.0, 4.0);
    let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..j)).collect();
    let tau = 4.0;
    let mut tape = Tape::<f64>::new();
    let tv = tape.constant(Tensor::from_f64(&[n, j], &t)?);
    let sv = tape.constant(Tensor::from_f64(&[n, j], &s)?);
    let ce = cross_entropy(&mut tape, sv, &Targets::Labels(y.clone()))?;
    let kl = kd_kl(&mut tape, tv, sv, tau)?;

    let softmax = |z: &[f64], tau: f64| -> Vec<f64> {
        let e: Vec<f64> = z.iter().map(|v| (v / tau).exp()).collect();
        let sum: f64 = e.iter().sum();
        e.iter().map(|v| v / sum).collect()
    };
    let mut want_ce = 0.0;
    let mut want_kl = 0.0;
    for i in 0..n {
        let row_s = &s[i * j..(i + 1) * j];
        let row_t = &t[i * j..(i + 1) * j];
        want_ce -= softmax(row_s, 1.0)[y[i]].ln();
        let p = softmax(row_t, tau);
        let q = softmax(row_s, tau);
        want_kl += p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum::<f64>();
    }
    want_ce /= n as f64;
    want_kl *= tau * tau / n as f64;
    Ok((rel(tape.item(ce)?, want_ce), rel(tape.item(kl)?, want_kl)))
}

/// Runs every check. `fault` perturbs the library side only.
pub fn run_verify(fault: Fault) -> VerifyReport {
    let mut rng = ChaCha8Rng::seed_from_u64(20240501);
    let mut checks = Vec::new();
    let push = |name: &'static str, r: Result<f64>, tol: f64, checks: &mut Vec<Check>| {
        checks.push(match r {
            Ok(e) => check(name, e, tol),
            Err(_) => failed(name, tol),
        })
    };
    push("tensor.matmul", matmul_check(&mut rng), 1e-12, &mut checks);
    push("tensor.conv2d", conv_check(&mut rng), 1e-10, &mut checks);
    push("tensor.logsumexp", logsumexp_check(), 1e-12, &mut checks);
    push("tensor.gradient", composite_gradient(&mut rng), 1e-6, &mut checks);
    push("amd.angular_knowledge", g_check(), 1e-6, &mut checks);
    if amd_component_checks(&mut rng, fault, &mut checks).is_err() {
        checks.push(failed("amd.components", 1e-6));
    }
    push("amd.gradient", amd_gradient(&mut rng, fault), 1e-4, &mut checks);
    match kd_checks(&mut rng) {
        Ok((ce, kl)) => {
            checks.push(check("kd.cross_entropy", ce, 1e-9));
            checks.push(check("kd.kl", kl, 1e-9));
        }
        Err(_) => checks.push(failed("kd", 1e-9)),
    }
    VerifyReport { checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pristine_passes() {
        let r = run_verify(Fault::None);
        assert!(r.passed(), "{}", r.table());
    }

    #[test]
    fn flipped_g_fails_on_component_a() {
        let r = run_verify(Fault::FlipStudentG);
        let a = r.checks.iter().find(|c| c.name == "amd.component_a").unwrap();
        assert!(!a.passed);
        let p = r.checks.iter().find(|c| c.name == "amd.component_p").unwrap();
        assert!(p.passed);
    }
}
