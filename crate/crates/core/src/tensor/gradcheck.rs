use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Per-coordinate `|a - n| / max(|a|, |n|, floor)`, where `floor` is
    /// 1e-3 of the largest gradient magnitude (and at least 1e-10), so
    /// coordinates far below the gradient's scale are judged against it.
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

fn eval<F>(f: &F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&mut tape, xv)?;
    let shape = tape.shape(y)?.to_vec();
    if shape.iter().product::<usize>() != 1 {
        return Err(Error::NonScalarLoss { shape });
    }
    tape.item(y)
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `step`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let first = eval(&f, x)?;
    let second = eval(&f, x)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&mut tape, xv)?;
    tape.backward(y)?;
    let analytic: Vec<f64> = tape.grad(xv)?.expect("param leaf has a gradient").to_vec();

    let mut numeric = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * step));
    }

    let scale = analytic
        .iter()
        .chain(&numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-10);
    let rel_errors: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .collect();
    let (worst_index, max_rel_error) = rel_errors
        .iter()
        .enumerate()
        .fold((None, 0.0f64), |(wi, wm), (i, &e)| if e > wm { (Some(i), e) } else { (wi, wm) });

    Ok(GradCheckReport {
        analytic,
        numeric,
        rel_errors,
        max_rel_error,
        worst_index,
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn sum_of_cos_matches() {
        let x = Tensor::from_f64(&[5], &[0.1, -1.2, 2.0, 0.7, 3.0]).unwrap();
        let report = grad_check(
            |t, x| {
                let c = t.cos(x)?;
                t.sum_all(c)
            },
            &x,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_error);
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let x = Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let report = grad_check(
            |t, x| {
                let z = t.mul_scalar(x, 0.0)?;
                let s = t.sum_all(z)?;
                t.add_scalar(s, 4.0)
            },
            &x,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.analytic.iter().all(|&g| g == 0.0));
        assert!(report.numeric.iter().all(|&g| g == 0.0));
        assert!(report.passed());
    }

    #[test]
    fn detects_non_determinism() {
        let calls = Cell::new(0u32);
        let x = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let err = grad_check(
            |t, x| {
                calls.set(calls.get() + 1);
                let s = t.sum_all(x)?;
                t.add_scalar(s, calls.get() as f64)
            },
            &x,
            1e-5,
            1e-6,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }
}
