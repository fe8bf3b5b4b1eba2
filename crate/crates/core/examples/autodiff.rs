//! Builds a small graph on the tape, runs backward and compares the
//! gradient with central differences.

use amd_distill::tensor::{grad_check, Tape, Tensor};

fn main() -> amd_distill::Result<()> {
    let x = Tensor::from_f64(&[2, 3], &[0.5, -1.0, 2.0, 0.25, 1.5, -0.75])?;
    let w = Tensor::from_f64(&[3, 2], &[1.0, -0.5, 0.25, 2.0, -1.0, 0.5])?;

    let mut tape = Tape::<f64>::new();
    let xv = tape.param(x.clone());
    let wv = tape.constant(w.clone());
    let z = tape.matmul(xv, wv)?;
    let lse = tape.logsumexp(z, &[1])?;
    let loss = tape.mean(lse, &[])?;
    tape.backward(loss)?;
    println!("loss {:.6}", tape.item(loss)?);
    println!("dloss/dx {:?}", tape.grad(xv)?.unwrap());

    let report = grad_check(
        |t, xv| {
            let wv = t.constant(w.clone());
            let z = t.matmul(xv, wv)?;
            let lse = t.logsumexp(z, &[1])?;
            t.mean(lse, &[])
        },
        &x,
        1e-6,
        1e-6,
    )?;
    println!("finite-difference check: max relative error {:.2e}, passed {}", report.max_rel_error, report.passed());
    Ok(())
}
