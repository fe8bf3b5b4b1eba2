use rayon::prelude::*;

use super::tape::Op;
use super::{check_finite, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Samples per partial weight-gradient sum. Fixed, so the reduction order
/// does not depend on the thread count.
const WGRAD_CHUNK: usize = 8;

pub(crate) fn matmul_forward<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        k as isize,
        1,
        b,
        n as isize,
        1,
        T::zero(),
        &mut c,
        n as isize,
        1,
    );
    c
}

type GradPair<T> = (Option<Vec<T>>, Option<Vec<T>>);

pub(crate) fn matmul_backward<T: Scalar>(
    a: &[T],
    sa: &[usize],
    b: &[T],
    sb: &[usize],
    g: &[T],
    need_a: bool,
    need_b: bool,
) -> GradPair<T> {
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    // dA = dC·Bᵀ  [m×n]·[n×k]
    let ga = need_a.then(|| {
        let mut ga = vec![T::zero(); m * k];
        T::gemm(
            m,
            n,
            k,
            T::one(),
            g,
            n as isize,
            1,
            b,
            1,
            n as isize,
            T::zero(),
            &mut ga,
            k as isize,
            1,
        );
        ga
    });
    // dB = Aᵀ·dC  [k×m]·[m×n]
    let gb = need_b.then(|| {
        let mut gb = vec![T::zero(); k * n];
        T::gemm(
            k,
            m,
            n,
            T::one(),
            a,
            1,
            k as isize,
            g,
            n as isize,
            1,
            T::zero(),
            &mut gb,
            n as isize,
            1,
        );
        gb
    });
    (ga, gb)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    pub(crate) fn new(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::shape("conv2d", xs, ws));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let (h, w) = (xs[2] + 2 * pad, xs[3] + 2 * pad);
        let (kh, kw) = (ws[2], ws[3]);
        if kh > h || kw > w {
            return Err(Error::InvalidShape {
                shape: ws.to_vec(),
                reason: format!("kernel larger than padded input {h}x{w}"),
            });
        }
        Ok(ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ws[0],
            kh,
            kw,
            stride,
            pad,
            oh: (h - kh) / stride + 1,
            ow: (w - kw) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn in_plane(&self) -> usize {
        self.c * self.h * self.w
    }

    fn out_plane(&self) -> usize {
        self.o * self.positions()
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one `c×h×w` sample into a `(c·kh·kw) × (oh·ow)` matrix.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let p = g.positions();
    for ch in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        dst[oy * g.ow + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            x[(ch * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, summing overlaps.
fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let p = g.positions();
    for ch in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.w {
                            continue;
                        }
                        let at = (ch * g.h + iy as usize) * g.w + ix as usize;
                        dx[at] = dx[at] + src[oy * g.ow + ox];
                    }
                }
            }
        }
    }
}

fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); g.n * g.out_plane()];
    let (kk, p) = (g.patch(), g.positions());
    out.par_chunks_mut(g.out_plane())
        .zip(x.par_chunks(g.in_plane()))
        .for_each_init(
            || vec![T::zero(); if g.is_pointwise() { 0 } else { kk * p }],
            |cols, (y, xn)| {
                let src: &[T] = if g.is_pointwise() {
                    xn
                } else {
                    im2col(g, xn, cols);
                    cols
                };
                T::gemm(
                    g.o,
                    kk,
                    p,
                    T::one(),
                    w,
                    kk as isize,
                    1,
                    src,
                    p as isize,
                    1,
                    T::zero(),
                    y,
                    p as isize,
                    1,
                );
            },
        );
    out
}

pub(crate) fn conv2d_backward_input<T: Scalar>(g: &ConvGeom, w: &[T], dy: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); g.n * g.in_plane()];
    let (kk, p) = (g.patch(), g.positions());
    dx.par_chunks_mut(g.in_plane())
        .zip(dy.par_chunks(g.out_plane()))
        .for_each_init(
            || vec![T::zero(); kk * p],
            |dcols, (dxn, dyn_)| {
                // dcols = Wᵀ·dY  [kk×o]·[o×p]
                let target: &mut [T] = if g.is_pointwise() { dxn } else { dcols };
                T::gemm(
                    kk,
                    g.o,
                    p,
                    T::one(),
                    w,
                    1,
                    kk as isize,
                    dyn_,
                    p as isize,
                    1,
                    T::zero(),
                    target,
                    p as isize,
                    1,
                );
                if !g.is_pointwise() {
                    col2im(g, dcols, dxn);
                }
            },
        );
    dx
}

pub(crate) fn conv2d_backward_weight<T: Scalar>(g: &ConvGeom, x: &[T], dy: &[T]) -> Vec<T> {
    let (kk, p) = (g.patch(), g.positions());
    let wlen = g.o * kk;
    let partials: Vec<Vec<T>> = (0..g.n)
        .collect::<Vec<_>>()
        .par_chunks(WGRAD_CHUNK)
        .map(|samples| {
            let mut dw = vec![T::zero(); wlen];
            let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { kk * p }];
            for &s in samples {
                let xn = &x[s * g.in_plane()..(s + 1) * g.in_plane()];
                let src: &[T] = if g.is_pointwise() {
                    xn
                } else {
                    im2col(g, xn, &mut cols);
                    &cols
                };
                // dW += dY·colsᵀ  [o×p]·[p×kk]
                T::gemm(
                    g.o,
                    p,
                    kk,
                    T::one(),
                    &dy[s * g.out_plane()..(s + 1) * g.out_plane()],
                    p as isize,
                    1,
                    src,
                    1,
                    p as isize,
                    T::one(),
                    &mut dw,
                    kk as isize,
                    1,
                );
            }
            dw
        })
        .collect();
    let mut iter = partials.into_iter();
    let mut total = iter.next().unwrap_or_else(|| vec![T::zero(); wlen]);
    for part in iter {
        for (t, v) in total.iter_mut().zip(part) {
            *t = *t + v;
        }
    }
    total
}

impl<T: Scalar> Tape<T> {
    /// Cross-correlation of `n×c×h×w` input with an `o×c×kh×kw` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let wi = self.check(w)?;
        let geom = ConvGeom::new(self.shape_of(xi), self.shape_of(wi), stride, pad)?;
        let out = conv2d_forward(&geom, self.data(xi), self.data(wi));
        check_finite("conv2d", &out)?;
        let value = Tensor::new(&[geom.n, geom.o, geom.oh, geom.ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x: xi,
                w: wi,
                stride,
                pad,
            },
            &[xi, wi],
        ))
    }
}
