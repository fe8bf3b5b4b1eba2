use super::tape::{BinaryKind, Op, UnaryKind};
use super::{check_finite, lit, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
    /// `log Σ exp`, evaluated with a max shift.
    LogSumExp,
}

/// `[outer, mid, inner]` view of a tensor reduced over its middle block.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ReduceLayout {
    outer: usize,
    mid: usize,
    inner: usize,
}

/// `[outer, axis, inner]` view used by slice and concat.
#[derive(Debug, Clone)]
pub(crate) struct AxisLayout {
    outer: usize,
    inner: usize,
    extents: Vec<usize>,
}

fn scalar_like(shape: &[usize]) -> bool {
    shape.iter().product::<usize>() == 1
}

impl<T: Scalar> Tape<T> {
    fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let xd = self.data(xi);
        let out: Vec<T> = match kind {
            UnaryKind::Exp => xd.iter().map(|v| v.exp()).collect(),
            UnaryKind::Log => {
                if let Some(bad) = xd.iter().find(|v| **v <= T::zero()) {
                    return Err(Error::LogDomain { value: bad.as_f64() });
                }
                xd.iter().map(|v| v.ln()).collect()
            }
            UnaryKind::Cos => xd.iter().map(|v| v.cos()).collect(),
            UnaryKind::Acos => xd.iter().map(|&v| clamp_acos(v).acos()).collect(),
            UnaryKind::Abs => xd.iter().map(|v| v.abs()).collect(),
            UnaryKind::Relu => xd.iter().map(|&v| v.max(T::zero())).collect(),
            UnaryKind::Neg => xd.iter().map(|&v| -v).collect(),
            UnaryKind::Sqrt => {
                if let Some(bad) = xd.iter().find(|v| **v < T::zero()) {
                    return Err(Error::Config(format!("sqrt of negative value {bad}")));
                }
                xd.iter().map(|v| v.sqrt()).collect()
            }
        };
        let name = match kind {
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Cos => "cos",
            UnaryKind::Acos => "acos",
            UnaryKind::Abs => "abs",
            UnaryKind::Relu => "relu",
            UnaryKind::Neg => "neg",
            UnaryKind::Sqrt => "sqrt",
        };
        check_finite(name, &out)?;
        let value = Tensor::new(self.shape_of(xi), out)?;
        Ok(self.push(value, Op::Unary { kind, x: xi }, &[xi]))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x)
    }

    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Cos, x)
    }

    /// `acos` of the input clamped to `[-1 + eps, 1 - eps]`, eps = `T::ACOS_EPS`.
    pub fn acos(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Acos, x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Abs, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, x)
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let bi = self.check(b)?;
        let (sa, sb) = (self.shape_of(ai), self.shape_of(bi));
        let out_shape = if sa == sb || scalar_like(sb) {
            sa.to_vec()
        } else if scalar_like(sa) {
            sb.to_vec()
        } else {
            return Err(Error::shape("elementwise", sa, sb));
        };
        let (ad, bd) = (self.data(ai), self.data(bi));
        if kind == BinaryKind::Div && bd.iter().any(|v| *v == T::zero()) {
            return Err(Error::DivisionByZero);
        }
        let n = out_shape.iter().product::<usize>();
        let pick = |d: &[T], i: usize| if d.len() == 1 { d[0] } else { d[i] };
        let out: Vec<T> = (0..n)
            .map(|i| {
                let (x, y) = (pick(ad, i), pick(bd, i));
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::Div => x / y,
                }
            })
            .collect();
        check_finite("elementwise", &out)?;
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(value, Op::Binary { kind, a: ai, b: bi }, &[ai, bi]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let xi = self.check(x)?;
        let out: Vec<T> = self.data(xi).iter().map(|&v| v + c).collect();
        check_finite("add_scalar", &out)?;
        let value = Tensor::new(self.shape_of(xi), out)?;
        Ok(self.push(value, Op::AddScalar { x: xi }, &[xi]))
    }

    pub fn mul_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let xi = self.check(x)?;
        let out: Vec<T> = self.data(xi).iter().map(|&v| v * c).collect();
        check_finite("mul_scalar", &out)?;
        let value = Tensor::new(self.shape_of(xi), out)?;
        Ok(self.push(value, Op::MulScalar { x: xi, c }, &[xi]))
    }

    /// Elementwise `x^p` for a constant exponent.
    pub fn pow(&mut self, x: Var, p: T) -> Result<Var> {
        let xi = self.check(x)?;
        let out: Vec<T> = self.data(xi).iter().map(|v| v.powf(p)).collect();
        check_finite("pow", &out)?;
        let value = Tensor::new(self.shape_of(xi), out)?;
        Ok(self.push(value, Op::Pow { x: xi, p }, &[xi]))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        let xi = self.check(x)?;
        let out: Vec<T> = self.data(xi).iter().map(|v| v.max(lo).min(hi)).collect();
        let value = Tensor::new(self.shape_of(xi), out)?;
        Ok(self.push(value, Op::Clamp { x: xi, lo, hi }, &[xi]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.check(x)?;
        let value = self.nodes[xi].value.clone().reshape(shape)?;
        let mut value = value.with_requires_grad(false);
        value.set_grad(None);
        Ok(self.push(value, Op::Reshape { x: xi }, &[xi]))
    }

    /// Repeats size-1 axes up to `shape`; ranks must agree.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.check(x)?;
        let src = self.shape_of(xi);
        if src.len() != shape.len() || src.iter().zip(shape).any(|(&s, &d)| s != 1 && s != d) {
            return Err(Error::shape("broadcast_to", src, shape));
        }
        let strides = broadcast_strides(src);
        let n = shape.iter().product::<usize>();
        let xd = self.data(xi);
        let mut out = Vec::with_capacity(n);
        for_each_index(shape, |idx| {
            let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
            out.push(xd[off]);
        });
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::BroadcastTo { x: xi }, &[xi]))
    }

    /// Reduces over `axes`; reduced axes are dropped from the shape. An empty
    /// axis list reduces everything.
    pub fn reduce(&mut self, kind: ReduceKind, x: Var, axes: &[usize]) -> Result<Var> {
        let xi = self.check(x)?;
        let shape = self.shape_of(xi).to_vec();
        if shape.is_empty() {
            return Err(Error::InvalidShape {
                shape,
                reason: "cannot reduce a scalar".into(),
            });
        }
        let mut axes: Vec<usize> = if axes.is_empty() {
            (0..shape.len()).collect()
        } else {
            axes.to_vec()
        };
        axes.sort_unstable();
        axes.dedup();
        if let Some(&bad) = axes.iter().find(|&&a| a >= shape.len()) {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("axis {bad} out of range"),
            });
        }
        // Split into contiguous runs and reduce the last run first so earlier
        // axis numbers stay valid.
        let mut runs: Vec<(usize, usize)> = Vec::new();
        for &a in &axes {
            match runs.last_mut() {
                Some((_, end)) if *end == a => *end += 1,
                _ => runs.push((a, a + 1)),
            }
        }
        let mut cur = x;
        for &(start, end) in runs.iter().rev() {
            cur = self.reduce_block(kind, cur, start, end)?;
        }
        Ok(cur)
    }

    fn reduce_block(&mut self, kind: ReduceKind, x: Var, start: usize, end: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let shape = self.shape_of(xi).to_vec();
        let layout = ReduceLayout {
            outer: shape[..start].iter().product(),
            mid: shape[start..end].iter().product(),
            inner: shape[end..].iter().product(),
        };
        let out_shape: Vec<usize> = shape[..start].iter().chain(&shape[end..]).copied().collect();
        let (out, argmax) = reduce_forward(kind, &layout, self.data(xi));
        check_finite("reduce", &out)?;
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(
            value,
            Op::Reduce {
                x: xi,
                kind,
                layout,
                argmax,
            },
            &[xi],
        ))
    }

    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceKind::Sum, x, axes)
    }

    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceKind::Mean, x, axes)
    }

    pub fn logsumexp(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceKind::LogSumExp, x, axes)
    }

    /// Sum of every element.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceKind::Sum, x, &[])
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let shape = self.shape_of(xi).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("slice axis {axis} [{start}, {})", start + len),
            });
        }
        let layout = AxisLayout {
            outer: shape[..axis].iter().product(),
            inner: shape[axis + 1..].iter().product(),
            extents: vec![shape[axis]],
        };
        let xd = self.data(xi);
        let mut out = Vec::with_capacity(layout.outer * len * layout.inner);
        for o in 0..layout.outer {
            let base = (o * shape[axis] + start) * layout.inner;
            out.extend_from_slice(&xd[base..base + len * layout.inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(value, Op::Slice { x: xi, layout, start }, &[xi]))
    }

    /// Joins along an existing axis; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let idx: Vec<usize> = xs.iter().map(|&v| self.check(v)).collect::<Result<_>>()?;
        let Some(&first) = idx.first() else {
            return Err(Error::InvalidShape {
                shape: vec![],
                reason: "concat of nothing".into(),
            });
        };
        let base = self.shape_of(first).to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidShape {
                shape: base,
                reason: format!("concat axis {axis} out of range"),
            });
        }
        let mut extents = Vec::with_capacity(idx.len());
        for &i in &idx {
            let s = self.shape_of(i);
            let same_rest = s.len() == base.len()
                && s.iter().enumerate().all(|(d, &e)| d == axis || e == base[d]);
            if !same_rest {
                return Err(Error::shape("concat", &base, s));
            }
            extents.push(s[axis]);
        }
        let layout = AxisLayout {
            outer: base[..axis].iter().product(),
            inner: base[axis + 1..].iter().product(),
            extents,
        };
        let total: usize = layout.extents.iter().sum();
        let mut out = Vec::with_capacity(layout.outer * total * layout.inner);
        for o in 0..layout.outer {
            for (&i, &e) in idx.iter().zip(&layout.extents) {
                let chunk = e * layout.inner;
                out.extend_from_slice(&self.data(i)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(value, Op::Concat { xs: idx.clone(), layout }, &idx))
    }

    /// Non-overlapping `k×k` average pooling over the last two axes of an
    /// `n×c×h×w` tensor.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let shape = self.shape_of(xi).to_vec();
        if shape.len() != 4 || k == 0 || shape[2] % k != 0 || shape[3] % k != 0 {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("avg_pool2d with window {k}"),
            });
        }
        let (h, w) = (shape[2], shape[3]);
        let (oh, ow) = (h / k, w / k);
        let planes = shape[0] * shape[1];
        let xd = self.data(xi);
        let scale = T::one() / lit::<T>((k * k) as f64);
        let mut out = vec![T::zero(); planes * oh * ow];
        for p in 0..planes {
            let src = &xd[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for r in 0..h {
                for c in 0..w {
                    let o = (r / k) * ow + c / k;
                    dst[o] = dst[o] + src[r * w + c];
                }
            }
            for v in dst.iter_mut() {
                *v = *v * scale;
            }
        }
        let value = Tensor::new(&[shape[0], shape[1], oh, ow], out)?;
        Ok(self.push(value, Op::AvgPool { x: xi, k }, &[xi]))
    }

    /// `[m×k]·[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let bi = self.check(b)?;
        let (sa, sb) = (self.shape_of(ai), self.shape_of(bi));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = super::conv::matmul_forward(self.data(ai), self.data(bi), m, k, n);
        check_finite("matmul", &out)?;
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::Matmul { a: ai, b: bi }, &[ai, bi]))
    }
}

pub(crate) fn clamp_acos<T: Scalar>(v: T) -> T {
    let lim = T::one() - T::ACOS_EPS;
    v.max(-lim).min(lim)
}

pub(crate) fn unary_backward<T: Scalar>(kind: UnaryKind, x: &[T], y: &[T], g: &[T]) -> Vec<T> {
    let two = lit::<T>(2.0);
    let zip = x.iter().zip(y).zip(g);
    match kind {
        UnaryKind::Exp => zip.map(|((_, &yv), &gv)| gv * yv).collect(),
        UnaryKind::Log => zip.map(|((&xv, _), &gv)| gv / xv).collect(),
        UnaryKind::Cos => zip.map(|((&xv, _), &gv)| -gv * xv.sin()).collect(),
        // Derivative taken at the clamped point, so cos(acos(q)) keeps slope 1
        // even where q sits on the clamp.
        UnaryKind::Acos => zip
            .map(|((&xv, _), &gv)| {
                let c = clamp_acos(xv);
                -gv / (T::one() - c * c).sqrt()
            })
            .collect(),
        UnaryKind::Abs => zip
            .map(|((&xv, _), &gv)| {
                if xv > T::zero() {
                    gv
                } else if xv < T::zero() {
                    -gv
                } else {
                    T::zero()
                }
            })
            .collect(),
        UnaryKind::Relu => zip
            .map(|((&xv, _), &gv)| if xv > T::zero() { gv } else { T::zero() })
            .collect(),
        UnaryKind::Neg => g.iter().map(|&gv| -gv).collect(),
        UnaryKind::Sqrt => zip.map(|((_, &yv), &gv)| gv / (two * yv)).collect(),
    }
}

type GradPair<T> = (Option<Vec<T>>, Option<Vec<T>>);

pub(crate) fn binary_backward<T: Scalar>(
    kind: BinaryKind,
    a: &[T],
    b: &[T],
    g: &[T],
    need_a: bool,
    need_b: bool,
) -> GradPair<T> {
    let n = g.len();
    let at = |i: usize| if a.len() == 1 { a[0] } else { a[i] };
    let bt = |i: usize| if b.len() == 1 { b[0] } else { b[i] };
    let local = |wrt_a: bool| -> Vec<T> {
        (0..n)
            .map(|i| {
                let (x, y, gv) = (at(i), bt(i), g[i]);
                match (kind, wrt_a) {
                    (BinaryKind::Add, _) => gv,
                    (BinaryKind::Sub, true) => gv,
                    (BinaryKind::Sub, false) => -gv,
                    (BinaryKind::Mul, true) => gv * y,
                    (BinaryKind::Mul, false) => gv * x,
                    (BinaryKind::Div, true) => gv / y,
                    (BinaryKind::Div, false) => -gv * x / (y * y),
                }
            })
            .collect()
    };
    // A one-element operand broadcast across the output collects a sum.
    let fold = |full: Vec<T>, len: usize| -> Vec<T> {
        if len == 1 && n != 1 {
            vec![full.into_iter().fold(T::zero(), |s, v| s + v)]
        } else {
            full
        }
    };
    let ga = need_a.then(|| fold(local(true), a.len()));
    let gb = need_b.then(|| fold(local(false), b.len()));
    (ga, gb)
}

fn reduce_forward<T: Scalar>(kind: ReduceKind, l: &ReduceLayout, x: &[T]) -> (Vec<T>, Vec<usize>) {
    let mut out = vec![T::zero(); l.outer * l.inner];
    let mut argmax = Vec::new();
    let at = |o: usize, m: usize, i: usize| x[(o * l.mid + m) * l.inner + i];
    match kind {
        ReduceKind::Sum | ReduceKind::Mean => {
            let scale = if kind == ReduceKind::Mean {
                T::one() / lit::<T>(l.mid as f64)
            } else {
                T::one()
            };
            for o in 0..l.outer {
                for i in 0..l.inner {
                    let mut s = T::zero();
                    for m in 0..l.mid {
                        s = s + at(o, m, i);
                    }
                    out[o * l.inner + i] = if kind == ReduceKind::Mean { s * scale } else { s };
                }
            }
        }
        ReduceKind::Max => {
            argmax = vec![0; l.outer * l.inner];
            for o in 0..l.outer {
                for i in 0..l.inner {
                    let (mut best, mut arg) = (at(o, 0, i), 0);
                    for m in 1..l.mid {
                        let v = at(o, m, i);
                        if v > best {
                            best = v;
                            arg = m;
                        }
                    }
                    out[o * l.inner + i] = best;
                    argmax[o * l.inner + i] = arg;
                }
            }
        }
        ReduceKind::LogSumExp => {
            for o in 0..l.outer {
                for i in 0..l.inner {
                    let mut top = 0;
                    for m in 1..l.mid {
                        if at(o, m, i) > at(o, top, i) {
                            top = m;
                        }
                    }
                    let mx = at(o, top, i);
                    // The maximum contributes exactly one; ln_1p keeps the rest.
                    let mut s = T::zero();
                    for m in (0..l.mid).filter(|&m| m != top) {
                        s = s + (at(o, m, i) - mx).exp();
                    }
                    out[o * l.inner + i] = mx + s.ln_1p();
                }
            }
        }
    }
    (out, argmax)
}

pub(crate) fn reduce_backward<T: Scalar>(
    kind: ReduceKind,
    l: &ReduceLayout,
    x: &[T],
    y: &[T],
    argmax: &[usize],
    g: &[T],
) -> Vec<T> {
    let mut gx = vec![T::zero(); x.len()];
    let scale = T::one() / lit::<T>(l.mid as f64);
    for o in 0..l.outer {
        for m in 0..l.mid {
            for i in 0..l.inner {
                let oi = o * l.inner + i;
                let xi = (o * l.mid + m) * l.inner + i;
                gx[xi] = match kind {
                    ReduceKind::Sum => g[oi],
                    ReduceKind::Mean => g[oi] * scale,
                    ReduceKind::Max => {
                        if argmax[oi] == m {
                            g[oi]
                        } else {
                            T::zero()
                        }
                    }
                    ReduceKind::LogSumExp => g[oi] * (x[xi] - y[oi]).exp(),
                };
            }
        }
    }
    gx
}

fn broadcast_strides(src: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; src.len()];
    let mut acc = 1;
    for d in (0..src.len()).rev() {
        strides[d] = if src[d] == 1 { 0 } else { acc };
        acc *= src[d];
    }
    strides
}

/// Visits every multi-index of `shape` in row-major order.
fn for_each_index(shape: &[usize], mut f: impl FnMut(&[usize])) {
    let n: usize = shape.iter().product();
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        f(&idx);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

pub(crate) fn broadcast_backward<T: Scalar>(src: &[usize], dst: &[usize], g: &[T]) -> Vec<T> {
    let strides = broadcast_strides(src);
    let mut gx = vec![T::zero(); src.iter().product()];
    let mut k = 0;
    for_each_index(dst, |idx| {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        gx[off] = gx[off] + g[k];
        k += 1;
    });
    gx
}

pub(crate) fn slice_backward<T: Scalar>(l: &AxisLayout, start: usize, out_len: usize, g: &[T]) -> Vec<T> {
    let extent = l.extents[0];
    let len = out_len / (l.outer * l.inner);
    let mut gx = vec![T::zero(); l.outer * extent * l.inner];
    for o in 0..l.outer {
        let dst = (o * extent + start) * l.inner;
        let src = o * len * l.inner;
        gx[dst..dst + len * l.inner].copy_from_slice(&g[src..src + len * l.inner]);
    }
    gx
}

pub(crate) fn concat_backward<T: Scalar>(l: &AxisLayout, parts: usize, g: &[T]) -> Vec<Vec<T>> {
    let total: usize = l.extents.iter().sum();
    let mut out: Vec<Vec<T>> = l
        .extents
        .iter()
        .map(|e| Vec::with_capacity(l.outer * e * l.inner))
        .collect();
    debug_assert_eq!(parts, l.extents.len());
    for o in 0..l.outer {
        let mut off = o * total * l.inner;
        for (p, &e) in l.extents.iter().enumerate() {
            out[p].extend_from_slice(&g[off..off + e * l.inner]);
            off += e * l.inner;
        }
    }
    out
}

pub(crate) fn avg_pool_backward<T: Scalar>(src: &[usize], k: usize, g: &[T]) -> Vec<T> {
    let (h, w) = (src[2], src[3]);
    let (oh, ow) = (h / k, w / k);
    let planes = src[0] * src[1];
    let scale = T::one() / lit::<T>((k * k) as f64);
    let mut gx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for r in 0..h {
            for c in 0..w {
                gx[p * h * w + r * w + c] = g[p * oh * ow + (r / k) * ow + c / k] * scale;
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tape_with(shape: &[usize], data: &[f64]) -> (Tape<f64>, Var) {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_f64(shape, data).unwrap());
        (tape, x)
    }

    #[test]
    fn acos_half_is_third_pi() {
        let (mut tape, x) = tape_with(&[1], &[0.5]);
        let y = tape.acos(x).unwrap();
        assert!((tape.item(y).unwrap() - 1.0471975512).abs() < 1e-10);
    }

    #[test]
    fn cos_zero_is_one() {
        let (mut tape, x) = tape_with(&[1], &[0.0]);
        let y = tape.cos(x).unwrap();
        assert_eq!(tape.item(y).unwrap(), 1.0);
    }

    #[test]
    fn acos_clamps_float_noise_above_one() {
        let (mut tape, x) = tape_with(&[1], &[1.0 + 1e-12]);
        let y = tape.acos(x).unwrap();
        let v = tape.item(y).unwrap();
        assert!(v.is_finite());
        assert_eq!(v, (1.0f64 - 1e-12).acos());

        let mut t32 = Tape::<f32>::new();
        let x = t32.param(Tensor::new(&[2], vec![1.0f32, -1.0]).unwrap());
        let y = t32.acos(x).unwrap();
        let s = t32.sum_all(y).unwrap();
        t32.backward(s).unwrap();
        assert!(t32.grad(x).unwrap().unwrap().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn log_rejects_non_positive() {
        let (mut tape, x) = tape_with(&[2], &[1.0, 0.0]);
        assert!(matches!(tape.log(x), Err(Error::LogDomain { .. })));
    }

    #[test]
    fn div_by_exact_zero_is_an_error() {
        let (mut tape, x) = tape_with(&[2], &[1.0, 2.0]);
        let z = tape.constant(Tensor::from_f64(&[2], &[1.0, 0.0]).unwrap());
        assert!(matches!(tape.div(x, z), Err(Error::DivisionByZero)));
    }

    #[test]
    fn mismatched_shapes_do_not_broadcast() {
        let (mut tape, x) = tape_with(&[2, 3], &[0.0; 6]);
        let y = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(tape.add(x, y), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn scalar_broadcast_commutes() {
        let (mut tape, x) = tape_with(&[3], &[1.0, -2.0, 3.5]);
        let c = tape.constant(Tensor::scalar(2.5));
        let xc = tape.mul(x, c).unwrap();
        let cx = tape.mul(c, x).unwrap();
        assert_eq!(tape.value(xc).unwrap().data(), tape.value(cx).unwrap().data());
        let xc = tape.add(x, c).unwrap();
        let cx = tape.add(c, x).unwrap();
        assert_eq!(tape.value(xc).unwrap().data(), tape.value(cx).unwrap().data());
    }

    #[test]
    fn logsumexp_handles_large_scaled_entries() {
        let (mut tape, x) = tape_with(&[2], &[64.0 * 0.82, 6.4]);
        let y = tape.logsumexp(x, &[0]).unwrap();
        let expected = 52.48 + (1.0f64 + (6.4f64 - 52.48).exp()).ln();
        assert!((tape.item(y).unwrap() - expected).abs() < 1e-12);
        assert!((tape.item(y).unwrap() - 52.48).abs() < 1e-15);

        let (mut tape, x) = tape_with(&[3], &[64.0, 64.0, -64.0]);
        let y = tape.logsumexp(x, &[]).unwrap();
        assert!(tape.item(y).unwrap().is_finite());
    }

    #[test]
    fn logsumexp_of_duplicates_adds_log_two() {
        let (mut tape, x) = tape_with(&[2], &[3.25, 3.25]);
        let y = tape.logsumexp(x, &[0]).unwrap();
        assert!((tape.item(y).unwrap() - (3.25 + 2f64.ln())).abs() < 1e-14);
    }

    #[test]
    fn sum_of_zeros_is_zero() {
        let (mut tape, x) = tape_with(&[2, 2], &[0.0; 4]);
        let y = tape.sum_all(x).unwrap();
        assert_eq!(tape.item(y).unwrap(), 0.0);
    }

    #[test]
    fn reducing_a_scalar_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::scalar(1.0));
        assert!(tape.sum(x, &[]).is_err());
    }

    #[test]
    fn non_contiguous_axes_reduce_like_nested_sums() {
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let (mut tape, x) = tape_with(&[2, 3, 4], &data);
        let y = tape.sum(x, &[0, 2]).unwrap();
        let got = tape.value(y).unwrap().data().to_vec();
        let mut want = [0.0; 3];
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    want[b] += data[(a * 3 + b) * 4 + c];
                }
            }
        }
        assert_eq!(got, want);
    }

    #[test]
    fn max_reduce_routes_gradient_to_first_argmax() {
        let (mut tape, x) = tape_with(&[4], &[1.0, 3.0, 3.0, 2.0]);
        let y = tape.reduce(ReduceKind::Max, x, &[0]).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn slice_and_concat_round_trip() {
        let data: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let (mut tape, x) = tape_with(&[2, 6], &data);
        let a = tape.slice(x, 1, 0, 2).unwrap();
        let b = tape.slice(x, 1, 2, 4).unwrap();
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).unwrap().data(), &data[..]);
    }

    #[test]
    fn broadcast_to_repeats_unit_axes() {
        let (mut tape, x) = tape_with(&[2, 1], &[1.0, 2.0]);
        let y = tape.broadcast_to(x, &[2, 3]).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn matmul_hand_expansion() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::from_f64(&[2, 1], &[0.0, 1.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).unwrap().data(), &[2.0, 4.0]);
        assert_eq!(tape.shape(c).unwrap(), &[2, 1]);
    }

    #[test]
    fn matmul_identity_and_mismatch() {
        let mut tape = Tape::<f64>::new();
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let m: Vec<f64> = (0..12).map(|v| v as f64 * 0.5 - 2.0).collect();
        let i3 = tape.constant(Tensor::from_f64(&[3, 3], &eye).unwrap());
        let mv = tape.constant(Tensor::from_f64(&[3, 4], &m).unwrap());
        let c = tape.matmul(i3, mv).unwrap();
        assert_eq!(tape.value(c).unwrap().data(), &m[..]);
        assert!(tape.matmul(mv, i3).is_err());
    }

    #[test]
    fn avg_pool_averages_windows() {
        let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let (mut tape, x) = tape_with(&[1, 1, 4, 4], &data);
        let y = tape.avg_pool2d(x, 2).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[2.5, 4.5, 10.5, 12.5]);
    }
}
