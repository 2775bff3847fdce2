//! Differentiable primitives.
//!
//! Shapes are enforced exactly; the only implicit broadcast is the leading
//! row dimension of `add_bias`. Everything else requires explicit reshapes,
//! which keeps shape bugs loud.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn same_shape<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Numerically stable sigmoid.
pub fn sigmoid_scalar<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Numerically stable softplus: ln(1 + e^x).
pub fn softplus_scalar<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu_scalar<S: Scalar>(x: S) -> S {
    let c = S::cast_from(GELU_C);
    let a = S::cast_from(GELU_A);
    let u = c * (x + a * x * x * x);
    let half = S::cast_from(0.5);
    half * x * (S::one() + u.tanh())
}

fn gelu_grad_scalar<S: Scalar>(x: S) -> S {
    let c = S::cast_from(GELU_C);
    let a = S::cast_from(GELU_A);
    let three = S::cast_from(3.0);
    let half = S::cast_from(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * a * x * x)
}

impl<S: Scalar> Graph<S> {
    fn map_binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        fwd: impl Fn(S, S) -> S,
        // (ga, gb) per element given (out_grad, a, b)
        bwd: impl Fn(S, S, S) -> (S, S) + 'static,
    ) -> Result<Var> {
        same_shape(op, self.value(a), self.value(b))?;
        let data: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| fwd(x, y))
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rule = move |ctx: &crate::graph::BackCtx<'_, S>| {
            let mut ga = ctx.wants[0].then(|| Tensor::zeros(ctx.inputs[0].shape()));
            let mut gb = ctx.wants[1].then(|| Tensor::zeros(ctx.inputs[1].shape()));
            for i in 0..ctx.out_grad.len() {
                let (da, db) = bwd(
                    ctx.out_grad.data()[i],
                    ctx.inputs[0].data()[i],
                    ctx.inputs[1].data()[i],
                );
                if let Some(t) = ga.as_mut() {
                    t.data_mut()[i] = da;
                }
                if let Some(t) = gb.as_mut() {
                    t.data_mut()[i] = db;
                }
            }
            vec![ga, gb]
        };
        Ok(self.insert(value, vec![a, b], Some(Box::new(rule)), false))
    }

    fn map_unary(
        &mut self,
        a: Var,
        fwd: impl Fn(S) -> S,
        grad: impl Fn(S) -> S + 'static, // d out / d in, as a function of the input
    ) -> Var {
        let data: Vec<S> = self.value(a).data().iter().map(|&x| fwd(x)).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        let rule = move |ctx: &crate::graph::BackCtx<'_, S>| {
            let g: Vec<S> = ctx
                .out_grad
                .data()
                .iter()
                .zip(ctx.inputs[0].data())
                .map(|(&g, &x)| g * grad(x))
                .collect();
            vec![Some(
                Tensor::new(ctx.inputs[0].shape().to_vec(), g).expect("same shape"),
            )]
        };
        self.insert(value, vec![a], Some(Box::new(rule)), false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.map_binary("add", a, b, |x, y| x + y, |g, _, _| (g, g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.map_binary("sub", a, b, |x, y| x - y, |g, _, _| (g, -g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.map_binary("mul", a, b, |x, y| x * y, |g, x, y| (g * y, g * x))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.map_binary(
            "div",
            a,
            b,
            |x, y| x / y,
            |g, x, y| (g / y, -g * x / (y * y)),
        )
    }

    /// Elementwise minimum; ties route the gradient to the first operand.
    pub fn min_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        self.map_binary(
            "min_elem",
            a,
            b,
            |x, y| x.min(y),
            |g, x, y| {
                if x <= y {
                    (g, S::zero())
                } else {
                    (S::zero(), g)
                }
            },
        )
    }

    /// Elementwise maximum; ties route the gradient to the first operand.
    pub fn max_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        self.map_binary(
            "max_elem",
            a,
            b,
            |x, y| x.max(y),
            |g, x, y| {
                if x >= y {
                    (g, S::zero())
                } else {
                    (S::zero(), g)
                }
            },
        )
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        self.map_unary(a, |x| x * c, move |_| c)
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Var {
        self.map_unary(a, |x| x + c, |_| S::one())
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -S::one())
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map_unary(a, gelu_scalar, gelu_grad_scalar)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_unary(a, sigmoid_scalar, |x| {
            let s = sigmoid_scalar(x);
            s * (S::one() - s)
        })
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map_unary(a, softplus_scalar, sigmoid_scalar)
    }

    /// Elementwise x^p for x >= 0 (p may be fractional).
    pub fn pow_scalar(&mut self, a: Var, p: S) -> Var {
        self.map_unary(a, move |x| x.powf(p), move |x| p * x.powf(p - S::one()))
    }

    /// Sum of all elements, as a [1]-shaped tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let total: S = self.value(a).data().iter().copied().sum();
        let rule = move |ctx: &crate::graph::BackCtx<'_, S>| {
            let g = ctx.out_grad.item();
            vec![Some(Tensor::full(ctx.inputs[0].shape(), g))]
        };
        self.insert(
            Tensor::scalar(total),
            vec![a],
            Some(Box::new(rule)),
            false,
        )
    }

    /// Mean of all elements, as a [1]-shaped tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, S::one() / S::cast_from(n as f64))
    }

    /// Adds a [d] bias row-wise to a [T, d] tensor.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.value(x).shape().to_vec(), self.value(b).shape().to_vec());
        if xs.len() != 2 || bs.len() != 1 || xs[1] != bs[0] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: xs,
                rhs: bs,
            });
        }
        let (rows, cols) = (xs[0], xs[1]);
        let mut data = self.value(x).data().to_vec();
        let bias = self.value(b).data();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] = data[r * cols + c] + bias[c];
            }
        }
        let value = Tensor::new(xs, data)?;
        let rule = move |ctx: &crate::graph::BackCtx<'_, S>| {
            let gx = ctx.wants[0].then(|| ctx.out_grad.clone());
            let gb = ctx.wants[1].then(|| {
                let mut gb = Tensor::zeros(&[cols]);
                for r in 0..rows {
                    for c in 0..cols {
                        gb.data_mut()[c] = gb.data_mut()[c] + ctx.out_grad.data()[r * cols + c];
                    }
                }
                gb
            });
            vec![gx, gb]
        };
        Ok(self.insert(value, vec![x, b], Some(Box::new(rule)), false))
    }

    /// Matrix product of [m, k] and [k, n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ashape, bshape) = (self.value(a).shape(), self.value(b).shape());
        if ashape.len() != 2 || bshape.len() != 2 || ashape[1] != bshape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ashape.to_vec(),
                rhs: bshape.to_vec(),
            });
        }
        let (m, k, n) = (ashape[0], ashape[1], bshape[1]);
        let value = matmul_raw(self.value(a), self.value(b), m, k, n);
        let rule = move |ctx: &crate::graph::BackCtx<'_, S>| {
            let g = ctx.out_grad;
            let (av, bv) = (ctx.inputs[0], ctx.inputs[1]);
            // d/da = g . b^T
            let ga = ctx.wants[0].then(|| {
                let mut da = Tensor::zeros(&[m, k]);
                for i in 0..m {
                    let grow = g.row(i);
                    let darow = da.row_mut(i);
                    for kk in 0..k {
                        let brow = bv.row(kk);
                        let mut acc = S::zero();
                        for j in 0..n {
                            acc = acc + grow[j] * brow[j];
                        }
                        darow[kk] = acc;
                    }
                }
                da
            });
            // d/db = a^T . g
            let gb = ctx.wants[1].then(|| {
                let mut db = Tensor::zeros(&[k, n]);
                for i in 0..m {
                    let arow = av.row(i);
                    let grow = g.row(i);
                    for kk in 0..k {
                        let a_ik = arow[kk];
                        if a_ik == S::zero() {
                            continue;
                        }
                        let dbrow = db.row_mut(kk);
                        for j in 0..n {
                            dbrow[j] = dbrow[j] + a_ik * grow[j];
                        }
                    }
                }
                db
            });
            vec![ga, gb]
        };
        Ok(self.insert(value, vec![a, b], Some(Box::new(rule)), false))
    }

    /// Zeroes rows of a [T, d] tensor where `keep` is false; gradients are
    /// cut at the same rows.
    pub fn zero_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 2 || shape[0] != keep.len() {
            return Err(Error::InvalidArgument {
                op: "zero_rows",
                msg: format!("shape {:?} vs mask length {}", shape, keep.len()),
            });
        }
        let cols = shape[1];
        let mut data = self.value(x).data().to_vec();
        for (r, &k) in keep.iter().enumerate() {
            if !k {
                data[r * cols..(r + 1) * cols].fill(S::zero());
            }
        }
        let keep_owned = keep.to_vec();
        let value = Tensor::new(shape, data)?;
        let rule = move |ctx: &crate::graph::BackCtx<'_, S>| {
            let mut g = ctx.out_grad.clone();
            for (r, &k) in keep_owned.iter().enumerate() {
                if !k {
                    g.data_mut()[r * cols..(r + 1) * cols].fill(S::zero());
                }
            }
            vec![Some(g)]
        };
        Ok(self.insert(value, vec![x], Some(Box::new(rule)), false))
    }

    /// Softmax over the last dimension with an optional element mask.
    ///
    /// Masked entries are exactly zero in the output and receive no
    /// gradient; every row must keep at least one unmasked entry.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let n = *shape.last().ok_or(Error::InvalidArgument {
            op: "softmax",
            msg: "rank-0 input".into(),
        })?;
        if let Some(m) = mask {
            if m.len() != self.value(x).len() {
                return Err(Error::InvalidArgument {
                    op: "softmax",
                    msg: format!("mask length {} vs {} elements", m.len(), self.value(x).len()),
                });
            }
        }
        let rows = self.value(x).len() / n;
        let mut data = vec![S::zero(); self.value(x).len()];
        for r in 0..rows {
            let base = r * n;
            let row = &self.value(x).data()[base..base + n];
            let live = |j: usize| mask.map_or(true, |m| m[base + j]);
            let mut mx = S::neg_infinity();
            for j in 0..n {
                if live(j) && row[j] > mx {
                    mx = row[j];
                }
            }
            if mx == S::neg_infinity() {
                return Err(Error::FullyMaskedRow { row: r });
            }
            let mut denom = S::zero();
            for j in 0..n {
                if live(j) {
                    let e = (row[j] - mx).exp();
                    data[base + j] = e;
                    denom = denom + e;
                }
            }
            for j in 0..n {
                data[base + j] = data[base + j] / denom;
            }
        }
        let value = Tensor::new(shape, data)?;
        let rule = move |ctx: &crate::graph::BackCtx<'_, S>| {
            let y = ctx.out_value.data();
            let g = ctx.out_grad.data();
            let mut out = vec![S::zero(); y.len()];
            let rows = y.len() / n;
            for r in 0..rows {
                let base = r * n;
                let mut dot = S::zero();
                for j in 0..n {
                    dot = dot + g[base + j] * y[base + j];
                }
                for j in 0..n {
                    out[base + j] = y[base + j] * (g[base + j] - dot);
                }
            }
            vec![Some(
                Tensor::new(ctx.inputs[0].shape().to_vec(), out).expect("same shape"),
            )]
        };
        Ok(self.insert(value, vec![x], Some(Box::new(rule)), false))
    }

    /// Per-row layer normalization over the last dimension of a [T, d]
    /// tensor, followed by the affine map `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let d = *xs.last().ok_or(Error::InvalidArgument {
            op: "layer_norm",
            msg: "rank-0 input".into(),
        })?;
        if self.value(gain).shape() != [d] || self.value(bias).shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: xs,
                rhs: self.value(gain).shape().to_vec(),
            });
        }
        if eps <= S::zero() {
            return Err(Error::InvalidArgument {
                op: "layer_norm",
                msg: "eps must be positive".into(),
            });
        }
        let rows = self.value(x).len() / d;
        let inv_d = S::one() / S::cast_from(d as f64);
        let mut data = vec![S::zero(); self.value(x).len()];
        {
            let xv = self.value(x).data();
            let gv = self.value(gain).data();
            let bv = self.value(bias).data();
            for r in 0..rows {
                let base = r * d;
                let row = &xv[base..base + d];
                let mean: S = row.iter().copied().sum::<S>() * inv_d;
                let var: S = row
                    .iter()
                    .map(|&v| (v - mean) * (v - mean))
                    .sum::<S>()
                    * inv_d;
                let inv_std = S::one() / (var + eps).sqrt();
                for j in 0..d {
                    let xhat = (row[j] - mean) * inv_std;
                    data[base + j] = gv[j] * xhat + bv[j];
                }
            }
        }
        let value = Tensor::new(xs, data)?;
        let rule = move |ctx: &crate::graph::BackCtx<'_, S>| {
            let xv = ctx.inputs[0];
            let gv = ctx.inputs[1].data();
            let g = ctx.out_grad.data();
            let rows = xv.len() / d;
            let mut dx = ctx.wants[0].then(|| Tensor::zeros(xv.shape()));
            let mut dgain = ctx.wants[1].then(|| Tensor::zeros(&[d]));
            let mut dbias = ctx.wants[2].then(|| Tensor::zeros(&[d]));
            for r in 0..rows {
                let base = r * d;
                let row = &xv.data()[base..base + d];
                let mean: S = row.iter().copied().sum::<S>() * inv_d;
                let var: S =
                    row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
                let inv_std = S::one() / (var + eps).sqrt();
                // accumulate per-row reductions
                let mut sum_gg = S::zero(); // sum_j gain_j * g_j
                let mut sum_ggx = S::zero(); // sum_j gain_j * g_j * xhat_j
                for j in 0..d {
                    let xhat = (row[j] - mean) * inv_std;
                    let gg = gv[j] * g[base + j];
                    sum_gg = sum_gg + gg;
                    sum_ggx = sum_ggx + gg * xhat;
                    if let Some(t) = dgain.as_mut() {
                        t.data_mut()[j] = t.data_mut()[j] + g[base + j] * xhat;
                    }
                    if let Some(t) = dbias.as_mut() {
                        t.data_mut()[j] = t.data_mut()[j] + g[base + j];
                    }
                }
                if let Some(t) = dx.as_mut() {
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv_std;
                        let gg = gv[j] * g[base + j];
                        t.data_mut()[base + j] =
                            (gg - inv_d * sum_gg - xhat * inv_d * sum_ggx) * inv_std;
                    }
                }
            }
            vec![dx, dgain, dbias]
        };
        Ok(self.insert(value, vec![x, gain, bias], Some(Box::new(rule)), false))
    }

    /// 1-D convolution over a [T, d_in] sequence.
    ///
    /// Full mode: weight [k, d_in, d_out]. Depthwise mode: weight [k, d],
    /// one filter per channel (d_out == d_in). Zero padding on both sides;
    /// the output length is floor((T + 2 pad - k) / stride) + 1.
    pub fn conv1d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        depthwise: bool,
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        if xs.len() != 2 {
            return Err(Error::InvalidArgument {
                op: "conv1d",
                msg: format!("input must be [T, d], got {:?}", xs),
            });
        }
        let (t, d_in) = (xs[0], xs[1]);
        let (k, d_out) = if depthwise {
            if ws.len() != 2 || ws[1] != d_in {
                return Err(Error::ShapeMismatch {
                    op: "conv1d(depthwise)",
                    lhs: xs,
                    rhs: ws,
                });
            }
            (ws[0], d_in)
        } else {
            if ws.len() != 3 || ws[1] != d_in {
                return Err(Error::ShapeMismatch {
                    op: "conv1d",
                    lhs: xs,
                    rhs: ws,
                });
            }
            (ws[0], ws[2])
        };
        if stride == 0 {
            return Err(Error::InvalidArgument {
                op: "conv1d",
                msg: "stride must be >= 1".into(),
            });
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [d_out] {
                return Err(Error::ShapeMismatch {
                    op: "conv1d(bias)",
                    lhs: vec![d_out],
                    rhs: self.value(b).shape().to_vec(),
                });
            }
        }
        let padded = t + 2 * padding;
        if padded < k {
            return Err(Error::InvalidArgument {
                op: "conv1d",
                msg: format!("kernel width {} exceeds padded length {}", k, padded),
            });
        }
        let t_out = (padded - k) / stride + 1;

        let mut out = Tensor::zeros(&[t_out, d_out]);
        {
            let xv = self.value(x);
            let wv = self.value(weight);
            for to in 0..t_out {
                let start = to * stride; // position in padded coordinates
                for w in 0..k {
                    let tin = start + w;
                    if tin < padding || tin - padding >= t {
                        continue; // zero padding
                    }
                    let xrow = xv.row(tin - padding);
                    let orow = out.row_mut(to);
                    if depthwise {
                        let wrow = wv.row(w); // [d]
                        for c in 0..d_in {
                            orow[c] = orow[c] + xrow[c] * wrow[c];
                        }
                    } else {
                        for ci in 0..d_in {
                            let xval = xrow[ci];
                            if xval == S::zero() {
                                continue;
                            }
                            let wbase = (w * d_in + ci) * d_out;
                            let wslice = &wv.data()[wbase..wbase + d_out];
                            for co in 0..d_out {
                                orow[co] = orow[co] + xval * wslice[co];
                            }
                        }
                    }
                }
            }
            if let Some(b) = bias {
                let bv = self.value(b).data();
                for to in 0..t_out {
                    let orow = out.row_mut(to);
                    for co in 0..d_out {
                        orow[co] = orow[co] + bv[co];
                    }
                }
            }
        }

        let parents = match bias {
            Some(b) => vec![x, weight, b],
            None => vec![x, weight],
        };
        let has_bias = bias.is_some();
        let rule = move |ctx: &crate::graph::BackCtx<'_, S>| {
            let g = ctx.out_grad;
            let xv = ctx.inputs[0];
            let wv = ctx.inputs[1];
            let mut dx = ctx.wants[0].then(|| Tensor::zeros(&[t, d_in]));
            let mut dw = ctx.wants[1].then(|| Tensor::zeros(wv.shape()));
            for to in 0..t_out {
                let start = to * stride;
                let grow = g.row(to);
                for w in 0..k {
                    let tin = start + w;
                    if tin < padding || tin - padding >= t {
                        continue;
                    }
                    let ti = tin - padding;
                    if depthwise {
                        for c in 0..d_in {
                            let gval = grow[c];
                            if let Some(dxt) = dx.as_mut() {
                                dxt.row_mut(ti)[c] =
                                    dxt.row_mut(ti)[c] + gval * wv.row(w)[c];
                            }
                            if let Some(dwt) = dw.as_mut() {
                                dwt.row_mut(w)[c] = dwt.row_mut(w)[c] + gval * xv.row(ti)[c];
                            }
                        }
                    } else {
                        for ci in 0..d_in {
                            let wbase = (w * d_in + ci) * d_out;
                            let xval = xv.row(ti)[ci];
                            let mut dx_acc = S::zero();
                            for co in 0..d_out {
                                let gval = grow[co];
                                dx_acc = dx_acc + gval * wv.data()[wbase + co];
                                if let Some(dwt) = dw.as_mut() {
                                    dwt.data_mut()[wbase + co] =
                                        dwt.data_mut()[wbase + co] + gval * xval;
                                }
                            }
                            if let Some(dxt) = dx.as_mut() {
                                dxt.row_mut(ti)[ci] = dxt.row_mut(ti)[ci] + dx_acc;
                            }
                        }
                    }
                }
            }
            let mut grads = vec![dx, dw];
            if has_bias {
                let db = ctx.wants[2].then(|| {
                    let mut db = Tensor::zeros(&[d_out]);
                    for to in 0..t_out {
                        for co in 0..d_out {
                            db.data_mut()[co] = db.data_mut()[co] + g.row(to)[co];
                        }
                    }
                    db
                });
                grads.push(db);
            }
            grads
        };
        Ok(self.insert(out, parents, Some(Box::new(rule)), false))
    }

    /// Extends a [T, d] tensor to [new_rows, d] with zero rows at the end.
    pub fn pad_rows(&mut self, x: Var, new_rows: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 || new_rows < xs[0] {
            return Err(Error::InvalidArgument {
                op: "pad_rows",
                msg: format!("cannot pad shape {:?} to {} rows", xs, new_rows),
            });
        }
        let (t, d) = (xs[0], xs[1]);
        if new_rows == t {
            return Ok(x);
        }
        let mut data = self.value(x).data().to_vec();
        data.resize(new_rows * d, S::zero());
        let value = Tensor::new(vec![new_rows, d], data)?;
        let rule = move |ctx: &crate::graph::BackCtx<'_, S>| {
            let g = &ctx.out_grad.data()[..t * d];
            vec![Some(Tensor::new(vec![t, d], g.to_vec()).expect("slice"))]
        };
        Ok(self.insert(value, vec![x], Some(Box::new(rule)), false))
    }

    /// Width-2 stride-2 max pooling over valid rows of a [T, d] tensor.
    ///
    /// Within each pair, masked rows are skipped; a pair with no valid row
    /// yields a zero row. Ties route the gradient to the earlier row.
    pub fn max_pool2(&mut self, x: Var, valid: &[bool]) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 || xs[0] != valid.len() {
            return Err(Error::InvalidArgument {
                op: "max_pool2",
                msg: format!("shape {:?} vs mask length {}", xs, valid.len()),
            });
        }
        let (t, d) = (xs[0], xs[1]);
        if t % 2 != 0 {
            return Err(Error::InvalidArgument {
                op: "max_pool2",
                msg: format!("length {} is odd; pad upstream", t),
            });
        }
        let t_out = t / 2;
        let mut out = Tensor::zeros(&[t_out, d]);
        let valid_owned = valid.to_vec();
        {
            let xv = self.value(x);
            for to in 0..t_out {
                let (i0, i1) = (2 * to, 2 * to + 1);
                let (v0, v1) = (valid_owned[i0], valid_owned[i1]);
                let orow = out.row_mut(to);
                match (v0, v1) {
                    (true, true) => {
                        for c in 0..d {
                            orow[c] = xv.row(i0)[c].max(xv.row(i1)[c]);
                        }
                    }
                    (true, false) => orow.copy_from_slice(xv.row(i0)),
                    (false, true) => orow.copy_from_slice(xv.row(i1)),
                    (false, false) => {} // stays zero
                }
            }
        }
        let rule = move |ctx: &crate::graph::BackCtx<'_, S>| {
            let xv = ctx.inputs[0];
            let g = ctx.out_grad;
            let mut dx = Tensor::zeros(&[t, d]);
            for to in 0..t_out {
                let (i0, i1) = (2 * to, 2 * to + 1);
                let (v0, v1) = (valid_owned[i0], valid_owned[i1]);
                for c in 0..d {
                    let gval = g.row(to)[c];
                    match (v0, v1) {
                        (true, true) => {
                            // first row wins ties, matching the forward max
                            if xv.row(i0)[c] >= xv.row(i1)[c] {
                                dx.row_mut(i0)[c] = dx.row_mut(i0)[c] + gval;
                            } else {
                                dx.row_mut(i1)[c] = dx.row_mut(i1)[c] + gval;
                            }
                        }
                        (true, false) => dx.row_mut(i0)[c] = dx.row_mut(i0)[c] + gval,
                        (false, true) => dx.row_mut(i1)[c] = dx.row_mut(i1)[c] + gval,
                        (false, false) => {}
                    }
                }
            }
            vec![Some(dx)]
        };
        Ok(self.insert(out, vec![x], Some(Box::new(rule)), false))
    }
}

pub(crate) fn matmul_raw<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    m: usize,
    k: usize,
    n: usize,
) -> Tensor<S> {
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (kk, &a_ik) in arow.iter().enumerate().take(k) {
            if a_ik == S::zero() {
                continue;
            }
            let brow = &b.data()[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + a_ik * brow[j];
            }
        }
    }
    out
}
