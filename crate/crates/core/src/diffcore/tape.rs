use std::f64::consts::PI;

use super::special::{digamma_unchecked, log_gamma_unchecked, trigamma_unchecked};
use super::{Array, DiffError};
use crate::par::Exec;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    in_ch: usize,
    height: usize,
    width: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Unfold one batch item into a `[patch, positions]` column matrix.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (k, p) = (self.kernel, self.positions());
        let mut cols = vec![0.0; self.patch() * p];
        for c in 0..self.in_ch {
            let plane = &x[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((c * k + ky) * k + kx) * p..][..p];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * self.width..][..self.width];
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.width as isize {
                                row[oy * self.out_w + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (k, p) = (self.kernel, self.positions());
        for c in 0..self.in_ch {
            let plane = &mut dx[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((c * k + ky) * k + kx) * p..][..p];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.width as isize {
                                plane[iy as usize * self.width + ix as usize] += row[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Square(usize),
    Sqrt(usize),
    Abs(usize),
    Ln(usize),
    Exp(usize),
    Softplus(usize),
    Gelu(usize),
    LogGamma(usize),
    Digamma(usize),
    MatMul(usize, usize),
    AddBias(usize, usize),
    SoftmaxRows(usize),
    ConcatCols(Vec<usize>),
    Column(usize, usize),
    SumRows(usize),
    Sum(usize),
    Mean(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeom,
        cols: Vec<Vec<f64>>,
        exec: Exec,
    },
    ChannelDot(usize, usize),
    AttnPool(usize, usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run record of array operations for reverse-mode
/// differentiation. Rebuilt on every forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to the leaves of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// `None` when the leaf does not influence the loss.
    pub fn get(&self, var: Var) -> Option<&Array> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Array> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.044_715;
    let k = (2.0 / PI).sqrt();
    let inner = k * (x + C * x * x * x);
    let t = inner.tanh();
    let value = 0.5 * x * (1.0 + t);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * C * x * x);
    (value, deriv)
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dims2(op: &'static str, a: &Array) -> Result<(usize, usize), DiffError> {
    match *a.shape() {
        [n, m] => Ok((n, m)),
        _ => Err(DiffError::Rank { op, expected: 2, shape: a.shape().to_vec() }),
    }
}

fn dims4(op: &'static str, a: &Array) -> Result<(usize, usize, usize, usize), DiffError> {
    match *a.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(DiffError::Rank { op, expected: 4, shape: a.shape().to_vec() }),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input; gradients are never propagated into it.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, var: Var) -> &Array {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Array, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&v| self.nodes[v].needs_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), DiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(DiffError::Shape { op, lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, node: Op) -> Result<Var, DiffError> {
        self.same_shape(op, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Array::new(va.shape().to_vec(), data)?;
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(value, node, needs))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, node: Op) -> Var {
        let value = self.value(a).map(f);
        let needs = self.nodes[a.0].needs_grad;
        self.push(value, node, needs)
    }

    fn check_domain(&self, op: &'static str, a: Var, ok: impl Fn(f64) -> bool) -> Result<(), DiffError> {
        match self.value(a).data().iter().find(|&&v| !ok(v)) {
            Some(&value) => Err(DiffError::Domain { op, value }),
            None => Ok(()),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.check_domain("div", b, |v| v != 0.0)?;
        self.binary("div", a, b, |x, y| x / y, Op::Div(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.unary(a, |x| x * factor, Op::Scale(a.0, factor))
    }

    pub fn add_scalar(&mut self, a: Var, shift: f64) -> Var {
        self.unary(a, |x| x + shift, Op::AddScalar(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a.0))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, DiffError> {
        self.check_domain("sqrt", a, |v| v > 0.0)?;
        Ok(self.unary(a, f64::sqrt, Op::Sqrt(a.0)))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a.0))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var, DiffError> {
        self.check_domain("ln", a, |v| v > 0.0)?;
        Ok(self.unary(a, f64::ln, Op::Ln(a.0)))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a.0))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, |x| gelu_parts(x).0, Op::Gelu(a.0))
    }

    pub fn log_gamma(&mut self, a: Var) -> Result<Var, DiffError> {
        self.check_domain("log_gamma", a, |v| v > 0.0 && v.is_finite())?;
        Ok(self.unary(a, log_gamma_unchecked, Op::LogGamma(a.0)))
    }

    pub fn digamma(&mut self, a: Var) -> Result<Var, DiffError> {
        self.check_domain("digamma", a, |v| v > 0.0 && v.is_finite())?;
        Ok(self.unary(a, digamma_unchecked, Op::Digamma(a.0)))
    }

    /// `[n, k] × [k, m] → [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (n, k) = dims2("matmul", self.value(a))?;
        let (k2, m) = dims2("matmul", self.value(b))?;
        if k != k2 {
            return Err(DiffError::Shape {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), n, k, m);
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(Array::new(vec![n, m], out)?, Op::MatMul(a.0, b.0), needs))
    }

    /// Adds a length-`m` bias to every row of an `[n, m]` array.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, DiffError> {
        let (n, m) = dims2("add_bias", self.value(x))?;
        if self.value(bias).shape() != [m] {
            return Err(DiffError::Shape {
                op: "add_bias",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(m) {
            for (o, bj) in row.iter_mut().zip(b) {
                *o += bj;
            }
        }
        let needs = self.needs(&[x.0, bias.0]);
        Ok(self.push(Array::new(vec![n, m], out)?, Op::AddBias(x.0, bias.0), needs))
    }

    /// Softmax over the last axis of an `[n, m]` array.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, DiffError> {
        let (n, m) = dims2("softmax_rows", self.value(a))?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(m) {
            softmax_in_place(row);
        }
        let needs = self.nodes[a.0].needs_grad;
        Ok(self.push(Array::new(vec![n, m], out)?, Op::SoftmaxRows(a.0), needs))
    }

    /// Concatenate `[n, m_i]` arrays along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let first = parts.first().ok_or(DiffError::Empty { op: "concat_cols" })?;
        let (n, _) = dims2("concat_cols", self.value(*first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (np, mp) = dims2("concat_cols", self.value(*p))?;
            if np != n {
                return Err(DiffError::Shape {
                    op: "concat_cols",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: self.value(*p).shape().to_vec(),
                });
            }
            widths.push(mp);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let needs = self.needs(&idx);
        Ok(self.push(Array::new(vec![n, total], out)?, Op::ConcatCols(idx), needs))
    }

    /// Column `j` of an `[n, m]` array as a length-`n` vector.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var, DiffError> {
        let (n, m) = dims2("column", self.value(a))?;
        if j >= m {
            return Err(DiffError::Shape { op: "column", lhs: self.value(a).shape().to_vec(), rhs: vec![j] });
        }
        let out = (0..n).map(|r| self.value(a).data()[r * m + j]).collect();
        let needs = self.nodes[a.0].needs_grad;
        Ok(self.push(Array::new(vec![n], out)?, Op::Column(a.0, j), needs))
    }

    /// Row sums of an `[n, m]` array.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var, DiffError> {
        let (n, m) = dims2("sum_rows", self.value(a))?;
        let out = self.value(a).data().chunks(m).map(|r| r.iter().sum()).collect();
        let needs = self.nodes[a.0].needs_grad;
        Ok(self.push(Array::new(vec![n], out)?, Op::SumRows(a.0), needs))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let needs = self.nodes[a.0].needs_grad;
        self.push(Array::scalar(s), Op::Sum(a.0), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.sum() / v.len().max(1) as f64;
        let needs = self.nodes[a.0].needs_grad;
        self.push(Array::scalar(s), Op::Mean(a.0), needs)
    }

    /// Layer normalization over the last axis of `[n, m]` with affine gain
    /// and bias of length `m`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, DiffError> {
        let (n, m) = dims2("layer_norm", self.value(x))?;
        for p in [gain, bias] {
            if self.value(p).shape() != [m] {
                return Err(DiffError::Shape {
                    op: "layer_norm",
                    lhs: self.value(x).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = Vec::with_capacity(n * m);
        let mut inv_std = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * m);
        for row in self.value(x).data().chunks(m) {
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let xh = (v - mean) * is;
                xhat.push(xh);
                out.push(xh * g[j] + b[j]);
            }
        }
        let needs = self.needs(&[x.0, gain.0, bias.0]);
        let op = Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, xhat, inv_std };
        Ok(self.push(Array::new(vec![n, m], out)?, op, needs))
    }

    /// 2-D convolution of `[b, c_in, h, w]` by `[c_out, c_in, k, k]` plus a
    /// per-channel bias, zero padding. Batch items are processed
    /// independently under `exec`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize, exec: Exec) -> Result<Var, DiffError> {
        let (batch, in_ch, height, width) = dims4("conv2d", self.value(x))?;
        let (out_ch, in_w, kh, kw) = dims4("conv2d", self.value(w))?;
        let shape_err = || DiffError::Shape {
            op: "conv2d",
            lhs: self.value(x).shape().to_vec(),
            rhs: self.value(w).shape().to_vec(),
        };
        if in_w != in_ch || kh != kw || stride == 0 || height + 2 * pad < kh || width + 2 * pad < kw {
            return Err(shape_err());
        }
        if self.value(b).shape() != [out_ch] {
            return Err(DiffError::Shape {
                op: "conv2d",
                lhs: vec![out_ch],
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let geom = ConvGeom {
            batch,
            in_ch,
            height,
            width,
            out_ch,
            kernel: kh,
            stride,
            pad,
            out_h: (height + 2 * pad - kh) / stride + 1,
            out_w: (width + 2 * pad - kw) / stride + 1,
        };
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let bs = self.value(b).data();
        let item = in_ch * height * width;
        let (patch, pos) = (geom.patch(), geom.positions());
        let per_item: Vec<(Vec<f64>, Vec<f64>)> = exec.map_range(batch, |bi| {
            let cols = geom.im2col(&xs[bi * item..(bi + 1) * item]);
            let mut out = vec![0.0; out_ch * pos];
            for co in 0..out_ch {
                let orow = &mut out[co * pos..(co + 1) * pos];
                orow.iter_mut().for_each(|o| *o = bs[co]);
                for j in 0..patch {
                    let wv = ws[co * patch + j];
                    let crow = &cols[j * pos..(j + 1) * pos];
                    for (o, c) in orow.iter_mut().zip(crow) {
                        *o += wv * c;
                    }
                }
            }
            (cols, out)
        });
        let mut out = Vec::with_capacity(batch * out_ch * pos);
        let mut cols = Vec::with_capacity(batch);
        for (c, o) in per_item {
            cols.push(c);
            out.extend_from_slice(&o);
        }
        let value = Array::new(vec![batch, out_ch, geom.out_h, geom.out_w], out)?;
        let needs = self.needs(&[x.0, w.0, b.0]);
        Ok(self.push(value, Op::Conv2d { x: x.0, w: w.0, b: b.0, geom, cols, exec }, needs))
    }

    /// Per-location inner product with a channel weight vector (a bias-free
    /// 1×1 convolution to one output channel): `[b, c, h, w] · [c] → [b, h·w]`.
    pub fn channel_dot(&mut self, f: Var, w: Var) -> Result<Var, DiffError> {
        let (b, c, h, wd) = dims4("channel_dot", self.value(f))?;
        if self.value(w).shape() != [c] {
            return Err(DiffError::Shape {
                op: "channel_dot",
                lhs: self.value(f).shape().to_vec(),
                rhs: self.value(w).shape().to_vec(),
            });
        }
        let p = h * wd;
        let fs = self.value(f).data();
        let ws = self.value(w).data();
        let mut out = vec![0.0; b * p];
        for bi in 0..b {
            let o = &mut out[bi * p..(bi + 1) * p];
            for (ci, wv) in ws.iter().enumerate() {
                let plane = &fs[(bi * c + ci) * p..][..p];
                for (ov, fv) in o.iter_mut().zip(plane) {
                    *ov += wv * fv;
                }
            }
        }
        let needs = self.needs(&[f.0, w.0]);
        Ok(self.push(Array::new(vec![b, p], out)?, Op::ChannelDot(f.0, w.0), needs))
    }

    /// Attention-weighted spatial pooling: `z[b, c] = Σ_p a[b, p] · f[b, c, p]`.
    pub fn attn_pool(&mut self, f: Var, a: Var) -> Result<Var, DiffError> {
        let (b, c, h, wd) = dims4("attn_pool", self.value(f))?;
        let p = h * wd;
        if self.value(a).shape() != [b, p] {
            return Err(DiffError::Shape {
                op: "attn_pool",
                lhs: self.value(f).shape().to_vec(),
                rhs: self.value(a).shape().to_vec(),
            });
        }
        let fs = self.value(f).data();
        let at = self.value(a).data();
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            let weights = &at[bi * p..(bi + 1) * p];
            for ci in 0..c {
                let plane = &fs[(bi * c + ci) * p..][..p];
                out[bi * c + ci] = plane.iter().zip(weights).map(|(x, y)| x * y).sum();
            }
        }
        let needs = self.needs(&[f.0, a.0]);
        Ok(self.push(Array::new(vec![b, c], out)?, Op::AttnPool(f.0, a.0), needs))
    }

    /// Reverse sweep from a scalar node. Returns gradients for every leaf
    /// reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, DiffError> {
        let root = &self.nodes[loss.0].value;
        if !root.is_scalar() {
            return Err(DiffError::NonScalarLoss(root.shape().to_vec()));
        }
        let mut grads: Vec<Option<Array>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array::full(root.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Array>], idx: usize, contrib: Array) {
        if !self.nodes[idx].needs_grad {
            return;
        }
        match &mut grads[idx] {
            Some(existing) => existing.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn elementwise(&self, grads: &mut [Option<Array>], idx: usize, g: &Array, local: impl Fn(usize, f64) -> f64) {
        if !self.nodes[idx].needs_grad {
            return;
        }
        let x = &self.nodes[idx].value;
        let data = x.data().iter().zip(g.data()).enumerate().map(|(k, (&xv, &gv))| gv * local(k, xv)).collect();
        let contrib = Array::new(x.shape().to_vec(), data).expect("shape preserved");
        self.accumulate(grads, idx, contrib);
    }

    fn propagate(&self, node: &Node, g: Array, grads: &mut [Option<Array>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *b, g.clone());
                self.accumulate(grads, *a, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *b, g.map(|v| -v));
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                self.elementwise(grads, *a, &g, |k, _| vb[k]);
                self.elementwise(grads, *b, &g, |k, _| va[k]);
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                self.elementwise(grads, *a, &g, |k, _| 1.0 / vb[k]);
                self.elementwise(grads, *b, &g, |k, _| -va[k] / (vb[k] * vb[k]));
            }
            Op::Scale(a, f) => self.elementwise(grads, *a, &g, |_, _| *f),
            Op::AddScalar(a) => self.accumulate(grads, *a, g),
            Op::Square(a) => self.elementwise(grads, *a, &g, |_, x| 2.0 * x),
            Op::Sqrt(a) => self.elementwise(grads, *a, &g, |k, _| 0.5 / out.data()[k]),
            Op::Abs(a) => self.elementwise(grads, *a, &g, |_, x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            Op::Ln(a) => self.elementwise(grads, *a, &g, |_, x| 1.0 / x),
            Op::Exp(a) => self.elementwise(grads, *a, &g, |k, _| out.data()[k]),
            Op::Softplus(a) => self.elementwise(grads, *a, &g, |_, x| sigmoid(x)),
            Op::Gelu(a) => self.elementwise(grads, *a, &g, |_, x| gelu_parts(x).1),
            Op::LogGamma(a) => self.elementwise(grads, *a, &g, |_, x| digamma_unchecked(x)),
            Op::Digamma(a) => self.elementwise(grads, *a, &g, |_, x| trigamma_unchecked(x)),
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (n, k) = (va.shape()[0], va.shape()[1]);
                let m = vb.shape()[1];
                if self.nodes[*a].needs_grad {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; n * k];
                    for i in 0..n {
                        let grow = &g.data()[i * m..(i + 1) * m];
                        for (kk, d) in da[i * k..(i + 1) * k].iter_mut().enumerate() {
                            let brow = &vb.data()[kk * m..(kk + 1) * m];
                            *d = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.accumulate(grads, *a, Array::new(vec![n, k], da).expect("shape"));
                }
                if self.nodes[*b].needs_grad {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * m];
                    for i in 0..n {
                        let grow = &g.data()[i * m..(i + 1) * m];
                        for kk in 0..k {
                            let av = va.data()[i * k + kk];
                            for (d, gv) in db[kk * m..(kk + 1) * m].iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                    self.accumulate(grads, *b, Array::new(vec![k, m], db).expect("shape"));
                }
            }
            Op::AddBias(x, bias) => {
                let m = out.shape()[1];
                if self.nodes[*bias].needs_grad {
                    let mut db = vec![0.0; m];
                    for row in g.data().chunks(m) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *bias, Array::from_vec(db));
                }
                self.accumulate(grads, *x, g);
            }
            Op::SoftmaxRows(a) => {
                let m = out.shape()[1];
                let mut dx = vec![0.0; out.len()];
                for ((drow, yrow), grow) in dx.chunks_mut(m).zip(out.data().chunks(m)).zip(g.data().chunks(m)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, gv)| y * gv).sum();
                    for ((d, y), gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *d = y * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, Array::new(out.shape().to_vec(), dx).expect("shape"));
            }
            Op::ConcatCols(parts) => {
                let (n, total) = (out.shape()[0], out.shape()[1]);
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p].value.shape()[1];
                    if self.nodes[p].needs_grad {
                        let mut d = Vec::with_capacity(n * w);
                        for r in 0..n {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, p, Array::new(vec![n, w], d).expect("shape"));
                    }
                    offset += w;
                }
            }
            Op::Column(a, j) => {
                let shape = self.nodes[*a].value.shape();
                let m = shape[1];
                let mut d = vec![0.0; shape[0] * m];
                for (r, gv) in g.data().iter().enumerate() {
                    d[r * m + j] = *gv;
                }
                self.accumulate(grads, *a, Array::new(shape.to_vec(), d).expect("shape"));
            }
            Op::SumRows(a) => {
                let shape = self.nodes[*a].value.shape();
                let m = shape[1];
                let d = g.data().iter().flat_map(|&gv| std::iter::repeat_n(gv, m)).collect();
                self.accumulate(grads, *a, Array::new(shape.to_vec(), d).expect("shape"));
            }
            Op::Sum(a) => {
                let shape = self.nodes[*a].value.shape();
                self.accumulate(grads, *a, Array::full(shape, g.item()));
            }
            Op::Mean(a) => {
                let v = &self.nodes[*a].value;
                self.accumulate(grads, *a, Array::full(v.shape(), g.item() / v.len().max(1) as f64));
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let m = out.shape()[1];
                let gn = self.nodes[*gain].value.data();
                if self.nodes[*gain].needs_grad {
                    let mut dg = vec![0.0; m];
                    for (grow, xrow) in g.data().chunks(m).zip(xhat.chunks(m)) {
                        for j in 0..m {
                            dg[j] += grow[j] * xrow[j];
                        }
                    }
                    self.accumulate(grads, *gain, Array::from_vec(dg));
                }
                if self.nodes[*bias].needs_grad {
                    let mut db = vec![0.0; m];
                    for grow in g.data().chunks(m) {
                        for (d, v) in db.iter_mut().zip(grow) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *bias, Array::from_vec(db));
                }
                if self.nodes[*x].needs_grad {
                    let mut dx = vec![0.0; out.len()];
                    for (r, ((drow, grow), xrow)) in dx.chunks_mut(m).zip(g.data().chunks(m)).zip(xhat.chunks(m)).enumerate() {
                        let dxhat: Vec<f64> = grow.iter().zip(gn).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / m as f64;
                        let mean_dx = dxhat.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                        for j in 0..m {
                            drow[j] = inv_std[r] * (dxhat[j] - mean_d - xrow[j] * mean_dx);
                        }
                    }
                    self.accumulate(grads, *x, Array::new(out.shape().to_vec(), dx).expect("shape"));
                }
            }
            Op::Conv2d { x, w, b, geom, cols, exec } => {
                let (patch, pos, co) = (geom.patch(), geom.positions(), geom.out_ch);
                let ws = self.nodes[*w].value.data();
                let need_x = self.nodes[*x].needs_grad;
                let gd = g.data();
                let per_item: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = exec.map_range(geom.batch, |bi| {
                    let dout = &gd[bi * co * pos..(bi + 1) * co * pos];
                    let cb = &cols[bi];
                    let mut dw = vec![0.0; co * patch];
                    let mut db = vec![0.0; co];
                    for c in 0..co {
                        let drow = &dout[c * pos..(c + 1) * pos];
                        db[c] = drow.iter().sum();
                        for j in 0..patch {
                            dw[c * patch + j] = drow.iter().zip(&cb[j * pos..(j + 1) * pos]).map(|(a, b)| a * b).sum();
                        }
                    }
                    let mut dx = Vec::new();
                    if need_x {
                        let mut dcols = vec![0.0; patch * pos];
                        for c in 0..co {
                            let drow = &dout[c * pos..(c + 1) * pos];
                            for j in 0..patch {
                                let wv = ws[c * patch + j];
                                for (dc, dv) in dcols[j * pos..(j + 1) * pos].iter_mut().zip(drow) {
                                    *dc += wv * dv;
                                }
                            }
                        }
                        dx = vec![0.0; geom.in_ch * geom.height * geom.width];
                        geom.col2im(&dcols, &mut dx);
                    }
                    (dw, db, dx)
                });
                let mut dw = vec![0.0; co * patch];
                let mut db = vec![0.0; co];
                let mut dx = Vec::with_capacity(if need_x { self.nodes[*x].value.len() } else { 0 });
                for (w_i, b_i, x_i) in per_item {
                    for (a, v) in dw.iter_mut().zip(&w_i) {
                        *a += v;
                    }
                    for (a, v) in db.iter_mut().zip(&b_i) {
                        *a += v;
                    }
                    dx.extend_from_slice(&x_i);
                }
                let wshape = self.nodes[*w].value.shape().to_vec();
                self.accumulate(grads, *w, Array::new(wshape, dw).expect("shape"));
                self.accumulate(grads, *b, Array::from_vec(db));
                if need_x {
                    let xshape = self.nodes[*x].value.shape().to_vec();
                    self.accumulate(grads, *x, Array::new(xshape, dx).expect("shape"));
                }
            }
            Op::ChannelDot(f, w) => {
                let fv = &self.nodes[*f].value;
                let (b, c) = (fv.shape()[0], fv.shape()[1]);
                let p = fv.shape()[2] * fv.shape()[3];
                let ws = self.nodes[*w].value.data();
                if self.nodes[*w].needs_grad {
                    let mut dw = vec![0.0; c];
                    for bi in 0..b {
                        let grow = &g.data()[bi * p..(bi + 1) * p];
                        for (ci, d) in dw.iter_mut().enumerate() {
                            let plane = &fv.data()[(bi * c + ci) * p..][..p];
                            *d += plane.iter().zip(grow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                    self.accumulate(grads, *w, Array::from_vec(dw));
                }
                if self.nodes[*f].needs_grad {
                    let mut df = vec![0.0; fv.len()];
                    for bi in 0..b {
                        let grow = &g.data()[bi * p..(bi + 1) * p];
                        for (ci, wv) in ws.iter().enumerate() {
                            for (d, gv) in df[(bi * c + ci) * p..][..p].iter_mut().zip(grow) {
                                *d = wv * gv;
                            }
                        }
                    }
                    self.accumulate(grads, *f, Array::new(fv.shape().to_vec(), df).expect("shape"));
                }
            }
            Op::AttnPool(f, a) => {
                let fv = &self.nodes[*f].value;
                let av = self.nodes[*a].value.data();
                let (b, c) = (fv.shape()[0], fv.shape()[1]);
                let p = fv.shape()[2] * fv.shape()[3];
                if self.nodes[*a].needs_grad {
                    let mut da = vec![0.0; b * p];
                    for bi in 0..b {
                        let drow = &mut da[bi * p..(bi + 1) * p];
                        for ci in 0..c {
                            let gv = g.data()[bi * c + ci];
                            let plane = &fv.data()[(bi * c + ci) * p..][..p];
                            for (d, x) in drow.iter_mut().zip(plane) {
                                *d += gv * x;
                            }
                        }
                    }
                    self.accumulate(grads, *a, Array::new(vec![b, p], da).expect("shape"));
                }
                if self.nodes[*f].needs_grad {
                    let mut df = vec![0.0; fv.len()];
                    for bi in 0..b {
                        let weights = &av[bi * p..(bi + 1) * p];
                        for ci in 0..c {
                            let gv = g.data()[bi * c + ci];
                            for (d, wv) in df[(bi * c + ci) * p..][..p].iter_mut().zip(weights) {
                                *d = gv * wv;
                            }
                        }
                    }
                    self.accumulate(grads, *f, Array::new(fv.shape().to_vec(), df).expect("shape"));
                }
            }
        }
    }
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for kk in 0..k {
            let av = a[i * k + kk];
            for (o, bv) in orow.iter_mut().zip(&b[kk * m..(kk + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
