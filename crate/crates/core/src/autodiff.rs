//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. Nodes only reference earlier nodes, so the
//! tape is topologically ordered by construction and backward is a single
//! reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
    fn pixels(&self) -> usize {
        self.ho * self.wo
    }
}

/// One axis of a bilinear resize: source indices and the weight of the
/// second one.
#[derive(Debug, Clone, Copy)]
struct Interp {
    i0: usize,
    i1: usize,
    frac: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct FocalParams {
    pub alpha: f64,
    pub beta: f64,
    /// Predictions are clamped to `[eps, 1 - eps]` before the logs.
    pub eps: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            alpha: 2.0,
            beta: 4.0,
            eps: 1e-4,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    Resize {
        x: Var,
        channels: usize,
        in_w: usize,
        rows: Vec<Interp>,
        cols: Vec<Interp>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Abs(Var),
    Sum(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Row {
        table: Var,
        index: usize,
    },
    Pick {
        x: Var,
        index: usize,
    },
    Max {
        inputs: Vec<Var>,
        winner: Vec<u8>,
    },
    Focal {
        pred: Var,
        target: Vec<f64>,
        params: FocalParams,
        norm: f64,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// The computation record: an append-only list of operation nodes.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that requires one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when the node does not influence the loss or is a constant.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Accumulates the gradient of `v` into `t`'s gradient buffer.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) {
        match self.wrt(v) {
            Some(g) => t.accumulate_grad(g),
            None => t.accumulate_grad(&vec![0.0; t.numel()]),
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn interp_table(in_len: usize, out_len: usize) -> Vec<Interp> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            Interp { i0, i1, frac }
        })
        .collect()
}

fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.pixels();
    let mut cols = vec![0.0; g.patch() * p];
    for c in 0..g.c_in {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *o = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(dcols: &[f64], g: &ConvGeom, dinput: &mut [f64]) {
    let p = g.pixels();
    for c in 0..g.c_in {
        let plane = &mut dinput[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &dcols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = iy as usize * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c (m x n) = beta * c + a (m x k) * b (k x n)` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe views that stay within `a`, `b` and `c`,
    // which the callers size from the same geometry.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Which side of every non-smooth point each element sits on: ReLU and
    /// abs input signs, max winners and focal-loss clamp regions. Two
    /// evaluations with equal patterns lie on the same smooth piece.
    pub fn branch_pattern(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Act {
                    x,
                    kind: Activation::Relu,
                } => out.extend(self.value(*x).iter().map(|&v| u8::from(v > 0.0))),
                Op::Abs(x) => out.extend(self.value(*x).iter().map(|&v| u8::from(v >= 0.0))),
                Op::Max { winner, .. } => out.extend_from_slice(winner),
                Op::Focal { pred, params, .. } => out.extend(self.value(*pred).iter().map(|&p| {
                    if p < params.eps {
                        0
                    } else if p > 1.0 - params.eps {
                        2
                    } else {
                        1
                    }
                })),
                _ => {}
            }
        }
        out
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("tape nodes are well-formed")
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), false, Op::Leaf)
    }

    pub fn constant_from(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, values)?;
        Ok(self.push(t.shape().to_vec(), t.into_values(), false, Op::Leaf))
    }

    /// Records a differentiable leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), true, Op::Leaf)
    }

    /// 2-D convolution (cross-correlation, as in every deep learning
    /// framework) of a `C_in x H x W` input with `C_out x C_in x kh x kw`
    /// kernels and an optional per-output-channel bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let is = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        if is.len() != 3 || ks.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input {is:?} must be CxHxW and kernels {ks:?} OxCxKhxKw"),
            ));
        }
        if is[0] != ks[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input {is:?} has {} channels, kernels {ks:?} expect {}", is[0], ks[1]),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be at least 1"));
        }
        let (hp, wp) = (is[1] + 2 * padding, is[2] + 2 * padding);
        if ks[2] > hp || ks[3] > wp {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {ks:?} larger than padded input {hp}x{wp}"),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ks[0]] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} does not match {} output channels", self.shape(b), ks[0]),
                ));
            }
        }
        let geom = ConvGeom {
            c_in: is[0],
            h: is[1],
            w: is[2],
            c_out: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            pad: padding,
            ho: (hp - ks[2]) / stride + 1,
            wo: (wp - ks[3]) / stride + 1,
        };
        let cols = im2col(self.value(input), &geom);
        let (pk, np) = (geom.patch(), geom.pixels());
        let mut out = vec![0.0; geom.c_out * np];
        gemm(
            geom.c_out,
            pk,
            np,
            self.value(kernel),
            (pk as isize, 1),
            &cols,
            (np as isize, 1),
            0.0,
            &mut out,
        );
        if let Some(b) = bias {
            let bv = self.value(b);
            for (o, chunk) in out.chunks_exact_mut(np).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bv[o]);
            }
        }
        let rg = self.rg(input) || self.rg(kernel) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            vec![geom.c_out, geom.ho, geom.wo],
            out,
            rg,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
        ))
    }

    /// `w · x + b` for a vector `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 1 || ws.len() != 2 || ws[1] != xs[0] {
            return Err(Error::shape(
                "linear",
                format!("input {xs:?} vs weight {ws:?}"),
            ));
        }
        let (d_out, d_in) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [d_out] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} vs {d_out} outputs", self.shape(b)),
                ));
            }
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let mut out: Vec<f64> = (0..d_out)
            .map(|o| {
                wv[o * d_in..(o + 1) * d_in]
                    .iter()
                    .zip(xv)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        if let Some(b) = b {
            for (o, bv) in out.iter_mut().zip(self.value(b)) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(vec![d_out], out, rg, Op::Linear { x, w, b }))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Activation::Relu => |v| v.max(0.0),
            Activation::Sigmoid => sigmoid,
            Activation::Tanh => f64::tanh,
        };
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, rg, Op::Act { x, kind })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    /// Bilinear resize of a `C x H x W` map with half-pixel
    /// (align-corners-false) sampling.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("bilinear_resize", format!("input {s:?} must be CxHxW")));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("bilinear_resize", "output size must be positive"));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let rows = interp_table(h, out_h);
        let cols = interp_table(w, out_w);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(c * out_h * out_w);
        for ch in 0..c {
            let plane = &xv[ch * h * w..(ch + 1) * h * w];
            for r in &rows {
                let top = &plane[r.i0 * w..(r.i0 + 1) * w];
                let bot = &plane[r.i1 * w..(r.i1 + 1) * w];
                for q in &cols {
                    let t = top[q.i0] * (1.0 - q.frac) + top[q.i1] * q.frac;
                    let b = bot[q.i0] * (1.0 - q.frac) + bot[q.i1] * q.frac;
                    out.push(t * (1.0 - r.frac) + b * r.frac);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            vec![c, out_h, out_w],
            out,
            rg,
            Op::Resize {
                x,
                channels: c,
                in_w: w,
                rows,
                cols,
            },
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * k).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, rg, Op::Scale(a, k))
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).iter().map(|x| x + k).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, rg, Op::Offset(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| x.abs()).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, rg, Op::Abs(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], rg, Op::Sum(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(a)),
            ));
        }
        let v = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), v, rg, Op::Reshape(a)))
    }

    /// Concatenates along the leading axis; trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "nothing to concatenate"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} vs trailing dims {tail:?}"),
                ));
            }
            lead += s[0];
            out.extend_from_slice(self.value(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(shape, out, rg, Op::Concat(parts.to_vec())))
    }

    /// Rows `start..start + len` along the leading axis.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if len == 0 || start + len > s[0] {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{} of {s:?}", start + len),
            ));
        }
        let inner: usize = s[1..].iter().product();
        let v = self.value(x)[start * inner..(start + len) * inner].to_vec();
        let mut shape = vec![len];
        shape.extend_from_slice(&s[1..]);
        let rg = self.rg(x);
        Ok(self.push(shape, v, rg, Op::Slice { x, start }))
    }

    /// Row `index` of a 2-D table (embedding lookup).
    pub fn row(&mut self, table: Var, index: usize) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || index >= s[0] {
            return Err(Error::shape("row", format!("row {index} of {s:?}")));
        }
        let v = self.value(table)[index * s[1]..(index + 1) * s[1]].to_vec();
        let rg = self.rg(table);
        Ok(self.push(vec![s[1]], v, rg, Op::Row { table, index }))
    }

    /// Single element at flat row-major `index`, as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let n = self.value(x).len();
        if index >= n {
            return Err(Error::shape("pick", format!("index {index} of {n} elements")));
        }
        let v = self.value(x)[index];
        let rg = self.rg(x);
        Ok(self.push(vec![1], vec![v], rg, Op::Pick { x, index }))
    }

    /// Elementwise maximum; ties go to the earliest input.
    pub fn max(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::shape("max", "no inputs"))?;
        for &v in &inputs[1..] {
            self.same_shape("max", first, v)?;
        }
        let n = self.value(first).len();
        let mut out = self.value(first).to_vec();
        let mut winner = vec![0u8; n];
        for (k, &v) in inputs.iter().enumerate().skip(1) {
            for (i, &x) in self.value(v).iter().enumerate() {
                if x > out[i] {
                    out[i] = x;
                    winner[i] = k as u8;
                }
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            self.shape(first).to_vec(),
            out,
            rg,
            Op::Max {
                inputs: inputs.to_vec(),
                winner,
            },
        ))
    }

    /// Penalty-reduced pixel-wise focal loss between a probability map and a
    /// Gaussian target map, normalized by the number of target centers
    /// (cells equal to exactly 1, at least one).
    pub fn focal_loss(&mut self, pred: Var, target: &[f64], params: FocalParams) -> Result<Var> {
        let pv = self.value(pred);
        if pv.len() != target.len() {
            return Err(Error::shape(
                "focal_loss",
                format!("prediction {:?} vs {} target cells", self.shape(pred), target.len()),
            ));
        }
        let centers = target.iter().filter(|&&t| t == 1.0).count();
        let norm = centers.max(1) as f64;
        let (lo, hi) = (params.eps, 1.0 - params.eps);
        let mut total = 0.0;
        for (&p, &t) in pv.iter().zip(target) {
            let p = p.clamp(lo, hi);
            total += if t == 1.0 {
                -(1.0 - p).powf(params.alpha) * p.ln()
            } else {
                -(1.0 - t).powf(params.beta) * p.powf(params.alpha) * (1.0 - p).ln()
            };
        }
        let rg = self.rg(pred);
        Ok(self.push(
            vec![1],
            vec![total / norm],
            rg,
            Op::Focal {
                pred,
                target: target.to_vec(),
                params,
                norm,
            },
        ))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let (pk, np) = (geom.patch(), geom.pixels());
                acc(*kernel, &mut |dk| {
                    gemm(
                        geom.c_out,
                        np,
                        pk,
                        g,
                        (np as isize, 1),
                        cols,
                        (1, np as isize),
                        1.0,
                        dk,
                    )
                });
                if let Some(b) = bias {
                    acc(*b, &mut |db| {
                        for (o, chunk) in g.chunks_exact(np).enumerate() {
                            db[o] += chunk.iter().sum::<f64>();
                        }
                    });
                }
                let kv = &self.nodes[kernel.0].value;
                acc(*input, &mut |di| {
                    let mut dcols = vec![0.0; pk * np];
                    gemm(
                        pk,
                        geom.c_out,
                        np,
                        kv,
                        (1, pk as isize),
                        g,
                        (np as isize, 1),
                        0.0,
                        &mut dcols,
                    );
                    col2im_add(&dcols, geom, di);
                });
            }
            Op::Linear { x, w, b } => {
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let d_in = xv.len();
                acc(*w, &mut |dw| {
                    for (o, &go) in g.iter().enumerate() {
                        for (d, &xi) in dw[o * d_in..(o + 1) * d_in].iter_mut().zip(xv) {
                            *d += go * xi;
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |db| {
                        db.iter_mut().zip(g).for_each(|(d, &go)| *d += go);
                    });
                }
                acc(*x, &mut |dx| {
                    for (o, &go) in g.iter().enumerate() {
                        for (d, &wi) in dx.iter_mut().zip(&wv[o * d_in..(o + 1) * d_in]) {
                            *d += go * wi;
                        }
                    }
                });
            }
            Op::Act { x, kind } => {
                let xv = &self.nodes[x.0].value;
                let yv = &node.value;
                acc(*x, &mut |dx| {
                    for i in 0..dx.len() {
                        let local = match kind {
                            Activation::Relu => {
                                if xv[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Activation::Sigmoid => yv[i] * (1.0 - yv[i]),
                            Activation::Tanh => 1.0 - yv[i] * yv[i],
                        };
                        dx[i] += g[i] * local;
                    }
                });
            }
            Op::Resize {
                x,
                channels,
                in_w,
                rows,
                cols,
            } => {
                let in_h = self.nodes[x.0].shape[1];
                let plane_in = in_h * in_w;
                let plane_out = rows.len() * cols.len();
                acc(*x, &mut |dx| {
                    for ch in 0..*channels {
                        let go = &g[ch * plane_out..(ch + 1) * plane_out];
                        let di = &mut dx[ch * plane_in..(ch + 1) * plane_in];
                        for (ri, r) in rows.iter().enumerate() {
                            for (qi, q) in cols.iter().enumerate() {
                                let v = go[ri * cols.len() + qi];
                                let top = v * (1.0 - r.frac);
                                let bot = v * r.frac;
                                di[r.i0 * in_w + q.i0] += top * (1.0 - q.frac);
                                di[r.i0 * in_w + q.i1] += top * q.frac;
                                di[r.i1 * in_w + q.i0] += bot * (1.0 - q.frac);
                                di[r.i1 * in_w + q.i1] += bot * q.frac;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |d| d.iter_mut().zip(g).for_each(|(d, &go)| *d += go));
                }
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, k) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &go)| *d += k * go));
            }
            Op::Offset(a) | Op::Reshape(a) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &go)| *d += go));
            }
            Op::Abs(a) => {
                let av = &self.nodes[a.0].value;
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        let s = if av[i] > 0.0 {
                            1.0
                        } else if av[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        d[i] += g[i] * s;
                    }
                });
            }
            Op::Sum(a) => {
                acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    let seg = &g[off..off + n];
                    acc(p, &mut |d| d.iter_mut().zip(seg).for_each(|(d, &go)| *d += go));
                    off += n;
                }
            }
            Op::Slice { x, start } => {
                let inner: usize = self.nodes[x.0].shape[1..].iter().product();
                let off = start * inner;
                acc(*x, &mut |d| {
                    d[off..off + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, &go)| *d += go)
                });
            }
            Op::Row { table, index } => {
                let e = g.len();
                acc(*table, &mut |d| {
                    d[index * e..(index + 1) * e]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, &go)| *d += go)
                });
            }
            Op::Pick { x, index } => {
                acc(*x, &mut |d| d[*index] += g[0]);
            }
            Op::Max { inputs, winner } => {
                for (k, &v) in inputs.iter().enumerate() {
                    acc(v, &mut |d| {
                        for i in 0..d.len() {
                            if winner[i] as usize == k {
                                d[i] += g[i];
                            }
                        }
                    });
                }
            }
            Op::Focal {
                pred,
                target,
                params,
                norm,
            } => {
                let pv = &self.nodes[pred.0].value;
                let (lo, hi) = (params.eps, 1.0 - params.eps);
                let a = params.alpha;
                acc(*pred, &mut |d| {
                    for i in 0..d.len() {
                        let p = pv[i];
                        if p < lo || p > hi {
                            continue;
                        }
                        let t = target[i];
                        let local = if t == 1.0 {
                            a * (1.0 - p).powf(a - 1.0) * p.ln() - (1.0 - p).powf(a) / p
                        } else {
                            -(1.0 - t).powf(params.beta)
                                * (a * p.powf(a - 1.0) * (1.0 - p).ln() - p.powf(a) / (1.0 - p))
                        };
                        d[i] += g[0] * local / norm;
                    }
                });
            }
        }
    }
}
