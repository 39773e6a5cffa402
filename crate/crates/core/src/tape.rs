//! Reverse-mode differentiation over a linear operation tape.
//!
//! A `Tape` owns every tensor of one forward pass in an arena; `Var` handles
//! index into it. Operations compute their outputs eagerly and push a record
//! carrying the local gradient rule. `backward` replays the records in
//! reverse (the recording order is a topological order by construction) and
//! accumulates adjoints additively, so parameters used several times — shared
//! branch weights, a repeated unknown-edge embedding — receive the sum over
//! all paths.
//!
//! A tape and its tensors belong to one logical worker; nothing here
//! synchronizes.

use crate::error::{Error, Result};
use crate::rng::SeedableStream;
use crate::tensor::{numel, Real, Tensor};
use rand::Rng;

/// Handle to a tensor on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

/// Dropout phase. Eval is a pure identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Norm floor below which a vector has no usable direction.
pub const DEGENERATE_EPS: Real = 1e-12;

#[derive(Debug, Clone)]
enum Record {
    Matmul { a: Var, b: Var, out: Var },
    MatVec { m: Var, v: Var, out: Var },
    Transpose { x: Var, out: Var },
    Add { a: Var, b: Var, out: Var },
    Sub { a: Var, b: Var, out: Var },
    Mul { a: Var, b: Var, out: Var },
    AddBias { x: Var, bias: Var, out: Var },
    AddChannelBias { x: Var, bias: Var, out: Var },
    Affine { x: Var, scale: Real, out: Var },
    Activation { x: Var, kind: Activation, out: Var },
    Softmax { x: Var, axis: usize, out: Var },
    Conv2d { x: Var, kernel: Var, stride: usize, out: Var },
    Dropout { x: Var, mask: Vec<Real>, out: Var },
    Cosine { a: Var, b: Var, out: Var },
    Dot { a: Var, b: Var, out: Var },
    Sum { x: Var, out: Var },
    Ln { x: Var, out: Var },
    Stack { parts: Vec<Var>, out: Var },
    StackRows { rows: Vec<Var>, out: Var },
    Concat { a: Var, b: Var, out: Var },
    Row { x: Var, index: usize, out: Var },
    GatherRows { table: Var, indices: Vec<usize>, out: Var },
    LogSumExp { x: Var, out: Var },
    BceFromScores { scores: Var, targets: Vec<Real>, out: Var },
    BceWithLogits { logits: Var, targets: Vec<Real>, out: Var },
    CenterCrop { x: Var, top: usize, left: usize, out: Var },
    Reshape { x: Var, out: Var },
    TripletFused {
        visual: Vec<Var>,
        language: Vec<Var>,
        pairs: Vec<Vec<usize>>,
        margin: Real,
        pos_sims: Vec<Real>,
        neg_sims: Vec<Real>,
        out: Var,
    },
    TripletSoftmaxFused {
        visual: Vec<Var>,
        language: Vec<Var>,
        pairs: Vec<Vec<usize>>,
        scale: Real,
        pos_sims: Vec<Real>,
        neg_sims: Vec<Real>,
        out: Var,
    },
}

/// Cosine-similarity pieces shared by the fused alignment losses.
struct CosineParts {
    norms_v: Vec<Real>,
    norms_l: Vec<Real>,
}

fn cosine_parts(nodes: &[Tensor], visual: &[Var], language: &[Var]) -> Result<CosineParts> {
    let norm_of = |v: Var| -> Result<Real> {
        let n = l2(nodes[v.0].data());
        if n < DEGENERATE_EPS {
            return Err(Error::Degenerate {
                norm: n,
                eps: DEGENERATE_EPS,
            });
        }
        Ok(n)
    };
    Ok(CosineParts {
        norms_v: visual.iter().map(|&v| norm_of(v)).collect::<Result<_>>()?,
        norms_l: language.iter().map(|&l| norm_of(l)).collect::<Result<_>>()?,
    })
}

/// `d cos(a,b) = upstream * (b/(na*nb) - cos*a/na^2)` into `grad_a`, and
/// symmetrically into `grad_b`.
fn cosine_backward_into(
    a: &[Real],
    b: &[Real],
    na: Real,
    nb: Real,
    cos: Real,
    upstream: Real,
    grad_a: &mut [Real],
    grad_b: &mut [Real],
) {
    let inv = 1.0 / (na * nb);
    let ca = cos / (na * na);
    let cb = cos / (nb * nb);
    for i in 0..a.len() {
        grad_a[i] += upstream * (b[i] * inv - ca * a[i]);
        grad_b[i] += upstream * (a[i] * inv - cb * b[i]);
    }
}

/// Recording tape for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Tensor>,
    produced: Vec<bool>,
    records: Vec<Record>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, t: Tensor, produced: bool) -> Var {
        self.nodes.push(t);
        self.produced.push(produced);
        Var(self.nodes.len() - 1)
    }

    /// Registers an input that never receives gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.push(t, false)
    }

    pub fn scalar_const(&mut self, v: Real) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Registers a copy of a trainable tensor; its gradient is available
    /// from the tape after `backward`.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut copy = t.clone();
        copy.set_requires_grad(true);
        self.push(copy, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].shape()
    }

    pub fn data(&self, v: Var) -> &[Real] {
        self.nodes[v.0].data()
    }

    pub fn scalar_value(&self, v: Var) -> Real {
        self.nodes[v.0].scalar_value()
    }

    /// Gradient of the last `backward` loss w.r.t. a requires-grad node.
    pub fn grad(&self, v: Var) -> Option<&[Real]> {
        self.nodes[v.0].grad()
    }

    fn out(&mut self, shape: Vec<usize>, data: Vec<Real>) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        let t = Tensor::new(shape, data).expect("op produced inconsistent tensor");
        self.push(t, true)
    }

    fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Self::dim_err("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_raw(self.data(a), self.data(b), m, k, n, &mut out);
        let v = self.out(vec![m, n], out);
        self.records.push(Record::Matmul { a, b, out: v });
        Ok(v)
    }

    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let (sm, sv) = (self.shape(m).to_vec(), self.shape(v).to_vec());
        if sm.len() != 2 || sv.len() != 1 || sm[1] != sv[0] {
            return Err(Self::dim_err("matvec", &sm, &sv));
        }
        let (rows, cols) = (sm[0], sm[1]);
        let md = self.data(m);
        let vd = self.data(v);
        let mut out = vec![0.0; rows];
        for i in 0..rows {
            let mut acc = 0.0;
            let row = &md[i * cols..(i + 1) * cols];
            for j in 0..cols {
                acc += row[j] * vd[j];
            }
            out[i] = acc;
        }
        let o = self.out(vec![rows], out);
        self.records.push(Record::MatVec { m, v, out: o });
        Ok(o)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Self::dim_err("transpose", &s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let mut out = vec![0.0; r * c];
        transpose_raw(self.data(x), r, c, &mut out);
        let o = self.out(vec![c, r], out);
        self.records.push(Record::Transpose { x, out: o });
        Ok(o)
    }

    // ---- elementwise ---------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Self::dim_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<Real> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let o = self.out(shape, out);
        self.records.push(Record::Add { a, b, out: o });
        Ok(o)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out: Vec<Real> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        let o = self.out(shape, out);
        self.records.push(Record::Sub { a, b, out: o });
        Ok(o)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<Real> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let o = self.out(shape, out);
        self.records.push(Record::Mul { a, b, out: o });
        Ok(o)
    }

    /// Row-broadcast bias: `[m×n] + [n]`. The only broadcasting in the crate
    /// besides the channel variant below.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Self::dim_err("add_bias", &sx, &sb));
        }
        let (m, n) = (sx[0], sx[1]);
        let xd = self.data(x);
        let bd = self.data(bias);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = xd[i * n + j] + bd[j];
            }
        }
        let o = self.out(vec![m, n], out);
        self.records.push(Record::AddBias { x, bias, out: o });
        Ok(o)
    }

    /// Channel-broadcast bias: `[c×h×w] + [c]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sx.len() != 3 || sb.len() != 1 || sx[0] != sb[0] {
            return Err(Self::dim_err("add_channel_bias", &sx, &sb));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let xd = self.data(x);
        let bd = self.data(bias);
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            let b = bd[ch];
            for s in 0..h * w {
                out[ch * h * w + s] = xd[ch * h * w + s] + b;
            }
        }
        let o = self.out(vec![c, h, w], out);
        self.records.push(Record::AddChannelBias { x, bias, out: o });
        Ok(o)
    }

    /// Elementwise `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: Real, shift: Real) -> Var {
        let out: Vec<Real> = self.data(x).iter().map(|v| scale * v + shift).collect();
        let shape = self.shape(x).to_vec();
        let o = self.out(shape, out);
        self.records.push(Record::Affine { x, scale, out: o });
        o
    }

    pub fn scale(&mut self, x: Var, k: Real) -> Var {
        self.affine(x, k, 0.0)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let out: Vec<Real> = self
            .data(x)
            .iter()
            .map(|&v| match kind {
                Activation::Relu => {
                    if v > 0.0 {
                        v
                    } else {
                        0.0
                    }
                }
                Activation::Sigmoid => sigmoid(v),
                Activation::Tanh => v.tanh(),
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let o = self.out(shape, out);
        self.records.push(Record::Activation { x, kind, out: o });
        o
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

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if self.data(x).iter().any(|&v| v <= 0.0) {
            return Err(Error::Numeric("ln of non-positive value".into()));
        }
        let out: Vec<Real> = self.data(x).iter().map(|v| v.ln()).collect();
        let shape = self.shape(x).to_vec();
        let o = self.out(shape, out);
        self.records.push(Record::Ln { x, out: o });
        Ok(o)
    }

    /// Max-subtracted softmax along `axis`; output slices lie on the
    /// probability simplex. `-inf` logits receive exactly zero mass.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let mut max = Real::NEG_INFINITY;
                for a in 0..len {
                    max = max.max(xd[at(a)]);
                }
                if max == Real::NEG_INFINITY {
                    return Err(Error::Numeric(
                        "softmax over a fully masked slice".into(),
                    ));
                }
                let mut denom = 0.0;
                for a in 0..len {
                    let e = (xd[at(a)] - max).exp();
                    out[at(a)] = e;
                    denom += e;
                }
                for a in 0..len {
                    out[at(a)] /= denom;
                }
            }
        }
        let o = self.out(shape, out);
        self.records.push(Record::Softmax { x, axis, out: o });
        Ok(o)
    }

    /// No-padding (valid) cross-correlation of `x: [c_in×h×w]` with
    /// `kernel: [c_out×c_in×kh×kw]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 3 || sk.len() != 4 || sx[0] != sk[1] {
            return Err(Self::dim_err("conv2d", &sx, &sk));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be positive".into()));
        }
        let (ci, h, w) = (sx[0], sx[1], sx[2]);
        let (co, _, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        if kh > h || kw > w {
            return Err(Self::dim_err("conv2d", &sx, &sk));
        }
        let oh = (h - kh) / stride + 1;
        let ow = (w - kw) / stride + 1;
        let xd = self.data(x);
        let kd = self.data(kernel);
        let mut out = vec![0.0; co * oh * ow];
        for c_out in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c_in in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let xv = xd[c_in * h * w + (oy * stride + ky) * w + (ox * stride + kx)];
                                let kv = kd[((c_out * ci + c_in) * kh + ky) * kw + kx];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[c_out * oh * ow + oy * ow + ox] = acc;
                }
            }
        }
        let o = self.out(vec![co, oh, ow], out);
        self.records.push(Record::Conv2d {
            x,
            kernel,
            stride,
            out: o,
        });
        Ok(o)
    }

    /// Inverted dropout: in train mode zero each element with probability `p`
    /// and scale survivors by `1/(1-p)`; eval mode is the identity.
    pub fn dropout(
        &mut self,
        x: Var,
        p: Real,
        mode: Mode,
        rng: &mut SeedableStream,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!(
                "dropout probability must lie in [0, 1), got {p}"
            )));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - p);
        let mask: Vec<Real> = (0..self.data(x).len())
            .map(|_| {
                if rng.gen::<Real>() < p {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let out: Vec<Real> = self
            .data(x)
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let shape = self.shape(x).to_vec();
        let o = self.out(shape, out);
        self.records.push(Record::Dropout { x, mask, out: o });
        Ok(o)
    }

    /// Cosine similarity of two vectors; errors on near-zero norms.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 1 || sa != sb {
            return Err(Self::dim_err("cosine_similarity", &sa, &sb));
        }
        let ad = self.data(a);
        let bd = self.data(b);
        let na = l2(ad);
        let nb = l2(bd);
        if na < DEGENERATE_EPS || nb < DEGENERATE_EPS {
            return Err(Error::Degenerate {
                norm: na.min(nb),
                eps: DEGENERATE_EPS,
            });
        }
        let s = dot(ad, bd) / (na * nb);
        let o = self.out(vec![], vec![s]);
        self.records.push(Record::Cosine { a, b, out: o });
        Ok(o)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 1 || sa != sb {
            return Err(Self::dim_err("dot", &sa, &sb));
        }
        let s = dot(self.data(a), self.data(b));
        let o = self.out(vec![], vec![s]);
        self.records.push(Record::Dot { a, b, out: o });
        Ok(o)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: Real = self.data(x).iter().sum();
        let o = self.out(vec![], vec![s]);
        self.records.push(Record::Sum { x, out: o });
        o
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.data(x).len().max(1) as Real;
        let s = self.sum(x);
        self.affine(s, 1.0 / n, 0.0)
    }

    /// Stacks scalar vars into a vector, preserving order.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("stack of zero scalars".into()));
        }
        let mut out = Vec::with_capacity(parts.len());
        for &p in parts {
            if !self.value(p).is_scalar() {
                return Err(Self::dim_err("stack", self.shape(p), &[]));
            }
            out.push(self.scalar_value(p));
        }
        let o = self.out(vec![parts.len()], out);
        self.records.push(Record::Stack {
            parts: parts.to_vec(),
            out: o,
        });
        Ok(o)
    }

    /// Stacks equal-length vectors into a matrix, one per row.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::Contract("stack_rows of zero rows".into()));
        }
        let width = {
            let s = self.shape(rows[0]);
            if s.len() != 1 {
                return Err(Self::dim_err("stack_rows", s, &[]));
            }
            s[0]
        };
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            let s = self.shape(r);
            if s != [width] {
                return Err(Self::dim_err("stack_rows", s, &[width]));
            }
            out.extend_from_slice(self.data(r));
        }
        let o = self.out(vec![rows.len(), width], out);
        self.records.push(Record::StackRows {
            rows: rows.to_vec(),
            out: o,
        });
        Ok(o)
    }

    /// Concatenation of two vectors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 1 || sb.len() != 1 {
            return Err(Self::dim_err("concat", &sa, &sb));
        }
        let mut out = Vec::with_capacity(sa[0] + sb[0]);
        out.extend_from_slice(self.data(a));
        out.extend_from_slice(self.data(b));
        let o = self.out(vec![sa[0] + sb[0]], out);
        self.records.push(Record::Concat { a, b, out: o });
        Ok(o)
    }

    /// Extracts row `index` of a matrix as a vector.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || index >= s[0] {
            return Err(Error::Contract(format!(
                "row {index} out of range for shape {s:?}"
            )));
        }
        let cols = s[1];
        let out = self.data(x)[index * cols..(index + 1) * cols].to_vec();
        let o = self.out(vec![cols], out);
        self.records.push(Record::Row { x, index, out: o });
        Ok(o)
    }

    /// Row gather from a `[rows×width]` table; duplicate indices accumulate
    /// gradient additively.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Self::dim_err("gather_rows", &s, &[]));
        }
        let (rows, width) = (s[0], s[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Vocab(format!(
                "index {bad} out of range for table with {rows} rows"
            )));
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            out.extend_from_slice(&td[i * width..(i + 1) * width]);
        }
        let o = self.out(vec![indices.len(), width], out);
        self.records.push(Record::GatherRows {
            table,
            indices: indices.to_vec(),
            out: o,
        });
        Ok(o)
    }

    /// Numerically stable `log(sum(exp(x)))` over a vector. `-inf` entries
    /// contribute zero mass.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 1 || s[0] == 0 {
            return Err(Self::dim_err("logsumexp", &s, &[]));
        }
        let xd = self.data(x);
        let max = xd.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
        if max == Real::NEG_INFINITY {
            return Err(Error::Numeric("logsumexp of fully masked vector".into()));
        }
        let sum: Real = xd.iter().map(|&v| (v - max).exp()).sum();
        let o = self.out(vec![], vec![max + sum.ln()]);
        self.records.push(Record::LogSumExp { x, out: o });
        Ok(o)
    }

    /// Binary cross-entropy from probabilities, summed over elements, with
    /// the `0 * log 0 = 0` convention so exact hits contribute zero.
    pub fn bce_from_scores(&mut self, scores: Var, targets: &Tensor) -> Result<Var> {
        let s = self.shape(scores).to_vec();
        if s.len() != 1 || targets.shape() != s.as_slice() {
            return Err(Self::dim_err("bce_loss", &s, targets.shape()));
        }
        validate_targets(targets.data())?;
        let mut total = 0.0;
        for (&p, &t) in self.data(scores).iter().zip(targets.data()) {
            if t > 0.0 {
                if p <= 0.0 {
                    return Err(Error::Contract(
                        "bce_loss: zero score with nonzero target".into(),
                    ));
                }
                total -= t * p.ln();
            }
            if t < 1.0 {
                if p >= 1.0 {
                    return Err(Error::Contract(
                        "bce_loss: unit score with target below one".into(),
                    ));
                }
                total -= (1.0 - t) * (1.0 - p).ln();
            }
        }
        let o = self.out(vec![], vec![total]);
        self.records.push(Record::BceFromScores {
            scores,
            targets: targets.data().to_vec(),
            out: o,
        });
        Ok(o)
    }

    /// Fused sigmoid + binary cross-entropy from logits, summed over
    /// elements. Stable for arbitrary logit magnitudes.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 1 || targets.shape() != s.as_slice() {
            return Err(Self::dim_err("bce_with_logits", &s, targets.shape()));
        }
        validate_targets(targets.data())?;
        let mut total = 0.0;
        for (&z, &t) in self.data(logits).iter().zip(targets.data()) {
            total += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        }
        let o = self.out(vec![], vec![total]);
        self.records.push(Record::BceWithLogits {
            logits,
            targets: targets.data().to_vec(),
            out: o,
        });
        Ok(o)
    }

    /// Centered spatial crop of `[c×h×w]` down to `[c×th×tw]`.
    pub fn center_crop(&mut self, x: Var, th: usize, tw: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || th == 0 || tw == 0 || th > s[1] || tw > s[2] {
            return Err(Self::dim_err("center_crop", &s, &[th, tw]));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let top = (h - th) / 2;
        let left = (w - tw) / 2;
        let xd = self.data(x);
        let mut out = Vec::with_capacity(c * th * tw);
        for ch in 0..c {
            for y in 0..th {
                let base = ch * h * w + (top + y) * w + left;
                out.extend_from_slice(&xd[base..base + tw]);
            }
        }
        let o = self.out(vec![c, th, tw], out);
        self.records.push(Record::CenterCrop {
            x,
            top,
            left,
            out: o,
        });
        Ok(o)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.data(x).len() {
            return Err(Self::dim_err("reshape", self.shape(x), &shape));
        }
        let out = self.data(x).to_vec();
        let o = self.out(shape, out);
        self.records.push(Record::Reshape { x, out: o });
        Ok(o)
    }

    /// `w · x (+ b)` for a `[out×in]` weight and `[in]` vector.
    pub fn linear(&mut self, w: Var, x: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matvec(w, x)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    // ---- reverse pass ----------------------------------------------------

    /// Populates gradients of every requires-grad node w.r.t. a scalar loss.
    /// Adjoints accumulate additively across all uses of a node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape()
            )));
        }
        let n = self.nodes.len();
        let active: Vec<bool> = (0..n)
            .map(|i| self.produced[i] || self.nodes[i].requires_grad())
            .collect();
        let mut adj: Vec<Option<Vec<Real>>> = vec![None; n];
        adj[loss.0] = Some(vec![1.0]);
        for rec in self.records.iter().rev() {
            backward_step(&self.nodes, &active, &mut adj, rec);
        }
        for i in 0..n {
            if self.nodes[i].requires_grad() {
                let g = adj[i]
                    .take()
                    .unwrap_or_else(|| vec![0.0; self.nodes[i].len()]);
                self.nodes[i].zero_grad();
                self.nodes[i].accumulate_grad(&g);
            }
        }
        Ok(())
    }
}

fn accumulate(
    active: &[bool],
    adj: &mut [Option<Vec<Real>>],
    nodes: &[Tensor],
    v: Var,
    contrib: &[Real],
) {
    if !active[v.0] {
        return;
    }
    match &mut adj[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e += c;
            }
        }
        None => {
            debug_assert_eq!(contrib.len(), nodes[v.0].len());
            adj[v.0] = Some(contrib.to_vec());
        }
    }
}

fn backward_step(
    nodes: &[Tensor],
    active: &[bool],
    adj: &mut [Option<Vec<Real>>],
    rec: &Record,
) {
    macro_rules! upstream {
        ($out:expr) => {
            match adj[$out.0].clone() {
                Some(d) => d,
                None => return,
            }
        };
    }
    let acc = |adj: &mut [Option<Vec<Real>>], v: Var, c: &[Real]| {
        accumulate(active, adj, nodes, v, c);
    };

    match rec {
        Record::Matmul { a, b, out } => {
            let d = upstream!(out);
            let (m, k) = (nodes[a.0].shape()[0], nodes[a.0].shape()[1]);
            let n = nodes[b.0].shape()[1];
            if active[a.0] {
                // dA = dOut · Bᵀ
                let mut bt = vec![0.0; k * n];
                transpose_raw(nodes[b.0].data(), k, n, &mut bt);
                let mut da = vec![0.0; m * k];
                matmul_raw(&d, &bt, m, n, k, &mut da);
                acc(adj, *a, &da);
            }
            if active[b.0] {
                // dB = Aᵀ · dOut
                let mut at = vec![0.0; m * k];
                transpose_raw(nodes[a.0].data(), m, k, &mut at);
                let mut db = vec![0.0; k * n];
                matmul_raw(&at, &d, k, m, n, &mut db);
                acc(adj, *b, &db);
            }
        }
        Record::MatVec { m, v, out } => {
            let d = upstream!(out);
            let (rows, cols) = (nodes[m.0].shape()[0], nodes[m.0].shape()[1]);
            if active[m.0] {
                let vd = nodes[v.0].data();
                let mut dm = vec![0.0; rows * cols];
                for i in 0..rows {
                    let di = d[i];
                    for j in 0..cols {
                        dm[i * cols + j] = di * vd[j];
                    }
                }
                acc(adj, *m, &dm);
            }
            if active[v.0] {
                let md = nodes[m.0].data();
                let mut dv = vec![0.0; cols];
                for i in 0..rows {
                    let di = d[i];
                    let row = &md[i * cols..(i + 1) * cols];
                    for j in 0..cols {
                        dv[j] += di * row[j];
                    }
                }
                acc(adj, *v, &dv);
            }
        }
        Record::Transpose { x, out } => {
            let d = upstream!(out);
            let (r, c) = (nodes[x.0].shape()[0], nodes[x.0].shape()[1]);
            // d has shape [c×r]; transpose back.
            let mut dx = vec![0.0; r * c];
            transpose_raw(&d, c, r, &mut dx);
            acc(adj, *x, &dx);
        }
        Record::Add { a, b, out } => {
            let d = upstream!(out);
            acc(adj, *a, &d);
            acc(adj, *b, &d);
        }
        Record::Sub { a, b, out } => {
            let d = upstream!(out);
            acc(adj, *a, &d);
            let neg: Vec<Real> = d.iter().map(|v| -v).collect();
            acc(adj, *b, &neg);
        }
        Record::Mul { a, b, out } => {
            let d = upstream!(out);
            if active[a.0] {
                let da: Vec<Real> = d.iter().zip(nodes[b.0].data()).map(|(x, y)| x * y).collect();
                acc(adj, *a, &da);
            }
            if active[b.0] {
                let db: Vec<Real> = d.iter().zip(nodes[a.0].data()).map(|(x, y)| x * y).collect();
                acc(adj, *b, &db);
            }
        }
        Record::AddBias { x, bias, out } => {
            let d = upstream!(out);
            acc(adj, *x, &d);
            if active[bias.0] {
                let n = nodes[bias.0].len();
                let m = d.len() / n;
                let mut db = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        db[j] += d[i * n + j];
                    }
                }
                acc(adj, *bias, &db);
            }
        }
        Record::AddChannelBias { x, bias, out } => {
            let d = upstream!(out);
            acc(adj, *x, &d);
            if active[bias.0] {
                let c = nodes[bias.0].len();
                let spatial = d.len() / c;
                let mut db = vec![0.0; c];
                for ch in 0..c {
                    db[ch] = d[ch * spatial..(ch + 1) * spatial].iter().sum();
                }
                acc(adj, *bias, &db);
            }
        }
        Record::Affine { x, scale, out } => {
            let d = upstream!(out);
            let dx: Vec<Real> = d.iter().map(|v| scale * v).collect();
            acc(adj, *x, &dx);
        }
        Record::Activation { x, kind, out } => {
            let d = upstream!(out);
            let dx: Vec<Real> = match kind {
                Activation::Relu => d
                    .iter()
                    .zip(nodes[x.0].data())
                    .map(|(dv, &xv)| if xv > 0.0 { *dv } else { 0.0 })
                    .collect(),
                Activation::Sigmoid => d
                    .iter()
                    .zip(nodes[out.0].data())
                    .map(|(dv, &y)| dv * y * (1.0 - y))
                    .collect(),
                Activation::Tanh => d
                    .iter()
                    .zip(nodes[out.0].data())
                    .map(|(dv, &y)| dv * (1.0 - y * y))
                    .collect(),
            };
            acc(adj, *x, &dx);
        }
        Record::Softmax { x, axis, out } => {
            let d = upstream!(out);
            let shape = nodes[x.0].shape();
            let (outer, len, inner) = axis_split(shape, *axis);
            let y = nodes[out.0].data();
            let mut dx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * len + a) * inner + i;
                    let mut dotp = 0.0;
                    for a in 0..len {
                        dotp += d[at(a)] * y[at(a)];
                    }
                    for a in 0..len {
                        dx[at(a)] = y[at(a)] * (d[at(a)] - dotp);
                    }
                }
            }
            acc(adj, *x, &dx);
        }
        Record::Conv2d {
            x,
            kernel,
            stride,
            out,
        } => {
            let d = upstream!(out);
            let sx = nodes[x.0].shape();
            let sk = nodes[kernel.0].shape();
            let (ci, h, w) = (sx[0], sx[1], sx[2]);
            let (co, kh, kw) = (sk[0], sk[2], sk[3]);
            let so = nodes[out.0].shape();
            let (oh, ow) = (so[1], so[2]);
            let s = *stride;
            if active[x.0] {
                let kd = nodes[kernel.0].data();
                let mut dx = vec![0.0; ci * h * w];
                for c_out in 0..co {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let dv = d[c_out * oh * ow + oy * ow + ox];
                            for c_in in 0..ci {
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        dx[c_in * h * w + (oy * s + ky) * w + (ox * s + kx)] +=
                                            dv * kd[((c_out * ci + c_in) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                    }
                }
                acc(adj, *x, &dx);
            }
            if active[kernel.0] {
                let xd = nodes[x.0].data();
                let mut dk = vec![0.0; co * ci * kh * kw];
                for c_out in 0..co {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let dv = d[c_out * oh * ow + oy * ow + ox];
                            for c_in in 0..ci {
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        dk[((c_out * ci + c_in) * kh + ky) * kw + kx] +=
                                            dv * xd[c_in * h * w + (oy * s + ky) * w + (ox * s + kx)];
                                    }
                                }
                            }
                        }
                    }
                }
                acc(adj, *kernel, &dk);
            }
        }
        Record::Dropout { x, mask, out } => {
            let d = upstream!(out);
            let dx: Vec<Real> = d.iter().zip(mask).map(|(dv, m)| dv * m).collect();
            acc(adj, *x, &dx);
        }
        Record::Cosine { a, b, out } => {
            let d = upstream!(out)[0];
            let ad = nodes[a.0].data();
            let bd = nodes[b.0].data();
            let na = l2(ad);
            let nb = l2(bd);
            let s = dot(ad, bd) / (na * nb);
            if active[a.0] {
                let da: Vec<Real> = ad
                    .iter()
                    .zip(bd)
                    .map(|(&av, &bv)| d * (bv / (na * nb) - s * av / (na * na)))
                    .collect();
                acc(adj, *a, &da);
            }
            if active[b.0] {
                let db: Vec<Real> = ad
                    .iter()
                    .zip(bd)
                    .map(|(&av, &bv)| d * (av / (na * nb) - s * bv / (nb * nb)))
                    .collect();
                acc(adj, *b, &db);
            }
        }
        Record::Dot { a, b, out } => {
            let d = upstream!(out)[0];
            if active[a.0] {
                let da: Vec<Real> = nodes[b.0].data().iter().map(|v| d * v).collect();
                acc(adj, *a, &da);
            }
            if active[b.0] {
                let db: Vec<Real> = nodes[a.0].data().iter().map(|v| d * v).collect();
                acc(adj, *b, &db);
            }
        }
        Record::Sum { x, out } => {
            let d = upstream!(out)[0];
            let dx = vec![d; nodes[x.0].len()];
            acc(adj, *x, &dx);
        }
        Record::Ln { x, out } => {
            let d = upstream!(out);
            let dx: Vec<Real> = d
                .iter()
                .zip(nodes[x.0].data())
                .map(|(dv, xv)| dv / xv)
                .collect();
            acc(adj, *x, &dx);
        }
        Record::Stack { parts, out } => {
            let d = upstream!(out);
            for (i, &p) in parts.iter().enumerate() {
                acc(adj, p, &[d[i]]);
            }
        }
        Record::StackRows { rows, out } => {
            let d = upstream!(out);
            let width = nodes[out.0].shape()[1];
            for (i, &r) in rows.iter().enumerate() {
                acc(adj, r, &d[i * width..(i + 1) * width]);
            }
        }
        Record::Concat { a, b, out } => {
            let d = upstream!(out);
            let la = nodes[a.0].len();
            acc(adj, *a, &d[..la]);
            acc(adj, *b, &d[la..]);
        }
        Record::Row { x, index, out } => {
            let d = upstream!(out);
            let cols = nodes[out.0].len();
            let mut dx = vec![0.0; nodes[x.0].len()];
            dx[index * cols..(index + 1) * cols].copy_from_slice(&d);
            acc(adj, *x, &dx);
        }
        Record::GatherRows {
            table,
            indices,
            out,
        } => {
            if !active[table.0] {
                return;
            }
            let d = upstream!(out);
            let width = nodes[table.0].shape()[1];
            let mut dt = vec![0.0; nodes[table.0].len()];
            for (t, &i) in indices.iter().enumerate() {
                for j in 0..width {
                    dt[i * width + j] += d[t * width + j];
                }
            }
            acc(adj, *table, &dt);
        }
        Record::LogSumExp { x, out } => {
            let d = upstream!(out)[0];
            let lse = nodes[out.0].scalar_value();
            let dx: Vec<Real> = nodes[x.0]
                .data()
                .iter()
                .map(|&v| {
                    if v == Real::NEG_INFINITY {
                        0.0
                    } else {
                        d * (v - lse).exp()
                    }
                })
                .collect();
            acc(adj, *x, &dx);
        }
        Record::BceFromScores {
            scores,
            targets,
            out,
        } => {
            let d = upstream!(out)[0];
            let dp: Vec<Real> = nodes[scores.0]
                .data()
                .iter()
                .zip(targets)
                .map(|(&p, &t)| {
                    let mut g = 0.0;
                    if t > 0.0 {
                        g -= t / p;
                    }
                    if t < 1.0 {
                        g += (1.0 - t) / (1.0 - p);
                    }
                    d * g
                })
                .collect();
            acc(adj, *scores, &dp);
        }
        Record::BceWithLogits {
            logits,
            targets,
            out,
        } => {
            let d = upstream!(out)[0];
            let dz: Vec<Real> = nodes[logits.0]
                .data()
                .iter()
                .zip(targets)
                .map(|(&z, &t)| d * (sigmoid(z) - t))
                .collect();
            acc(adj, *logits, &dz);
        }
        Record::CenterCrop { x, top, left, out } => {
            let d = upstream!(out);
            let sx = nodes[x.0].shape();
            let (h, w) = (sx[1], sx[2]);
            let so = nodes[out.0].shape();
            let (c, th, tw) = (so[0], so[1], so[2]);
            let mut dx = vec![0.0; nodes[x.0].len()];
            for ch in 0..c {
                for y in 0..th {
                    for xx in 0..tw {
                        dx[ch * h * w + (top + y) * w + (left + xx)] =
                            d[ch * th * tw + y * tw + xx];
                    }
                }
            }
            acc(adj, *x, &dx);
        }
        Record::Reshape { x, out } => {
            let d = upstream!(out);
            acc(adj, *x, &d);
        }
    }
}

// ---- kernels -------------------------------------------------------------

pub(crate) fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn dot(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn l2(a: &[Real]) -> Real {
    dot(a, a).sqrt()
}

fn matmul_raw(a: &[Real], b: &[Real], m: usize, k: usize, n: usize, out: &mut [Real]) {
    for i in 0..m {
        for kk in 0..k {
            let aik = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
}

fn transpose_raw(x: &[Real], r: usize, c: usize, out: &mut [Real]) {
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
}

/// Splits a shape at `axis` into (outer, axis length, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn validate_targets(targets: &[Real]) -> Result<()> {
    if let Some(&bad) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Validation(format!(
            "target {bad} outside [0, 1]"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn t(shape: Vec<usize>, data: Vec<Real>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.data(out), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_row_times_column() {
        let mut tape = Tape::new();
        let a = tape.constant(t(vec![1, 2], vec![1.0, 2.0]));
        let b = tape.constant(t(vec![2, 1], vec![3.0, 4.0]));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(out), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        match tape.matmul(a, b).unwrap_err() {
            Error::Dimension { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![3], vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.data(y), &[0.0, 0.0, 2.0]);
        let z = tape.constant(t(vec![1], vec![0.0]));
        let s = tape.sigmoid(z);
        assert_eq!(tape.data(s), &[0.5]);
    }

    #[test]
    fn softmax_uniform_and_overflow_guard() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![3], vec![0.0, 0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.data(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = tape.constant(t(vec![2], vec![1000.0, 1000.0]));
        let yb = tape.softmax(big, 0).unwrap();
        assert_eq!(tape.data(yb), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_lie_on_simplex() {
        let mut rng = rng::seeded(3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::uniform(vec![4, 7], 5.0, &mut rng));
        let y = tape.softmax(x, 1).unwrap();
        let d = tape.data(y);
        for r in 0..4 {
            let row = &d[r * 7..(r + 1) * 7];
            assert!(row.iter().all(|&v| v >= 0.0));
            let s: Real = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn masked_softmax_gives_zero_mass_to_neg_inf() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![3], vec![0.0, Real::NEG_INFINITY, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.data(y);
        assert_eq!(d[1], 0.0);
        assert!((d[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cosine_basics() {
        let mut tape = Tape::new();
        let v = tape.constant(t(vec![3], vec![1.0, -2.0, 0.5]));
        let s = tape.cosine(v, v).unwrap();
        assert!((tape.scalar_value(s) - 1.0).abs() < 1e-12);

        let a = tape.constant(t(vec![2], vec![1.0, 0.0]));
        let b = tape.constant(t(vec![2], vec![0.0, 1.0]));
        let s = tape.cosine(a, b).unwrap();
        assert_eq!(tape.scalar_value(s), 0.0);

        let nv = tape.affine(v, -1.0, 0.0);
        let s = tape.cosine(v, nv).unwrap();
        assert!((tape.scalar_value(s) + 1.0).abs() < 1e-12);

        // symmetry
        let c = tape.constant(t(vec![2], vec![0.3, 0.7]));
        let d = tape.constant(t(vec![2], vec![-0.2, 1.1]));
        let s1 = tape.cosine(c, d).unwrap();
        let s2 = tape.cosine(d, c).unwrap();
        assert_eq!(tape.scalar_value(s1), tape.scalar_value(s2));
        assert!(tape.scalar_value(s1).abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn cosine_rejects_degenerate_vectors() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(vec![3]));
        let v = tape.constant(t(vec![3], vec![1.0, 0.0, 0.0]));
        assert!(matches!(
            tape.cosine(z, v).unwrap_err(),
            Error::Degenerate { .. }
        ));
    }

    #[test]
    fn conv2d_all_ones_kernel_sums_input() {
        let mut tape = Tape::new();
        let x = tape.constant(t(
            vec![1, 3, 3],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        ));
        let k = tape.constant(Tensor::filled(vec![1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, k, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1]);
        assert_eq!(tape.data(y), &[45.0]);
    }

    #[test]
    fn conv2d_stack_compresses_seven_to_one() {
        let mut rng = rng::seeded(4);
        let mut tape = Tape::new();
        let mut x = tape.constant(Tensor::uniform(vec![2, 7, 7], 1.0, &mut rng));
        let mut sizes = Vec::new();
        for _ in 0..3 {
            let k = tape.constant(Tensor::uniform(vec![2, 2, 3, 3], 0.5, &mut rng));
            x = tape.conv2d(x, k, 1).unwrap();
            sizes.push(tape.shape(x)[1]);
        }
        assert_eq!(sizes, vec![5, 3, 1]);
    }

    #[test]
    fn conv2d_kernel_larger_than_input_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2, 2]));
        let k = tape.constant(Tensor::zeros(vec![1, 1, 3, 3]));
        assert!(matches!(
            tape.conv2d(x, k, 1).unwrap_err(),
            Error::Dimension { .. }
        ));
    }

    #[test]
    fn dropout_zero_probability_and_eval_are_identity() {
        let mut rng = rng::seeded(5);
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![4], vec![1.0, 2.0, 3.0, 4.0]));
        let y = tape.dropout(x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(y, x);
        let z = tape.dropout(x, 0.9, Mode::Eval, &mut rng).unwrap();
        assert_eq!(z, x);
    }

    #[test]
    fn dropout_survivor_fraction_matches_probability() {
        let mut rng = rng::seeded(6);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(vec![100_000], 1.0));
        let y = tape.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
        let survivors = tape.data(y).iter().filter(|&&v| v != 0.0).count();
        let frac = survivors as Real / 100_000.0;
        assert!((frac - 0.5).abs() < 0.01, "survivor fraction {frac}");
        // survivors are scaled by 1/(1-p)
        assert!(tape
            .data(y)
            .iter()
            .all(|&v| v == 0.0 || (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(&t(vec![3], vec![1.0, -2.0, 5.0]));
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_scalar_product() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::scalar(3.0));
        let y = tape.param(&Tensor::scalar(5.0));
        let loss = tape.mul(x, y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[5.0]);
        assert_eq!(tape.grad(y).unwrap(), &[3.0]);
    }

    #[test]
    fn backward_accumulates_over_reuse() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::scalar(1.0));
        let a = tape.scale(x, 2.0);
        let b = tape.scale(x, 3.0);
        let s = tape.add(a, b).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[5.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.param(&t(vec![2], vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(x).unwrap_err(),
            Error::Contract(_)
        ));
    }

    #[test]
    fn gather_rows_accumulates_duplicate_indices() {
        let mut tape = Tape::new();
        let table = tape.param(&t(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let g = tape.gather_rows(table, &[1, 1]).unwrap();
        assert_eq!(tape.data(g), &[3.0, 4.0, 3.0, 4.0]);
        let loss = tape.sum(g);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(table).unwrap(), &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn gather_rows_rejects_out_of_range() {
        let mut tape = Tape::new();
        let table = tape.constant(Tensor::zeros(vec![3, 2]));
        assert!(matches!(
            tape.gather_rows(table, &[3]).unwrap_err(),
            Error::Vocab(_)
        ));
    }

    #[test]
    fn logsumexp_matches_naive() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![3], vec![0.1, -0.4, 0.9]));
        let y = tape.logsumexp(x).unwrap();
        let naive = (0.1f64.exp() + (-0.4f64).exp() + 0.9f64.exp()).ln();
        assert!((tape.scalar_value(y) - naive).abs() < 1e-14);
    }

    #[test]
    fn bce_closed_forms() {
        let mut tape = Tape::new();
        let p = tape.constant(t(vec![1], vec![0.5]));
        let target = t(vec![1], vec![1.0]);
        let l = tape.bce_from_scores(p, &target).unwrap();
        assert!((tape.scalar_value(l) - 2.0f64.ln()).abs() < 1e-12);

        let exact = tape.constant(t(vec![2], vec![1.0, 0.0]));
        let targets = t(vec![2], vec![1.0, 0.0]);
        let l = tape.bce_from_scores(exact, &targets).unwrap();
        assert_eq!(tape.scalar_value(l), 0.0);
    }

    #[test]
    fn bce_rejects_target_outside_unit_interval() {
        let mut tape = Tape::new();
        let p = tape.constant(t(vec![1], vec![0.5]));
        let target = t(vec![1], vec![1.5]);
        assert!(matches!(
            tape.bce_from_scores(p, &target).unwrap_err(),
            Error::Validation(_)
        ));
    }

    #[test]
    fn bce_with_logits_matches_score_form() {
        let mut tape = Tape::new();
        let z = tape.constant(t(vec![3], vec![0.3, -1.2, 2.0]));
        let p = tape.sigmoid(z);
        let targets = t(vec![3], vec![1.0, 0.25, 0.0]);
        let a = tape.bce_with_logits(z, &targets).unwrap();
        let b = tape.bce_from_scores(p, &targets).unwrap();
        assert!((tape.scalar_value(a) - tape.scalar_value(b)).abs() < 1e-12);
    }

    #[test]
    fn center_crop_takes_spatial_center() {
        let mut tape = Tape::new();
        let x = tape.constant(t(
            vec![1, 3, 3],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        ));
        let y = tape.center_crop(x, 1, 1).unwrap();
        assert_eq!(tape.data(y), &[5.0]);
    }

    #[test]
    fn constants_do_not_receive_gradients() {
        let mut tape = Tape::new();
        let c = tape.constant(t(vec![2], vec![1.0, 2.0]));
        let p = tape.param(&t(vec![2], vec![3.0, 4.0]));
        let m = tape.mul(c, p).unwrap();
        let loss = tape.sum(m);
        tape.backward(loss).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(p).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn unreached_param_gets_zero_grad() {
        let mut tape = Tape::new();
        let unused = tape.param(&t(vec![2], vec![1.0, 1.0]));
        let x = tape.param(&Tensor::scalar(2.0));
        let loss = tape.scale(x, 1.0);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(unused).unwrap(), &[0.0, 0.0]);
    }
}
