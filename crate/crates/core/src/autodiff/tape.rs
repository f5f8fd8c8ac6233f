//! Define-by-run reverse-mode tape.
//!
//! Every operation appends one node holding its output value and whatever it
//! needs for the backward pass. Node order is topological by construction, so
//! `backward` is a single reverse sweep over insertion order.
//!
//! Sequence tensors are channels-last: `[batch, len, channels]`. The
//! "per-channel" broadcast and every per-channel operation act on the last
//! axis.

use super::array::{DiffArray, Real};
use crate::error::{domain_err, shape_err, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    Exp,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding so that `out_len == ceil(len / stride)`; odd totals put the
    /// extra zero on the right.
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    None,
    Scalar,
    Channel,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    in_len: usize,
    in_ch: usize,
    out_len: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad_left: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.batch * self.out_len
    }

    fn patch(&self) -> usize {
        self.in_ch * self.kernel
    }

    /// Pointwise stride-1 convolutions read the input directly as the column
    /// matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad_left == 0 && self.in_len == self.out_len
    }
}

enum Op<T> {
    Leaf,
    Binary {
        op: BinaryOp,
        a: Var,
        b: Var,
        bcast: Broadcast,
    },
    Unary {
        op: UnaryOp,
        a: Var,
    },
    Scale {
        a: Var,
        factor: T,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        bias: Option<Var>,
    },
    Reduce {
        op: ReduceOp,
        a: Var,
        outer: usize,
        n: usize,
        inner: usize,
        argmax: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        widths: Vec<usize>,
    },
    Conv1d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    MaxPool1d {
        x: Var,
        window: usize,
        stride: usize,
        argmax: Vec<usize>,
    },
    Softmax {
        a: Var,
    },
    CrossEntropy {
        probs: Var,
        labels: Vec<usize>,
        active: Vec<bool>,
    },
}

struct Node<T> {
    value: DiffArray<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics from a train-mode batch-norm call, used by the layer to
/// update its running estimates.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Computation tape owning every recorded value and the accumulated leaf
/// gradients.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Drops every node and gradient.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    /// Resets accumulated gradients, keeping the recorded graph.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn leaf(&mut self, value: DiffArray<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: DiffArray<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: DiffArray<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &DiffArray<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_array(&self, v: Var) -> Option<DiffArray<T>> {
        self.grad(v).map(|g| {
            DiffArray::new(self.shape(v).to_vec(), g.to_vec()).expect("grad has value shape")
        })
    }

    fn push(&mut self, value: DiffArray<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ---- elementwise ------------------------------------------------------

    fn broadcast_kind(&self, a: Var, b: Var) -> Result<Broadcast> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            Ok(Broadcast::None)
        } else if self.value(b).numel() == 1 {
            Ok(Broadcast::Scalar)
        } else if sb.len() == 1 && sa.last() == Some(&sb[0]) {
            Ok(Broadcast::Channel)
        } else {
            Err(shape_err!("cannot broadcast {:?} against {:?}", sb, sa))
        }
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let bcast = self.broadcast_kind(a, b)?;
        let av = self.data(a);
        let bv = self.data(b);
        let nb = bv.len();
        let f = |x: T, y: T| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
        };
        let out: Vec<T> = match bcast {
            Broadcast::None => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Scalar => av.iter().map(|&x| f(x, bv[0])).collect(),
            Broadcast::Channel => av.iter().enumerate().map(|(i, &x)| f(x, bv[i % nb])).collect(),
        };
        let value = DiffArray::new(self.shape(a).to_vec(), out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Binary { op, a, b, bcast }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var> {
        let av = self.data(a);
        let out: Vec<T> = match op {
            UnaryOp::Relu => av.iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect(),
            UnaryOp::Exp => av.iter().map(|x| x.exp()).collect(),
            UnaryOp::Log => {
                if let Some(bad) = av.iter().find(|&&x| !(x > T::zero())) {
                    return Err(domain_err!("log of non-positive value {:?}", bad));
                }
                av.iter().map(|x| x.ln()).collect()
            }
        };
        let value = DiffArray::new(self.shape(a).to_vec(), out)?;
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Unary { op, a }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a)
    }

    /// Multiplication by a constant that takes no gradient.
    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.data(a).iter().map(|&x| x * factor).collect();
        let value = DiffArray::new(self.shape(a).to_vec(), out).expect("same shape");
        let rg = self.requires_grad(a);
        self.push(value, Op::Scale { a, factor }, rg)
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err!("matmul of {:?} and {:?}", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.data(a),
            k as isize,
            1,
            self.data(b),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let value = DiffArray::new(vec![m, n], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b }, rg))
    }

    /// `x · wᵀ + bias` for `x: [batch, in]`, `w: [out, in]`, `bias: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(shape_err!("linear input {:?} against weights {:?}", sx, sw));
        }
        let (batch, fan_in, fan_out) = (sx[0], sx[1], sw[0]);
        if let Some(b) = bias {
            if self.shape(b) != [fan_out] {
                return Err(shape_err!("bias {:?} for {} outputs", self.shape(b), fan_out));
            }
        }
        let mut out = vec![T::zero(); batch * fan_out];
        T::gemm(
            batch,
            fan_in,
            fan_out,
            T::one(),
            self.data(x),
            fan_in as isize,
            1,
            self.data(w),
            1,
            fan_in as isize,
            T::zero(),
            &mut out,
            fan_out as isize,
            1,
        );
        if let Some(b) = bias {
            let bv = self.data(b);
            for row in out.chunks_mut(fan_out) {
                row.iter_mut().zip(bv).for_each(|(o, &bb)| *o = *o + bb);
            }
        }
        let value = DiffArray::new(vec![batch, fan_out], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let rg = self.any_grad(&inputs);
        Ok(self.push(value, Op::Linear { x, w, bias }, rg))
    }

    // ---- reductions -------------------------------------------------------

    /// Reduces over `axis` (dropping it) or over everything (rank-0 result).
    /// Max routes its gradient to the lowest-index maximum.
    pub fn reduce(&mut self, op: ReduceOp, a: Var, axis: Option<usize>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (outer, n, inner, out_shape) = match axis {
            None => (1, shape.iter().product(), 1, Vec::new()),
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(shape_err!("axis {} out of range for {:?}", ax, shape));
                }
                let mut os = shape.clone();
                os.remove(ax);
                (
                    shape[..ax].iter().product(),
                    shape[ax],
                    shape[ax + 1..].iter().product(),
                    os,
                )
            }
        };
        if n == 0 {
            return Err(domain_err!("empty reduction over shape {:?}", shape));
        }
        let av = self.data(a);
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = Vec::new();
        if op == ReduceOp::Max {
            argmax = vec![0usize; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let slot = o * inner + i;
                match op {
                    ReduceOp::Sum | ReduceOp::Mean => {
                        let mut acc = T::zero();
                        for j in 0..n {
                            acc = acc + av[base + j * inner];
                        }
                        if op == ReduceOp::Mean {
                            acc = acc / T::from_f64(n as f64);
                        }
                        out[slot] = acc;
                    }
                    ReduceOp::Max => {
                        let mut best = base;
                        for j in 1..n {
                            let idx = base + j * inner;
                            if av[idx] > av[best] {
                                best = idx;
                            }
                        }
                        out[slot] = av[best];
                        argmax[slot] = best;
                    }
                }
            }
        }
        let value = DiffArray::new(out_shape, out)?;
        let rg = self.requires_grad(a);
        Ok(self.push(
            value,
            Op::Reduce {
                op,
                a,
                outer,
                n,
                inner,
                argmax,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(ReduceOp::Sum, a, None)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(ReduceOp::Mean, a, None)
    }

    /// Concatenation along the last axis; all leading dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("concat of zero arrays"))?;
        let lead = self.shape(*first);
        if lead.is_empty() {
            return Err(shape_err!("concat of rank-0 arrays"));
        }
        let lead = lead[..lead.len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(shape_err!("concat part {:?} does not match leading {:?}", s, lead));
            }
            widths.push(s[lead.len()]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = DiffArray::new(shape, out)?;
        let rg = self.any_grad(parts);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                widths,
            },
            rg,
        ))
    }

    // ---- sequence layers --------------------------------------------------

    /// 1-D cross-correlation. `x: [batch, len, in_ch]`, `w: [out_ch, in_ch,
    /// kernel]`, `bias: [out_ch]`; output `[batch, out_len, out_ch]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 {
            return Err(shape_err!("conv1d input {:?} / weights {:?} must be rank 3", sx, sw));
        }
        let (batch, in_len, in_ch) = (sx[0], sx[1], sx[2]);
        let (out_ch, w_in, kernel) = (sw[0], sw[1], sw[2]);
        if w_in != in_ch {
            return Err(shape_err!("conv1d expects {} input channels, got {}", w_in, in_ch));
        }
        if kernel == 0 || stride == 0 {
            return Err(shape_err!("conv1d kernel and stride must be positive"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [out_ch] {
                return Err(shape_err!("conv1d bias {:?} for {} channels", self.shape(b), out_ch));
            }
        }
        let (out_len, pad_left) = match padding {
            Padding::Valid => {
                if in_len < kernel {
                    return Err(shape_err!("valid conv1d: length {} < kernel {}", in_len, kernel));
                }
                ((in_len - kernel) / stride + 1, 0)
            }
            Padding::Same => {
                let out_len = in_len.div_ceil(stride);
                let need = (out_len.saturating_sub(1) * stride + kernel).saturating_sub(in_len);
                (out_len, need / 2)
            }
        };
        let geom = ConvGeom {
            batch,
            in_len,
            in_ch,
            out_len,
            out_ch,
            kernel,
            stride,
            pad_left,
        };
        let cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            im2col(self.data(x), &geom)
        };
        let a_mat: &[T] = if geom.is_pointwise() { self.data(x) } else { &cols };
        let (rows, patch) = (geom.rows(), geom.patch());
        let mut out = vec![T::zero(); rows * out_ch];
        T::gemm(
            rows,
            patch,
            out_ch,
            T::one(),
            a_mat,
            patch as isize,
            1,
            self.data(w),
            1,
            patch as isize,
            T::zero(),
            &mut out,
            out_ch as isize,
            1,
        );
        if let Some(b) = bias {
            let bv = self.data(b);
            for row in out.chunks_mut(out_ch) {
                row.iter_mut().zip(bv).for_each(|(o, &bb)| *o = *o + bb);
            }
        }
        let value = DiffArray::new(vec![batch, out_len, out_ch], out)?;
        let w_grad = self.requires_grad(w);
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let rg = self.any_grad(&inputs);
        Ok(self.push(
            value,
            Op::Conv1d {
                x,
                w,
                bias,
                geom,
                cols: if w_grad { cols } else { Vec::new() },
            },
            rg,
        ))
    }

    /// Per-channel normalization over every non-channel position.
    ///
    /// With `running = None` the batch statistics (population variance) are
    /// used and returned; with `running = Some((mean, var))` those fixed
    /// statistics are used instead.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        running: Option<(&[T], &[T])>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let shape = self.shape(x).to_vec();
        let ch = *shape.last().ok_or_else(|| shape_err!("batch_norm on rank-0 array"))?;
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            return Err(shape_err!("batch_norm affine parameters must have shape [{}]", ch));
        }
        let xv = self.data(x);
        let rows = xv.len().checked_div(ch).unwrap_or(0);
        let (mean, var, batch_stats) = match running {
            Some((m, v)) => {
                if m.len() != ch || v.len() != ch {
                    return Err(shape_err!("running statistics must have {} channels", ch));
                }
                (m.to_vec(), v.to_vec(), false)
            }
            None => {
                if rows < 2 {
                    return Err(domain_err!(
                        "train-mode batch norm needs at least 2 values per channel, got {}",
                        rows
                    ));
                }
                let mut sum = vec![0f64; ch];
                for row in xv.chunks(ch) {
                    sum.iter_mut().zip(row).for_each(|(s, v)| *s += v.as_f64());
                }
                let mean: Vec<f64> = sum.iter().map(|s| s / rows as f64).collect();
                let mut sq = vec![0f64; ch];
                for row in xv.chunks(ch) {
                    for c in 0..ch {
                        let d = row[c].as_f64() - mean[c];
                        sq[c] += d * d;
                    }
                }
                let var = sq.iter().map(|s| T::from_f64(s / rows as f64)).collect();
                (mean.into_iter().map(T::from_f64).collect(), var, true)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.data(gamma), self.data(beta));
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks(ch) {
            for c in 0..ch {
                let h = (row[c] - mean[c]) * inv_std[c];
                xhat.push(h);
                out.push(gv[c] * h + bv[c]);
            }
        }
        let value = DiffArray::new(shape, out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        );
        Ok((v, batch_stats.then_some(BatchStats { mean, var })))
    }

    /// Max over sliding time windows of `x: [batch, len, ch]`; trailing partial
    /// windows are dropped.
    pub fn maxpool1d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(shape_err!("maxpool1d expects [batch, len, ch], got {:?}", shape));
        }
        if window == 0 || stride == 0 {
            return Err(shape_err!("maxpool1d window and stride must be positive"));
        }
        let (batch, len, ch) = (shape[0], shape[1], shape[2]);
        if len < window {
            return Err(shape_err!("maxpool1d: length {} < window {}", len, window));
        }
        let out_len = (len - window) / stride + 1;
        let xv = self.data(x);
        let mut out = Vec::with_capacity(batch * out_len * ch);
        let mut argmax = Vec::with_capacity(batch * out_len * ch);
        for b in 0..batch {
            for t in 0..out_len {
                let start = (b * len + t * stride) * ch;
                for c in 0..ch {
                    let mut best = start + c;
                    for k in 1..window {
                        let idx = start + k * ch + c;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let value = DiffArray::new(vec![batch, out_len, ch], out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(
            value,
            Op::MaxPool1d {
                x,
                window,
                stride,
                argmax,
            },
            rg,
        ))
    }

    /// Softmax along the last axis with max-shift.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let k = *shape.last().ok_or_else(|| shape_err!("softmax on rank-0 array"))?;
        if k == 0 {
            return Err(shape_err!("softmax over empty axis"));
        }
        let mut out = Vec::with_capacity(self.value(a).numel());
        for row in self.data(a).chunks(k) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut total = T::zero();
            for &v in row {
                let e = (v - m).exp();
                total = total + e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e = *e / total);
        }
        let value = DiffArray::new(shape, out)?;
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Softmax { a }, rg))
    }

    /// Mean negative log-probability of the labelled class, with probabilities
    /// clamped to `[1e-7, 1 - 1e-7]`. `probs: [batch, classes]`.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(probs).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(shape_err!(
                "cross_entropy probs {:?} vs {} labels",
                shape,
                labels.len()
            ));
        }
        if shape[0] == 0 {
            return Err(domain_err!("cross_entropy over an empty batch"));
        }
        let k = shape[1];
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(domain_err!("label {} outside 0..{}", bad, k));
        }
        let eps = T::from_f64(crate::metrics::PROB_CLAMP);
        let hi = T::one() - eps;
        let pv = self.data(probs);
        let mut total = T::zero();
        let mut active = Vec::with_capacity(labels.len());
        for (row, &l) in pv.chunks(k).zip(labels) {
            let p = row[l];
            active.push(p > eps && p < hi);
            total = total - p.max(eps).min(hi).ln();
        }
        let loss = total / T::from_f64(labels.len() as f64);
        let rg = self.requires_grad(probs);
        Ok(self.push(
            DiffArray::scalar(loss),
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
                active,
            },
            rg,
        ))
    }

    /// Smallest distance from any recorded non-smooth point: ReLU inputs to 0
    /// and, for max reductions and max pooling, the gap between the winner
    /// and the runner-up of each window. Finite-difference checks are only
    /// meaningful when this exceeds the step size.
    pub fn kink_margin(&self) -> f64 {
        // Ties between exact zeros produced by a ReLU stay tied under small
        // perturbations as long as the ReLU itself is away from its kink.
        let relu_fed = |v: Var| {
            matches!(
                self.nodes[v.0].op,
                Op::Unary {
                    op: UnaryOp::Relu,
                    ..
                }
            )
        };
        let gap = |fed: bool, best: T, other: T| {
            if fed && best == T::zero() && other == T::zero() {
                f64::INFINITY
            } else {
                (best - other).as_f64()
            }
        };
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Unary {
                    op: UnaryOp::Relu,
                    a,
                } => {
                    for v in self.data(*a) {
                        margin = margin.min(v.as_f64().abs());
                    }
                }
                Op::Reduce {
                    op: ReduceOp::Max,
                    a,
                    outer,
                    n,
                    inner,
                    argmax,
                } => {
                    let av = self.data(*a);
                    let fed = relu_fed(*a);
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let best = argmax[o * inner + i];
                            for j in 0..*n {
                                let idx = o * n * inner + j * inner + i;
                                if idx != best {
                                    margin = margin.min(gap(fed, av[best], av[idx]));
                                }
                            }
                        }
                    }
                }
                Op::MaxPool1d {
                    x,
                    window,
                    stride,
                    argmax,
                } => {
                    let shape = self.shape(*x);
                    let (len, ch) = (shape[1], shape[2]);
                    let out_len = (len - window) / stride + 1;
                    let xv = self.data(*x);
                    let fed = relu_fed(*x);
                    for (s, &best) in argmax.iter().enumerate() {
                        let c = s % ch;
                        let t = (s / ch) % out_len;
                        let b = s / (ch * out_len);
                        for k in 0..*window {
                            let idx = (b * len + t * stride + k) * ch + c;
                            if idx != best {
                                margin = margin.min(gap(fed, xv[best], xv[idx]));
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    // ---- backward ---------------------------------------------------------

    /// Accumulates d(output)/d(leaf) into every gradient-requiring leaf.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).numel() != 1 {
            return Err(shape_err!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            ));
        }
        if !self.requires_grad(output) {
            return Ok(());
        }
        let mut local: Vec<Option<Vec<T>>> = (0..=output.0).map(|_| None).collect();
        local[output.0] = Some(vec![T::one()]);
        for i in (0..=output.0).rev() {
            let Some(g) = local[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &v)| *a = *a + v),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut local);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], local: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let numel = |v: Var| nodes[v.0].value.numel();
        let data = |v: Var| nodes[v.0].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Binary { op, a, b, bcast } => {
                let (a, b) = (*a, *b);
                let nb = numel(b);
                let idx = |k: usize| match bcast {
                    Broadcast::None => k,
                    Broadcast::Scalar => 0,
                    Broadcast::Channel => k % nb,
                };
                if wants(a) {
                    let ga = slot(local, a, numel(a));
                    match op {
                        BinaryOp::Add | BinaryOp::Sub => {
                            ga.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v)
                        }
                        BinaryOp::Mul => {
                            let bv = data(b);
                            for (k, d) in ga.iter_mut().enumerate() {
                                *d = *d + g[k] * bv[idx(k)];
                            }
                        }
                    }
                }
                if wants(b) {
                    let av = data(a);
                    let gb = slot(local, b, nb);
                    for k in 0..g.len() {
                        let contrib = match op {
                            BinaryOp::Add => g[k],
                            BinaryOp::Sub => -g[k],
                            BinaryOp::Mul => g[k] * av[k],
                        };
                        gb[idx(k)] = gb[idx(k)] + contrib;
                    }
                }
            }
            Op::Unary { op, a } => {
                let a = *a;
                if !wants(a) {
                    return;
                }
                let av = data(a);
                let out = nodes[i].value.data();
                let ga = slot(local, a, av.len());
                for k in 0..g.len() {
                    let d = match op {
                        UnaryOp::Relu => {
                            if av[k] > T::zero() {
                                g[k]
                            } else {
                                T::zero()
                            }
                        }
                        UnaryOp::Exp => g[k] * out[k],
                        UnaryOp::Log => g[k] / av[k],
                    };
                    ga[k] = ga[k] + d;
                }
            }
            Op::Scale { a, factor } => {
                let a = *a;
                if wants(a) {
                    let ga = slot(local, a, numel(a));
                    ga.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v * *factor);
                }
            }
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                if wants(a) {
                    // dA = G · Bᵀ
                    let bv = data(b);
                    let ga = slot(local, a, m * k);
                    T::gemm(
                        m, n, k, T::one(), g, n as isize, 1, bv, 1, n as isize, T::one(), ga,
                        k as isize, 1,
                    );
                }
                if wants(b) {
                    // dB = Aᵀ · G
                    let av = data(a);
                    let gb = slot(local, b, k * n);
                    T::gemm(
                        k, m, n, T::one(), av, 1, k as isize, g, n as isize, 1, T::one(), gb,
                        n as isize, 1,
                    );
                }
            }
            Op::Linear { x, w, bias } => {
                let (x, w) = (*x, *w);
                let (batch, fan_in) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                let fan_out = nodes[w.0].value.shape()[0];
                if wants(x) {
                    let wv = data(w);
                    let gx = slot(local, x, batch * fan_in);
                    T::gemm(
                        batch,
                        fan_out,
                        fan_in,
                        T::one(),
                        g,
                        fan_out as isize,
                        1,
                        wv,
                        fan_in as isize,
                        1,
                        T::one(),
                        gx,
                        fan_in as isize,
                        1,
                    );
                }
                if wants(w) {
                    let xv = data(x);
                    let gw = slot(local, w, fan_out * fan_in);
                    T::gemm(
                        fan_out,
                        batch,
                        fan_in,
                        T::one(),
                        g,
                        1,
                        fan_out as isize,
                        xv,
                        fan_in as isize,
                        1,
                        T::one(),
                        gw,
                        fan_in as isize,
                        1,
                    );
                }
                if let Some(b) = *bias {
                    if wants(b) {
                        column_sums_into(g, fan_out, slot(local, b, fan_out));
                    }
                }
            }
            Op::Reduce {
                op,
                a,
                outer,
                n,
                inner,
                argmax,
            } => {
                let a = *a;
                if !wants(a) {
                    return;
                }
                let ga = slot(local, a, outer * n * inner);
                match op {
                    ReduceOp::Sum | ReduceOp::Mean => {
                        let scale = if *op == ReduceOp::Mean {
                            T::one() / T::from_f64(*n as f64)
                        } else {
                            T::one()
                        };
                        for o in 0..*outer {
                            for j in 0..*n {
                                for ii in 0..*inner {
                                    let idx = o * n * inner + j * inner + ii;
                                    ga[idx] = ga[idx] + g[o * inner + ii] * scale;
                                }
                            }
                        }
                    }
                    ReduceOp::Max => {
                        for (s, &src) in argmax.iter().enumerate() {
                            ga[src] = ga[src] + g[s];
                        }
                    }
                }
            }
            Op::Concat { parts, widths } => {
                let total: usize = widths.iter().sum();
                let rows = g.len() / total.max(1);
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if wants(p) {
                        let gp = slot(local, p, rows * w);
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            gp[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &v)| *d = *d + v);
                        }
                    }
                    offset += w;
                }
            }
            Op::Conv1d {
                x,
                w,
                bias,
                geom,
                cols,
            } => {
                let (x, w) = (*x, *w);
                let (rows, patch, out_ch) = (geom.rows(), geom.patch(), geom.out_ch);
                if wants(w) {
                    let a_mat: &[T] = if geom.is_pointwise() { data(x) } else { cols };
                    let gw = slot(local, w, out_ch * patch);
                    // dW[o, p] = Σ_r G[r, o] · cols[r, p]
                    T::gemm(
                        out_ch,
                        rows,
                        patch,
                        T::one(),
                        g,
                        1,
                        out_ch as isize,
                        a_mat,
                        patch as isize,
                        1,
                        T::one(),
                        gw,
                        patch as isize,
                        1,
                    );
                }
                if let Some(b) = *bias {
                    if wants(b) {
                        column_sums_into(g, out_ch, slot(local, b, out_ch));
                    }
                }
                if wants(x) {
                    let wv = data(w);
                    let gx_len = numel(x);
                    if geom.is_pointwise() {
                        let gx = slot(local, x, gx_len);
                        T::gemm(
                            rows,
                            out_ch,
                            patch,
                            T::one(),
                            g,
                            out_ch as isize,
                            1,
                            wv,
                            patch as isize,
                            1,
                            T::one(),
                            gx,
                            patch as isize,
                            1,
                        );
                    } else {
                        let mut dcols = vec![T::zero(); rows * patch];
                        T::gemm(
                            rows,
                            out_ch,
                            patch,
                            T::one(),
                            g,
                            out_ch as isize,
                            1,
                            wv,
                            patch as isize,
                            1,
                            T::zero(),
                            &mut dcols,
                            patch as isize,
                            1,
                        );
                        col2im_add(&dcols, geom, slot(local, x, gx_len));
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let ch = inv_std.len();
                if ch == 0 {
                    return;
                }
                let rows = g.len() / ch;
                let mut sum_g = vec![T::zero(); ch];
                let mut sum_gx = vec![T::zero(); ch];
                for (grow, hrow) in g.chunks(ch).zip(xhat.chunks(ch)) {
                    for c in 0..ch {
                        sum_g[c] = sum_g[c] + grow[c];
                        sum_gx[c] = sum_gx[c] + grow[c] * hrow[c];
                    }
                }
                if wants(gamma) {
                    let gg = slot(local, gamma, ch);
                    gg.iter_mut().zip(&sum_gx).for_each(|(d, &v)| *d = *d + v);
                }
                if wants(beta) {
                    let gb = slot(local, beta, ch);
                    gb.iter_mut().zip(&sum_g).for_each(|(d, &v)| *d = *d + v);
                }
                if wants(x) {
                    let gv = data(gamma);
                    let gx = slot(local, x, g.len());
                    if *batch_stats {
                        let nf = T::from_f64(rows as f64);
                        let coef: Vec<T> = (0..ch).map(|c| gv[c] * inv_std[c] / nf).collect();
                        for (r, (grow, hrow)) in g.chunks(ch).zip(xhat.chunks(ch)).enumerate() {
                            for c in 0..ch {
                                let d = coef[c] * (nf * grow[c] - sum_g[c] - hrow[c] * sum_gx[c]);
                                gx[r * ch + c] = gx[r * ch + c] + d;
                            }
                        }
                    } else {
                        for (r, grow) in g.chunks(ch).enumerate() {
                            for c in 0..ch {
                                gx[r * ch + c] = gx[r * ch + c] + grow[c] * gv[c] * inv_std[c];
                            }
                        }
                    }
                }
            }
            Op::MaxPool1d { x, argmax, .. } => {
                let x = *x;
                if wants(x) {
                    let gx = slot(local, x, numel(x));
                    for (s, &src) in argmax.iter().enumerate() {
                        gx[src] = gx[src] + g[s];
                    }
                }
            }
            Op::Softmax { a } => {
                let a = *a;
                if !wants(a) {
                    return;
                }
                let y = nodes[i].value.data();
                let k = *nodes[i].value.shape().last().expect("rank >= 1");
                let ga = slot(local, a, y.len());
                for ((grow, yrow), drow) in g.chunks(k).zip(y.chunks(k)).zip(ga.chunks_mut(k)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&gg, &yy)| gg * yy).sum();
                    for j in 0..k {
                        drow[j] = drow[j] + yrow[j] * (grow[j] - dot);
                    }
                }
            }
            Op::CrossEntropy {
                probs,
                labels,
                active,
            } => {
                let probs = *probs;
                if !wants(probs) {
                    return;
                }
                let pv = data(probs);
                let k = nodes[probs.0].value.shape()[1];
                let scale = g[0] / T::from_f64(labels.len() as f64);
                let gp = slot(local, probs, pv.len());
                for (r, (&l, &on)) in labels.iter().zip(active).enumerate() {
                    if on {
                        let idx = r * k + l;
                        gp[idx] = gp[idx] - scale / pv[idx];
                    }
                }
            }
        }
    }
}

fn slot<T: Real>(local: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    local[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn column_sums_into<T: Real>(g: &[T], width: usize, out: &mut [T]) {
    for row in g.chunks(width) {
        out.iter_mut().zip(row).for_each(|(d, &v)| *d = *d + v);
    }
}

fn im2col<T: Real>(x: &[T], geom: &ConvGeom) -> Vec<T> {
    let ConvGeom {
        batch,
        in_len,
        in_ch,
        out_len,
        kernel,
        stride,
        pad_left,
        ..
    } = *geom;
    let patch = in_ch * kernel;
    let mut cols = vec![T::zero(); batch * out_len * patch];
    for b in 0..batch {
        for t in 0..out_len {
            let row = &mut cols[(b * out_len + t) * patch..(b * out_len + t + 1) * patch];
            for k in 0..kernel {
                let pos = (t * stride + k) as isize - pad_left as isize;
                if pos < 0 || pos as usize >= in_len {
                    continue;
                }
                let src = &x[(b * in_len + pos as usize) * in_ch..][..in_ch];
                for (c, &v) in src.iter().enumerate() {
                    row[c * kernel + k] = v;
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Real>(dcols: &[T], geom: &ConvGeom, dx: &mut [T]) {
    let ConvGeom {
        batch,
        in_len,
        in_ch,
        out_len,
        kernel,
        stride,
        pad_left,
        ..
    } = *geom;
    let patch = in_ch * kernel;
    for b in 0..batch {
        for t in 0..out_len {
            let row = &dcols[(b * out_len + t) * patch..(b * out_len + t + 1) * patch];
            for k in 0..kernel {
                let pos = (t * stride + k) as isize - pad_left as isize;
                if pos < 0 || pos as usize >= in_len {
                    continue;
                }
                let dst = &mut dx[(b * in_len + pos as usize) * in_ch..][..in_ch];
                for (c, d) in dst.iter_mut().enumerate() {
                    *d = *d + row[c * kernel + k];
                }
            }
        }
    }
}
