//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes are appended
//! in evaluation order, so the node list is already topologically sorted and
//! [`Tape::backward`] is a single reverse sweep. A node only carries a
//! gradient if one of its inputs does; [`Tape::stop_gradient`] produces a node
//! that never does, which is what makes its derivative exactly zero.

mod kernels;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use kernels::ConvGeom;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    /// `x` for `x ≥ 0`, `x / sqrt(1 + α x²)` below zero.
    Isrlu(f64),
    LeakyRelu(f64),
    Exp,
    Log,
    Abs,
    Square,
    Sqrt,
    Recip,
    Neg,
    Scale(f64),
    AddScalar(f64),
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Isrlu(_) => "isrlu",
            Unary::LeakyRelu(_) => "leaky_relu",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Abs => "abs",
            Unary::Square => "square",
            Unary::Sqrt => "sqrt",
            Unary::Recip => "recip",
            Unary::Neg => "neg",
            Unary::Scale(_) => "scale",
            Unary::AddScalar(_) => "add_scalar",
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Isrlu(alpha) => {
                if x >= 0.0 {
                    x
                } else {
                    x / (1.0 + alpha * x * x).sqrt()
                }
            }
            Unary::LeakyRelu(slope) => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Recip => 1.0 / x,
            Unary::Neg => -x,
            Unary::Scale(c) => c * x,
            Unary::AddScalar(c) => x + c,
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Isrlu(alpha) => {
                if x >= 0.0 {
                    1.0
                } else {
                    let s = 1.0 / (1.0 + alpha * x * x).sqrt();
                    s * s * s
                }
            }
            Unary::LeakyRelu(slope) => {
                if x >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
            Unary::Sqrt => 0.5 / y,
            Unary::Recip => -y * y,
            Unary::Neg => -1.0,
            Unary::Scale(c) => c,
            Unary::AddScalar(_) => 1.0,
        }
    }

    fn check_domain(self, x: f64) -> Result<()> {
        match self {
            Unary::Log if x <= 0.0 => Err(Error::domain("log", format!("argument {x} ≤ 0"))),
            Unary::Sqrt if x < 0.0 => Err(Error::domain("sqrt", format!("argument {x} < 0"))),
            Unary::Recip if x == 0.0 => Err(Error::domain("recip", "division by zero")),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    StopGradient,
    Unary(Var, Unary),
    Binary(Var, Var, Binary),
    MatMul(Var, Var),
    Reduce {
        input: Var,
        map: Vec<usize>,
        kind: Reduction,
        count: usize,
    },
    Broadcast {
        input: Var,
        map: Option<Vec<usize>>,
    },
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    SoftmaxXent {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
        normalizer: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    is_param: bool,
}

/// Gradients of a scalar loss with respect to every parameter on a tape.
#[derive(Clone, Debug, Default)]
pub struct GradientMap {
    grads: BTreeMap<Var, Tensor>,
}

impl GradientMap {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.grads.iter().map(|(v, t)| (*v, t))
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out_shape`, the flat index of the element of
/// `in_shape` it reads under right-aligned broadcasting.
fn broadcast_map(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..in_shape.len()).rev() {
        if in_shape[i] != 1 {
            strides[i + offset] = s;
        }
        s *= in_shape[i];
    }
    let total: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..total {
        map.push(cur);
        for d in (0..rank).rev() {
            idx[d] += 1;
            cur += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            cur -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

fn finite(op: &'static str, t: Tensor) -> Result<Tensor> {
    if t.all_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite { op })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            is_param: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf; [`Tape::backward`] reports its gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].is_param = true;
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Identity in the forward pass, zero derivative in the reverse pass.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGradient, false)
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Result<Var> {
        let input = self.value(x);
        for &v in input.data() {
            f.check_domain(v)?;
        }
        let out = finite(f.name(), input.map(|v| f.apply(v)))?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::Unary(x, f), rg))
    }

    pub fn isrlu(&mut self, x: Var, alpha: f64) -> Result<Var> {
        self.unary(x, Unary::Isrlu(alpha))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(x, Unary::LeakyRelu(slope))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Abs)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Square)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sqrt)
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Recip)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Unary::Scale(c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Unary::AddScalar(c))
    }

    /// Elementwise binary op with right-aligned broadcasting.
    pub fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| {
            Error::dim(
                name,
                format!("cannot broadcast {:?} with {:?}", ta.shape(), tb.shape()),
            )
        })?;
        if kind == Binary::Div && tb.data().contains(&0.0) {
            return Err(Error::domain("div", "division by zero"));
        }
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let data: Vec<f64> = if ta.shape() == tb.shape() {
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect()
        } else {
            let ma = broadcast_map(&shape, ta.shape());
            let mb = broadcast_map(&shape, tb.shape());
            ma.iter()
                .zip(&mb)
                .map(|(&i, &j)| f(ta.data()[i], tb.data()[j]))
                .collect()
        };
        let out = finite(name, Tensor::new(shape, data)?)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(out, Op::Binary(a, b, kind), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::dim(
                "matmul",
                format!("{:?} · {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = kernels::matmul(ta.data(), tb.data(), m, k, n);
        let out = finite("matmul", Tensor::new(vec![m, n], out)?)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Sum or mean over `axes`; reduced axes are removed from the shape.
    /// An empty axis set is the identity.
    pub fn reduce(&mut self, x: Var, kind: Reduction, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if let Some(&bad) = axes.iter().find(|&&a| a >= shape.len()) {
            return Err(Error::dim(
                "reduce",
                format!("axis {bad} for shape {shape:?}"),
            ));
        }
        let keep: Vec<bool> = (0..shape.len()).map(|d| !axes.contains(&d)).collect();
        let out_shape: Vec<usize> = shape
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(&s, _)| s)
            .collect();
        let kept: Vec<usize> = shape
            .iter()
            .zip(&keep)
            .map(|(&s, &k)| if k { s } else { 1 })
            .collect();
        // every input element's position in the (keep-dims) output
        let map = broadcast_map(&shape, &kept);
        let count: usize = axes
            .iter()
            .enumerate()
            .filter(|(i, a)| !axes[..*i].contains(a))
            .map(|(_, &a)| shape[a])
            .product();
        let n_out: usize = out_shape.iter().product();
        let mut data = vec![0.0; n_out];
        for (&o, &v) in map.iter().zip(self.value(x).data()) {
            data[o] += v;
        }
        if kind == Reduction::Mean {
            for v in &mut data {
                *v /= count as f64;
            }
        }
        let out = finite("reduce", Tensor::new(out_shape, data)?)?;
        let rg = self.requires_grad(x);
        Ok(self.push(
            out,
            Op::Reduce {
                input: x,
                map,
                kind,
                count,
            },
            rg,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(x, Reduction::Sum, &axes)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(x, Reduction::Mean, &axes)
    }

    /// Expands `x` to `shape` under right-aligned broadcasting. The reverse
    /// pass sums over the expanded positions.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(x);
        match broadcast_shape(src.shape(), shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(Error::dim(
                    "broadcast_to",
                    format!("{:?} → {shape:?}", src.shape()),
                ))
            }
        }
        let (data, map) = if src.shape() == shape {
            (src.data().to_vec(), None)
        } else {
            let map = broadcast_map(shape, src.shape());
            (map.iter().map(|&i| src.data()[i]).collect(), Some(map))
        };
        let out = Tensor::new(shape.to_vec(), data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::Broadcast { input: x, map }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Same-padded, stride-1 cross-correlation of `[N, C, H, W]` with an
    /// `[O, C, kh, kw]` kernel (odd kh, kw). Bias is left to the caller.
    pub fn conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(kernel));
        if tx.rank() != 4 || tk.rank() != 4 || tx.shape()[1] != tk.shape()[1] {
            return Err(Error::dim(
                "conv2d",
                format!("input {:?} with kernel {:?}", tx.shape(), tk.shape()),
            ));
        }
        let (n, c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (o, kh, kw) = (tk.shape()[0], tk.shape()[2], tk.shape()[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {kh}×{kw} must be odd-sized"),
            ));
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
        };
        let data = kernels::conv2d_forward(tx.data(), tk.data(), n, o, geom);
        let out = finite("conv2d", Tensor::new(vec![n, o, h, w], data)?)?;
        let rg = self.requires_grad(x) || self.requires_grad(kernel);
        Ok(self.push(out, Op::Conv2d { input: x, kernel }, rg))
    }

    /// 2×2 max pooling with stride 2 over `[N, C, H, W]`. Odd spatial sizes
    /// drop the last row/column. Ties route the gradient to the first
    /// row-major maximum.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 4 || tx.shape()[2] < 2 || tx.shape()[3] < 2 {
            return Err(Error::dim("maxpool2d", format!("input {:?}", tx.shape())));
        }
        let (n, c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (data, argmax) = kernels::maxpool2x2(tx.data(), n * c, h, w);
        let out = Tensor::new(vec![n, c, h / 2, w / 2], data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::MaxPool2d { input: x, argmax }, rg))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let n = self.shape(logits).first().copied().unwrap_or(0);
        self.softmax_cross_entropy_normalized(logits, labels, n as f64)
    }

    /// Sum over rows of `-log softmax(logits)[label]`, divided by
    /// `normalizer`. With `normalizer` fixed to a full batch size, summing
    /// this over single-row slices reproduces the full-batch gradient.
    pub fn softmax_cross_entropy_normalized(
        &mut self,
        logits: Var,
        labels: &[usize],
        normalizer: f64,
    ) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != labels.len() {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("logits {:?} with {} labels", t.shape(), labels.len()),
            ));
        }
        let (n, c) = (t.shape()[0], t.shape()[1]);
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let mut probs = Vec::with_capacity(n * c);
        let mut total = 0.0;
        for (row, &label) in t.data().chunks(c).zip(labels) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for &v in row {
                s += (v - m).exp();
            }
            total += s.ln() - (row[label] - m);
            probs.extend(row.iter().map(|&v| (v - m).exp() / s));
        }
        let out = finite("softmax_cross_entropy", Tensor::scalar(total / normalizer))?;
        let rg = self.requires_grad(logits);
        Ok(self.push(
            out,
            Op::SoftmaxXent {
                logits,
                probs,
                labels: labels.to_vec(),
                normalizer,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Every parameter on the tape gets
    /// an entry; parameters the loss does not depend on get exact zeros.
    pub fn backward(&self, loss: Var) -> Result<GradientMap> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        let ls = self.value(loss).shape().to_vec();
        grads[loss.0] = Some(Tensor::full(&ls, 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, g, &mut grads);
        }

        let mut map = GradientMap::default();
        for (id, node) in self.nodes.iter().enumerate() {
            if node.is_param {
                let g = grads
                    .get_mut(id)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                map.grads.insert(Var(id), g);
            }
        }
        Ok(map)
    }

    fn propagate(&self, node: &Node, g: Tensor, grads: &mut [Option<Tensor>]) {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Unary(x, f) => {
                let xs = self.value(*x).data();
                let ys = node.value.data();
                let data = g
                    .data()
                    .iter()
                    .zip(xs.iter().zip(ys))
                    .map(|(&gv, (&xv, &yv))| gv * f.derivative(xv, yv))
                    .collect();
                let shape = g.shape().to_vec();
                accumulate(&mut grads[x.0], Tensor::new(shape, data).expect("shape"));
            }
            Op::Binary(a, b, kind) => self.propagate_binary(*a, *b, *kind, &g, grads),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(*a) {
                    let da = kernels::matmul_grad_lhs(g.data(), tb.data(), m, k, n);
                    accumulate(&mut grads[a.0], Tensor::new(vec![m, k], da).expect("shape"));
                }
                if wants(*b) {
                    let db = kernels::matmul_grad_rhs(ta.data(), g.data(), m, k, n);
                    accumulate(&mut grads[b.0], Tensor::new(vec![k, n], db).expect("shape"));
                }
            }
            Op::Reduce {
                input,
                map,
                kind,
                count,
            } => {
                let scale = match kind {
                    Reduction::Sum => None,
                    Reduction::Mean => Some(*count as f64),
                };
                let data = map
                    .iter()
                    .map(|&o| match scale {
                        Some(c) => g.data()[o] / c,
                        None => g.data()[o],
                    })
                    .collect();
                let shape = self.shape(*input).to_vec();
                accumulate(
                    &mut grads[input.0],
                    Tensor::new(shape, data).expect("shape"),
                );
            }
            Op::Broadcast { input, map } => {
                let shape = self.shape(*input).to_vec();
                let gi = match map {
                    None => g,
                    Some(map) => {
                        let mut data = vec![0.0; shape.iter().product()];
                        for (&i, &gv) in map.iter().zip(g.data()) {
                            data[i] += gv;
                        }
                        Tensor::new(shape, data).expect("shape")
                    }
                };
                accumulate(&mut grads[input.0], gi);
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                accumulate(&mut grads[x.0], g.reshape(shape).expect("shape"));
            }
            Op::Conv2d { input, kernel } => {
                let (tx, tk) = (self.value(*input), self.value(*kernel));
                let s = tx.shape();
                let geom = ConvGeom {
                    channels: s[1],
                    height: s[2],
                    width: s[3],
                    kh: tk.shape()[2],
                    kw: tk.shape()[3],
                };
                let (dx, dk) = kernels::conv2d_backward(
                    tx.data(),
                    tk.data(),
                    g.data(),
                    s[0],
                    tk.shape()[0],
                    geom,
                    wants(*input),
                    wants(*kernel),
                );
                if let Some(dx) = dx {
                    accumulate(
                        &mut grads[input.0],
                        Tensor::new(s.to_vec(), dx).expect("shape"),
                    );
                }
                if let Some(dk) = dk {
                    let ks = tk.shape().to_vec();
                    accumulate(&mut grads[kernel.0], Tensor::new(ks, dk).expect("shape"));
                }
            }
            Op::MaxPool2d { input, argmax } => {
                let shape = self.shape(*input).to_vec();
                let mut data = vec![0.0; shape.iter().product()];
                for (&i, &gv) in argmax.iter().zip(g.data()) {
                    data[i] += gv;
                }
                accumulate(
                    &mut grads[input.0],
                    Tensor::new(shape, data).expect("shape"),
                );
            }
            Op::SoftmaxXent {
                logits,
                probs,
                labels,
                normalizer,
            } => {
                let scale = g.item() / normalizer;
                let shape = self.shape(*logits).to_vec();
                let c = shape[1];
                let mut data = Vec::with_capacity(probs.len());
                for (row, &label) in probs.chunks(c).zip(labels) {
                    for (j, &p) in row.iter().enumerate() {
                        let y = if j == label { 1.0 } else { 0.0 };
                        data.push((p - y) * scale);
                    }
                }
                accumulate(
                    &mut grads[logits.0],
                    Tensor::new(shape, data).expect("shape"),
                );
            }
        }
    }

    fn propagate_binary(
        &self,
        a: Var,
        b: Var,
        kind: Binary,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = g.shape();
        let same = ta.shape() == tb.shape();
        let ma = (!same).then(|| broadcast_map(out_shape, ta.shape()));
        let mb = (!same).then(|| broadcast_map(out_shape, tb.shape()));
        let ia = |o: usize| ma.as_ref().map_or(o, |m| m[o]);
        let ib = |o: usize| mb.as_ref().map_or(o, |m| m[o]);

        // d out / d a and d out / d b at output position o
        let partials = |o: usize| -> (f64, f64) {
            let (x, y) = (ta.data()[ia(o)], tb.data()[ib(o)]);
            match kind {
                Binary::Add => (1.0, 1.0),
                Binary::Sub => (1.0, -1.0),
                Binary::Mul => (y, x),
                Binary::Div => (1.0 / y, -x / (y * y)),
            }
        };

        for (target, tensor, is_a) in [(a, ta, true), (b, tb, false)] {
            if !self.nodes[target.0].requires_grad {
                continue;
            }
            let mut data = vec![0.0; tensor.len()];
            for (o, &gv) in g.data().iter().enumerate() {
                let (pa, pb) = partials(o);
                if is_a {
                    data[ia(o)] += gv * pa;
                } else {
                    data[ib(o)] += gv * pb;
                }
            }
            let t = Tensor::new(tensor.shape().to_vec(), data).expect("shape");
            accumulate(&mut grads[target.0], t);
        }
    }
}
