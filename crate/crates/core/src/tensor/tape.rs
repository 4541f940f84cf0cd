//! Define-by-run reverse-mode tape.
//!
//! Every operation appends a node holding its forward value and enough
//! bookkeeping to run its backward rule. [`Tape::backward`] walks the nodes
//! in reverse creation order, which is a valid topological order because a
//! node can only reference nodes created before it.

use std::collections::HashMap;
use std::fmt;

use super::array::{gemm_acc, transpose_into, Tensor};
use super::params::ParameterStore;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. The wrapped index is the node's identity
/// on the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Operation tags, used for diagnostics and for fault injection in the
/// verification suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    AddRow,
    MulCol,
    Relu,
    Sigmoid,
    Sum,
    MaxAxis,
    MeanAxis,
    Concat,
    Reshape,
    GatherRows,
    Tile,
    NeighborMax,
    SoftmaxCrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 20] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::AddRow,
        OpKind::MulCol,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Sum,
        OpKind::MaxAxis,
        OpKind::MeanAxis,
        OpKind::Concat,
        OpKind::Reshape,
        OpKind::GatherRows,
        OpKind::Tile,
        OpKind::NeighborMax,
        OpKind::SoftmaxCrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::AddRow => "add_row",
            OpKind::MulCol => "mul_col",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Sum => "sum",
            OpKind::MaxAxis => "max_over_axis",
            OpKind::MeanAxis => "mean_over_axis",
            OpKind::Concat => "concat",
            OpKind::Reshape => "reshape",
            OpKind::GatherRows => "gather_rows",
            OpKind::Tile => "tile",
            OpKind::NeighborMax => "neighbor_max",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.iter().copied().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    MaxAxis { x: Var, argmax: Vec<usize> },
    MeanAxis { x: Var, outer: usize, len: usize, inner: usize },
    Concat { parts: Vec<Var>, outer: usize, chunks: Vec<usize> },
    Reshape(Var),
    GatherRows { x: Var, rows: Vec<usize> },
    Tile(Var),
    NeighborMax { a: Var, b: Var, src: Vec<u32> },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::AddRow(..) => OpKind::AddRow,
            Op::MulCol(..) => OpKind::MulCol,
            Op::Relu(..) => OpKind::Relu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Sum(..) => OpKind::Sum,
            Op::MaxAxis { .. } => OpKind::MaxAxis,
            Op::MeanAxis { .. } => OpKind::MeanAxis,
            Op::Concat { .. } => OpKind::Concat,
            Op::Reshape(..) => OpKind::Reshape,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::Tile(..) => OpKind::Tile,
            Op::NeighborMax { .. } => OpKind::NeighborMax,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Leaf gradients produced by one [`Tape::backward`] call, indexed by
/// [`Var`]. Intermediate nodes and leaves without `requires_grad` have no
/// entry.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Gradient tape for one forward/backward pass. Not shared across threads.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(Var, String)>,
    param_index: HashMap<String, Var>,
    sign_flip: Option<OpKind>,
}

/// Shape split `(outer, len, inner)` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid(x: f64) -> f64 {
    // Clamped so the result stays strictly inside (0, 1) even where the
    // exact value rounds to an endpoint.
    const HI: f64 = 1.0 - f64::EPSILON / 2.0;
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, HI)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Negates the backward rule of every node of `kind`. Only used to prove
    /// that gradient checks catch broken rules.
    #[doc(hidden)]
    pub fn inject_sign_flip(&mut self, kind: OpKind) {
        self.sign_flip = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient; used for gradient checks on inputs.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter onto the tape. A frozen parameter enters as a
    /// constant. Repeated calls with the same path return the same node.
    pub fn param(&mut self, store: &ParameterStore, path: &str, trainable: bool) -> Result<Var> {
        if let Some(&v) = self.param_index.get(path) {
            return Ok(v);
        }
        let value = store
            .value(path)
            .ok_or_else(|| Error::Usage(format!("unknown parameter `{path}`")))?
            .clone();
        let v = self.push(value, Op::Leaf, trainable);
        if trainable {
            self.params.push((v, path.to_string()));
        }
        self.param_index.insert(path.to_string(), v);
        Ok(v)
    }

    /// Makes later [`Tape::param`] calls for `path` return `v`. Lets gradient
    /// checks treat parameters as ordinary inputs.
    pub fn alias_param(&mut self, path: &str, v: Var) {
        self.param_index.insert(path.to_string(), v);
    }

    /// Trainable parameter leaves created on this tape, in creation order.
    pub fn param_vars(&self) -> &[(Var, String)] {
        &self.params
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

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k, k2, n) = match (sa.as_slice(), sb.as_slice()) {
            (&[m, k], &[k2, n]) => (m, k, k2, n),
            _ => return Err(Error::dim("matmul", format!("{:?} · {:?}: both must be rank-2", sa, sb))),
        };
        if k != k2 {
            return Err(Error::dim("matmul", format!("inner dimensions differ: {:?} · {:?}", sa, sb)));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = if ta.shape() == tb.shape() {
            let d = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), d)?
        } else if tb.numel() == 1 {
            let y = tb.item();
            Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x, y)).collect())?
        } else if ta.numel() == 1 {
            let x = ta.item();
            Tensor::new(tb.shape().to_vec(), tb.data().iter().map(|&y| f(x, y)).collect())?
        } else {
            return Err(Error::dim(name, format!("shapes {:?} and {:?} differ", ta.shape(), tb.shape())));
        };
        Ok((out, self.rg(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect()).unwrap();
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v + c).collect()).unwrap();
        let rg = self.rg(&[x]);
        self.push(out, Op::AddScalar(x), rg)
    }

    /// `x[m×n] + b[n]`, broadcasting `b` over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2().map_err(|_| {
            Error::dim("add_row", format!("x must be rank-2, got {:?}", self.shape(x)))
        })?;
        if self.value(b).numel() != n || self.value(b).rank() > 2 {
            return Err(Error::dim(
                "add_row",
                format!("bias {:?} does not match {} columns", self.shape(b), n),
            ));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(n.max(1)).take(m) {
            for (o, bb) in row.iter_mut().zip(bias) {
                *o += bb;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::AddRow(x, b), rg))
    }

    /// `x[m×n] * s[m]`, scaling row `i` by `s[i]`.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2().map_err(|_| {
            Error::dim("mul_col", format!("x must be rank-2, got {:?}", self.shape(x)))
        })?;
        if self.value(s).numel() != m {
            return Err(Error::dim(
                "mul_col",
                format!("scale {:?} does not match {} rows", self.shape(s), m),
            ));
        }
        let sv = self.value(s).data();
        let xv = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = xv[i * n + j] * sv[i];
            }
        }
        let rg = self.rg(&[x, s]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MulCol(x, s), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect())
            .unwrap();
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| sigmoid(v)).collect()).unwrap();
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Maximum along `axis`, which is removed from the shape. The backward
    /// pass routes each output's gradient to a single input element: the
    /// first maximum along the axis.
    pub fn max_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("max_over_axis", format!("axis {} out of range for {:?}", axis, shape)));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        if len == 0 {
            return Err(Error::dim("max_over_axis", format!("axis {} of {:?} is empty", axis, shape)));
        }
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * len * inner + i;
                for l in 1..len {
                    let idx = (o * len + l) * inner + i;
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
        let mut oshape = shape.clone();
        oshape.remove(axis);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(oshape, out)?, Op::MaxAxis { x, argmax }, rg))
    }

    /// Arithmetic mean along `axis`, which is removed from the shape.
    ///
    /// Computed as `x₀ + Σ(xₗ − x₀)/len`, so a slice of identical values
    /// returns that value exactly.
    pub fn mean_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("mean_over_axis", format!("axis {} out of range for {:?}", axis, shape)));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        if len == 0 {
            return Err(Error::dim("mean_over_axis", format!("axis {} of {:?} is empty", axis, shape)));
        }
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let first = data[o * len * inner + i];
                let mut acc = 0.0;
                for l in 0..len {
                    acc += data[(o * len + l) * inner + i] - first;
                }
                out.push(first + acc / len as f64);
            }
        }
        let mut oshape = shape.clone();
        oshape.remove(axis);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(oshape, out)?, Op::MeanAxis { x, outer, len, inner }, rg))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat", "no parts"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {} out of range for {:?}", axis, base)));
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", format!("{:?} does not match {:?} off axis {}", s, base, axis)));
            }
            axis_total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let chunks: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis] * inner).collect();
        let mut out = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for (&p, &c) in parts.iter().zip(&chunks) {
                out.extend_from_slice(&self.value(p).data()[o * c..(o + 1) * c]);
            }
        }
        let mut oshape = base;
        oshape[axis] = axis_total;
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(oshape, out)?, Op::Concat { parts: parts.to_vec(), outer, chunks }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Selects rows (first-axis slices) by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.first().ok_or_else(|| Error::dim("gather_rows", "rank-0 input"))?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::dim("gather_rows", format!("row {} out of range for {:?}", bad, shape)));
        }
        let width: usize = shape[1..].iter().product();
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            out.extend_from_slice(&data[r * width..(r + 1) * width]);
        }
        let mut oshape = shape;
        oshape[0] = rows.len();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(oshape, out)?, Op::GatherRows { x, rows: rows.to_vec() }, rg))
    }

    /// Repeats a vector (`[n]` or `[1×n]`) as `times` rows.
    pub fn tile_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let t = self.value(x);
        let n = match t.shape() {
            &[n] | &[1, n] => n,
            s => return Err(Error::dim("tile", format!("expected a vector, got {:?}", s))),
        };
        let mut out = Vec::with_capacity(times * n);
        for _ in 0..times {
            out.extend_from_slice(t.data());
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![times, n], out)?, Op::Tile(x), rg))
    }

    /// `out[i,h] = max_j (a[i,h] + b[nbrs[i·k + j], h])` for `a: N×H`,
    /// `b: M×H` and a row-major `N×k` neighbour table. Ties go to the lowest
    /// neighbour slot `j`.
    pub fn neighbor_max(&mut self, a: Var, b: Var, nbrs: &[usize], k: usize) -> Result<Var> {
        let (n, h) = self.value(a).dims2()?;
        let (m, hb) = self.value(b).dims2()?;
        if h != hb {
            return Err(Error::dim("neighbor_max", format!("feature widths {} and {} differ", h, hb)));
        }
        if k == 0 || nbrs.len() != n * k {
            return Err(Error::dim("neighbor_max", format!("table of {} entries is not {}×{}", nbrs.len(), n, k)));
        }
        if let Some(&bad) = nbrs.iter().find(|&&j| j >= m) {
            return Err(Error::dim("neighbor_max", format!("neighbour {} out of range for {} rows", bad, m)));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; n * h];
        let mut src = vec![0u32; n * h];
        for i in 0..n {
            let arow = &av[i * h..(i + 1) * h];
            let orow = &mut out[i * h..(i + 1) * h];
            let srow = &mut src[i * h..(i + 1) * h];
            let row_nbrs = &nbrs[i * k..(i + 1) * k];
            let j0 = row_nbrs[0];
            let b0 = &bv[j0 * h..(j0 + 1) * h];
            for c in 0..h {
                orow[c] = arow[c] + b0[c];
                srow[c] = j0 as u32;
            }
            for &j in &row_nbrs[1..] {
                let brow = &bv[j * h..(j + 1) * h];
                let ju = j as u32;
                for c in 0..h {
                    let v = arow[c] + brow[c];
                    let better = v > orow[c];
                    orow[c] = if better { v } else { orow[c] };
                    srow[c] = if better { ju } else { srow[c] };
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![n, h], out)?, Op::NeighborMax { a, b, src }, rg))
    }

    /// Mean negative log-softmax probability of the true class.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.value(logits).dims2()?;
        if labels.len() != b {
            return Err(Error::dim("softmax_cross_entropy", format!("{} labels for {} rows", labels.len(), b)));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Input(format!("label {} out of range for {} classes", bad, c)));
        }
        if b == 0 {
            return Err(Error::dim("softmax_cross_entropy", "empty batch"));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for r in 0..b {
            let row = &z[r * c..(r + 1) * c];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (p, &v) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (v - mx).exp();
                denom += *p;
            }
            for p in &mut probs[r * c..(r + 1) * c] {
                *p /= denom;
            }
            loss += denom.ln() - (row[labels[r]] - mx);
        }
        loss /= b as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Usage(format!("backward needs a scalar loss, got shape {:?}", lt.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(mut g) = grads[idx].take() else { continue };
            if self.sign_flip == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v = -*v);
            }
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).unwrap()))
            .collect();
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2().unwrap();
                let n = tb.shape()[1];
                if let Some(ga) = self.slot(grads, *a) {
                    let mut bt = vec![0.0; k * n];
                    transpose_into(k, n, tb.data(), &mut bt);
                    gemm_acc(m, n, k, g, &bt, ga);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let mut at = vec![0.0; m * k];
                    transpose_into(m, k, ta.data(), &mut at);
                    gemm_acc(k, m, n, &at, g, gb);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.accumulate_broadcast(grads, *a, g, |_| 1.0);
                self.accumulate_broadcast(grads, *b, g, |_| sign);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).clone(), self.value(*b).clone());
                let other = |t: &Tensor, i: usize| if t.numel() == 1 { t.item() } else { t.data()[i] };
                self.accumulate_broadcast(grads, *a, g, |i| other(&tb, i));
                self.accumulate_broadcast(grads, *b, g, |i| other(&ta, i));
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += v * c);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
            }
            Op::AddRow(x, b) => {
                let n = self.value(*b).numel();
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for row in g.chunks_exact(n.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::MulCol(x, s) => {
                let (m, n) = self.value(*x).dims2().unwrap();
                let sv = self.value(*s).data().to_vec();
                let xv = self.value(*x).data().to_vec();
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += g[i * n + j] * sv[i];
                        }
                    }
                }
                if let Some(gs) = self.slot(grads, *s) {
                    for i in 0..m {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i * n + j] * xv[i * n + j];
                        }
                        gs[i] += acc;
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data().to_vec();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((o, v), xi) in gx.iter_mut().zip(g).zip(&xv) {
                        if *xi > 0.0 {
                            *o += v;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let yv = node.value.data();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((o, v), y) in gx.iter_mut().zip(g).zip(yv) {
                        *o += v * y * (1.0 - y);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::MaxAxis { x, argmax } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (v, &src) in g.iter().zip(argmax) {
                        gx[src] += v;
                    }
                }
            }
            Op::MeanAxis { x, outer, len, inner } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                if let Some(gx) = self.slot(grads, *x) {
                    let inv = 1.0 / len as f64;
                    for o in 0..outer {
                        for i in 0..inner {
                            let v = g[o * inner + i] * inv;
                            for l in 0..len {
                                gx[(o * len + l) * inner + i] += v;
                            }
                        }
                    }
                }
            }
            Op::Concat { parts, outer, chunks } => {
                let total: usize = chunks.iter().sum();
                let mut offset = 0;
                for (&p, &c) in parts.iter().zip(chunks) {
                    if let Some(gp) = self.slot(grads, p) {
                        for o in 0..*outer {
                            let src = &g[o * total + offset..o * total + offset + c];
                            gp[o * c..(o + 1) * c].iter_mut().zip(src).for_each(|(d, v)| *d += v);
                        }
                    }
                    offset += c;
                }
            }
            Op::GatherRows { x, rows } => {
                let width: usize = self.shape(*x)[1..].iter().product();
                if let Some(gx) = self.slot(grads, *x) {
                    for (slot, &r) in rows.iter().enumerate() {
                        let src = &g[slot * width..(slot + 1) * width];
                        gx[r * width..(r + 1) * width].iter_mut().zip(src).for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::Tile(x) => {
                let n = self.value(*x).numel();
                if let Some(gx) = self.slot(grads, *x) {
                    for row in g.chunks_exact(n.max(1)) {
                        gx.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::NeighborMax { a, b, src } => {
                let h = self.shape(*a)[1];
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (srow, grow) in src.chunks_exact(h).zip(g.chunks_exact(h)) {
                        for (c, (&j, v)) in srow.iter().zip(grow).enumerate() {
                            gb[j as usize * h + c] += v;
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let c = self.shape(*logits)[1];
                let scale = g[0] / labels.len() as f64;
                if let Some(gl) = self.slot(grads, *logits) {
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
        }
    }

    /// Adds `g · coeff(i)` into `v`'s gradient, summing over broadcast
    /// positions when `v` is a single element.
    fn accumulate_broadcast(
        &self,
        grads: &mut [Option<Vec<f64>>],
        v: Var,
        g: &[f64],
        coeff: impl Fn(usize) -> f64,
    ) {
        let broadcast = self.value(v).numel() == 1 && g.len() != 1;
        if let Some(gv) = self.slot(grads, v) {
            if broadcast {
                gv[0] += g.iter().enumerate().map(|(i, x)| x * coeff(i)).sum::<f64>();
            } else {
                for (i, (d, x)) in gv.iter_mut().zip(g).enumerate() {
                    *d += x * coeff(i);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let x = tape.constant(t(&[2, 1], &[3., 4.]));
        let y = tape.matmul(i, x).unwrap();
        assert_eq!(tape.value(y).data(), &[3., 4.]);
        let a = tape.constant(t(&[1, 2], &[1., 2.]));
        let z = tape.matmul(a, x).unwrap();
        assert_eq!(tape.value(z).shape(), &[1, 1]);
        assert_eq!(tape.value(z).data(), &[11.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("inner"), "{msg}");
    }

    #[test]
    fn elementwise_values() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).item(), 0.5);
        let x = tape.constant(Tensor::vector(vec![-3.0, 3.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 3.0]);
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(matches!(tape.add(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn sigmoid_stays_open_interval() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-1e6, -800.0, -40.0, 40.0, 800.0, 1e6]));
        let s = tape.sigmoid(x);
        for &v in tape.value(s).data() {
            assert!(v > 0.0 && v < 1.0, "{v}");
        }
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(0.0));
        let s = tape.sigmoid(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 0.25);
    }

    #[test]
    fn relu_passes_gradient_only_for_positive_input() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        let s = tape.sum(r);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn max_over_axis_values_and_routing() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[2, 2], &[1., 5., 3., 2.]));
        let m = tape.max_over_axis(x, 0).unwrap();
        assert_eq!(tape.value(m).data(), &[3., 5.]);

        let v = tape.input(Tensor::vector(vec![1., 5., 2.]));
        let mv = tape.max_over_axis(v, 0).unwrap();
        let s = tape.sum(mv);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[0., 1., 0.]);

        let mut tape = Tape::new();
        let tie = tape.input(Tensor::vector(vec![4., 4.]));
        let mt = tape.max_over_axis(tie, 0).unwrap();
        let g = tape.backward(mt).unwrap();
        assert_eq!(g.get(tie).unwrap().data(), &[1., 0.]);
    }

    #[test]
    fn max_over_empty_axis_is_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[0, 3]));
        assert!(matches!(tape.max_over_axis(x, 0), Err(Error::Dimension { .. })));
        assert!(matches!(tape.mean_over_axis(x, 0), Err(Error::Dimension { .. })));
        assert!(tape.max_over_axis(x, 2).is_err());
    }

    #[test]
    fn mean_values_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![2., 4., 6.]));
        let m = tape.mean_over_axis(x, 0).unwrap();
        assert_eq!(tape.value(m).item(), 4.0);
        let g = tape.backward(m).unwrap();
        for &v in g.get(x).unwrap().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-16);
        }
        let rows = tape.constant(t(&[3, 2], &[0.1, -0.7, 0.1, -0.7, 0.1, -0.7]));
        let mr = tape.mean_over_axis(rows, 0).unwrap();
        assert_eq!(tape.value(mr).data(), &[0.1, -0.7]);
    }

    #[test]
    fn concat_values_empty_and_gradient_slices() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::vector(vec![1., 2.]));
        let b = tape.input(Tensor::vector(vec![3.]));
        let c = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.value(c).data(), &[1., 2., 3.]);
        let e = tape.constant(Tensor::vector(vec![]));
        let ce = tape.concat(&[a, e], 0).unwrap();
        assert_eq!(tape.value(ce), tape.value(a));

        let second = tape.gather_rows(c, &[2]).unwrap();
        let s = tape.sum(second);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[0., 0.]);
        assert_eq!(g.get(b).unwrap().data(), &[1.]);

        let m1 = tape.constant(Tensor::zeros(&[2, 3]));
        let m2 = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(tape.concat(&[m1, m2], 0).is_err());
        let wide = tape.concat(&[m1, m1], 1).unwrap();
        assert_eq!(tape.shape(wide), &[2, 6]);
    }

    #[test]
    fn softmax_cross_entropy_values() {
        let mut tape = Tape::new();
        let z = tape.constant(t(&[1, 4], &[0., 0., 0., 0.]));
        let l = tape.softmax_cross_entropy(z, &[2]).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-15);
        let big = tape.constant(t(&[1, 3], &[1e4, 0., 0.]));
        let l = tape.softmax_cross_entropy(big, &[0]).unwrap();
        assert!(tape.value(l).item().abs() < 1e-12);
        assert!(matches!(tape.softmax_cross_entropy(big, &[3]), Err(Error::Input(_))));
    }

    #[test]
    fn backward_on_weighted_sum_and_constants() {
        let mut tape = Tape::new();
        let w = tape.input(Tensor::vector(vec![0.5, -1.0, 2.0]));
        let x = tape.constant(Tensor::vector(vec![3.0, 4.0, 5.0]));
        let p = tape.mul(w, x).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[3.0, 4.0, 5.0]);
        assert!(g.get(x).is_none());

        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none() && g.get(s).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn neighbor_max_ties_go_to_first_slot() {
        let mut tape = Tape::new();
        let a = tape.input(t(&[2, 1], &[0.0, 0.0]));
        let b = tape.input(t(&[2, 1], &[1.0, 1.0]));
        let o = tape.neighbor_max(a, b, &[1, 0, 0, 1], 2).unwrap();
        assert_eq!(tape.value(o).data(), &[1.0, 1.0]);
        let s = tape.sum(o);
        let g = tape.backward(s).unwrap();
        // row 0 picks neighbour 1 (slot 0), row 1 picks neighbour 0 (slot 0)
        assert_eq!(g.get(b).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(g.get(a).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn op_kind_names_roundtrip() {
        for k in OpKind::ALL {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
    }
}
