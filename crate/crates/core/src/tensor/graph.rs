use std::borrow::Cow;
use std::collections::HashMap;

use super::kernels::{self, ConvGeom, MatRef};
use super::{broadcast_offsets, broadcast_shape, numel, reduce_to_shape, Tensor};
use crate::error::{Error, Result};
use crate::nn::Param;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Score written into masked attention slots; `exp` of it underflows to 0.
const MASKED: f64 = -1e30;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Powf(Var, f64),
    Scale(Var, f64),
    AddScalar(Var),
    Clamp(Var, f64, f64),
    Sum { x: Var, keep_shape: Vec<usize> },
    BroadcastTo(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    MatMul(Var, Var),
    Gather { table: Var, indices: Vec<usize> },
    Softmax(Var),
    LogSoftmax(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize },
    StraightThrough(Var),
    CausalMask(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records every operation in creation order (a Wengert list) so that
/// [`Graph::backward`] can replay it in reverse.
///
/// Invalid-domain arithmetic (log of a negative, division by zero) does not
/// fail: the non-finite values propagate and a sticky flag is set, which
/// callers such as the training loop check via [`Graph::nonfinite_seen`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: HashMap<usize, Vec<f64>>,
    params: HashMap<String, Var>,
    nonfinite: Option<&'static str>,
}

fn same_or_broadcast<'a>(t: &'a Tensor, out_shape: &[usize]) -> Cow<'a, [f64]> {
    if t.shape() == out_shape {
        Cow::Borrowed(t.data())
    } else {
        let offs = broadcast_offsets(t.shape(), out_shape);
        Cow::Owned(offs.iter().map(|&o| t.data()[o]).collect())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.nonfinite.is_none() && !value.all_finite() {
            self.nonfinite = Some(name);
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Whether any recorded value so far was NaN or infinite.
    pub fn nonfinite_seen(&self) -> bool {
        self.nonfinite.is_some()
    }

    /// Name of the first op that produced a non-finite value.
    pub fn nonfinite_op(&self) -> Option<&'static str> {
        self.nonfinite
    }

    /// Error out if the sticky non-finite flag is set.
    pub fn ensure_finite(&self) -> Result<()> {
        match self.nonfinite {
            Some(op) => Err(Error::NonFinite(op)),
            None => Ok(()),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push("leaf", t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn variable(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Bind a named parameter as a gradient-tracking leaf. Binding the same
    /// name twice returns the same handle.
    pub fn param(&mut self, p: &Param) -> Var {
        if let Some(&v) = self.params.get(&p.name) {
            return v;
        }
        let v = self.variable(p.value.clone());
        self.params.insert(p.name.clone(), v);
        v
    }

    /// A gradient-free copy of `v` (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        self.leaf_grads.get(&v.0).map(|g| {
            Tensor::from_parts(node.value.shape().to_vec(), g.clone(), node.value.dtype())
        })
    }

    /// Gradient of a leaf, zeros if it did not participate.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    /// Gradient of a bound parameter by name.
    pub fn param_grad(&self, name: &str) -> Option<Tensor> {
        self.params.get(name).map(|&v| self.grad_or_zeros(v))
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    // ---------------------------------------------------------------- binary

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(name, ta.shape(), tb.shape())?;
        let dtype = ta.dtype().promote(tb.dtype());
        let data: Vec<f64> = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let xa = same_or_broadcast(ta, &shape);
            let xb = same_or_broadcast(tb, &shape);
            xa.iter().zip(xb.iter()).map(|(&x, &y)| f(x, y)).collect()
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(name, Tensor::from_parts(shape, data, dtype), op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    // ----------------------------------------------------------------- unary

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data, t.dtype());
        let rg = self.rg(x);
        self.push(name, out, op, rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary("neg", x, |v| -v, Op::Neg(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary("log", x, f64::ln, Op::Log(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary("sigmoid", x, kernels::sigmoid, Op::Sigmoid(x))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary("softplus", x, kernels::softplus, Op::Softplus(x))
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.unary("powf", x, |v| v.powf(p), Op::Powf(x, p))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    /// Clamp into `[lo, hi]`; gradient passes only inside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary("clamp", x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    /// Sigmoid-weighted linear unit, `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let s = self.sigmoid(x);
        self.mul(x, s)
    }

    /// Forward value is `sign(x)` with zero mapped to -1; backward is identity.
    pub fn straight_through(&mut self, x: Var) -> Var {
        self.unary(
            "straight_through",
            x,
            |v| if v <= 0.0 { -1.0 } else { 1.0 },
            Op::StraightThrough(x),
        )
    }

    // ------------------------------------------------------------ reductions

    /// Sum over `axes`. With `keepdim` the reduced axes stay as extent 1.
    pub fn sum(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let t = self.value(x);
        let rank = t.rank();
        if let Some(&bad) = axes.iter().find(|&&a| a >= rank) {
            return Err(Error::invalid(
                "sum",
                format!("axis {bad} out of range for shape {:?}", t.shape()),
            ));
        }
        let keep_shape: Vec<usize> = t
            .shape()
            .iter()
            .enumerate()
            .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
            .collect();
        let data = reduce_to_shape(t.data(), t.shape(), &keep_shape);
        let out_shape: Vec<usize> = if keepdim {
            keep_shape.clone()
        } else {
            t.shape()
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect()
        };
        let out = Tensor::from_parts(out_shape, data, t.dtype());
        let rg = self.rg(x);
        Ok(self.push("sum", out, Op::Sum { x, keep_shape }, rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.sum(x, &axes, false)
    }

    pub fn mean(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let shape = self.shape(x);
        let count: usize = axes.iter().filter_map(|&a| shape.get(a)).product();
        let s = self.sum(x, axes, keepdim)?;
        Ok(self.scale(s, 1.0 / count.max(1) as f64))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum_all(x)?;
        Ok(self.scale(s, 1.0 / n.max(1) as f64))
    }

    // ------------------------------------------------------- shape movement

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let target = broadcast_shape("broadcast_to", t.shape(), shape)?;
        if target != shape {
            return Err(Error::Shape {
                op: "broadcast_to",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = same_or_broadcast(t, shape).into_owned();
        let out = Tensor::from_parts(shape.to_vec(), data, t.dtype());
        let rg = self.rg(x);
        Ok(self.push("broadcast_to", out, Op::BroadcastTo(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push("reshape", out, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let mut seen = vec![false; t.rank()];
        let valid = perm.len() == t.rank()
            && perm
                .iter()
                .all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::invalid(
                "permute",
                format!("{perm:?} is not a permutation of shape {:?}", t.shape()),
            ));
        }
        let (shape, data) = kernels::permute(t.data(), t.shape(), perm);
        let out = Tensor::from_parts(shape, data, t.dtype());
        let rg = self.rg(x);
        Ok(self.push("permute", out, Op::Permute(x, perm.to_vec()), rg))
    }

    /// Swap two axes.
    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let mut perm: Vec<usize> = (0..self.value(x).rank()).collect();
        if a >= perm.len() || b >= perm.len() {
            return Err(Error::invalid("transpose", format!("axes {a},{b} out of range")));
        }
        perm.swap(a, b);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        let mut dtype = self.value(*first).dtype();
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
            dtype = dtype.promote(self.value(x).dtype());
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let t = self.value(x);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = xs.iter().any(|&x| self.rg(x));
        let out = Tensor::from_parts(shape, data, dtype);
        Ok(self.push("concat", out, Op::Concat(xs.to_vec(), axis), rg))
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!("{start}..{} along axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let extent = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let out = Tensor::from_parts(out_shape, data, t.dtype());
        let rg = self.rg(x);
        Ok(self.push("slice", out, Op::Slice { x, axis, start }, rg))
    }

    // ------------------------------------------------------------- products

    /// Batched matrix product. `a` is `[..., m, k]`; `b` is either `[k, n]`
    /// (shared across the batch) or `[..., k, n]` with identical batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let shape_err = || Error::Shape {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb || (sb.len() > 2 && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(shape_err());
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut data = vec![0.0; batch * m * n];
        if sb.len() == 2 {
            kernels::gemm(
                MatRef::new(ta.data(), batch * m, k),
                MatRef::new(tb.data(), k, n),
                &mut data,
                0.0,
            );
        } else {
            for i in 0..batch {
                kernels::gemm(
                    MatRef::new(&ta.data()[i * m * k..(i + 1) * m * k], m, k),
                    MatRef::new(&tb.data()[i * k * n..(i + 1) * k * n], k, n),
                    &mut data[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let out = Tensor::from_parts(shape, data, ta.dtype().promote(tb.dtype()));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push("matmul", out, Op::MatMul(a, b), rg))
    }

    /// Row lookup: `table` is `[V, w]`, output is `[indices.len(), w]`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::invalid(
                "gather",
                format!("table must be rank 2, got {:?}", t.shape()),
            ));
        }
        let (rows, w) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            if i >= rows {
                return Err(Error::OutOfRange {
                    what: "gather",
                    index: i as u64,
                    bound: rows as u64,
                });
            }
            data.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
        }
        let out = Tensor::from_parts(vec![indices.len(), w], data, t.dtype());
        let rg = self.rg(table);
        let op = Op::Gather {
            table,
            indices: indices.to_vec(),
        };
        Ok(self.push("gather", out, op, rg))
    }

    fn last_axis_rows(&self, x: Var, name: &'static str) -> Result<usize> {
        match self.shape(x).last() {
            Some(&n) if n > 0 => Ok(n),
            _ => Err(Error::invalid(name, "needs a non-empty last axis")),
        }
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.last_axis_rows(x, "softmax")?;
        let t = self.value(x);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data, t.dtype());
        let rg = self.rg(x);
        Ok(self.push("softmax", out, Op::Softmax(x), rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.last_axis_rows(x, "log_softmax")?;
        let t = self.value(x);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data, t.dtype());
        let rg = self.rg(x);
        Ok(self.push("log_softmax", out, Op::LogSoftmax(x), rg))
    }

    /// Replace score `(i, j)` of each trailing `[Tq, Tk]` block with a large
    /// negative constant when key `j` lies after query `i`. Queries are the
    /// last `Tq` positions of the `Tk` keys.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() < 2 || s[s.len() - 2] > s[s.len() - 1] {
            return Err(Error::invalid(
                "causal_mask",
                format!("expects [..., Tq, Tk] with Tq <= Tk, got {s:?}"),
            ));
        }
        let (tq, tk) = (s[s.len() - 2], s[s.len() - 1]);
        let offset = tk - tq;
        let mut data = t.data().to_vec();
        for block in data.chunks_mut(tq * tk) {
            for i in 0..tq {
                for v in &mut block[i * tk + i + offset + 1..(i + 1) * tk] {
                    *v = MASKED;
                }
            }
        }
        let out = Tensor::from_parts(s.to_vec(), data, t.dtype());
        let rg = self.rg(x);
        Ok(self.push("causal_mask", out, Op::CausalMask(x), rg))
    }

    /// Same-padded cross-correlation. `x` is `[B,C,H,W]`, `w` is
    /// `[O,C,kh,kw]` with odd kernel extents, optional bias `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        if sw[2] % 2 == 0 || sw[3] % 2 == 0 || !(1..=2).contains(&stride) {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {:?} must be odd and stride {stride} in 1..=2", &sw[2..]),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(Error::Shape {
                    op: "conv2d bias",
                    lhs: self.shape(b).to_vec(),
                    rhs: vec![sw[0]],
                });
            }
        }
        let geom = ConvGeom {
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kh: sw[2],
            kw: sw[3],
            stride,
        };
        let (batch, outc) = (sx[0], sw[0]);
        let (ho, wo) = geom.out_hw();
        let cols = ho * wo;
        let img = geom.channels * geom.height * geom.width;
        let mut col = vec![0.0; geom.col_rows() * cols];
        let mut data = vec![0.0; batch * outc * cols];
        let wmat = MatRef::new(tw.data(), outc, geom.col_rows());
        for n in 0..batch {
            kernels::im2col(&tx.data()[n * img..(n + 1) * img], geom, &mut col);
            let dst = &mut data[n * outc * cols..(n + 1) * outc * cols];
            if let Some(b) = b {
                for (o, plane) in dst.chunks_mut(cols).enumerate() {
                    plane.fill(self.nodes[b.0].value.data()[o]);
                }
            }
            let beta = if b.is_some() { 1.0 } else { 0.0 };
            kernels::gemm(wmat, MatRef::new(&col, geom.col_rows(), cols), dst, beta);
        }
        let dtype = tx.dtype().promote(tw.dtype());
        let out = Tensor::from_parts(vec![batch, outc, ho, wo], data, dtype);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push("conv2d", out, Op::Conv2d { x, w, b, stride }, rg))
    }

    // -------------------------------------------------------------- backward

    /// Reverse-mode sweep from a scalar `loss`. Leaf gradients accumulate
    /// across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let slot = self.leaf_grads.entry(i).or_insert_with(|| vec![0.0; g.len()]);
                for (s, v) in slot.iter_mut().zip(&g) {
                    *s += v;
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let out_shape = node.value.shape();
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, d: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(d),
            }
        };
        let ew = |f: &dyn Fn(usize, f64) -> f64| -> Vec<f64> {
            g.iter().enumerate().map(|(j, &gv)| f(j, gv)).collect()
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.rg(*a) {
                    send(*a, reduce_to_shape(g, out_shape, val(*a).shape()));
                }
                if self.rg(*b) {
                    let gb: Vec<f64> = g.iter().map(|v| sign * v).collect();
                    send(*b, reduce_to_shape(&gb, out_shape, val(*b).shape()));
                }
            }
            Op::Mul(a, b) => {
                let xa = same_or_broadcast(val(*a), out_shape);
                let xb = same_or_broadcast(val(*b), out_shape);
                if self.rg(*a) {
                    let d: Vec<f64> = g.iter().zip(xb.iter()).map(|(g, b)| g * b).collect();
                    send(*a, reduce_to_shape(&d, out_shape, val(*a).shape()));
                }
                if self.rg(*b) {
                    let d: Vec<f64> = g.iter().zip(xa.iter()).map(|(g, a)| g * a).collect();
                    send(*b, reduce_to_shape(&d, out_shape, val(*b).shape()));
                }
            }
            Op::Div(a, b) => {
                let xa = same_or_broadcast(val(*a), out_shape);
                let xb = same_or_broadcast(val(*b), out_shape);
                if self.rg(*a) {
                    let d: Vec<f64> = g.iter().zip(xb.iter()).map(|(g, b)| g / b).collect();
                    send(*a, reduce_to_shape(&d, out_shape, val(*a).shape()));
                }
                if self.rg(*b) {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(xa.iter().zip(xb.iter()))
                        .map(|(g, (a, b))| -g * a / (b * b))
                        .collect();
                    send(*b, reduce_to_shape(&d, out_shape, val(*b).shape()));
                }
            }
            Op::Neg(x) => send(*x, ew(&|_, gv| -gv)),
            Op::Exp(x) => send(*x, ew(&|j, gv| gv * y[j])),
            Op::Log(x) => {
                let xs = val(*x).data();
                send(*x, ew(&|j, gv| gv / xs[j]))
            }
            Op::Tanh(x) => send(*x, ew(&|j, gv| gv * (1.0 - y[j] * y[j]))),
            Op::Sigmoid(x) => send(*x, ew(&|j, gv| gv * y[j] * (1.0 - y[j]))),
            Op::Softplus(x) => {
                let xs = val(*x).data();
                send(*x, ew(&|j, gv| gv * kernels::sigmoid(xs[j])))
            }
            Op::Powf(x, p) => {
                let xs = val(*x).data();
                send(*x, ew(&|j, gv| gv * p * xs[j].powf(p - 1.0)))
            }
            Op::Scale(x, c) => send(*x, ew(&|_, gv| gv * c)),
            Op::AddScalar(x) | Op::StraightThrough(x) | Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Clamp(x, lo, hi) => {
                let xs = val(*x).data();
                send(
                    *x,
                    ew(&|j, gv| {
                        if xs[j] >= *lo && xs[j] <= *hi {
                            gv
                        } else {
                            0.0
                        }
                    }),
                )
            }
            Op::Sum { x, keep_shape } => {
                let offs = broadcast_offsets(keep_shape, val(*x).shape());
                send(*x, offs.iter().map(|&o| g[o]).collect())
            }
            Op::BroadcastTo(x) => send(*x, reduce_to_shape(g, out_shape, val(*x).shape())),
            Op::Permute(x, perm) => {
                let inv = kernels::inverse_perm(perm);
                send(*x, kernels::permute(g, out_shape, &inv).1)
            }
            Op::Concat(xs, axis) => {
                let inner: usize = out_shape[axis + 1..].iter().product();
                let outer: usize = out_shape[..*axis].iter().product();
                let total = out_shape[*axis];
                let mut start = 0;
                for &x in xs {
                    let ext = val(x).shape()[*axis];
                    if self.rg(x) {
                        let mut d = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let base = (o * total + start) * inner;
                            d.extend_from_slice(&g[base..base + ext * inner]);
                        }
                        send(x, d);
                    }
                    start += ext;
                }
            }
            Op::Slice { x, axis, start } => {
                let in_shape = val(*x).shape();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let outer: usize = in_shape[..*axis].iter().product();
                let (extent, len) = (in_shape[*axis], out_shape[*axis]);
                let mut d = vec![0.0; numel(in_shape)];
                for o in 0..outer {
                    let dst = (o * extent + start) * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                send(*x, d);
            }
            Op::MatMul(a, b) => self.matmul_backward(*a, *b, g, out_shape, &mut send),
            Op::Gather { table, indices } => {
                let t = val(*table);
                let w = t.shape()[1];
                let mut d = vec![0.0; t.numel()];
                for (r, &idx) in indices.iter().enumerate() {
                    for c in 0..w {
                        d[idx * w + c] += g[r * w + c];
                    }
                }
                send(*table, d);
            }
            Op::Softmax(x) => {
                let n = *out_shape.last().unwrap();
                let mut d = vec![0.0; g.len()];
                for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(*x, d);
            }
            Op::LogSoftmax(x) => {
                let n = *out_shape.last().unwrap();
                let mut d = vec![0.0; g.len()];
                for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let total: f64 = gr.iter().sum();
                    for j in 0..n {
                        dr[j] = gr[j] - yr[j].exp() * total;
                    }
                }
                send(*x, d);
            }
            Op::CausalMask(x) => {
                let (tq, tk) = (out_shape[out_shape.len() - 2], out_shape[out_shape.len() - 1]);
                let offset = tk - tq;
                let mut d = g.to_vec();
                for block in d.chunks_mut(tq * tk) {
                    for r in 0..tq {
                        block[r * tk + r + offset + 1..(r + 1) * tk].fill(0.0);
                    }
                }
                send(*x, d);
            }
            Op::Conv2d { x, w, b, stride } => {
                self.conv_backward(*x, *w, *b, *stride, g, out_shape, &mut send)
            }
        }
    }

    fn matmul_backward(
        &self,
        a: Var,
        b: Var,
        g: &[f64],
        out_shape: &[usize],
        send: &mut dyn FnMut(Var, Vec<f64>),
    ) {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let batch: usize = sa[..sa.len() - 2].iter().product();
        debug_assert_eq!(numel(out_shape), batch * m * n);
        if sb.len() == 2 {
            if self.rg(a) {
                let mut d = vec![0.0; batch * m * k];
                kernels::gemm(
                    MatRef::new(g, batch * m, n),
                    MatRef::new(tb.data(), k, n).t(),
                    &mut d,
                    0.0,
                );
                send(a, d);
            }
            if self.rg(b) {
                let mut d = vec![0.0; k * n];
                kernels::gemm(
                    MatRef::new(ta.data(), batch * m, k).t(),
                    MatRef::new(g, batch * m, n),
                    &mut d,
                    0.0,
                );
                send(b, d);
            }
            return;
        }
        if self.rg(a) {
            let mut d = vec![0.0; batch * m * k];
            for i in 0..batch {
                kernels::gemm(
                    MatRef::new(&g[i * m * n..(i + 1) * m * n], m, n),
                    MatRef::new(&tb.data()[i * k * n..(i + 1) * k * n], k, n).t(),
                    &mut d[i * m * k..(i + 1) * m * k],
                    0.0,
                );
            }
            send(a, d);
        }
        if self.rg(b) {
            let mut d = vec![0.0; batch * k * n];
            for i in 0..batch {
                kernels::gemm(
                    MatRef::new(&ta.data()[i * m * k..(i + 1) * m * k], m, k).t(),
                    MatRef::new(&g[i * m * n..(i + 1) * m * n], m, n),
                    &mut d[i * k * n..(i + 1) * k * n],
                    0.0,
                );
            }
            send(b, d);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        g: &[f64],
        out_shape: &[usize],
        send: &mut dyn FnMut(Var, Vec<f64>),
    ) {
        let (tx, tw) = (self.value(x), self.value(w));
        let (sx, sw) = (tx.shape(), tw.shape());
        let geom = ConvGeom {
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kh: sw[2],
            kw: sw[3],
            stride,
        };
        let (batch, outc) = (sx[0], sw[0]);
        let cols = out_shape[2] * out_shape[3];
        let rows = geom.col_rows();
        let img = geom.channels * geom.height * geom.width;
        if let Some(b) = b {
            if self.rg(b) {
                let mut d = vec![0.0; outc];
                for n in 0..batch {
                    for (o, plane) in g[n * outc * cols..(n + 1) * outc * cols]
                        .chunks(cols)
                        .enumerate()
                    {
                        d[o] += plane.iter().sum::<f64>();
                    }
                }
                send(b, d);
            }
        }
        let need_w = self.rg(w);
        let need_x = self.rg(x);
        let mut col = vec![0.0; rows * cols];
        let mut dw = if need_w { vec![0.0; tw.numel()] } else { Vec::new() };
        let mut dx = if need_x { vec![0.0; tx.numel()] } else { Vec::new() };
        let wmat = MatRef::new(tw.data(), outc, rows);
        for n in 0..batch {
            let gn = MatRef::new(&g[n * outc * cols..(n + 1) * outc * cols], outc, cols);
            if need_w {
                kernels::im2col(&tx.data()[n * img..(n + 1) * img], geom, &mut col);
                kernels::gemm(gn, MatRef::new(&col, rows, cols).t(), &mut dw, 1.0);
            }
            if need_x {
                kernels::gemm(wmat.t(), gn, &mut col, 0.0);
                kernels::col2im(&col, geom, &mut dx[n * img..(n + 1) * img]);
            }
        }
        if need_w {
            send(w, dw);
        }
        if need_x {
            send(x, dx);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_by_hand() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.constant(t(&[2, 1], &[1., 1.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3., 7.]);
        assert_eq!(g.shape(c), &[2, 1]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn sum_over_axis_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![1., 2., 3., 4.]));
        let r = g.reshape(x, &[2, 2]).unwrap();
        let s = g.sum(r, &[0], false).unwrap();
        assert_eq!(g.value(s).data(), &[4., 6.]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::from_vec(vec![1., 2.]));
        let sq = g.mul(x, x).unwrap();
        let l = g.sum_all(sq).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2., 4.]);
        // second call accumulates
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4., 8.]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn sigmoid_grad_at_zero() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::from_vec(vec![0.0]));
        let s = g.sigmoid(x);
        let l = g.sum_all(s).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.25]);
    }

    #[test]
    fn non_participating_leaf_has_zero_grad() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::from_vec(vec![1.0, 2.0]));
        let unused = g.variable(Tensor::from_vec(vec![5.0]));
        let l = g.sum_all(x).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad_or_zeros(unused).data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2, 3]") && err.contains("[4]"), "{err}");
    }

    #[test]
    fn log_of_negative_sets_sticky_flag() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![-1.0]));
        assert!(!g.nonfinite_seen());
        let y = g.log(x);
        assert!(g.value(y).data()[0].is_nan());
        let _ = g.add_scalar(y, 1.0);
        assert!(g.nonfinite_seen());
        assert_eq!(g.nonfinite_op(), Some("log"));
        assert!(g.ensure_finite().is_err());
    }

    #[test]
    fn causal_mask_with_cache_offset() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let m = g.causal_mask(x).unwrap();
        // queries are the last two of three keys
        assert_eq!(g.value(m).data(), &[0., 0., MASKED, 0., 0., 0.]);
    }

    #[test]
    fn conv_stride_two_ones() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 1, 4, 4]));
        let w = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = g.conv2d(x, w, None, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
        // top-left output sees a 2x2 in-bounds window
        assert_eq!(g.value(y).data(), &[4., 6., 6., 9.]);
    }
}
