//! Tape of primitive applications and the reverse sweep over it.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order: every input of node `i` has an index below `i`.

use std::sync::Arc;

use super::real::{gemm, MatMut, MatRef};
use super::tensor::{numel, BoolMatrix, Tensor};
use super::{DiffError, Real};

const LN_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Exp,
    Log,
    Sin,
    Cos,
    /// `ln(1 + e^x)`, evaluated stably.
    Softplus,
    /// Linear to sRGB transfer curve clamped to `[0, 1]`; zero slope where clamped.
    SrgbEncode,
}

const SRGB_KNEE: f64 = 0.0031308;

pub fn srgb_encode(s: f64) -> f64 {
    let v = if s <= SRGB_KNEE { 12.92 * s } else { 1.055 * s.powf(1.0 / 2.4) - 0.055 };
    v.clamp(0.0, 1.0)
}

fn srgb_slope(s: f64) -> f64 {
    if s < 0.0 {
        0.0
    } else if s <= SRGB_KNEE {
        12.92
    } else if 1.055 * s.powf(1.0 / 2.4) - 0.055 > 1.0 {
        0.0
    } else {
        1.055 / 2.4 * s.powf(1.0 / 2.4 - 1.0)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Relu => "relu",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Sin => "sin",
            Unary::Cos => "cos",
            Unary::Softplus => "softplus",
            Unary::SrgbEncode => "srgb_encode",
        }
    }

    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Unary::Relu => x.max(T::zero()),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Softplus => T::from_f64_lossy(softplus(x.to_f64_lossy())),
            Unary::SrgbEncode => T::from_f64_lossy(srgb_encode(x.to_f64_lossy())),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn slope<T: Real>(self, x: T, y: T) -> T {
        match self {
            Unary::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Unary::Exp => y,
            Unary::Log => x.recip(),
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::Softplus => {
                let xf = x.to_f64_lossy();
                T::from_f64_lossy(1.0 / (1.0 + (-xf).exp()))
            }
            Unary::SrgbEncode => T::from_f64_lossy(srgb_slope(x.to_f64_lossy())),
        }
    }
}

enum Op<T> {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    MatMul { a: Var, b: Var, trans_b: bool, batch: usize, m: usize, k: usize, n: usize },
    Unary { x: Var, f: Unary },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    SoftmaxMasked { x: Var },
    LayerNorm { x: Var, gain: Var, shift: Var, xhat: Vec<T>, rstd: Vec<T> },
    Sum { x: Var },
    Mean { x: Var },
    Reshape { x: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Permute { x: Var, perm: Vec<usize> },
    Expand { x: Var },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Affine { .. } => "affine",
            Op::MatMul { .. } => "matmul",
            Op::Unary { f, .. } => f.name(),
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::SoftmaxMasked { .. } => "softmax_masked",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Reshape { .. } => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Permute { .. } => "permute",
            Op::Expand { .. } => "expand",
        }
    }
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Accumulated gradient; only kept for leaves.
    grad: Option<Vec<T>>,
}

/// A single-owner computation tape.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> DiffError {
    DiffError::Shape { op, detail }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data<T: Real>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let nd = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if nd == 0 || total == 0 {
        out.extend_from_slice(data);
        return (out, out_shape);
    }
    // copy contiguous runs when the innermost axis stays innermost
    let (outer_nd, run) = if perm[nd - 1] == nd - 1 { (nd - 1, shape[nd - 1]) } else { (nd, 1) };
    let mut idx = vec![0usize; outer_nd];
    let mut src = 0usize;
    loop {
        if run == 1 {
            out.push(data[src]);
        } else {
            out.extend_from_slice(&data[src..src + run]);
        }
        let mut ax = outer_nd;
        loop {
            if ax == 0 {
                return (out, out_shape);
            }
            ax -= 1;
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn slot<'a, T: Real>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), check_finite: false }
    }

    /// Enables the debug guard asserting finiteness after every primitive.
    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Result<Var, DiffError> {
        debug_assert_eq!(numel(&shape), value.len());
        if self.check_finite && !value.iter().all(|v| v.is_finite()) {
            return Err(DiffError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { shape, value, op, requires_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---------------------------------------------------------------- leaves

    /// Registers a tensor as a leaf; it is differentiated iff `requires_grad` is set.
    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        let node = Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad,
            grad: None,
        };
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var, DiffError> {
        if numel(shape) != data.len() {
            return Err(shape_err("param", format!("shape {shape:?} vs {} values", data.len())));
        }
        self.push(shape.to_vec(), data, Op::Leaf, true)
    }

    /// A non-differentiated leaf.
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var, DiffError> {
        if numel(shape) != data.len() {
            return Err(shape_err("constant", format!("shape {shape:?} vs {} values", data.len())));
        }
        self.push(shape.to_vec(), data, Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.node(v).grad.as_deref()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        let mut t = Tensor::from_vec(n.shape.clone(), n.value.clone()).expect("node shape is consistent");
        t.requires_grad = n.requires_grad;
        t.grad = n.grad.clone();
        t
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ------------------------------------------------------------ primitives

    /// `x[*, in] · w[in, out] + b[out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, DiffError> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[0] || bs != [ws[1]] {
            return Err(shape_err("affine", format!("x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (fan_in, fan_out) = (ws[0], ws[1]);
        let rows = numel(xs) / fan_in;
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = fan_out;
        let bv = self.value(b);
        let mut y = Vec::with_capacity(rows * fan_out);
        for _ in 0..rows {
            y.extend_from_slice(bv);
        }
        gemm(
            rows,
            fan_in,
            fan_out,
            T::one(),
            MatRef { data: self.value(x), offset: 0, rs: fan_in, cs: 1 },
            MatRef { data: self.value(w), offset: 0, rs: fan_out, cs: 1 },
            T::one(),
            MatMut { data: &mut y, offset: 0, rs: fan_out, cs: 1 },
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(shape, y, Op::Affine { x, w, b }, rg)
    }

    /// Batched matrix product over matching leading axes:
    /// `a[.., m, k] · b[.., k, n]`, or `a · bᵀ` with `b[.., n, k]` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, DiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || shape_err("matmul", format!("a {sa:?}, b {sb:?}, trans_b {trans_b}"));
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(err());
        }
        let nd = sa.len();
        let (m, k) = (sa[nd - 2], sa[nd - 1]);
        let (kb, n) = if trans_b { (sb[nd - 1], sb[nd - 2]) } else { (sb[nd - 2], sb[nd - 1]) };
        if k != kb {
            return Err(err());
        }
        let batch = numel(&sa[..nd - 2]);
        let mut y = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        let (brs, bcs) = if trans_b { (1, k) } else { (n, 1) };
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                T::one(),
                MatRef { data: av, offset: i * m * k, rs: k, cs: 1 },
                MatRef { data: bv, offset: i * k * n, rs: brs, cs: bcs },
                T::zero(),
                MatMut { data: &mut y, offset: i * m * n, rs: n, cs: 1 },
            );
        }
        let mut shape = sa[..nd - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        self.push(shape, y, Op::MatMul { a, b, trans_b, batch, m, k, n }, rg)
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Result<Var, DiffError> {
        let y: Vec<T> = self.value(x).iter().map(|&v| f.apply(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, y, Op::Unary { x, f }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary(x, Unary::Relu)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary(x, Unary::Exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary(x, Unary::Log)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary(x, Unary::Softplus)
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<(), DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?} (b must be a suffix of a)")));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, which: u8) -> Result<Var, DiffError> {
        let name = ["add", "sub", "mul"][which as usize];
        self.broadcast_check(name, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let nb = bv.len();
        let y: Vec<T> = av
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let z = bv[i % nb];
                match which {
                    0 => x + z,
                    1 => x - z,
                    _ => x * z,
                }
            })
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        let op = match which {
            0 => Op::Add { a, b },
            1 => Op::Sub { a, b },
            _ => Op::Mul { a, b },
        };
        self.push(shape, y, op, rg)
    }

    /// Elementwise `a + b`; `b` may have a suffix shape of `a` and is then repeated.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(a, b, 0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(a, b, 1)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(a, b, 2)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var, DiffError> {
        let y = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, y, Op::Scale { x, c }, rg)
    }

    /// Row softmax over the last axis restricted to allowed entries of `mask`.
    ///
    /// `scores` is `[.., rows, cols]` and the mask is broadcast over leading axes.
    /// Masked entries come out as exactly zero.
    pub fn softmax_masked(&mut self, scores: Var, mask: &Arc<BoolMatrix>) -> Result<Var, DiffError> {
        let s = self.shape(scores);
        if s.len() < 2 || s[s.len() - 2] != mask.rows() || s[s.len() - 1] != mask.cols() {
            return Err(shape_err(
                "softmax_masked",
                format!("scores {s:?} vs mask {}x{}", mask.rows(), mask.cols()),
            ));
        }
        if let Some(row) = (0..mask.rows()).find(|&r| mask.count_row(r) == 0) {
            return Err(DiffError::FullyMaskedRow { row });
        }
        let (rows, cols) = (mask.rows(), mask.cols());
        let xv = self.value(scores);
        let mut y = vec![T::zero(); xv.len()];
        for (ri, (xr, yr)) in xv.chunks_exact(cols).zip(y.chunks_exact_mut(cols)).enumerate() {
            let allowed = mask.row(ri % rows);
            let mut max = T::neg_infinity();
            for (c, &v) in xr.iter().enumerate() {
                if allowed[c] && v > max {
                    max = v;
                }
            }
            let mut total = T::zero();
            for c in 0..cols {
                if allowed[c] {
                    let e = (xr[c] - max).exp();
                    yr[c] = e;
                    total += e;
                }
            }
            let inv = total.recip();
            for c in 0..cols {
                yr[c] *= inv;
            }
        }
        let shape = s.to_vec();
        let rg = self.rg(scores);
        self.push(shape, y, Op::SoftmaxMasked { x: scores }, rg)
    }

    /// Normalizes each row of the last axis to zero mean and unit variance,
    /// then applies `gain` and `shift`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var, DiffError> {
        let s = self.shape(x);
        let d = *s.last().unwrap_or(&0);
        if d < 2 || self.shape(gain) != [d] || self.shape(shift) != [d] {
            return Err(shape_err(
                "layer_norm",
                format!("x {s:?}, gain {:?}, shift {:?}", self.shape(gain), self.shape(shift)),
            ));
        }
        let shape = s.to_vec();
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(shift));
        let rows = xv.len() / d;
        let eps = T::from_f64_lossy(LN_EPS);
        let dn = T::from_usize(d).unwrap();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut y = Vec::with_capacity(xv.len());
        for row in xv.chunks_exact(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = (var + eps).sqrt().recip();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                y.push(h * gv[j] + bv[j]);
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(shift);
        self.push(shape, y, Op::LayerNorm { x, gain, shift, xhat, rstd }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, DiffError> {
        let total = self.value(x).iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Vec::new(), vec![total], Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, DiffError> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(shape_err("mean", "empty tensor".into()));
        }
        let m = v.iter().copied().sum::<T>() / T::from_usize(v.len()).unwrap();
        let rg = self.rg(x);
        self.push(Vec::new(), vec![m], Op::Mean { x }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, DiffError> {
        if numel(shape) != numel(self.shape(x)) {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let v = self.value(x).to_vec();
        let rg = self.rg(x);
        self.push(shape.to_vec(), v, Op::Reshape { x }, rg)
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, DiffError> {
        let first = self.shape(*parts.first().ok_or_else(|| shape_err("concat", "no inputs".into()))?).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(shape_err("concat", format!("{first:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut y = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                y.extend_from_slice(&self.value(p)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(shape, y, Op::Concat { parts: parts.to_vec(), axis }, rg)
    }

    /// `len` consecutive entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, DiffError> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(shape_err("slice", format!("{s:?} axis {axis} range {start}..{}", start + len)));
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let xv = self.value(x);
        let mut y = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            y.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(x);
        self.push(shape, y, Op::Slice { x, axis, start }, rg)
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, DiffError> {
        let s = self.shape(x);
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", format!("{s:?} by {perm:?}")));
        }
        let (y, shape) = permute_data(self.value(x), s, perm);
        let rg = self.rg(x);
        self.push(shape, y, Op::Permute { x, perm: perm.to_vec() }, rg)
    }

    /// Repeats `x` along a new leading axis of extent `n`.
    pub fn expand(&mut self, x: Var, n: usize) -> Result<Var, DiffError> {
        let xv = self.value(x);
        let mut y = Vec::with_capacity(xv.len() * n);
        for _ in 0..n {
            y.extend_from_slice(xv);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(self.shape(x));
        let rg = self.rg(x);
        self.push(shape, y, Op::Expand { x }, rg)
    }

    // -------------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`, accumulating into leaf gradients.
    ///
    /// Repeated calls without [`Graph::zero_grad`] accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<(), DiffError> {
        if numel(self.shape(loss)) != 1 {
            return Err(DiffError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => add_into(acc, &dy),
                    None => node.grad = Some(dy),
                }
                continue;
            }
            self.backprop_node(i, &dy, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let ws = &nodes[w.0].shape;
                let (fan_in, fan_out) = (ws[0], ws[1]);
                let rows = dy.len() / fan_out;
                if let Some(dx) = slot(nodes, grads, *x) {
                    gemm(
                        rows,
                        fan_out,
                        fan_in,
                        T::one(),
                        MatRef { data: dy, offset: 0, rs: fan_out, cs: 1 },
                        MatRef { data: &nodes[w.0].value, offset: 0, rs: 1, cs: fan_out },
                        T::one(),
                        MatMut { data: dx, offset: 0, rs: fan_in, cs: 1 },
                    );
                }
                if let Some(dw) = slot(nodes, grads, *w) {
                    gemm(
                        fan_in,
                        rows,
                        fan_out,
                        T::one(),
                        MatRef { data: &nodes[x.0].value, offset: 0, rs: 1, cs: fan_in },
                        MatRef { data: dy, offset: 0, rs: fan_out, cs: 1 },
                        T::one(),
                        MatMut { data: dw, offset: 0, rs: fan_out, cs: 1 },
                    );
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    for row in dy.chunks_exact(fan_out) {
                        add_into(db, row);
                    }
                }
            }
            Op::MatMul { a, b, trans_b, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                if let Some(da) = slot(nodes, grads, *a) {
                    // da = dy · B_effᵀ
                    let (rs, cs) = if *trans_b { (k, 1) } else { (1, n) };
                    for bi in 0..*batch {
                        gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            MatRef { data: dy, offset: bi * m * n, rs: n, cs: 1 },
                            MatRef { data: bv, offset: bi * k * n, rs, cs },
                            T::one(),
                            MatMut { data: da, offset: bi * m * k, rs: k, cs: 1 },
                        );
                    }
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    // dB_eff = aᵀ · dy, written through the layout of b
                    let (rs, cs) = if *trans_b { (1, k) } else { (n, 1) };
                    for bi in 0..*batch {
                        gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            MatRef { data: av, offset: bi * m * k, rs: 1, cs: k },
                            MatRef { data: dy, offset: bi * m * n, rs: n, cs: 1 },
                            T::one(),
                            MatMut { data: db, offset: bi * k * n, rs, cs },
                        );
                    }
                }
            }
            Op::Unary { x, f } => {
                let xv = &nodes[x.0].value;
                let yv = &node.value;
                if let Some(dx) = slot(nodes, grads, *x) {
                    for j in 0..dy.len() {
                        dx[j] += dy[j] * f.slope(xv[j], yv[j]);
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let neg = matches!(node.op, Op::Sub { .. });
                if let Some(da) = slot(nodes, grads, *a) {
                    add_into(da, dy);
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    let nb = db.len();
                    for (j, &g) in dy.iter().enumerate() {
                        if neg {
                            db[j % nb] -= g;
                        } else {
                            db[j % nb] += g;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let nb = bv.len();
                if let Some(da) = slot(nodes, grads, *a) {
                    for (j, &g) in dy.iter().enumerate() {
                        da[j] += g * bv[j % nb];
                    }
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    for (j, &g) in dy.iter().enumerate() {
                        db[j % nb] += g * av[j];
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    dx.iter_mut().zip(dy).for_each(|(d, &g)| *d += g * *c);
                }
            }
            Op::SoftmaxMasked { x } => {
                let cols = *node.shape.last().unwrap();
                let yv = &node.value;
                if let Some(dx) = slot(nodes, grads, *x) {
                    for ((yr, gr), dr) in yv.chunks_exact(cols).zip(dy.chunks_exact(cols)).zip(dx.chunks_exact_mut(cols)) {
                        let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                        for c in 0..cols {
                            // masked entries have y = 0 and receive exactly zero
                            dr[c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, shift, xhat, rstd } => {
                let d = *node.shape.last().unwrap();
                let gv = &nodes[gain.0].value;
                if let Some(dg) = slot(nodes, grads, *gain) {
                    for (hr, gr) in xhat.chunks_exact(d).zip(dy.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(ds) = slot(nodes, grads, *shift) {
                    for gr in dy.chunks_exact(d) {
                        add_into(ds, gr);
                    }
                }
                if let Some(dx) = slot(nodes, grads, *x) {
                    let dn = T::from_usize(d).unwrap();
                    for (r, ((hr, gr), xr)) in
                        xhat.chunks_exact(d).zip(dy.chunks_exact(d)).zip(dx.chunks_exact_mut(d)).enumerate()
                    {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= dn;
                        m2 /= dn;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            xr[j] += rstd[r] * (dh - m1 - hr[j] * m2);
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    dx.iter_mut().for_each(|d| *d += dy[0]);
                }
            }
            Op::Mean { x } => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    let g = dy[0] / T::from_usize(dx.len()).unwrap();
                    dx.iter_mut().for_each(|d| *d += g);
                }
            }
            Op::Reshape { x } => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    add_into(dx, dy);
                }
            }
            Op::Concat { parts, axis } => {
                let axis = *axis;
                let shape = &node.shape;
                let outer = numel(&shape[..axis]);
                let inner = numel(&shape[axis + 1..]);
                let row = shape[axis] * inner;
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].shape[axis] * inner;
                    if let Some(dp) = slot(nodes, grads, p) {
                        for o in 0..outer {
                            add_into(&mut dp[o * len..(o + 1) * len], &dy[o * row + off..o * row + off + len]);
                        }
                    }
                    off += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (axis, start) = (*axis, *start);
                let xs = &nodes[x.0].shape;
                let outer = numel(&xs[..axis]);
                let inner = numel(&xs[axis + 1..]);
                let len = node.shape[axis] * inner;
                if let Some(dx) = slot(nodes, grads, *x) {
                    for o in 0..outer {
                        let base = (o * xs[axis] + start) * inner;
                        add_into(&mut dx[base..base + len], &dy[o * len..(o + 1) * len]);
                    }
                }
            }
            Op::Permute { x, perm } => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    let (back, _) = permute_data(dy, &node.shape, &inverse_perm(perm));
                    add_into(dx, &back);
                }
            }
            Op::Expand { x } => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    let len = dx.len();
                    for chunk in dy.chunks_exact(len) {
                        add_into(dx, chunk);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g64() -> Graph<f64> {
        Graph::new()
    }

    #[test]
    fn affine_identity_and_sum_plus_bias() {
        let mut g = g64();
        let x = g.constant(&[2], vec![1.0, 0.0]).unwrap();
        let w = g.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = g.constant(&[2], vec![0.0, 0.0]).unwrap();
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y), &[1.0, 0.0]);

        let x = g.constant(&[2], vec![1.0, 2.0]).unwrap();
        let w = g.constant(&[2, 1], vec![1.0, 1.0]).unwrap();
        let b = g.constant(&[1], vec![3.0]).unwrap();
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y), &[6.0]);
    }

    #[test]
    fn affine_shape_mismatch_is_structured() {
        let mut g = g64();
        let x = g.constant(&[3], vec![1.0; 3]).unwrap();
        let w = g.constant(&[2, 2], vec![1.0; 4]).unwrap();
        let b = g.constant(&[2], vec![0.0; 2]).unwrap();
        assert!(matches!(g.affine(x, w, b), Err(DiffError::Shape { op: "affine", .. })));
    }

    #[test]
    fn softmax_masked_examples() {
        let mut g = g64();
        let all = Arc::new(BoolMatrix::new(1, 3, true));
        let s = g.constant(&[1, 3], vec![0.0; 3]).unwrap();
        let y = g.softmax_masked(s, &all).unwrap();
        for &v in g.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let part = Arc::new(BoolMatrix::from_fn(1, 3, |_, c| c < 2));
        let s = g.constant(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = g.softmax_masked(s, &part).unwrap();
        let v = g.value(y);
        assert!((v[0] - 0.26894).abs() < 1e-5);
        assert!((v[1] - 0.73106).abs() < 1e-5);
        assert_eq!(v[2], 0.0);

        let one = Arc::new(BoolMatrix::from_fn(1, 3, |_, c| c == 1));
        let s = g.constant(&[1, 3], vec![-5.0, 40.0, 7.0]).unwrap();
        let y = g.softmax_masked(s, &one).unwrap();
        assert_eq!(g.value(y), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn softmax_fully_masked_row_rejected() {
        let mut g = g64();
        let mask = Arc::new(BoolMatrix::from_fn(2, 2, |r, _| r == 0));
        let s = g.constant(&[2, 2], vec![0.0; 4]).unwrap();
        assert_eq!(g.softmax_masked(s, &mask).unwrap_err(), DiffError::FullyMaskedRow { row: 1 });
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = g64();
        let gain = g.constant(&[4], vec![1.0; 4]).unwrap();
        let shift = g.constant(&[4], vec![0.0; 4]).unwrap();
        let x = g.constant(&[4], vec![1.0; 4]).unwrap();
        let y = g.layer_norm(x, gain, shift).unwrap();
        assert_eq!(g.value(y), &[0.0; 4]);

        let gain = g.constant(&[2], vec![1.0; 2]).unwrap();
        let shift = g.constant(&[2], vec![0.0; 2]).unwrap();
        let x = g.constant(&[2], vec![-1.0, 1.0]).unwrap();
        let y = g.layer_norm(x, gain, shift).unwrap();
        let want = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((g.value(y)[0] + want).abs() < 1e-12);
        assert!((g.value(y)[1] - want).abs() < 1e-12);
    }

    #[test]
    fn backward_sum_and_square() {
        let mut g = g64();
        let x = g.param(&[2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.5]).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);

        let mut g = g64();
        let data = vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.5];
        let x = g.param(&[6], data.clone()).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        let want: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.grad(x).unwrap(), want.as_slice());
    }

    #[test]
    fn backward_twice_accumulates() {
        let mut g = g64();
        let x = g.param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0; 3]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = g64();
        let x = g.param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(g.backward(x).unwrap_err(), DiffError::NonScalarLoss(vec![3]));
    }

    #[test]
    fn ignored_leaf_gets_zero_gradient() {
        let mut g = g64();
        let x = g.param(&[2], vec![1.0, 2.0]).unwrap();
        let unused = g.param(&[2], vec![5.0, 6.0]).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(unused).is_none_or(|gr| gr.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn finite_guard_reports_the_primitive() {
        let mut g = g64().with_finite_check(true);
        let x = g.constant(&[1], vec![-1.0]).unwrap();
        assert_eq!(g.log(x).unwrap_err(), DiffError::NonFinite { op: "log" });
    }

    #[test]
    fn permute_roundtrip_and_concat_slice() {
        let mut g = g64();
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let x = g.constant(&[2, 3, 4], data.clone()).unwrap();
        let p = g.permute(x, &[1, 0, 2]).unwrap();
        assert_eq!(g.shape(p), &[3, 2, 4]);
        assert_eq!(g.value(p)[4..8], data[12..16]);
        let q = g.permute(p, &[1, 0, 2]).unwrap();
        assert_eq!(g.value(q), data.as_slice());
        let t = g.permute(x, &[2, 1, 0]).unwrap();
        assert_eq!(g.shape(t), &[4, 3, 2]);
        assert_eq!(g.value(t)[1], 12.0);

        let a = g.slice(x, 1, 0, 1).unwrap();
        let b = g.slice(x, 1, 1, 2).unwrap();
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c), data.as_slice());
    }

    #[test]
    fn srgb_encode_reference_values() {
        assert!((srgb_encode(0.0031308) - 0.04045).abs() < 1e-5);
        assert!((srgb_encode(0.5) - 0.73536).abs() < 1e-5);
        assert_eq!(srgb_encode(3.0), 1.0);
        assert_eq!(srgb_slope(3.0), 0.0);
    }
}
