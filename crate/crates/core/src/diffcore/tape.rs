use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::array::{numel, DiffArray, NodeId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Exp,
    Ln,
    Abs,
    Relu,
    Sigmoid,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
    },
    Unary {
        kind: UnaryKind,
        a: usize,
    },
    Scale {
        a: usize,
        factor: S,
    },
    Shift {
        a: usize,
    },
    Clamp {
        a: usize,
        lo: S,
        hi: S,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: usize,
        rows: usize,
        cols: usize,
    },
    Concat {
        parts: Vec<(usize, usize)>,
        outer: usize,
        inner: usize,
    },
    Softmax {
        a: usize,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    SumAxis {
        a: usize,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Broadcast {
        a: usize,
    },
    Expand {
        a: usize,
        reps: usize,
    },
    Reshape {
        a: usize,
    },
    GatherRows {
        a: usize,
        rows: Vec<usize>,
        row_len: usize,
    },
    GridSample {
        grid: usize,
        coords: usize,
        h: usize,
        w: usize,
        c: usize,
    },
}

#[derive(Debug)]
struct Node<S> {
    shape: Vec<usize>,
    value: Arc<Vec<S>>,
    op: Op<S>,
    requires_grad: bool,
}

/// Append-only record of primitive operations for reverse-mode
/// differentiation. Nodes are stored in creation order, which is a valid
/// topological order; [`Tape::backward`] visits them once in reverse.
#[derive(Debug)]
pub struct Tape<S> {
    id: u64,
    nodes: Vec<Node<S>>,
    consumed: bool,
}

/// Adjoints produced by one backward pass.
#[derive(Debug)]
pub struct Gradients<S> {
    tape: u64,
    grads: Vec<Option<Vec<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient for `x`; zeros when `x` is not on the tape or received no
    /// adjoint.
    pub fn get(&self, x: &DiffArray<S>) -> DiffArray<S> {
        match x.node() {
            Some(id) if id.tape == self.tape => match &self.grads[id.index] {
                Some(g) => DiffArray::new(self.shapes[id.index].clone(), g.clone()).expect("shape"),
                None => DiffArray::zeros(x.shape()),
            },
            _ => DiffArray::zeros(x.shape()),
        }
    }

    /// Borrowed gradient values, `None` when nothing reached `x`.
    pub fn values(&self, x: &DiffArray<S>) -> Option<&[S]> {
        match x.node() {
            Some(id) if id.tape == self.tape => self.grads[id.index].as_deref(),
            _ => None,
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let n = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, op: Op<S>, requires_grad: bool) -> DiffArray<S> {
        let value = Arc::new(value);
        let index = self.nodes.len();
        self.nodes.push(Node {
            shape: shape.clone(),
            value: Arc::clone(&value),
            op,
            requires_grad,
        });
        DiffArray::from_parts(shape, value, Some(NodeId { tape: self.id, index }))
    }

    /// Records `x` as a differentiable input.
    pub fn param(&mut self, x: &DiffArray<S>) -> DiffArray<S> {
        let value = Arc::clone(x.shared_values());
        let index = self.nodes.len();
        self.nodes.push(Node {
            shape: x.shape().to_vec(),
            value: Arc::clone(&value),
            op: Op::Leaf,
            requires_grad: true,
        });
        DiffArray::from_parts(x.shape().to_vec(), value, Some(NodeId { tape: self.id, index }))
    }

    /// Records `x` as a constant (no adjoint is accumulated for it).
    pub fn constant(&mut self, x: &DiffArray<S>) -> DiffArray<S> {
        let value = Arc::clone(x.shared_values());
        let index = self.nodes.len();
        self.nodes.push(Node {
            shape: x.shape().to_vec(),
            value: Arc::clone(&value),
            op: Op::Leaf,
            requires_grad: false,
        });
        DiffArray::from_parts(x.shape().to_vec(), value, Some(NodeId { tape: self.id, index }))
    }

    fn index_of(&mut self, x: &DiffArray<S>) -> Result<usize> {
        match x.node() {
            Some(id) if id.tape == self.id => Ok(id.index),
            Some(_) => Err(Error::Invalid("array is linked to a different tape".into())),
            None => Ok(self.constant(x).node().expect("just recorded").index),
        }
    }

    fn req(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn binary(&mut self, kind: BinaryKind, a: &DiffArray<S>, b: &DiffArray<S>) -> Result<DiffArray<S>> {
        let (sa, sb) = (a.shape(), b.shape());
        let op_name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        // Only leading-axis expansion: the shorter shape must be a suffix.
        let out_shape = if sa.len() >= sb.len() {
            if sa[sa.len() - sb.len()..] != *sb {
                return Err(mismatch(op_name, sa, sb));
            }
            sa.to_vec()
        } else {
            if sb[sb.len() - sa.len()..] != *sa {
                return Err(mismatch(op_name, sa, sb));
            }
            sb.to_vec()
        };
        if kind == BinaryKind::Div {
            if let Some(bad) = b.values().iter().find(|v| !(**v > S::zero())) {
                return Err(Error::Domain {
                    op: "div",
                    detail: format!("non-positive divisor {bad}"),
                });
            }
        }
        let (va, vb) = (a.values(), b.values());
        let (la, lb) = (va.len(), vb.len());
        let len = numel(&out_shape);
        let out: Vec<S> = (0..len)
            .map(|i| {
                let x = va[i % la];
                let y = vb[i % lb];
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::Div => x / y,
                }
            })
            .collect();
        let ia = self.index_of(a)?;
        let ib = self.index_of(b)?;
        let rg = self.req(ia) || self.req(ib);
        Ok(self.push(out_shape, out, Op::Binary { kind, a: ia, b: ib }, rg))
    }

    pub fn add(&mut self, a: &DiffArray<S>, b: &DiffArray<S>) -> Result<DiffArray<S>> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: &DiffArray<S>, b: &DiffArray<S>) -> Result<DiffArray<S>> {
        self.binary(BinaryKind::Sub, a, b)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: &DiffArray<S>, b: &DiffArray<S>) -> Result<DiffArray<S>> {
        self.binary(BinaryKind::Mul, a, b)
    }

    /// Element-wise quotient; every divisor must be strictly positive.
    pub fn div(&mut self, a: &DiffArray<S>, b: &DiffArray<S>) -> Result<DiffArray<S>> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, a: &DiffArray<S>) -> Result<DiffArray<S>> {
        let v = a.values();
        let out: Vec<S> = match kind {
            UnaryKind::Exp => v.iter().map(|x| x.exp()).collect(),
            UnaryKind::Ln => {
                if let Some(bad) = v.iter().find(|x| !(**x > S::zero())) {
                    return Err(Error::Domain {
                        op: "ln",
                        detail: format!("non-positive operand {bad}"),
                    });
                }
                v.iter().map(|x| x.ln()).collect()
            }
            UnaryKind::Abs => v.iter().map(|x| x.abs()).collect(),
            UnaryKind::Relu => v.iter().map(|&x| if x > S::zero() { x } else { S::zero() }).collect(),
            UnaryKind::Sigmoid => v.iter().map(|&x| sigmoid(x)).collect(),
        };
        let ia = self.index_of(a)?;
        let rg = self.req(ia);
        Ok(self.push(a.shape().to_vec(), out, Op::Unary { kind, a: ia }, rg))
    }

    pub fn exp(&mut self, a: &DiffArray<S>) -> Result<DiffArray<S>> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn ln(&mut self, a: &DiffArray<S>) -> Result<DiffArray<S>> {
        self.unary(UnaryKind::Ln, a)
    }

    pub fn abs(&mut self, a: &DiffArray<S>) -> Result<DiffArray<S>> {
        self.unary(UnaryKind::Abs, a)
    }

    pub fn relu(&mut self, a: &DiffArray<S>) -> Result<DiffArray<S>> {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn sigmoid(&mut self, a: &DiffArray<S>) -> Result<DiffArray<S>> {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn scale(&mut self, a: &DiffArray<S>, factor: S) -> Result<DiffArray<S>> {
        let out = a.values().iter().map(|&x| x * factor).collect();
        let ia = self.index_of(a)?;
        let rg = self.req(ia);
        Ok(self.push(a.shape().to_vec(), out, Op::Scale { a: ia, factor }, rg))
    }

    /// Adds a scalar to every element.
    pub fn shift(&mut self, a: &DiffArray<S>, offset: S) -> Result<DiffArray<S>> {
        let out = a.values().iter().map(|&x| x + offset).collect();
        let ia = self.index_of(a)?;
        let rg = self.req(ia);
        Ok(self.push(a.shape().to_vec(), out, Op::Shift { a: ia }, rg))
    }

    /// Clamps into `[lo, hi]`; the adjoint is zero wherever the clamp binds.
    pub fn clamp(&mut self, a: &DiffArray<S>, lo: S, hi: S) -> Result<DiffArray<S>> {
        let out = a.values().iter().map(|&x| x.max(lo).min(hi)).collect();
        let ia = self.index_of(a)?;
        let rg = self.req(ia);
        Ok(self.push(a.shape().to_vec(), out, Op::Clamp { a: ia, lo, hi }, rg))
    }

    /// 2-D matrix product `[m,k] × [k,n]`.
    pub fn matmul(&mut self, a: &DiffArray<S>, b: &DiffArray<S>) -> Result<DiffArray<S>> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        S::gemm(m, k, n, a.values(), false, b.values(), false, &mut out, false);
        let ia = self.index_of(a)?;
        let ib = self.index_of(b)?;
        let rg = self.req(ia) || self.req(ib);
        Ok(self.push(vec![m, n], out, Op::MatMul { a: ia, b: ib, m, k, n }, rg))
    }

    pub fn transpose(&mut self, a: &DiffArray<S>) -> Result<DiffArray<S>> {
        let s = a.shape();
        if s.len() != 2 {
            return Err(mismatch("transpose", s, &[]));
        }
        let (rows, cols) = (s[0], s[1]);
        let v = a.values();
        let mut out = vec![S::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = v[r * cols + c];
            }
        }
        let ia = self.index_of(a)?;
        let rg = self.req(ia);
        Ok(self.push(vec![cols, rows], out, Op::Transpose { a: ia, rows, cols }, rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[&DiffArray<S>], axis: usize) -> Result<DiffArray<S>> {
        let first = parts.first().ok_or_else(|| Error::Invalid("concat of nothing".into()))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(mismatch("concat", base, &[axis]));
        }
        for p in parts {
            let s = p.shape();
            if s.len() != base.len() || s[..axis] != base[..axis] || s[axis + 1..] != base[axis + 1..] {
                return Err(mismatch("concat", base, s));
            }
        }
        let (outer, _, inner) = axis_split(base, axis);
        let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let blk = p.shape()[axis] * inner;
                out.extend_from_slice(&p.values()[o * blk..(o + 1) * blk]);
            }
        }
        let mut recorded = Vec::with_capacity(parts.len());
        let mut rg = false;
        for p in parts {
            let i = self.index_of(p)?;
            rg |= self.req(i);
            recorded.push((i, p.shape()[axis]));
        }
        let mut shape = base.to_vec();
        shape[axis] = total;
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: recorded,
                outer,
                inner,
            },
            rg,
        ))
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, a: &DiffArray<S>, axis: usize) -> Result<DiffArray<S>> {
        let s = a.shape();
        if axis >= s.len() {
            return Err(mismatch("softmax", s, &[axis]));
        }
        let (outer, n, inner) = axis_split(s, axis);
        let v = a.values();
        let mut out = vec![S::zero(); v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let mx = (0..n).map(|j| v[at(j)]).fold(S::neg_infinity(), S::max);
                let mut z = S::zero();
                for j in 0..n {
                    let e = (v[at(j)] - mx).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[at(j)] /= z;
                }
            }
        }
        let ia = self.index_of(a)?;
        let rg = self.req(ia);
        Ok(self.push(s.to_vec(), out, Op::Softmax { a: ia, outer, n, inner }, rg))
    }

    /// Sum of all elements (0-d result).
    pub fn sum(&mut self, a: &DiffArray<S>) -> Result<DiffArray<S>> {
        let total = a.values().iter().copied().sum();
        let ia = self.index_of(a)?;
        let rg = self.req(ia);
        Ok(self.push(Vec::new(), vec![total], Op::Sum { a: ia }, rg))
    }

    /// Mean of all elements (0-d result); zero for an empty array.
    pub fn mean(&mut self, a: &DiffArray<S>) -> Result<DiffArray<S>> {
        let n = a.len();
        let total: S = a.values().iter().copied().sum();
        let m = if n == 0 { S::zero() } else { total / S::from_usize(n).unwrap() };
        let ia = self.index_of(a)?;
        let rg = self.req(ia);
        Ok(self.push(Vec::new(), vec![m], Op::Mean { a: ia }, rg))
    }

    /// Sum along `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: &DiffArray<S>, axis: usize) -> Result<DiffArray<S>> {
        let s = a.shape();
        if axis >= s.len() {
            return Err(mismatch("sum_axis", s, &[axis]));
        }
        let (outer, n, inner) = axis_split(s, axis);
        let v = a.values();
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &v[(o * n + j) * inner..(o * n + j + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &x) in dst.iter_mut().zip(src) {
                    *d += x;
                }
            }
        }
        let mut shape = s.to_vec();
        shape.remove(axis);
        let ia = self.index_of(a)?;
        let rg = self.req(ia);
        Ok(self.push(shape, out, Op::SumAxis { a: ia, outer, n, inner }, rg))
    }

    /// Leading-axis expansion: `[..] -> [reps, ..]`.
    pub fn broadcast(&mut self, a: &DiffArray<S>, reps: usize) -> Result<DiffArray<S>> {
        let v = a.values();
        let mut out = Vec::with_capacity(v.len() * reps);
        for _ in 0..reps {
            out.extend_from_slice(v);
        }
        let mut shape = vec![reps];
        shape.extend_from_slice(a.shape());
        let ia = self.index_of(a)?;
        let rg = self.req(ia);
        Ok(self.push(shape, out, Op::Broadcast { a: ia }, rg))
    }

    /// Trailing expansion: `[..] -> [.., reps]`, each element repeated.
    pub fn expand(&mut self, a: &DiffArray<S>, reps: usize) -> Result<DiffArray<S>> {
        let out = a
            .values()
            .iter()
            .flat_map(|&x| std::iter::repeat_n(x, reps))
            .collect();
        let mut shape = a.shape().to_vec();
        shape.push(reps);
        let ia = self.index_of(a)?;
        let rg = self.req(ia);
        Ok(self.push(shape, out, Op::Expand { a: ia, reps }, rg))
    }

    pub fn reshape(&mut self, a: &DiffArray<S>, shape: &[usize]) -> Result<DiffArray<S>> {
        if numel(shape) != a.len() {
            return Err(mismatch("reshape", a.shape(), shape));
        }
        let ia = self.index_of(a)?;
        let rg = self.req(ia);
        let value = Arc::clone(a.shared_values());
        let index = self.nodes.len();
        self.nodes.push(Node {
            shape: shape.to_vec(),
            value: Arc::clone(&value),
            op: Op::Reshape { a: ia },
            requires_grad: rg,
        });
        Ok(DiffArray::from_parts(shape.to_vec(), value, Some(NodeId { tape: self.id, index })))
    }

    /// Selects rows (first-axis slices) by index; indices may repeat.
    pub fn gather_rows(&mut self, a: &DiffArray<S>, rows: &[usize]) -> Result<DiffArray<S>> {
        let s = a.shape();
        if s.is_empty() {
            return Err(mismatch("gather_rows", s, &[]));
        }
        let row_len: usize = s[1..].iter().product();
        if let Some(&bad) = rows.iter().find(|&&r| r >= s[0]) {
            return Err(Error::Invalid(format!("gather_rows index {bad} out of {}", s[0])));
        }
        let v = a.values();
        let mut out = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            out.extend_from_slice(&v[r * row_len..(r + 1) * row_len]);
        }
        let mut shape = s.to_vec();
        shape[0] = rows.len();
        let ia = self.index_of(a)?;
        let rg = self.req(ia);
        Ok(self.push(
            shape,
            out,
            Op::GatherRows {
                a: ia,
                rows: rows.to_vec(),
                row_len,
            },
            rg,
        ))
    }

    /// Bilinear gather from `grid: [H, W, C]` at `coords: [P, 2]` given as
    /// `(u, v)` = (column, row) in cell-index units, cell centers at integer
    /// positions. Corners outside the grid read as zero and receive no
    /// adjoint. Output `[P, C]`.
    pub fn grid_sample(&mut self, grid: &DiffArray<S>, coords: &DiffArray<S>) -> Result<DiffArray<S>> {
        let gs = grid.shape();
        let cs = coords.shape();
        if gs.len() != 3 || cs.len() != 2 || cs[1] != 2 {
            return Err(mismatch("grid_sample", gs, cs));
        }
        let (h, w, c) = (gs[0], gs[1], gs[2]);
        let p = cs[0];
        let g = grid.values();
        let cv = coords.values();
        let mut out = vec![S::zero(); p * c];
        for i in 0..p {
            let (u, v) = (cv[2 * i], cv[2 * i + 1]);
            if !u.is_finite() || !v.is_finite() {
                return Err(Error::NonFinite(format!("grid_sample coordinate ({u}, {v})")));
            }
            let dst = &mut out[i * c..(i + 1) * c];
            for (r, col, wt) in corners(u, v, h, w) {
                let src = &g[(r * w + col) * c..(r * w + col + 1) * c];
                for (d, &x) in dst.iter_mut().zip(src) {
                    *d += wt * x;
                }
            }
        }
        let ig = self.index_of(grid)?;
        let ic = self.index_of(coords)?;
        let rg = self.req(ig) || self.req(ic);
        Ok(self.push(
            vec![p, c],
            out,
            Op::GridSample {
                grid: ig,
                coords: ic,
                h,
                w,
                c,
            },
            rg,
        ))
    }

    /// Reverse pass from a one-element `output`. A tape supports exactly one
    /// backward pass.
    pub fn backward(&mut self, output: &DiffArray<S>) -> Result<Gradients<S>> {
        if self.consumed {
            return Err(Error::BackwardReplay);
        }
        let out = match output.node() {
            Some(id) if id.tape == self.id => id.index,
            _ => return Err(Error::Invalid("backward from an array not recorded on this tape".into())),
        };
        if output.len() != 1 {
            return Err(mismatch("backward", output.shape(), &[]));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<S>>> = (0..n).map(|_| None).collect();
        grads[out] = Some(vec![S::one()]);
        for i in (0..=out).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|nd| nd.shape.clone()).collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes,
        })
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let want = |j: usize| nodes[j].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                let (la, lb) = (va.len(), vb.len());
                if want(*a) {
                    let ga = slot(grads, *a, la);
                    for (k, &gk) in g.iter().enumerate() {
                        ga[k % la] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => gk,
                            BinaryKind::Mul => gk * vb[k % lb],
                            BinaryKind::Div => gk / vb[k % lb],
                        };
                    }
                }
                if want(*b) {
                    let gb = slot(grads, *b, lb);
                    for (k, &gk) in g.iter().enumerate() {
                        gb[k % lb] += match kind {
                            BinaryKind::Add => gk,
                            BinaryKind::Sub => -gk,
                            BinaryKind::Mul => gk * va[k % la],
                            BinaryKind::Div => {
                                let y = vb[k % lb];
                                -gk * va[k % la] / (y * y)
                            }
                        };
                    }
                }
            }
            Op::Unary { kind, a } => {
                if !want(*a) {
                    return;
                }
                let x = &nodes[*a].value;
                let y = &node.value;
                let ga = slot(grads, *a, x.len());
                for k in 0..g.len() {
                    ga[k] += match kind {
                        UnaryKind::Exp => g[k] * y[k],
                        UnaryKind::Ln => g[k] / x[k],
                        UnaryKind::Abs => g[k] * sign(x[k]),
                        UnaryKind::Relu => {
                            if x[k] > S::zero() {
                                g[k]
                            } else {
                                S::zero()
                            }
                        }
                        UnaryKind::Sigmoid => g[k] * y[k] * (S::one() - y[k]),
                    };
                }
            }
            Op::Scale { a, factor } => {
                if want(*a) {
                    let ga = slot(grads, *a, g.len());
                    for (d, &gk) in ga.iter_mut().zip(g) {
                        *d += gk * *factor;
                    }
                }
            }
            Op::Shift { a } | Op::Reshape { a } => {
                if want(*a) {
                    let ga = slot(grads, *a, g.len());
                    for (d, &gk) in ga.iter_mut().zip(g) {
                        *d += gk;
                    }
                }
            }
            Op::Clamp { a, lo, hi } => {
                if want(*a) {
                    let x = &nodes[*a].value;
                    let ga = slot(grads, *a, g.len());
                    for k in 0..g.len() {
                        if x[k] > *lo && x[k] < *hi {
                            ga[k] += g[k];
                        }
                    }
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if want(*a) {
                    let vb = &nodes[*b].value;
                    let ga = slot(grads, *a, m * k);
                    S::gemm(m, n, k, g, false, vb, true, ga, true);
                }
                if want(*b) {
                    let va = &nodes[*a].value;
                    let gb = slot(grads, *b, k * n);
                    S::gemm(k, m, n, va, true, g, false, gb, true);
                }
            }
            Op::Transpose { a, rows, cols } => {
                if want(*a) {
                    let ga = slot(grads, *a, rows * cols);
                    for r in 0..*rows {
                        for c in 0..*cols {
                            ga[r * cols + c] += g[c * rows + r];
                        }
                    }
                }
            }
            Op::Concat { parts, outer, inner } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, size) in parts {
                    if want(p) {
                        let blk = size * inner;
                        let gp = slot(grads, p, outer * blk);
                        for o in 0..*outer {
                            let src = &g[o * total * inner + offset * inner..][..blk];
                            for (d, &x) in gp[o * blk..(o + 1) * blk].iter_mut().zip(src) {
                                *d += x;
                            }
                        }
                    }
                    offset += size;
                }
            }
            Op::Softmax { a, outer, n, inner } => {
                if want(*a) {
                    let y = &node.value;
                    let ga = slot(grads, *a, y.len());
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let dot: S = (0..*n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..*n {
                                ga[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Sum { a } => {
                if want(*a) {
                    let len = nodes[*a].value.len();
                    let ga = slot(grads, *a, len);
                    for d in ga.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean { a } => {
                if want(*a) {
                    let len = nodes[*a].value.len();
                    if len > 0 {
                        let share = g[0] / S::from_usize(len).unwrap();
                        let ga = slot(grads, *a, len);
                        for d in ga.iter_mut() {
                            *d += share;
                        }
                    }
                }
            }
            Op::SumAxis { a, outer, n, inner } => {
                if want(*a) {
                    let ga = slot(grads, *a, outer * n * inner);
                    for o in 0..*outer {
                        for j in 0..*n {
                            let dst = &mut ga[(o * n + j) * inner..(o * n + j + 1) * inner];
                            for (d, &x) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d += x;
                            }
                        }
                    }
                }
            }
            Op::Broadcast { a } => {
                if want(*a) {
                    let len = nodes[*a].value.len();
                    let ga = slot(grads, *a, len);
                    for (k, &gk) in g.iter().enumerate() {
                        ga[k % len] += gk;
                    }
                }
            }
            Op::Expand { a, reps } => {
                if want(*a) {
                    let len = nodes[*a].value.len();
                    let ga = slot(grads, *a, len);
                    for (k, chunk) in g.chunks(*reps).enumerate() {
                        ga[k] += chunk.iter().copied().sum::<S>();
                    }
                }
            }
            Op::GatherRows { a, rows, row_len } => {
                if want(*a) {
                    let len = nodes[*a].value.len();
                    let ga = slot(grads, *a, len);
                    for (k, &r) in rows.iter().enumerate() {
                        let src = &g[k * row_len..(k + 1) * row_len];
                        for (d, &x) in ga[r * row_len..(r + 1) * row_len].iter_mut().zip(src) {
                            *d += x;
                        }
                    }
                }
            }
            Op::GridSample { grid, coords, h, w, c } => {
                let (h, w, c) = (*h, *w, *c);
                let cv = &nodes[*coords].value;
                let p = cv.len() / 2;
                if want(*grid) {
                    let gg = slot(grads, *grid, h * w * c);
                    for i in 0..p {
                        let gi = &g[i * c..(i + 1) * c];
                        for (r, col, wt) in corners(cv[2 * i], cv[2 * i + 1], h, w) {
                            let dst = &mut gg[(r * w + col) * c..(r * w + col + 1) * c];
                            for (d, &x) in dst.iter_mut().zip(gi) {
                                *d += wt * x;
                            }
                        }
                    }
                }
                if want(*coords) {
                    let gv = &nodes[*grid].value;
                    let gc = slot(grads, *coords, 2 * p);
                    for i in 0..p {
                        let (u, v) = (cv[2 * i], cv[2 * i + 1]);
                        let (u0, v0) = (u.floor(), v.floor());
                        let (fu, fv) = (u - u0, v - v0);
                        let gi = &g[i * c..(i + 1) * c];
                        let read = |r: isize, col: isize| -> S {
                            if r < 0 || col < 0 || r as usize >= h || col as usize >= w {
                                return S::zero();
                            }
                            let base = (r as usize * w + col as usize) * c;
                            gv[base..base + c].iter().zip(gi).map(|(&a, &b)| a * b).sum()
                        };
                        let (ri, ci) = (v0.to_isize().unwrap(), u0.to_isize().unwrap());
                        let q00 = read(ri, ci);
                        let q01 = read(ri, ci + 1);
                        let q10 = read(ri + 1, ci);
                        let q11 = read(ri + 1, ci + 1);
                        let one = S::one();
                        gc[2 * i] += (one - fv) * (q01 - q00) + fv * (q11 - q10);
                        gc[2 * i + 1] += (one - fu) * (q10 - q00) + fu * (q11 - q01);
                    }
                }
            }
        }
    }
}

fn slot<S: Scalar>(grads: &mut [Option<Vec<S>>], i: usize, len: usize) -> &mut Vec<S> {
    grads[i].get_or_insert_with(|| vec![S::zero(); len])
}

fn sign<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        S::one()
    } else if x < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}

pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// In-bounds bilinear corners `(row, col, weight)` for a sample at `(u, v)`.
fn corners<S: Scalar>(u: S, v: S, h: usize, w: usize) -> impl Iterator<Item = (usize, usize, S)> {
    let (u0, v0) = (u.floor(), v.floor());
    let (fu, fv) = (u - u0, v - v0);
    let (ci, ri) = (u0.to_isize().unwrap_or(isize::MIN / 2), v0.to_isize().unwrap_or(isize::MIN / 2));
    let one = S::one();
    [
        (ri, ci, (one - fu) * (one - fv)),
        (ri, ci + 1, fu * (one - fv)),
        (ri + 1, ci, (one - fu) * fv),
        (ri + 1, ci + 1, fu * fv),
    ]
    .into_iter()
    .filter(move |&(r, c, _)| r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w)
    .map(|(r, c, wt)| (r as usize, c as usize, wt))
}
