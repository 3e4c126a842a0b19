use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, axis_extents};
use super::{matmul_dims, matrix_dims, Result, Tensor, TensorError};
use crate::scalar::Scalar;

/// Recorded operation. Indices refer to earlier nodes on the same tape.
#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias {
        x: usize,
        bias: usize,
    },
    Scale {
        x: usize,
        factor: T,
    },
    AddScalar {
        x: usize,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    Transpose {
        x: usize,
    },
    Reshape {
        x: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Select {
        keep: Rc<[bool]>,
        a: usize,
        b: usize,
    },
    Sum {
        x: usize,
    },
    Mean {
        x: usize,
    },
    Gather {
        table: usize,
        rows: Vec<usize>,
    },
    Softmax {
        x: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu {
        x: usize,
    },
    Sin {
        x: usize,
    },
    Huber {
        x: usize,
        delta: T,
    },
    Rope {
        x: usize,
        positions: Vec<usize>,
        base: f64,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of one forward pass.
///
/// Nodes are pushed in evaluation order, so the node list is always
/// topologically sorted and backward is a single reverse sweep.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Var<'_, T> {}

/// Gradients of a scalar loss with respect to every node that required them.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `var`, or `None` if the loss does not depend on it.
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient for `var`, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn record(&self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var<'_, T> {
        let rg = self.needs(inputs);
        self.push(value, op, rg)
    }

    fn with<R>(&self, id: usize, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.nodes.borrow()[id].value)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(TensorError::BadAxis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for p in parts {
            self.same_tape(*p);
            let s = p.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: base.clone(),
                    right: s,
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        {
            let nodes = self.nodes.borrow();
            for o in 0..outer {
                for p in parts {
                    let v = &nodes[p.id].value;
                    let chunk = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
                }
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.record(
            value,
            Op::Concat {
                inputs: ids.clone(),
                axis,
            },
            &ids,
        ))
    }

    fn same_tape(&self, v: Var<'_, T>) {
        assert!(std::ptr::eq(self, v.tape), "vars from different tapes");
    }

    /// Reverse sweep from a scalar `loss`, seeded with gradient 1.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        self.same_tape(loss);
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(vec![T::one()]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.map(|g| Tensor::new(nodes[id].value.shape().to_vec(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

/// Adds `f`'s contribution into the gradient slot of `id` if that node wants one.
fn acc<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    id: usize,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![T::zero(); nodes[id].value.len()]);
    f(slot);
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn backprop<T: Scalar>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |i: usize| nodes[i].value.data();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(nodes, grads, *a, |d| add_into(d, g));
            acc(nodes, grads, *b, |d| add_into(d, g));
        }
        Op::Sub(a, b) => {
            acc(nodes, grads, *a, |d| add_into(d, g));
            acc(nodes, grads, *b, |d| {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g)
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            acc(nodes, grads, *a, |d| {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(bv) {
                    *d += g * y;
                }
            });
            acc(nodes, grads, *b, |d| {
                for ((d, &g), &x) in d.iter_mut().zip(g).zip(av) {
                    *d += g * x;
                }
            });
        }
        Op::AddBias { x, bias } => {
            acc(nodes, grads, *x, |d| add_into(d, g));
            let width = nodes[*bias].value.len();
            acc(nodes, grads, *bias, |d| {
                for row in g.chunks(width) {
                    add_into(d, row);
                }
            });
        }
        Op::Scale { x, factor } => {
            acc(nodes, grads, *x, |d| {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *factor)
            });
        }
        Op::AddScalar { x } | Op::Reshape { x } => acc(nodes, grads, *x, |d| add_into(d, g)),
        Op::MatMul { a, b } => {
            let (m, k, n) = matmul_dims(nodes[*a].value.shape(), nodes[*b].value.shape())
                .expect("recorded shapes");
            let (av, bv) = (val(*a), val(*b));
            // dA = dC·Bᵀ, dB = Aᵀ·dC
            acc(nodes, grads, *a, |d| {
                kernels::matmul_a_bt_acc(d, g, bv, m, k, n)
            });
            acc(nodes, grads, *b, |d| {
                kernels::matmul_at_b_acc(d, av, g, m, k, n)
            });
        }
        Op::Transpose { x } => {
            let (r, c) = matrix_dims("transpose", nodes[*x].value.shape()).expect("recorded shape");
            let gt = kernels::transpose(g, c, r);
            acc(nodes, grads, *x, |d| add_into(d, &gt));
        }
        Op::Concat { inputs, axis } => {
            let out_shape = nodes[id].value.shape();
            let (outer, total, inner) = axis_extents(out_shape, *axis);
            let mut offset = 0;
            for &input in inputs {
                let width = nodes[input].value.shape()[*axis];
                acc(nodes, grads, input, |d| {
                    for o in 0..outer {
                        let src =
                            &g[(o * total + offset) * inner..(o * total + offset + width) * inner];
                        add_into(&mut d[o * width * inner..(o + 1) * width * inner], src);
                    }
                });
                offset += width;
            }
        }
        Op::Slice { x, axis, start } => {
            let (outer, full, inner) = axis_extents(nodes[*x].value.shape(), *axis);
            let len = nodes[id].value.shape()[*axis];
            acc(nodes, grads, *x, |d| {
                for o in 0..outer {
                    let dst = &mut d[(o * full + start) * inner..(o * full + start + len) * inner];
                    add_into(dst, &g[o * len * inner..(o + 1) * len * inner]);
                }
            });
        }
        Op::Select { keep, a, b } => {
            acc(nodes, grads, *a, |d| {
                for ((d, &g), &k) in d.iter_mut().zip(g).zip(keep.iter()) {
                    if k {
                        *d += g;
                    }
                }
            });
            acc(nodes, grads, *b, |d| {
                for ((d, &g), &k) in d.iter_mut().zip(g).zip(keep.iter()) {
                    if !k {
                        *d += g;
                    }
                }
            });
        }
        Op::Sum { x } => acc(nodes, grads, *x, |d| d.iter_mut().for_each(|d| *d += g[0])),
        Op::Mean { x } => {
            let scale = g[0] / T::lit(nodes[*x].value.len() as f64);
            acc(nodes, grads, *x, |d| d.iter_mut().for_each(|d| *d += scale));
        }
        Op::Gather { table, rows } => {
            let width = nodes[*table].value.shape()[1];
            acc(nodes, grads, *table, |d| {
                for (i, &r) in rows.iter().enumerate() {
                    add_into(
                        &mut d[r * width..(r + 1) * width],
                        &g[i * width..(i + 1) * width],
                    );
                }
            });
        }
        Op::Softmax { x } => {
            // dx = p ⊙ (g − Σ g⊙p) per row; masked cells have p = 0 and get nothing.
            let p = nodes[id].value.data();
            let cols = *nodes[id].value.shape().last().expect("softmax rank");
            acc(nodes, grads, *x, |d| {
                for ((drow, grow), prow) in
                    d.chunks_mut(cols).zip(g.chunks(cols)).zip(p.chunks(cols))
                {
                    let dot: T = grow.iter().zip(prow).map(|(&g, &p)| g * p).sum();
                    for ((d, &g), &p) in drow.iter_mut().zip(grow).zip(prow) {
                        *d += p * (g - dot);
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let gv = val(*gain);
            let width = gv.len();
            let n = T::lit(width as f64);
            acc(nodes, grads, *x, |d| {
                for (r, (drow, grow)) in d.chunks_mut(width).zip(g.chunks(width)).enumerate() {
                    let xh = &xhat[r * width..(r + 1) * width];
                    let dxhat: Vec<T> = grow.iter().zip(gv).map(|(&g, &w)| g * w).collect();
                    let mean_d = dxhat.iter().copied().sum::<T>() / n;
                    let mean_dx = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for ((d, &dh), &xh) in drow.iter_mut().zip(&dxhat).zip(xh) {
                        *d += rstd[r] * (dh - mean_d - xh * mean_dx);
                    }
                }
            });
            acc(nodes, grads, *gain, |d| {
                for (grow, xrow) in g.chunks(width).zip(xhat.chunks(width)) {
                    for ((d, &g), &xh) in d.iter_mut().zip(grow).zip(xrow) {
                        *d += g * xh;
                    }
                }
            });
            acc(nodes, grads, *bias, |d| {
                for grow in g.chunks(width) {
                    add_into(d, grow);
                }
            });
        }
        Op::Gelu { x } => {
            let xv = val(*x);
            acc(nodes, grads, *x, |d| {
                for ((d, &g), &x) in d.iter_mut().zip(g).zip(xv) {
                    *d += g * kernels::gelu_derivative(x);
                }
            });
        }
        Op::Sin { x } => {
            let xv = val(*x);
            acc(nodes, grads, *x, |d| {
                for ((d, &g), &x) in d.iter_mut().zip(g).zip(xv) {
                    *d += g * x.cos();
                }
            });
        }
        Op::Huber { x, delta } => {
            let xv = val(*x);
            acc(nodes, grads, *x, |d| {
                for ((d, &g), &r) in d.iter_mut().zip(g).zip(xv) {
                    let slope = if r.abs() <= *delta {
                        r
                    } else {
                        *delta * r.signum()
                    };
                    *d += g * slope;
                }
            });
        }
        Op::Rope { x, positions, base } => {
            let dim = nodes[*x].value.shape()[1];
            let back = kernels::rope_rotate(g, dim, positions, *base, -1.0);
            acc(nodes, grads, *x, |d| add_into(d, &back));
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with(self.id, |t| t.shape().to_vec())
    }

    /// Copy of the recorded value.
    pub fn value(&self) -> Tensor<T> {
        self.tape.with(self.id, Clone::clone)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, op: Op<T>, f: impl FnOnce(&Tensor<T>) -> Result<Tensor<T>>) -> Result<Self> {
        let value = self.tape.with(self.id, f)?;
        Ok(self.tape.record(value, op, &[self.id]))
    }

    fn zip_same(
        self,
        other: Self,
        name: &'static str,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Self> {
        self.tape.same_tape(other);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.shape() != b.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: name,
                    left: a.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.tape.record(value, op, &[self.id, other.id]))
    }

    pub fn add(self, other: Self) -> Result<Self> {
        self.zip_same(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Self) -> Result<Self> {
        self.zip_same(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    /// Elementwise product.
    pub fn mul(self, other: Self) -> Result<Self> {
        self.zip_same(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    /// Adds a `[d]` vector to every trailing-axis slice of a `[.., d]` tensor.
    pub fn add_bias(self, bias: Self) -> Result<Self> {
        self.tape.same_tape(bias);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (x, b) = (&nodes[self.id].value, &nodes[bias.id].value);
            if b.rank() != 1 || x.shape().last() != Some(&b.len()) {
                return Err(TensorError::ShapeMismatch {
                    op: "add_bias",
                    left: x.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(b.len()) {
                add_into(row, b.data());
            }
            Tensor::new(x.shape().to_vec(), data)?
        };
        Ok(self.tape.record(
            value,
            Op::AddBias {
                x: self.id,
                bias: bias.id,
            },
            &[self.id, bias.id],
        ))
    }

    pub fn scale(self, factor: T) -> Result<Self> {
        self.unary(Op::Scale { x: self.id, factor }, |t| {
            Ok(t.map(|v| v * factor))
        })
    }

    pub fn add_scalar(self, c: T) -> Result<Self> {
        self.unary(Op::AddScalar { x: self.id }, |t| Ok(t.map(|v| v + c)))
    }

    pub fn neg(self) -> Result<Self> {
        self.scale(-T::one())
    }

    pub fn matmul(self, other: Self) -> Result<Self> {
        self.tape.same_tape(other);
        let value = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].value.matmul(&nodes[other.id].value)?
        };
        Ok(self.tape.record(
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
            },
            &[self.id, other.id],
        ))
    }

    /// Transpose of a matrix.
    pub fn t(self) -> Result<Self> {
        self.unary(Op::Transpose { x: self.id }, Tensor::transpose)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        self.unary(Op::Reshape { x: self.id }, |t| t.clone().reshape(shape))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Self> {
        self.unary(
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
            |t| {
                let shape = t.shape();
                if axis >= shape.len() {
                    return Err(TensorError::BadAxis {
                        op: "slice",
                        axis,
                        rank: shape.len(),
                    });
                }
                if len == 0 || start + len > shape[axis] {
                    return Err(TensorError::Invalid {
                        op: "slice",
                        msg: format!(
                            "range {start}..{} outside axis {axis} of {shape:?}",
                            start + len
                        ),
                    });
                }
                let (outer, full, inner) = axis_extents(shape, axis);
                let mut data = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    data.extend_from_slice(
                        &t.data()[(o * full + start) * inner..(o * full + start + len) * inner],
                    );
                }
                let mut out = shape.to_vec();
                out[axis] = len;
                Tensor::new(out, data)
            },
        )
    }

    /// Elementwise choice: `self` where `keep` is true, `other` elsewhere.
    pub fn select(self, keep: Rc<[bool]>, other: Self) -> Result<Self> {
        self.tape.same_tape(other);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.shape() != b.shape() || keep.len() != a.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "select",
                    left: a.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .zip(keep.iter())
                .map(|((&x, &y), &k)| if k { x } else { y })
                .collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        let op = Op::Select {
            keep,
            a: self.id,
            b: other.id,
        };
        Ok(self.tape.record(value, op, &[self.id, other.id]))
    }

    pub fn sum(self) -> Result<Self> {
        self.unary(Op::Sum { x: self.id }, |t| Ok(Tensor::scalar(t.sum())))
    }

    pub fn mean(self) -> Result<Self> {
        self.unary(Op::Mean { x: self.id }, |t| {
            Ok(Tensor::scalar(t.sum() / T::lit(t.len() as f64)))
        })
    }

    /// Picks rows of a `[n, d]` table.
    pub fn gather_rows(self, rows: &[usize]) -> Result<Self> {
        self.unary(
            Op::Gather {
                table: self.id,
                rows: rows.to_vec(),
            },
            |t| {
                let (n, d) = matrix_dims("gather_rows", t.shape())?;
                if rows.is_empty() {
                    return Err(TensorError::Invalid {
                        op: "gather_rows",
                        msg: "no rows requested".into(),
                    });
                }
                let mut data = Vec::with_capacity(rows.len() * d);
                for &r in rows {
                    if r >= n {
                        return Err(TensorError::Invalid {
                            op: "gather_rows",
                            msg: format!("row {r} out of range for {n} rows"),
                        });
                    }
                    data.extend_from_slice(t.row(r));
                }
                Tensor::new(vec![rows.len(), d], data)
            },
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(self) -> Result<Self> {
        self.softmax_impl(None)
    }

    /// Softmax over the last axis treating cells with `allowed == false` as `-inf`.
    pub fn softmax_rows_masked(self, allowed: Rc<[bool]>) -> Result<Self> {
        self.softmax_impl(Some(allowed))
    }

    fn softmax_impl(self, allowed: Option<Rc<[bool]>>) -> Result<Self> {
        let value = self.tape.with(self.id, |t| {
            let cols = *t.shape().last().ok_or(TensorError::Invalid {
                op: "softmax_rows",
                msg: "rank-0 input".into(),
            })?;
            if let Some(m) = &allowed {
                if m.len() != t.len() {
                    return Err(TensorError::ShapeMismatch {
                        op: "softmax_rows",
                        left: t.shape().to_vec(),
                        right: vec![m.len()],
                    });
                }
                if m.chunks(cols).any(|row| !row.contains(&true)) {
                    return Err(TensorError::Invalid {
                        op: "softmax_rows",
                        msg: "mask leaves a row with no allowed cell".into(),
                    });
                }
            }
            Tensor::new(
                t.shape().to_vec(),
                kernels::softmax_rows(t.data(), cols, allowed.as_deref()),
            )
        })?;
        Ok(self
            .tape
            .record(value, Op::Softmax { x: self.id }, &[self.id]))
    }

    /// Normalizes each trailing-axis slice to zero mean and unit variance, then applies gain and bias.
    pub fn layer_norm(self, gain: Self, bias: Self, eps: T) -> Result<Self> {
        self.tape.same_tape(gain);
        self.tape.same_tape(bias);
        let (value, xhat, rstd) = {
            let nodes = self.tape.nodes.borrow();
            let (x, g, b) = (
                &nodes[self.id].value,
                &nodes[gain.id].value,
                &nodes[bias.id].value,
            );
            let d = *x.shape().last().unwrap_or(&0);
            if d < 2 || g.shape() != [d] || b.shape() != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: x.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            let n = T::lit(d as f64);
            let mut out = Vec::with_capacity(x.len());
            let mut xhat = Vec::with_capacity(x.len());
            let mut rstd = Vec::with_capacity(x.len() / d);
            for row in x.data().chunks(d) {
                let mean = row.iter().copied().sum::<T>() / n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                let r = T::one() / (var + eps).sqrt();
                rstd.push(r);
                for ((&v, &gv), &bv) in row.iter().zip(g.data()).zip(b.data()) {
                    let h = (v - mean) * r;
                    xhat.push(h);
                    out.push(h * gv + bv);
                }
            }
            (Tensor::new(x.shape().to_vec(), out)?, xhat, rstd)
        };
        Ok(self.tape.record(
            value,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
            &[self.id, gain.id, bias.id],
        ))
    }

    pub fn gelu(self) -> Result<Self> {
        self.unary(Op::Gelu { x: self.id }, |t| Ok(t.map(kernels::gelu)))
    }

    pub fn sin(self) -> Result<Self> {
        self.unary(Op::Sin { x: self.id }, |t| Ok(t.map(T::sin)))
    }

    /// Elementwise Huber penalty: `r²/2` inside `delta`, linear outside.
    pub fn huber(self, delta: T) -> Result<Self> {
        let half = T::lit(0.5);
        self.unary(Op::Huber { x: self.id, delta }, |t| {
            Ok(t.map(|r| {
                if r.abs() <= delta {
                    half * r * r
                } else {
                    delta * (r.abs() - half * delta)
                }
            }))
        })
    }

    /// Rotary position embedding over rows of a `[S, dim]` matrix (`dim` even).
    pub fn rope(self, positions: &[usize], base: f64) -> Result<Self> {
        self.unary(
            Op::Rope {
                x: self.id,
                positions: positions.to_vec(),
                base,
            },
            |t| {
                let (s, dim) = matrix_dims("rope", t.shape())?;
                if dim % 2 != 0 || positions.len() != s {
                    return Err(TensorError::Invalid {
                        op: "rope",
                        msg: format!(
                            "shape {:?} with {} positions (need even width)",
                            t.shape(),
                            positions.len()
                        ),
                    });
                }
                Tensor::new(
                    t.shape().to_vec(),
                    kernels::rope_rotate(t.data(), dim, positions, base, 1.0),
                )
            },
        )
    }
}
