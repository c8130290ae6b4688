use std::cell::RefCell;
use std::rc::Rc;

use super::segment::{segment_counts, segment_mean, segment_softmax};
use super::{Real, Result, Rng, Tensor, TensorError};

/// A recorded primitive. Inputs are tape indices, which always precede the
/// node that consumes them.
#[derive(Clone, Debug)]
pub enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// `R×C + row` with the row broadcast over every row.
    AddRow(usize, usize),
    MulRow(usize, usize),
    /// `R×C ⊙ col` with `col` of length `R` broadcast over columns.
    MulCol(usize, usize),
    Scale(usize, T),
    AddScalar(usize, T),
    Sum(usize),
    SumAxis(usize, usize),
    MeanAxis(usize, usize),
    GatherRows(usize, Rc<[usize]>),
    Concat(Vec<usize>, usize),
    Reshape(usize),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    Sqrt(usize),
    Softplus(usize),
    PRelu(usize, usize),
    Dropout(usize, Rc<Vec<T>>),
    SegmentSoftmax(usize, Rc<[usize]>),
    SegmentMean(usize, Rc<[usize]>, usize),
}

impl<T> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sum(..) => "sum",
            Op::SumAxis(..) => "sum_axis",
            Op::MeanAxis(..) => "mean_axis",
            Op::GatherRows(..) => "gather_rows",
            Op::Concat(..) => "concat",
            Op::Reshape(..) => "reshape",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sigmoid(..) => "sigmoid",
            Op::Sqrt(..) => "sqrt",
            Op::Softplus(..) => "softplus",
            Op::PRelu(..) => "prelu",
            Op::Dropout(..) => "dropout",
            Op::SegmentSoftmax(..) => "segment_softmax",
            Op::SegmentMean(..) => "segment_mean",
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records every primitive applied to its variables so gradients can be
/// propagated backwards. One tape per forward pass, confined to one thread.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: bool,
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A tape that keeps forward values only; [`Tape::backward`] on it yields
    /// zero gradients.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, self.recording)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    pub fn op_name(&self, v: Var<'_, T>) -> &'static str {
        self.nodes.borrow()[v.id].op.name()
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        debug_assert!(value.all_finite(), "non-finite output from {}", op.name());
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let (op, requires_grad) = if self.recording && requires_grad {
            (op, true)
        } else {
            (Op::Leaf, false)
        };
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn grad_flag(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn check(&self, v: Var<'_, T>) -> Result<()> {
        if std::ptr::eq(self, v.tape) {
            Ok(())
        } else {
            Err(TensorError::ForeignVar)
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        self.check(loss)?;
        let nodes = self.nodes.borrow();
        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(root.value.shape(), T::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, contrib) in local_grads(&nodes, node, &g) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

/// Gradients from one backward sweep, indexed by variable.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`; zero if the loss does not
    /// depend on it.
    pub fn get(&self, v: Var<'_, T>) -> Tensor<T> {
        self.grads[v.id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Tensor<T> {
        self.grads[v.id]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }
}

fn shape_err<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn col_sums<T: Real>(g: &Tensor<T>) -> Vec<T> {
    let (r, c) = g.dims2();
    let mut out = vec![T::zero(); c];
    for i in 0..r {
        for (o, &v) in out.iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    out
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn local_grads<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &Tensor<T>) -> Vec<(usize, Tensor<T>)> {
    let val = |i: usize| -> &Tensor<T> { &nodes[i].value };
    let out = &node.value;
    match &node.op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = av.dims2();
            let (_, n) = bv.dims2();
            let mut ga = vec![T::zero(); m * k];
            let mut gb = vec![T::zero(); k * n];
            if nodes[*a].requires_grad {
                T::gemm(m, n, k, g.data(), false, bv.data(), true, &mut ga, false);
            }
            if nodes[*b].requires_grad {
                T::gemm(k, m, n, av.data(), true, g.data(), false, &mut gb, false);
            }
            vec![
                (*a, Tensor::new(av.shape().to_vec(), ga).unwrap()),
                (*b, Tensor::new(bv.shape().to_vec(), gb).unwrap()),
            ]
        }
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
        Op::Mul(a, b) => vec![
            (*a, g.zip_map(val(*b), |g, y| g * y)),
            (*b, g.zip_map(val(*a), |g, x| g * x)),
        ],
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let ga = g.zip_map(bv, |g, y| g / y);
            let gb = Tensor::new(
                bv.shape().to_vec(),
                g.data()
                    .iter()
                    .zip(av.data())
                    .zip(bv.data())
                    .map(|((&g, &x), &y)| -g * x / (y * y))
                    .collect(),
            )
            .unwrap();
            vec![(*a, ga), (*b, gb)]
        }
        Op::AddRow(a, row) => {
            let rv = val(*row);
            vec![
                (*a, g.clone()),
                (*row, Tensor::new(rv.shape().to_vec(), col_sums(g)).unwrap()),
            ]
        }
        Op::MulRow(a, row) => {
            let (av, rv) = (val(*a), val(*row));
            let (r, c) = av.dims2();
            let mut ga = g.clone();
            let mut gr = vec![T::zero(); c];
            for i in 0..r {
                for j in 0..c {
                    let gij = g.data()[i * c + j];
                    ga.data_mut()[i * c + j] = gij * rv.data()[j];
                    gr[j] += gij * av.data()[i * c + j];
                }
            }
            vec![(*a, ga), (*row, Tensor::new(rv.shape().to_vec(), gr).unwrap())]
        }
        Op::MulCol(a, col) => {
            let (av, cv) = (val(*a), val(*col));
            let (r, c) = av.dims2();
            let mut ga = g.clone();
            let mut gc = vec![T::zero(); r];
            for i in 0..r {
                for j in 0..c {
                    let gij = g.data()[i * c + j];
                    ga.data_mut()[i * c + j] = gij * cv.data()[i];
                    gc[i] += gij * av.data()[i * c + j];
                }
            }
            vec![(*a, ga), (*col, Tensor::new(cv.shape().to_vec(), gc).unwrap())]
        }
        Op::Scale(a, s) => vec![(*a, g.map(|v| v * *s))],
        Op::AddScalar(a, _) => vec![(*a, g.clone())],
        Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
        Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
            let av = val(*a);
            let (r, c) = av.dims2();
            let scale = match node.op {
                Op::MeanAxis(..) => T::one() / T::from_usize(if *axis == 0 { r } else { c }).unwrap(),
                _ => T::one(),
            };
            let mut ga = vec![T::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    let up = if *axis == 0 { g.data()[j] } else { g.data()[i] };
                    ga[i * c + j] = up * scale;
                }
            }
            vec![(*a, Tensor::new(av.shape().to_vec(), ga).unwrap())]
        }
        Op::GatherRows(table, idx) => {
            let tv = val(*table);
            let (_, c) = tv.dims2();
            let mut gt = Tensor::zeros(tv.shape());
            for (i, &r) in idx.iter().enumerate() {
                let dst = &mut gt.data_mut()[r * c..(r + 1) * c];
                for (d, &v) in dst.iter_mut().zip(g.row(i)) {
                    *d += v;
                }
            }
            vec![(*table, gt)]
        }
        Op::Concat(parts, axis) => {
            let (rows, cols) = g.dims2();
            let mut out_parts = Vec::with_capacity(parts.len());
            let mut offset = 0;
            for &p in parts {
                let pv = val(p);
                let (pr, pc) = pv.dims2();
                let data = if *axis == 0 {
                    g.data()[offset * cols..(offset + pr) * cols].to_vec()
                } else {
                    (0..rows)
                        .flat_map(|i| g.row(i)[offset..offset + pc].iter().copied())
                        .collect()
                };
                offset += if *axis == 0 { pr } else { pc };
                out_parts.push((p, Tensor::new(pv.shape().to_vec(), data).unwrap()));
            }
            out_parts
        }
        Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape()).unwrap())],
        Op::Exp(a) => vec![(*a, g.zip_map(out, |g, y| g * y))],
        Op::Log(a) => vec![(*a, g.zip_map(val(*a), |g, x| g / x))],
        Op::Sigmoid(a) => vec![(*a, g.zip_map(out, |g, y| g * y * (T::one() - y)))],
        Op::Sqrt(a) => vec![(*a, g.zip_map(out, |g, y| g / (y + y)))],
        Op::Softplus(a) => vec![(*a, g.zip_map(val(*a), |g, x| g * sigmoid(x)))],
        Op::PRelu(x, slope) => {
            let (xv, sv) = (val(*x), val(*slope));
            let a = sv.item();
            let mut gs = T::zero();
            let gx = Tensor::new(
                xv.shape().to_vec(),
                g.data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&g, &x)| {
                        if x > T::zero() {
                            g
                        } else {
                            gs += g * x;
                            g * a
                        }
                    })
                    .collect(),
            )
            .unwrap();
            vec![(*x, gx), (*slope, Tensor::full(sv.shape(), gs))]
        }
        Op::Dropout(a, mask) => vec![(
            *a,
            Tensor::new(
                g.shape().to_vec(),
                g.data().iter().zip(mask.iter()).map(|(&g, &m)| g * m).collect(),
            )
            .unwrap(),
        )],
        Op::SegmentSoftmax(a, seg) => {
            let n_groups = seg.iter().max().map_or(0, |m| m + 1);
            let mut dot = vec![T::zero(); n_groups];
            for ((&gi, &yi), &s) in g.data().iter().zip(out.data()).zip(seg.iter()) {
                dot[s] += gi * yi;
            }
            let ga = g
                .data()
                .iter()
                .zip(out.data())
                .zip(seg.iter())
                .map(|((&gi, &yi), &s)| yi * (gi - dot[s]))
                .collect();
            vec![(*a, Tensor::new(g.shape().to_vec(), ga).unwrap())]
        }
        Op::SegmentMean(a, seg, n_groups) => {
            let av = val(*a);
            let (_, c) = av.dims2();
            let counts = segment_counts(seg, *n_groups);
            let mut ga = vec![T::zero(); av.len()];
            for (r, &s) in seg.iter().enumerate() {
                let inv = T::one() / T::from_usize(counts[s]).unwrap();
                for j in 0..c {
                    ga[r * c + j] = g.data()[s * c + j] * inv;
                }
            }
            vec![(*a, Tensor::new(av.shape().to_vec(), ga).unwrap())]
        }
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    fn same_tape(&self, other: Var<'_, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(TensorError::ForeignVar)
        }
    }

    fn unary(self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let rg = self.tape.grad_flag(&[self.id]);
        self.tape.push(value, op, rg)
    }

    fn binary(self, other: Var<'t, T>, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let rg = self.tape.grad_flag(&[self.id, other.id]);
        self.tape.push(value, op, rg)
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other)?;
        let v = self.value().matmul(&other.value())?;
        Ok(self.binary(other, v, Op::MatMul(self.id, other.id)))
    }

    fn elementwise(
        self,
        other: Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var<'t, T>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(shape_err(name, &a, &b));
        }
        Ok(self.binary(other, a.zip_map(&b, f), op))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    fn row_broadcast(
        self,
        row: Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var<'t, T>> {
        self.same_tape(row)?;
        let (a, r) = (self.value(), row.value());
        let (rows, cols) = a.dims2();
        if a.rank() != 2 || r.len() != cols {
            return Err(shape_err(name, &a, &r));
        }
        let mut out = a.as_ref().clone();
        for i in 0..rows {
            for (o, &rv) in out.data_mut()[i * cols..(i + 1) * cols].iter_mut().zip(r.data()) {
                *o = f(*o, rv);
            }
        }
        Ok(self.binary(row, out, op))
    }

    /// Adds a length-`C` vector to every row.
    pub fn add_row(self, row: Var<'t, T>) -> Result<Var<'t, T>> {
        self.row_broadcast(row, "add_row", |a, b| a + b, Op::AddRow(self.id, row.id))
    }

    /// Scales every row elementwise by a length-`C` vector.
    pub fn mul_row(self, row: Var<'t, T>) -> Result<Var<'t, T>> {
        self.row_broadcast(row, "mul_row", |a, b| a * b, Op::MulRow(self.id, row.id))
    }

    /// Scales row `r` by `col[r]`.
    pub fn mul_col(self, col: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(col)?;
        let (a, c) = (self.value(), col.value());
        let (rows, cols) = a.dims2();
        if a.rank() != 2 || c.len() != rows {
            return Err(shape_err("mul_col", &a, &c));
        }
        let mut out = a.as_ref().clone();
        for i in 0..rows {
            let s = c.data()[i];
            out.data_mut()[i * cols..(i + 1) * cols].iter_mut().for_each(|v| *v *= s);
        }
        Ok(self.binary(col, out, Op::MulCol(self.id, col.id)))
    }

    pub fn scale(self, s: T) -> Var<'t, T> {
        let v = self.value().map(|x| x * s);
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, s: T) -> Var<'t, T> {
        let v = self.value().map(|x| x + s);
        self.unary(v, Op::AddScalar(self.id, s))
    }

    pub fn sum(self) -> Var<'t, T> {
        let s = self.value().data().iter().copied().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().len().max(1);
        self.sum().scale(T::one() / T::from_usize(n).unwrap())
    }

    fn reduce_axis(self, axis: usize, mean: bool) -> Result<Var<'t, T>> {
        let a = self.value();
        if a.rank() != 2 || axis > 1 {
            return Err(TensorError::ShapeMismatch {
                op: "sum_axis",
                lhs: a.shape().to_vec(),
                rhs: vec![axis],
            });
        }
        let (r, c) = a.dims2();
        let mut out = if axis == 0 { col_sums(&a) } else { (0..r).map(|i| a.row(i).iter().copied().sum()).collect() };
        if mean {
            let n = T::from_usize(if axis == 0 { r } else { c }).unwrap();
            out.iter_mut().for_each(|v| *v = *v / n);
        }
        let len = out.len();
        let op = if mean { Op::MeanAxis(self.id, axis) } else { Op::SumAxis(self.id, axis) };
        Ok(self.unary(Tensor::new(vec![len], out).unwrap(), op))
    }

    /// Sum of a rank-2 tensor over `axis` (0 = rows collapse, 1 = columns
    /// collapse), giving a rank-1 result.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, T>> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, T>> {
        self.reduce_axis(axis, true)
    }

    /// Rows of `self` selected by `indices` (repetition allowed).
    pub fn gather_rows(self, indices: Rc<[usize]>) -> Result<Var<'t, T>> {
        let t = self.value();
        let (rows, cols) = t.dims2();
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices.iter() {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange { index: i, bound: rows });
            }
            out.extend_from_slice(t.row(i));
        }
        let v = Tensor::new(vec![indices.len(), cols], out).unwrap();
        Ok(self.unary(v, Op::GatherRows(self.id, indices)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    pub fn exp(self) -> Var<'t, T> {
        let v = self.value().map(T::exp);
        self.unary(v, Op::Exp(self.id))
    }

    pub fn log(self) -> Var<'t, T> {
        let v = self.value().map(T::ln);
        self.unary(v, Op::Log(self.id))
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let v = self.value().map(sigmoid);
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn sqrt(self) -> Var<'t, T> {
        let v = self.value().map(T::sqrt);
        self.unary(v, Op::Sqrt(self.id))
    }

    /// `log(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(self) -> Var<'t, T> {
        let v = self.value().map(softplus);
        self.unary(v, Op::Softplus(self.id))
    }

    /// `x` where positive, `a·x` elsewhere, with a scalar learnable slope.
    pub fn prelu(self, slope: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(slope)?;
        let s = slope.value();
        if s.len() != 1 {
            return Err(shape_err("prelu", &self.value(), &s));
        }
        let a = s.item();
        let v = self.value().map(|x| if x > T::zero() { x } else { a * x });
        Ok(self.binary(slope, v, Op::PRelu(self.id, slope.id)))
    }

    /// Inverted dropout. Identity when `training` is false or `p == 0`.
    pub fn dropout(self, p: f64, rng: &mut Rng, training: bool) -> Result<Var<'t, T>> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::BadDropout(p));
        }
        if !training || p == 0.0 {
            return Ok(self);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let x = self.value();
        let mask: Vec<T> = (0..x.len())
            .map(|_| if rng.uniform() < p { T::zero() } else { keep })
            .collect();
        let v = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect(),
        )
        .unwrap();
        Ok(self.unary(v, Op::Dropout(self.id, Rc::new(mask))))
    }

    /// Softmax within groups of a rank-1 score vector.
    pub fn segment_softmax(self, segments: Rc<[usize]>) -> Result<Var<'t, T>> {
        let s = self.value();
        if s.len() != segments.len() {
            return Err(TensorError::ShapeMismatch {
                op: "segment_softmax",
                lhs: s.shape().to_vec(),
                rhs: vec![segments.len()],
            });
        }
        let v = Tensor::new(vec![s.len()], segment_softmax(s.data(), &segments)).unwrap();
        Ok(self.unary(v, Op::SegmentSoftmax(self.id, segments)))
    }

    pub fn segment_mean(self, segments: Rc<[usize]>, n_groups: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (rows, _) = x.dims2();
        if x.rank() != 2 || rows != segments.len() {
            return Err(TensorError::ShapeMismatch {
                op: "segment_mean",
                lhs: x.shape().to_vec(),
                rhs: vec![segments.len()],
            });
        }
        if let Some(&bad) = segments.iter().find(|&&g| g >= n_groups) {
            return Err(TensorError::IndexOutOfRange { index: bad, bound: n_groups });
        }
        let v = segment_mean(&x, &segments, n_groups);
        Ok(self.unary(v, Op::SegmentMean(self.id, segments, n_groups)))
    }
}

/// Concatenation of rank-2 variables along `axis`.
pub fn concat<'t, T: Real>(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
    let first = parts.first().ok_or(TensorError::ShapeMismatch {
        op: "concat",
        lhs: vec![],
        rhs: vec![],
    })?;
    let tape = first.tape;
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let (r0, c0) = values[0].dims2();
    for (p, v) in parts.iter().zip(&values) {
        first.same_tape(*p)?;
        let (r, c) = v.dims2();
        if v.rank() != 2 || (axis == 0 && c != c0) || (axis == 1 && r != r0) || axis > 1 {
            return Err(shape_err("concat", &values[0], v));
        }
    }
    let out = if axis == 0 {
        let rows = values.iter().map(|v| v.dims2().0).sum();
        let data = values.iter().flat_map(|v| v.data().iter().copied()).collect();
        Tensor::new(vec![rows, c0], data)?
    } else {
        let cols = values.iter().map(|v| v.dims2().1).sum();
        let data = (0..r0)
            .flat_map(|i| values.iter().flat_map(move |v| v.row(i).iter().copied()))
            .collect();
        Tensor::new(vec![r0, cols], data)?
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let rg = tape.grad_flag(&ids);
    Ok(tape.push(out, Op::Concat(ids, axis), rg))
}
