use std::borrow::Cow;

use super::{kernels, Element, Tensor};
use crate::error::TensorError;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, inv_std: Vec<T> },
    Relu(Var),
    L2Normalize { x: Var, norms: Vec<T>, eps: T },
    RowMax { x: Var, idx: Vec<usize> },
    Scale(Var, T),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Sum(Var),
    Mean(Var),
    Resize { x: Var, from: (usize, usize), to: (usize, usize) },
    SelectCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    PairProduct(Var, Var),
    Reshape(Var),
    WeightedPairMax { a: Var, w: Var, idx: Vec<u32> },
}

#[derive(Debug)]
struct Node<'a, T: Element> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    tracked: bool,
}

/// Linear record of forward operations, replayed backward by
/// [`Tape::backward`].
///
/// Nodes are appended in evaluation order, so the index order is a
/// topological order. Leaves may borrow their tensors (`'a`) so that
/// parameters are not copied per image.
#[derive(Debug, Default)]
pub struct Tape<'a, T: Element = f64> {
    nodes: Vec<Node<'a, T>>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T: Element = f64> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
    visit_order: Vec<usize>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the loss with respect to `v`; zeros when the loss does
    /// not depend on it.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Node indices in the order the backward sweep processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visit_order
    }
}

type VResult = Result<Var, TensorError>;

impl<'a, T: Element> Tape<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor<T>>, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradient-tracked leaf owning its value.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(Cow::Owned(value), true)
    }

    /// Gradient-tracked leaf borrowing its value.
    pub fn leaf_ref(&mut self, value: &'a Tensor<T>) -> Var {
        self.push_leaf(Cow::Borrowed(value), true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(Cow::Owned(value), false)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor<T>) -> Var {
        self.push_leaf(Cow::Borrowed(value), false)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> VResult {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            tracked,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> VResult {
        let v = kernels::add(self.value(a), self.value(b))?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> VResult {
        let v = kernels::sub(self.value(a), self.value(b))?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> VResult {
        let v = kernels::mul(self.value(a), self.value(b))?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> VResult {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        self.push("matmul", v, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> VResult {
        let v = kernels::matmul_nt(self.value(a), self.value(b))?;
        self.push("matmul_nt", v, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> VResult {
        let v = kernels::transpose(self.value(a))?;
        self.push("transpose", v, Op::Transpose(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> VResult {
        let v = kernels::softmax_rows(self.value(a))?;
        self.push("softmax_rows", v, Op::SoftmaxRows(a), &[a])
    }

    /// Row layer normalization without the affine part.
    pub fn layer_norm(&mut self, a: Var, eps: T) -> VResult {
        let (v, inv_std) = kernels::layer_norm_rows(self.value(a), eps)?;
        self.push("layer_norm", v, Op::LayerNorm { x: a, inv_std }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> VResult {
        let v = kernels::relu(self.value(a));
        self.push("relu", v, Op::Relu(a), &[a])
    }

    pub fn l2_normalize_rows(&mut self, a: Var, eps: T) -> VResult {
        let (v, norms) = kernels::l2_normalize_rows(self.value(a), eps)?;
        self.push("l2_normalize_rows", v, Op::L2Normalize { x: a, norms, eps }, &[a])
    }

    /// Per-row maximum (`m×1`). The gradient reaches only the selected
    /// element of each row.
    pub fn row_max(&mut self, a: Var) -> Result<(Var, Vec<usize>), TensorError> {
        let (v, idx) = kernels::row_max(self.value(a))?;
        let out = self.push("row_max", v, Op::RowMax { x: a, idx: idx.clone() }, &[a])?;
        Ok((out, idx))
    }

    pub fn scale(&mut self, a: Var, s: T) -> VResult {
        let v = kernels::scale(self.value(a), s);
        self.push("scale", v, Op::Scale(a, s), &[a])
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> VResult {
        let v = kernels::add_row(self.value(a), self.value(row))?;
        self.push("add_row", v, Op::AddRow(a, row), &[a, row])
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> VResult {
        let v = kernels::mul_row(self.value(a), self.value(row))?;
        self.push("mul_row", v, Op::MulRow(a, row), &[a, row])
    }

    pub fn sum(&mut self, a: Var) -> VResult {
        let v = Tensor::scalar(self.value(a).sum());
        self.push("sum", v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> VResult {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / T::from_f64(t.len() as f64));
        self.push("mean", v, Op::Mean(a), &[a])
    }

    pub fn bilinear_resize(&mut self, a: Var, from: (usize, usize), to: (usize, usize)) -> VResult {
        let v = kernels::bilinear_resize(self.value(a), from, to)?;
        self.push("bilinear_resize", v, Op::Resize { x: a, from, to }, &[a])
    }

    pub fn select_cols(&mut self, a: Var, start: usize, end: usize) -> VResult {
        let v = kernels::select_cols(self.value(a), start, end)?;
        self.push("select_cols", v, Op::SelectCols { x: a, start }, &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> VResult {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = kernels::concat_cols(&tensors)?;
        self.push("concat_cols", v, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn pair_product(&mut self, a: Var, b: Var) -> VResult {
        let v = kernels::pair_product(self.value(a), self.value(b))?;
        self.push("pair_product", v, Op::PairProduct(a, b), &[a, b])
    }

    /// `Σ_{i,j} w[i][j] · max_c a[i][c] · a[j][c]` for `a: n×k`, `w: n×n`.
    /// Fuses `pair_product → row_max → reshape → mul → sum`; ties in the
    /// max go to the lowest column.
    pub fn weighted_pair_max(&mut self, a: Var, w: Var) -> VResult {
        let (av, wv) = (self.value(a), self.value(w));
        let n = av.rows();
        if wv.shape() != [n, n] {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_pair_max",
                left: av.shape().to_vec(),
                right: wv.shape().to_vec(),
            });
        }
        if av.cols() == 0 {
            return Err(TensorError::InvalidArgument {
                op: "weighted_pair_max",
                reason: "no columns to take the max over".into(),
            });
        }
        let mut idx = Vec::with_capacity(n * n);
        let mut total = T::zero();
        for i in 0..n {
            let ai = av.row(i);
            let wi = wv.row(i);
            let mut row_total = T::zero();
            for j in 0..n {
                let aj = av.row(j);
                let mut best = ai[0] * aj[0];
                let mut arg = 0;
                for c in 1..ai.len() {
                    let p = ai[c] * aj[c];
                    if p > best {
                        best = p;
                        arg = c;
                    }
                }
                idx.push(arg as u32);
                row_total = row_total + wi[j] * best;
            }
            total = total + row_total;
        }
        self.push("weighted_pair_max", Tensor::scalar(total), Op::WeightedPairMax { a, w, idx }, &[a, w])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> VResult {
        let v = self.value(a).clone().reshape(shape)?;
        self.push("reshape", v, Op::Reshape(a), &[a])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(TensorError::NotScalar(loss_node.value.shape().to_vec()));
        }
        if !loss_node.tracked {
            return Err(TensorError::Detached);
        }
        let mut adj: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::filled(loss_node.value.shape(), T::one()));
        let mut visit_order = Vec::new();

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            visit_order.push(id);
            self.propagate(node, &g, &mut adj)?;
            // interior adjoints are not part of the result
        }

        let grads = self
            .nodes
            .iter()
            .zip(adj)
            .map(|(n, a)| if matches!(n.op, Op::Leaf) && n.tracked { a } else { None })
            .collect();
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            grads,
            shapes,
            visit_order,
        })
    }

    fn accumulate(&self, adj: &mut [Option<Tensor<T>>], v: Var, contribution: Tensor<T>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut adj[v.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&self, node: &Node<'a, T>, g: &Tensor<T>, adj: &mut [Option<Tensor<T>>]) -> Result<(), TensorError> {
        let val = |v: Var| -> &Tensor<T> { &self.nodes[v.0].value };
        let tracked = |v: Var| self.nodes[v.0].tracked;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, kernels::scale(g, -T::one()));
            }
            Op::Mul(a, b) => {
                if tracked(*a) {
                    self.accumulate(adj, *a, kernels::mul(g, val(*b))?);
                }
                if tracked(*b) {
                    self.accumulate(adj, *b, kernels::mul(g, val(*a))?);
                }
            }
            Op::MatMul(a, b) => {
                if tracked(*a) {
                    self.accumulate(adj, *a, kernels::matmul_nt(g, val(*b))?);
                }
                if tracked(*b) {
                    self.accumulate(adj, *b, kernels::matmul_tn(val(*a), g)?);
                }
            }
            Op::MatMulNt(a, b) => {
                if tracked(*a) {
                    self.accumulate(adj, *a, kernels::matmul(g, val(*b))?);
                }
                if tracked(*b) {
                    self.accumulate(adj, *b, kernels::matmul_tn(g, val(*a))?);
                }
            }
            Op::Transpose(a) => self.accumulate(adj, *a, kernels::transpose(g)?),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut out = g.clone();
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let inner = kernels::dot(g.row(r), yr);
                    for (o, &yv) in out.row_mut(r).iter_mut().zip(yr) {
                        *o = yv * (*o - inner);
                    }
                }
                self.accumulate(adj, *a, out);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let n = T::from_f64(y.cols() as f64);
                let mut out = g.clone();
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let mean_g = gr.iter().copied().sum::<T>() / n;
                    let mean_gy = kernels::dot(gr, yr) / n;
                    for ((o, &gv), &yv) in out.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = inv_std[r] * (gv - mean_g - yv * mean_gy);
                    }
                }
                self.accumulate(adj, *x, out);
            }
            Op::Relu(a) => {
                let x = val(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(adj, *a, Tensor::new(x.shape().to_vec(), data)?);
            }
            Op::L2Normalize { x, norms, eps } => {
                let y = &node.value;
                let mut out = g.clone();
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    if norms[r] > *eps {
                        let inner = kernels::dot(g.row(r), yr);
                        for (o, &yv) in out.row_mut(r).iter_mut().zip(yr) {
                            *o = (*o - yv * inner) / norms[r];
                        }
                    } else {
                        for o in out.row_mut(r) {
                            *o = *o / *eps;
                        }
                    }
                }
                self.accumulate(adj, *x, out);
            }
            Op::RowMax { x, idx } => {
                let shape = val(*x).shape().to_vec();
                let mut out = Tensor::zeros(&shape);
                for (r, &j) in idx.iter().enumerate() {
                    out.set(r, j, g.data()[r]);
                }
                self.accumulate(adj, *x, out);
            }
            Op::Scale(a, s) => self.accumulate(adj, *a, kernels::scale(g, *s)),
            Op::AddRow(a, row) => {
                self.accumulate(adj, *a, g.clone());
                if tracked(*row) {
                    let mut sums = Tensor::zeros(val(*row).shape());
                    for r in 0..g.rows() {
                        for (s, &gv) in sums.data_mut().iter_mut().zip(g.row(r)) {
                            *s = *s + gv;
                        }
                    }
                    self.accumulate(adj, *row, sums);
                }
            }
            Op::MulRow(a, row) => {
                if tracked(*a) {
                    self.accumulate(adj, *a, kernels::mul_row(g, val(*row))?);
                }
                if tracked(*row) {
                    let x = val(*a);
                    let mut sums = Tensor::zeros(val(*row).shape());
                    for r in 0..g.rows() {
                        for ((s, &gv), &xv) in sums.data_mut().iter_mut().zip(g.row(r)).zip(x.row(r)) {
                            *s = *s + gv * xv;
                        }
                    }
                    self.accumulate(adj, *row, sums);
                }
            }
            Op::Sum(a) => {
                let shape = val(*a).shape().to_vec();
                self.accumulate(adj, *a, Tensor::filled(&shape, g.item()));
            }
            Op::Mean(a) => {
                let x = val(*a);
                let v = g.item() / T::from_f64(x.len() as f64);
                self.accumulate(adj, *a, Tensor::filled(x.shape(), v));
            }
            Op::Resize { x, from, to } => {
                self.accumulate(adj, *x, kernels::bilinear_resize_adjoint(g, *from, *to));
            }
            Op::SelectCols { x, start } => {
                let src = val(*x);
                let mut out = Tensor::zeros(src.shape());
                let w = g.cols();
                for r in 0..g.rows() {
                    out.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                }
                self.accumulate(adj, *x, out);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if tracked(p) {
                        self.accumulate(adj, p, kernels::select_cols(g, start, start + w)?);
                    }
                    start += w;
                }
            }
            Op::WeightedPairMax { a, w, idx } => {
                let (av, wv) = (val(*a), val(*w));
                let n = av.rows();
                let gs = g.item();
                if tracked(*a) {
                    let mut ga = Tensor::zeros(av.shape());
                    for i in 0..n {
                        for j in 0..n {
                            let c = idx[i * n + j] as usize;
                            let s = gs * wv.get(i, j);
                            let (ai, aj) = (av.get(i, c), av.get(j, c));
                            let d = ga.data_mut();
                            let k = av.cols();
                            d[i * k + c] = d[i * k + c] + s * aj;
                            d[j * k + c] = d[j * k + c] + s * ai;
                        }
                    }
                    self.accumulate(adj, *a, ga);
                }
                if tracked(*w) {
                    let out = Tensor::from_fn(n, n, |i, j| {
                        let c = idx[i * n + j] as usize;
                        gs * av.get(i, c) * av.get(j, c)
                    });
                    self.accumulate(adj, *w, out);
                }
            }
            Op::PairProduct(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (n, m) = (av.rows(), bv.rows());
                if tracked(*a) {
                    let mut ga = Tensor::zeros(av.shape());
                    for i in 0..n {
                        let gi = ga.row_mut(i);
                        for j in 0..m {
                            let gr = g.row(i * m + j);
                            for ((o, &gv), &bj) in gi.iter_mut().zip(gr).zip(bv.row(j)) {
                                *o = *o + gv * bj;
                            }
                        }
                    }
                    self.accumulate(adj, *a, ga);
                }
                if tracked(*b) {
                    let mut gb = Tensor::zeros(bv.shape());
                    for i in 0..n {
                        let ai = av.row(i);
                        for j in 0..m {
                            let gr = g.row(i * m + j);
                            for ((o, &gv), &x) in gb.row_mut(j).iter_mut().zip(gr).zip(ai) {
                                *o = *o + gv * x;
                            }
                        }
                    }
                    self.accumulate(adj, *b, gb);
                }
            }
            Op::Reshape(a) => {
                let shape = val(*a).shape().to_vec();
                self.accumulate(adj, *a, g.clone().reshape(&shape)?);
            }
        }
        Ok(())
    }
}
