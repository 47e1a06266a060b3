//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Operations are recorded on a [`Tape`]; [`Tape::backward`] replays them in
//! reverse to accumulate gradients. The op set is exactly what the rest of
//! the crate needs: pointwise linear layers, activations, reductions,
//! row gather/scatter plumbing for point-cloud neighborhoods, and the
//! pairwise-distance/RBF kernels used by the alignment losses.
//!
//! Element type is generic over [`Element`] (`f64` default, `f32` for speed);
//! matrix products route through `matrixmultiply`, everything else is
//! sequential, so results are bitwise reproducible for a fixed element type.

mod element;
pub mod gradcheck;

pub use element::Element;
pub use gradcheck::{gradcheck, gradcheck_subset, GradReport};

use std::cell::RefCell;
use std::fmt;

use thiserror::Error;

/// Errors raised by tensor construction, shape checking, and the tape.
#[derive(Error, Debug)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs} and {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },
    #[error("{op}: invalid shape {shape}: {detail}")]
    InvalidShape {
        op: &'static str,
        shape: String,
        detail: String,
    },
    #[error("reduce: axis {axis} out of range for rank-{rank} tensor")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("reduce over empty axis (dimension is zero)")]
    EmptyReduce,
    #[error("backward: loss must be a scalar, got shape {shape}")]
    NotScalar { shape: String },
    #[error("backward called twice on the same tape without a new forward pass")]
    TapeConsumed,
    #[error("nll: label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("gradient requested for tensor that does not track gradients")]
    NoGradient,
}

pub type TensorResult<T> = Result<T, TensorError>;

fn fmt_shape(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", dims.join(", "))
}

/// Rows/cols view of a shape: rank-1 `[n]` is treated as a column of n rows.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (shape[0], 1),
        2 => (shape[0], shape[1]),
        _ => (shape.iter().product(), 1),
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ReduceKind {
    Max,
    Mean,
    Sum,
}

enum Op<E> {
    Leaf,
    Matmul { a: usize, b: usize },
    AddBias { x: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Scale { x: usize, c: E },
    AddConst { x: usize },
    Recip { x: usize },
    Exp { x: usize },
    Abs { x: usize },
    Relu { x: usize },
    Sigmoid { x: usize },
    Reduce { x: usize, axis: usize, kind: ReduceKind, arg: Vec<usize> },
    SumAll { x: usize },
    MeanAll { x: usize },
    Softmax { x: usize },
    Nll { probs: usize, labels: Vec<usize> },
    GatherRows { x: usize, idx: Vec<usize> },
    RepeatRows { x: usize, times: usize },
    SegmentSum { x: usize, seg: usize },
    SegmentMean { x: usize, seg: usize },
    SegmentMax { x: usize, arg: Vec<usize> },
    MulColVec { x: usize, v: usize },
    ConcatCols { a: usize, b: usize },
    ConcatRows { parts: Vec<usize> },
    Transpose { x: usize },
    Reshape { x: usize },
    PairwiseSqDist { a: usize, b: usize },
    /// Sum over all entries of the multi-bandwidth RBF kernel of a
    /// squared-distance matrix: sum_ij mean_s exp(-d_ij / (2 sigma_s^2)).
    RbfKernelSum { d: usize, bandwidths: Vec<E> },
}

struct Entry<E> {
    shape: Vec<usize>,
    value: Vec<E>,
    grad: Option<Vec<E>>,
    needs_grad: bool,
    op: Op<E>,
}

struct Inner<E> {
    entries: Vec<Entry<E>>,
    consumed: bool,
    /// When Some, forward passes fold the signs of kinked-op inputs and all
    /// argmax selections into this hash. Two evaluations with different
    /// signatures straddle a non-differentiable point, so finite differences
    /// against them are meaningless (used by gradcheck).
    branch_sig: Option<u64>,
}

#[inline]
fn fold_sig(sig: &mut u64, v: u64) {
    *sig = (*sig ^ v).wrapping_mul(0x100000001b3);
}

/// Records a forward pass; single-threaded. Independent tapes may run on
/// separate threads.
pub struct Tape<E: Element> {
    inner: RefCell<Inner<E>>,
}

/// Lightweight handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Tensor<'t, E: Element> {
    tape: &'t Tape<E>,
    id: usize,
}

impl<E: Element> fmt::Debug for Tensor<'_, E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor(id={}, shape={})", self.id, fmt_shape(&self.shape()))
    }
}

/// Position marker used to rewind a tape to a previous length.
#[derive(Clone, Copy, Debug)]
pub struct TapeMark(usize);

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner {
                entries: Vec::new(),
                consumed: false,
                branch_sig: None,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mark(&self) -> TapeMark {
        TapeMark(self.len())
    }

    /// Rewind to a previous mark, dropping later entries and all gradients.
    /// The tape becomes recordable again (a rewound tape is a new forward).
    pub fn rewind(&self, mark: TapeMark) {
        let mut inner = self.inner.borrow_mut();
        inner.entries.truncate(mark.0);
        for e in inner.entries.iter_mut() {
            e.grad = None;
        }
        inner.consumed = false;
    }

    /// Start recording a branch signature (see [`Inner::branch_sig`]).
    pub(crate) fn enable_branch_sig(&self) {
        self.inner.borrow_mut().branch_sig = Some(0xcbf29ce484222325);
    }

    pub(crate) fn branch_sig(&self) -> Option<u64> {
        self.inner.borrow().branch_sig
    }

    /// Fold externally computed index selections (neighbor sets, nearest
    /// nodes) into the branch signature, so finite differencing can detect
    /// when a perturbation flips a selection made outside the tape.
    pub fn fold_branch_indices(&self, indices: &[usize]) {
        let mut inner = self.inner.borrow_mut();
        if let Some(sig) = inner.branch_sig.as_mut() {
            for &i in indices {
                fold_sig(sig, i as u64);
            }
        }
    }

    fn push(&self, shape: Vec<usize>, value: Vec<E>, op: Op<E>, needs_grad: bool) -> Tensor<'_, E> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut inner = self.inner.borrow_mut();
        inner.entries.push(Entry {
            shape,
            value,
            grad: None,
            needs_grad,
            op,
        });
        Tensor {
            tape: self,
            id: inner.entries.len() - 1,
        }
    }

    /// Record a constant leaf (no gradient).
    pub fn constant(&self, value: Vec<E>, shape: &[usize]) -> Tensor<'_, E> {
        assert_eq!(
            shape.iter().product::<usize>(),
            value.len(),
            "constant: shape {} does not match buffer length {}",
            fmt_shape(shape),
            value.len()
        );
        self.push(shape.to_vec(), value, Op::Leaf, false)
    }

    /// Record a leaf that accumulates a gradient during backward.
    pub fn leaf(&self, value: Vec<E>, shape: &[usize]) -> Tensor<'_, E> {
        assert_eq!(
            shape.iter().product::<usize>(),
            value.len(),
            "leaf: shape {} does not match buffer length {}",
            fmt_shape(shape),
            value.len()
        );
        self.push(shape.to_vec(), value, Op::Leaf, true)
    }

    pub fn scalar(&self, value: f64) -> Tensor<'_, E> {
        self.constant(vec![E::from_f64(value)], &[1])
    }

    /// Concatenate 2-D tensors along rows. All parts must share a column count.
    pub fn concat_rows<'t>(&'t self, parts: &[Tensor<'t, E>]) -> TensorResult<Tensor<'t, E>> {
        assert!(!parts.is_empty(), "concat_rows: no parts");
        let cols = parts[0].cols();
        let mut rows = 0usize;
        for p in parts {
            if p.shape().len() != 2 || p.cols() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: fmt_shape(&parts[0].shape()),
                    rhs: fmt_shape(&p.shape()),
                });
            }
            rows += p.rows();
        }
        let mut value = Vec::with_capacity(rows * cols);
        let mut needs = false;
        {
            let inner = self.inner.borrow();
            for p in parts {
                value.extend_from_slice(&inner.entries[p.id].value);
                needs |= inner.entries[p.id].needs_grad;
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(self.push(vec![rows, cols], value, Op::ConcatRows { parts: ids }, needs))
    }

    /// Run reverse-mode accumulation from a scalar loss. Each tape accepts
    /// one backward per recorded forward; rewind or start a new tape to run
    /// another.
    pub fn backward(&self, loss: Tensor<'_, E>) -> TensorResult<()> {
        self.backward_with_stops(loss, &[])
    }

    /// Backward that treats `stops` as leaves: gradient accumulates on them
    /// but does not propagate into their inputs.
    pub fn backward_with_stops(&self, loss: Tensor<'_, E>, stops: &[usize]) -> TensorResult<()> {
        assert!(std::ptr::eq(loss.tape, self), "loss belongs to another tape");
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if inner.entries[loss.id].value.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: fmt_shape(&inner.entries[loss.id].shape),
            });
        }
        inner.consumed = true;
        let inner = &mut *inner;
        let entries = &mut inner.entries;
        let n = entries.len();
        let mut grads: Vec<Option<Vec<E>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        if !entries[loss.id].needs_grad {
            // Loss does not depend on any gradient-tracking leaf; nothing to do.
            return Ok(());
        }
        grads[loss.id] = Some(vec![E::ONE]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !stops.contains(&id) {
                backprop_entry(entries, &mut grads, id, &g);
            }
            entries[id].grad = Some(g);
        }
        Ok(())
    }
}

/// Accumulate `src` into the gradient buffer of entry `id`, allocating on
/// first touch. No-op when the entry does not track gradients.
fn accum<E: Element>(
    entries: &[Entry<E>],
    grads: &mut [Option<Vec<E>>],
    id: usize,
    f: impl FnOnce(&mut [E]),
) {
    if !entries[id].needs_grad {
        return;
    }
    let buf = grads[id].get_or_insert_with(|| vec![E::ZERO; entries[id].value.len()]);
    f(buf);
}

fn backprop_entry<E: Element>(
    entries: &[Entry<E>],
    grads: &mut [Option<Vec<E>>],
    id: usize,
    g: &[E],
) {
    let shape: &[usize] = &entries[id].shape;
    let op = &entries[id].op;
    let out_value: &[E] = &entries[id].value;
    let value_of = |i: usize| -> &[E] { &entries[i].value };
    let shape_of = |i: usize| -> &[usize] { &entries[i].shape };

    match op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (m, k) = rows_cols(shape_of(*a));
            let (_, n) = rows_cols(shape_of(*b));
            // dA += g · B^T ; dB += A^T · g
            accum(entries, grads, *a, |da| {
                E::gemm_nt(m, n, k, g, value_of(*b), da);
            });
            accum(entries, grads, *b, |db| {
                E::gemm_tn(k, m, n, value_of(*a), g, db);
            });
        }
        Op::AddBias { x, b } => {
            let (rows, cols) = rows_cols(shape);
            accum(entries, grads, *x, |dx| {
                for (d, gv) in dx.iter_mut().zip(g) {
                    *d += *gv;
                }
            });
            accum(entries, grads, *b, |db| {
                for r in 0..rows {
                    for c in 0..cols {
                        db[c] += g[r * cols + c];
                    }
                }
            });
        }
        Op::Add { a, b } => {
            accum(entries, grads, *a, |da| {
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += *gv;
                }
            });
            accum(entries, grads, *b, |db| {
                for (d, gv) in db.iter_mut().zip(g) {
                    *d += *gv;
                }
            });
        }
        Op::Sub { a, b } => {
            accum(entries, grads, *a, |da| {
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += *gv;
                }
            });
            accum(entries, grads, *b, |db| {
                for (d, gv) in db.iter_mut().zip(g) {
                    *d = *d - *gv;
                }
            });
        }
        Op::Mul { a, b } => {
            if entries[*a].needs_grad {
                let bv = value_of(*b);
                accum(entries, grads, *a, |da| {
                    for i in 0..da.len() {
                        da[i] += g[i] * bv[i];
                    }
                });
            }
            if entries[*b].needs_grad {
                let av = value_of(*a);
                accum(entries, grads, *b, |db| {
                    for i in 0..db.len() {
                        db[i] += g[i] * av[i];
                    }
                });
            }
        }
        Op::Div { a, b } => {
            let bv = value_of(*b);
            if entries[*a].needs_grad {
                accum(entries, grads, *a, |da| {
                    for i in 0..da.len() {
                        da[i] += g[i] / bv[i];
                    }
                });
            }
            if entries[*b].needs_grad {
                accum(entries, grads, *b, |db| {
                    for i in 0..db.len() {
                        db[i] = db[i] - g[i] * out_value[i] / bv[i];
                    }
                });
            }
        }
        Op::Scale { x, c } => {
            let c = *c;
            accum(entries, grads, *x, |dx| {
                for i in 0..dx.len() {
                    dx[i] += g[i] * c;
                }
            });
        }
        Op::AddConst { x } => {
            accum(entries, grads, *x, |dx| {
                for (d, gv) in dx.iter_mut().zip(g) {
                    *d += *gv;
                }
            });
        }
        Op::Recip { x } => {
            accum(entries, grads, *x, |dx| {
                for i in 0..dx.len() {
                    dx[i] = dx[i] - g[i] * out_value[i] * out_value[i];
                }
            });
        }
        Op::Exp { x } => {
            accum(entries, grads, *x, |dx| {
                for i in 0..dx.len() {
                    dx[i] += g[i] * out_value[i];
                }
            });
        }
        Op::Abs { x } => {
            let xv = value_of(*x);
            accum(entries, grads, *x, |dx| {
                for i in 0..dx.len() {
                    if xv[i] > E::ZERO {
                        dx[i] += g[i];
                    } else if xv[i] < E::ZERO {
                        dx[i] = dx[i] - g[i];
                    }
                }
            });
        }
        Op::Relu { x } => {
            let xv = value_of(*x);
            accum(entries, grads, *x, |dx| {
                for i in 0..dx.len() {
                    if xv[i] > E::ZERO {
                        dx[i] += g[i];
                    }
                }
            });
        }
        Op::Sigmoid { x } => {
            accum(entries, grads, *x, |dx| {
                for i in 0..dx.len() {
                    dx[i] += g[i] * out_value[i] * (E::ONE - out_value[i]);
                }
            });
        }
        Op::Reduce { x, axis, kind, arg } => {
            let (rows, cols) = rows_cols(shape_of(*x));
            match kind {
                ReduceKind::Max => {
                    accum(entries, grads, *x, |dx| {
                        for (out_i, &src) in arg.iter().enumerate() {
                            if *axis == 0 {
                                dx[src * cols + out_i] += g[out_i];
                            } else {
                                dx[out_i * cols + src] += g[out_i];
                            }
                        }
                    });
                }
                ReduceKind::Sum | ReduceKind::Mean => {
                    let denom = if *kind == ReduceKind::Mean {
                        E::from_f64(if *axis == 0 { rows as f64 } else { cols as f64 })
                    } else {
                        E::ONE
                    };
                    accum(entries, grads, *x, |dx| {
                        for r in 0..rows {
                            for c in 0..cols {
                                let gv = if *axis == 0 { g[c] } else { g[r] };
                                dx[r * cols + c] += gv / denom;
                            }
                        }
                    });
                }
            }
        }
        Op::SumAll { x } => {
            let gv = g[0];
            accum(entries, grads, *x, |dx| {
                for d in dx.iter_mut() {
                    *d += gv;
                }
            });
        }
        Op::MeanAll { x } => {
            let len = entries[*x].value.len();
            let gv = g[0] / E::from_f64(len as f64);
            accum(entries, grads, *x, |dx| {
                for d in dx.iter_mut() {
                    *d += gv;
                }
            });
        }
        Op::Softmax { x } => {
            let (rows, cols) = rows_cols(shape);
            accum(entries, grads, *x, |dx| {
                for r in 0..rows {
                    let p = &out_value[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let mut dot = E::ZERO;
                    for c in 0..cols {
                        dot += gr[c] * p[c];
                    }
                    for c in 0..cols {
                        dx[r * cols + c] += p[c] * (gr[c] - dot);
                    }
                }
            });
        }
        Op::Nll { probs, labels } => {
            let (_, cols) = rows_cols(shape_of(*probs));
            let pv = value_of(*probs);
            let clamp = E::from_f64(1e-12);
            let batch = E::from_f64(labels.len() as f64);
            let gv = g[0];
            accum(entries, grads, *probs, |dp| {
                for (r, &y) in labels.iter().enumerate() {
                    let p = pv[r * cols + y];
                    if p >= clamp {
                        dp[r * cols + y] = dp[r * cols + y] - gv / (batch * p);
                    }
                }
            });
        }
        Op::GatherRows { x, idx } => {
            let (_, cols) = rows_cols(shape_of(*x));
            accum(entries, grads, *x, |dx| {
                for (out_r, &src_r) in idx.iter().enumerate() {
                    for c in 0..cols {
                        dx[src_r * cols + c] += g[out_r * cols + c];
                    }
                }
            });
        }
        Op::RepeatRows { x, times } => {
            let (rows, cols) = rows_cols(shape_of(*x));
            accum(entries, grads, *x, |dx| {
                for r in 0..rows {
                    for t in 0..*times {
                        let out_r = r * *times + t;
                        for c in 0..cols {
                            dx[r * cols + c] += g[out_r * cols + c];
                        }
                    }
                }
            });
        }
        Op::SegmentSum { x, seg } => {
            let (rows, cols) = rows_cols(shape_of(*x));
            accum(entries, grads, *x, |dx| {
                for r in 0..rows {
                    let s = r / *seg;
                    for c in 0..cols {
                        dx[r * cols + c] += g[s * cols + c];
                    }
                }
            });
        }
        Op::SegmentMean { x, seg } => {
            let (rows, cols) = rows_cols(shape_of(*x));
            let denom = E::from_f64(*seg as f64);
            accum(entries, grads, *x, |dx| {
                for r in 0..rows {
                    let s = r / *seg;
                    for c in 0..cols {
                        dx[r * cols + c] += g[s * cols + c] / denom;
                    }
                }
            });
        }
        Op::SegmentMax { x, arg } => {
            let (_, cols) = rows_cols(shape);
            accum(entries, grads, *x, |dx| {
                for (out_i, &src_row) in arg.iter().enumerate() {
                    let c = out_i % cols;
                    dx[src_row * cols + c] += g[out_i];
                }
            });
        }
        Op::MulColVec { x, v } => {
            let (rows, cols) = rows_cols(shape);
            if entries[*x].needs_grad {
                let vv = value_of(*v);
                accum(entries, grads, *x, |dx| {
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[r * cols + c] += g[r * cols + c] * vv[r];
                        }
                    }
                });
            }
            if entries[*v].needs_grad {
                let xv = value_of(*x);
                accum(entries, grads, *v, |dv| {
                    for r in 0..rows {
                        let mut s = E::ZERO;
                        for c in 0..cols {
                            s += g[r * cols + c] * xv[r * cols + c];
                        }
                        dv[r] += s;
                    }
                });
            }
        }
        Op::ConcatCols { a, b } => {
            let (rows, _) = rows_cols(shape);
            let ca = rows_cols(shape_of(*a)).1;
            let cb = rows_cols(shape_of(*b)).1;
            accum(entries, grads, *a, |da| {
                for r in 0..rows {
                    for c in 0..ca {
                        da[r * ca + c] += g[r * (ca + cb) + c];
                    }
                }
            });
            accum(entries, grads, *b, |db| {
                for r in 0..rows {
                    for c in 0..cb {
                        db[r * cb + c] += g[r * (ca + cb) + ca + c];
                    }
                }
            });
        }
        Op::ConcatRows { parts } => {
            let cols = rows_cols(shape).1;
            let mut row0 = 0usize;
            let parts = parts.clone();
            for pid in parts {
                let prows = rows_cols(shape_of(pid)).0;
                accum(entries, grads, pid, |dp| {
                    dp.iter_mut()
                        .zip(&g[row0 * cols..(row0 + prows) * cols])
                        .for_each(|(d, gv)| *d += *gv);
                });
                row0 += prows;
            }
        }
        Op::Transpose { x } => {
            let (rows, cols) = rows_cols(shape);
            accum(entries, grads, *x, |dx| {
                for r in 0..rows {
                    for c in 0..cols {
                        dx[c * rows + r] += g[r * cols + c];
                    }
                }
            });
        }
        Op::Reshape { x } => {
            accum(entries, grads, *x, |dx| {
                for (d, gv) in dx.iter_mut().zip(g) {
                    *d += *gv;
                }
            });
        }
        Op::PairwiseSqDist { a, b } => {
            // d_ij = |a_i - b_j|^2 ; da_i += sum_j g_ij * 2 (a_i - b_j)
            let (m, c) = rows_cols(shape_of(*a));
            let (n, _) = rows_cols(shape_of(*b));
            let two = E::from_f64(2.0);
            accum(entries, grads, *a, |da| {
                // row sums of g scale a_i; minus g · B
                let mut tmp = vec![E::ZERO; m * c];
                E::gemm_nn(m, n, c, g, value_of(*b), &mut tmp);
                let av = value_of(*a);
                for i in 0..m {
                    let mut rs = E::ZERO;
                    for j in 0..n {
                        rs += g[i * n + j];
                    }
                    for cc in 0..c {
                        da[i * c + cc] += two * (rs * av[i * c + cc] - tmp[i * c + cc]);
                    }
                }
            });
            accum(entries, grads, *b, |db| {
                let mut tmp = vec![E::ZERO; n * c];
                E::gemm_tn(n, m, c, g, value_of(*a), &mut tmp);
                let bv = value_of(*b);
                for j in 0..n {
                    let mut cs = E::ZERO;
                    for i in 0..m {
                        cs += g[i * n + j];
                    }
                    for cc in 0..c {
                        db[j * c + cc] += two * (cs * bv[j * c + cc] - tmp[j * c + cc]);
                    }
                }
            });
        }
        Op::RbfKernelSum { d, bandwidths } => {
            let dv = value_of(*d);
            let gv = g[0];
            let weight = E::from_f64(1.0 / bandwidths.len() as f64);
            let plan = rbf_plan(bandwidths);
            accum(entries, grads, *d, |dd| {
                for i in 0..dd.len() {
                    let mut acc = E::ZERO;
                    let base = (-dv[i] * plan.base_coeff).expe();
                    for &(pow, coeff) in &plan.terms {
                        // derivative of exp(-coeff * d) is -coeff * exp(-coeff * d)
                        let k = if pow >= 1 {
                            powi(base, pow)
                        } else {
                            (-dv[i] * coeff).expe()
                        };
                        acc = acc - coeff * k;
                    }
                    dd[i] += gv * weight * acc;
                }
            });
        }
    }
}

/// Evaluation plan for a multi-bandwidth RBF kernel: every exponent
/// coefficient that is an exact power-of-two multiple of the smallest one is
/// computed by squaring a single exponential.
struct RbfPlan<E> {
    base_coeff: E,
    /// (integer power applied to the base exponential, original coefficient)
    terms: Vec<(u32, E)>,
}

fn rbf_plan<E: Element>(bandwidths: &[E]) -> RbfPlan<E> {
    // coefficient c_s = 1 / (2 sigma_s^2); kernel = exp(-c_s * d)
    let coeffs: Vec<f64> = bandwidths.iter().map(|b| 1.0 / (2.0 * b.to_f64())).collect();
    let min = coeffs.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut terms = Vec::with_capacity(coeffs.len());
    for &c in &coeffs {
        let ratio = c / min;
        let pow = ratio.round() as u32;
        if pow >= 1 && (ratio - pow as f64).abs() < 1e-12 {
            terms.push((pow, E::from_f64(c)));
        } else {
            terms.push((0, E::from_f64(c))); // marker: evaluate its own exp
        }
    }
    RbfPlan {
        base_coeff: E::from_f64(min),
        terms,
    }
}

fn powi<E: Element>(base: E, mut pow: u32) -> E {
    let mut acc = E::ONE;
    let mut b = base;
    while pow > 0 {
        if pow & 1 == 1 {
            acc = acc * b;
        }
        b = b * b;
        pow >>= 1;
    }
    acc
}

impl<'t, E: Element> Tensor<'t, E> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().entries[self.id].shape.clone()
    }

    pub fn rows(&self) -> usize {
        rows_cols(&self.shape()).0
    }

    pub fn cols(&self) -> usize {
        rows_cols(&self.shape()).1
    }

    pub fn len(&self) -> usize {
        self.tape.inner.borrow().entries[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clone the forward value out of the tape.
    pub fn value(&self) -> Vec<E> {
        self.tape.inner.borrow().entries[self.id].value.clone()
    }

    pub fn value_f64(&self) -> Vec<f64> {
        self.tape.inner.borrow().entries[self.id].value.iter().map(|v| v.to_f64()).collect()
    }

    /// Gradient accumulated by the last backward pass.
    pub fn grad(&self) -> TensorResult<Vec<E>> {
        let inner = self.tape.inner.borrow();
        let e = &inner.entries[self.id];
        if !e.needs_grad {
            return Err(TensorError::NoGradient);
        }
        Ok(match &e.grad {
            Some(g) => g.clone(),
            None => vec![E::ZERO; e.value.len()],
        })
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().entries[self.id].needs_grad
    }

    fn unop(
        &self,
        value: Vec<E>,
        shape: Vec<usize>,
        op: Op<E>,
    ) -> Tensor<'t, E> {
        let needs = self.requires_grad();
        self.tape.push(shape, value, op, needs)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, rhs: Tensor<'t, E>) -> TensorResult<Tensor<'t, E>> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: fmt_shape(&sa),
                rhs: fmt_shape(&sb),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![E::ZERO; m * n];
        {
            let inner = self.tape.inner.borrow();
            E::gemm_nn(m, k, n, &inner.entries[self.id].value, &inner.entries[rhs.id].value, &mut out);
        }
        let needs = self.requires_grad() || rhs.requires_grad();
        Ok(self
            .tape
            .push(vec![m, n], out, Op::Matmul { a: self.id, b: rhs.id }, needs))
    }

    /// Add a rank-1 bias across every row of a rank-2 tensor.
    pub fn add_bias(&self, bias: Tensor<'t, E>) -> TensorResult<Tensor<'t, E>> {
        let (sx, sb) = (self.shape(), bias.shape());
        if sx.len() != 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: fmt_shape(&sx),
                rhs: fmt_shape(&sb),
            });
        }
        let (rows, cols) = (sx[0], sx[1]);
        let mut out = vec![E::ZERO; rows * cols];
        {
            let inner = self.tape.inner.borrow();
            let xv = &inner.entries[self.id].value;
            let bv = &inner.entries[bias.id].value;
            for r in 0..rows {
                for c in 0..cols {
                    out[r * cols + c] = xv[r * cols + c] + bv[c];
                }
            }
        }
        let needs = self.requires_grad() || bias.requires_grad();
        Ok(self
            .tape
            .push(sx, out, Op::AddBias { x: self.id, b: bias.id }, needs))
    }

    /// Affine map per row: `self · weight + bias`. Weight is Cin×Cout,
    /// bias is rank-1 [Cout].
    pub fn linear(&self, weight: Tensor<'t, E>, bias: Tensor<'t, E>) -> TensorResult<Tensor<'t, E>> {
        self.matmul(weight)?.add_bias(bias)
    }

    fn binop_same_shape(
        &self,
        rhs: Tensor<'t, E>,
        opname: &'static str,
        f: impl Fn(E, E) -> E,
        op: Op<E>,
    ) -> TensorResult<Tensor<'t, E>> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: opname,
                lhs: fmt_shape(&sa),
                rhs: fmt_shape(&sb),
            });
        }
        let mut out;
        {
            let inner = self.tape.inner.borrow();
            let av = &inner.entries[self.id].value;
            let bv = &inner.entries[rhs.id].value;
            out = Vec::with_capacity(av.len());
            for i in 0..av.len() {
                out.push(f(av[i], bv[i]));
            }
        }
        let needs = self.requires_grad() || rhs.requires_grad();
        Ok(self.tape.push(sa, out, op, needs))
    }

    pub fn add(&self, rhs: Tensor<'t, E>) -> TensorResult<Tensor<'t, E>> {
        self.binop_same_shape(rhs, "add", |a, b| a + b, Op::Add { a: self.id, b: rhs.id })
    }

    pub fn sub(&self, rhs: Tensor<'t, E>) -> TensorResult<Tensor<'t, E>> {
        self.binop_same_shape(rhs, "sub", |a, b| a - b, Op::Sub { a: self.id, b: rhs.id })
    }

    pub fn mul(&self, rhs: Tensor<'t, E>) -> TensorResult<Tensor<'t, E>> {
        self.binop_same_shape(rhs, "mul", |a, b| a * b, Op::Mul { a: self.id, b: rhs.id })
    }

    pub fn div(&self, rhs: Tensor<'t, E>) -> TensorResult<Tensor<'t, E>> {
        self.binop_same_shape(rhs, "div", |a, b| a / b, Op::Div { a: self.id, b: rhs.id })
    }

    pub fn scale(&self, c: f64) -> Tensor<'t, E> {
        let c = E::from_f64(c);
        let value: Vec<E> = self.tape.inner.borrow().entries[self.id]
            .value
            .iter()
            .map(|&v| v * c)
            .collect();
        self.unop(value, self.shape(), Op::Scale { x: self.id, c })
    }

    pub fn add_const(&self, c: f64) -> Tensor<'t, E> {
        let c = E::from_f64(c);
        let value: Vec<E> = self.tape.inner.borrow().entries[self.id]
            .value
            .iter()
            .map(|&v| v + c)
            .collect();
        self.unop(value, self.shape(), Op::AddConst { x: self.id })
    }

    /// Elementwise `1 / (x + eps)`.
    pub fn recip(&self, eps: f64) -> Tensor<'t, E> {
        let eps = E::from_f64(eps);
        let value: Vec<E> = self.tape.inner.borrow().entries[self.id]
            .value
            .iter()
            .map(|&v| E::ONE / (v + eps))
            .collect();
        self.unop(value, self.shape(), Op::Recip { x: self.id })
    }

    pub fn exp(&self) -> Tensor<'t, E> {
        let value: Vec<E> = self.tape.inner.borrow().entries[self.id]
            .value
            .iter()
            .map(|v| v.expe())
            .collect();
        self.unop(value, self.shape(), Op::Exp { x: self.id })
    }

    pub fn abs(&self) -> Tensor<'t, E> {
        let value;
        {
            let mut inner = self.tape.inner.borrow_mut();
            let mut sig = inner.branch_sig;
            value = inner.entries[self.id]
                .value
                .iter()
                .map(|&v| {
                    if let Some(s) = sig.as_mut() {
                        let side = if v > E::ZERO { 2u64 } else if v < E::ZERO { 1 } else { 0 };
                        fold_sig(s, side);
                    }
                    v.abse()
                })
                .collect();
            inner.branch_sig = sig;
        }
        self.unop(value, self.shape(), Op::Abs { x: self.id })
    }

    /// Rectified linear unit; the subgradient at 0 is 0.
    pub fn relu(&self) -> Tensor<'t, E> {
        let value;
        {
            let mut inner = self.tape.inner.borrow_mut();
            let mut sig = inner.branch_sig;
            value = inner.entries[self.id]
                .value
                .iter()
                .map(|&v| {
                    if let Some(s) = sig.as_mut() {
                        fold_sig(s, (v > E::ZERO) as u64);
                    }
                    if v > E::ZERO {
                        v
                    } else {
                        E::ZERO
                    }
                })
                .collect();
            inner.branch_sig = sig;
        }
        self.unop(value, self.shape(), Op::Relu { x: self.id })
    }

    pub fn sigmoid(&self) -> Tensor<'t, E> {
        let value: Vec<E> = self.tape.inner.borrow().entries[self.id]
            .value
            .iter()
            .map(|&v| E::ONE / (E::ONE + (-v).expe()))
            .collect();
        self.unop(value, self.shape(), Op::Sigmoid { x: self.id })
    }

    fn reduce(&self, axis: usize, kind: ReduceKind) -> TensorResult<(Tensor<'t, E>, Vec<usize>)> {
        let sx = self.shape();
        if sx.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "reduce",
                shape: fmt_shape(&sx),
                detail: "expected a rank-2 tensor".into(),
            });
        }
        if axis > 1 {
            return Err(TensorError::InvalidAxis { axis, rank: 2 });
        }
        let (rows, cols) = (sx[0], sx[1]);
        let reduced_len = if axis == 0 { rows } else { cols };
        if reduced_len == 0 {
            return Err(TensorError::EmptyReduce);
        }
        let out_len = if axis == 0 { cols } else { rows };
        let mut out = vec![E::ZERO; out_len];
        let mut arg = Vec::new();
        {
            let mut inner = self.tape.inner.borrow_mut();
            let mut sig = inner.branch_sig;
            let xv = &inner.entries[self.id].value;
            match kind {
                ReduceKind::Max => {
                    arg = vec![0usize; out_len];
                    for o in 0..out_len {
                        let mut best = E::from_f64(f64::NEG_INFINITY);
                        let mut best_i = 0usize;
                        for i in 0..reduced_len {
                            let v = if axis == 0 { xv[i * cols + o] } else { xv[o * cols + i] };
                            if v > best {
                                best = v;
                                best_i = i;
                            }
                        }
                        if let Some(s) = sig.as_mut() {
                            fold_sig(s, best_i as u64);
                        }
                        out[o] = best;
                        arg[o] = best_i;
                    }
                }
                ReduceKind::Sum | ReduceKind::Mean => {
                    for o in 0..out_len {
                        let mut s = E::ZERO;
                        for i in 0..reduced_len {
                            s += if axis == 0 { xv[i * cols + o] } else { xv[o * cols + i] };
                        }
                        if kind == ReduceKind::Mean {
                            s = s / E::from_f64(reduced_len as f64);
                        }
                        out[o] = s;
                    }
                }
            }
            inner.branch_sig = sig;
        }
        let needs = self.requires_grad();
        let t = self.tape.push(
            vec![out_len],
            out,
            Op::Reduce { x: self.id, axis, kind, arg: arg.clone() },
            needs,
        );
        Ok((t, arg))
    }

    /// Max along an axis of a rank-2 tensor; also returns the argmax indices
    /// (ties resolved to the lowest index).
    pub fn reduce_max(&self, axis: usize) -> TensorResult<(Tensor<'t, E>, Vec<usize>)> {
        self.reduce(axis, ReduceKind::Max)
    }

    pub fn reduce_mean(&self, axis: usize) -> TensorResult<Tensor<'t, E>> {
        Ok(self.reduce(axis, ReduceKind::Mean)?.0)
    }

    pub fn reduce_sum(&self, axis: usize) -> TensorResult<Tensor<'t, E>> {
        Ok(self.reduce(axis, ReduceKind::Sum)?.0)
    }

    pub fn sum_all(&self) -> Tensor<'t, E> {
        let mut s = E::ZERO;
        for v in self.tape.inner.borrow().entries[self.id].value.iter() {
            s += *v;
        }
        self.unop(vec![s], vec![1], Op::SumAll { x: self.id })
    }

    pub fn mean_all(&self) -> Tensor<'t, E> {
        let mut s = E::ZERO;
        let len;
        {
            let inner = self.tape.inner.borrow();
            let xv = &inner.entries[self.id].value;
            len = xv.len();
            for v in xv {
                s += *v;
            }
        }
        self.unop(vec![s / E::from_f64(len as f64)], vec![1], Op::MeanAll { x: self.id })
    }

    /// Row-wise softmax with max subtraction; rows sum to one.
    pub fn softmax(&self) -> TensorResult<Tensor<'t, E>> {
        let sx = self.shape();
        if sx.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "softmax",
                shape: fmt_shape(&sx),
                detail: "expected a rank-2 tensor of logits".into(),
            });
        }
        let (rows, cols) = (sx[0], sx[1]);
        let mut out = vec![E::ZERO; rows * cols];
        {
            let inner = self.tape.inner.borrow();
            let xv = &inner.entries[self.id].value;
            for r in 0..rows {
                let row = &xv[r * cols..(r + 1) * cols];
                let mut mx = row[0];
                for &v in row.iter() {
                    if v > mx {
                        mx = v;
                    }
                }
                let mut denom = E::ZERO;
                for c in 0..cols {
                    let e = (row[c] - mx).expe();
                    out[r * cols + c] = e;
                    denom += e;
                }
                for c in 0..cols {
                    out[r * cols + c] = out[r * cols + c] / denom;
                }
            }
        }
        let needs = self.requires_grad();
        Ok(self
            .tape
            .push(sx, out, Op::Softmax { x: self.id }, needs))
    }

    /// Mean negative log-likelihood of per-row probabilities at the given
    /// labels; probabilities are clamped below at 1e-12 before the log.
    pub fn nll(&self, labels: &[usize]) -> TensorResult<Tensor<'t, E>> {
        let sx = self.shape();
        if sx.len() != 2 || sx[0] != labels.len() {
            return Err(TensorError::InvalidShape {
                op: "nll",
                shape: fmt_shape(&sx),
                detail: format!("expected [batch={}, classes]", labels.len()),
            });
        }
        let cols = sx[1];
        for &y in labels {
            if y >= cols {
                return Err(TensorError::BadLabel { label: y, classes: cols });
            }
        }
        let mut s = 0.0f64;
        {
            let mut inner = self.tape.inner.borrow_mut();
            let mut sig = inner.branch_sig;
            let pv = &inner.entries[self.id].value;
            for (r, &y) in labels.iter().enumerate() {
                let p = pv[r * cols + y].to_f64();
                if let Some(sg) = sig.as_mut() {
                    fold_sig(sg, (p < 1e-12) as u64);
                }
                s -= p.max(1e-12).ln();
            }
            inner.branch_sig = sig;
        }
        let needs = self.requires_grad();
        Ok(self.tape.push(
            vec![1],
            vec![E::from_f64(s / labels.len() as f64)],
            Op::Nll { probs: self.id, labels: labels.to_vec() },
            needs,
        ))
    }

    /// Copy rows by index; indices may repeat.
    pub fn gather_rows(&self, idx: &[usize]) -> TensorResult<Tensor<'t, E>> {
        let sx = self.shape();
        if sx.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "gather_rows",
                shape: fmt_shape(&sx),
                detail: "expected a rank-2 tensor".into(),
            });
        }
        let (rows, cols) = (sx[0], sx[1]);
        for &i in idx {
            assert!(i < rows, "gather_rows: index {i} out of {rows} rows");
        }
        let mut out = Vec::with_capacity(idx.len() * cols);
        {
            let inner = self.tape.inner.borrow();
            let xv = &inner.entries[self.id].value;
            for &i in idx {
                out.extend_from_slice(&xv[i * cols..(i + 1) * cols]);
            }
        }
        let needs = self.requires_grad();
        Ok(self.tape.push(
            vec![idx.len(), cols],
            out,
            Op::GatherRows { x: self.id, idx: idx.to_vec() },
            needs,
        ))
    }

    /// Repeat each row `times` times consecutively.
    pub fn repeat_rows(&self, times: usize) -> TensorResult<Tensor<'t, E>> {
        let sx = self.shape();
        if sx.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "repeat_rows",
                shape: fmt_shape(&sx),
                detail: "expected a rank-2 tensor".into(),
            });
        }
        let (rows, cols) = (sx[0], sx[1]);
        let mut out = Vec::with_capacity(rows * times * cols);
        {
            let inner = self.tape.inner.borrow();
            let xv = &inner.entries[self.id].value;
            for r in 0..rows {
                for _ in 0..times {
                    out.extend_from_slice(&xv[r * cols..(r + 1) * cols]);
                }
            }
        }
        let needs = self.requires_grad();
        Ok(self.tape.push(
            vec![rows * times, cols],
            out,
            Op::RepeatRows { x: self.id, times },
            needs,
        ))
    }

    fn segment_check(&self, seg: usize, op: &'static str) -> TensorResult<(usize, usize)> {
        let sx = self.shape();
        if sx.len() != 2 || seg == 0 || sx[0] % seg != 0 {
            return Err(TensorError::InvalidShape {
                op,
                shape: fmt_shape(&sx),
                detail: format!("rows must be a positive multiple of segment size {seg}"),
            });
        }
        Ok((sx[0], sx[1]))
    }

    /// Sum over groups of `seg` consecutive rows.
    pub fn segment_sum(&self, seg: usize) -> TensorResult<Tensor<'t, E>> {
        let (rows, cols) = self.segment_check(seg, "segment_sum")?;
        let segs = rows / seg;
        let mut out = vec![E::ZERO; segs * cols];
        {
            let inner = self.tape.inner.borrow();
            let xv = &inner.entries[self.id].value;
            for r in 0..rows {
                let s = r / seg;
                for c in 0..cols {
                    out[s * cols + c] += xv[r * cols + c];
                }
            }
        }
        let needs = self.requires_grad();
        Ok(self.tape.push(
            vec![segs, cols],
            out,
            Op::SegmentSum { x: self.id, seg },
            needs,
        ))
    }

    /// Mean over groups of `seg` consecutive rows.
    pub fn segment_mean(&self, seg: usize) -> TensorResult<Tensor<'t, E>> {
        let (rows, cols) = self.segment_check(seg, "segment_mean")?;
        let segs = rows / seg;
        let denom = E::from_f64(seg as f64);
        let mut out = vec![E::ZERO; segs * cols];
        {
            let inner = self.tape.inner.borrow();
            let xv = &inner.entries[self.id].value;
            for r in 0..rows {
                let s = r / seg;
                for c in 0..cols {
                    out[s * cols + c] += xv[r * cols + c];
                }
            }
            for v in out.iter_mut() {
                *v = *v / denom;
            }
        }
        let needs = self.requires_grad();
        Ok(self.tape.push(
            vec![segs, cols],
            out,
            Op::SegmentMean { x: self.id, seg },
            needs,
        ))
    }

    /// Elementwise max over groups of `seg` consecutive rows; gradient flows
    /// to the winning row only (ties to the lowest row).
    pub fn segment_max(&self, seg: usize) -> TensorResult<Tensor<'t, E>> {
        let (rows, cols) = self.segment_check(seg, "segment_max")?;
        let segs = rows / seg;
        let mut out = vec![E::ZERO; segs * cols];
        let mut arg = vec![0usize; segs * cols];
        {
            let mut inner = self.tape.inner.borrow_mut();
            let mut sig = inner.branch_sig;
            let xv = &inner.entries[self.id].value;
            for s in 0..segs {
                for c in 0..cols {
                    let mut best = E::from_f64(f64::NEG_INFINITY);
                    let mut best_r = 0usize;
                    for i in 0..seg {
                        let r = s * seg + i;
                        let v = xv[r * cols + c];
                        if v > best {
                            best = v;
                            best_r = r;
                        }
                    }
                    if let Some(sg) = sig.as_mut() {
                        fold_sig(sg, best_r as u64);
                    }
                    out[s * cols + c] = best;
                    arg[s * cols + c] = best_r;
                }
            }
            inner.branch_sig = sig;
        }
        let needs = self.requires_grad();
        Ok(self.tape.push(
            vec![segs, cols],
            out,
            Op::SegmentMax { x: self.id, arg },
            needs,
        ))
    }

    /// Scale row r of a rank-2 tensor by `v[r]`. `v` is rank-1 of length rows
    /// (or rank-2 [rows, 1]).
    pub fn mul_colvec(&self, v: Tensor<'t, E>) -> TensorResult<Tensor<'t, E>> {
        let (sx, sv) = (self.shape(), v.shape());
        let vrows = rows_cols(&sv).0;
        if sx.len() != 2 || rows_cols(&sv).1 != 1 || vrows != sx[0] {
            return Err(TensorError::ShapeMismatch {
                op: "mul_colvec",
                lhs: fmt_shape(&sx),
                rhs: fmt_shape(&sv),
            });
        }
        let (rows, cols) = (sx[0], sx[1]);
        let mut out = vec![E::ZERO; rows * cols];
        {
            let inner = self.tape.inner.borrow();
            let xv = &inner.entries[self.id].value;
            let vv = &inner.entries[v.id].value;
            for r in 0..rows {
                for c in 0..cols {
                    out[r * cols + c] = xv[r * cols + c] * vv[r];
                }
            }
        }
        let needs = self.requires_grad() || v.requires_grad();
        Ok(self.tape.push(
            sx,
            out,
            Op::MulColVec { x: self.id, v: v.id },
            needs,
        ))
    }

    /// Concatenate two rank-2 tensors with the same row count along columns.
    pub fn concat_cols(&self, rhs: Tensor<'t, E>) -> TensorResult<Tensor<'t, E>> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: fmt_shape(&sa),
                rhs: fmt_shape(&sb),
            });
        }
        let (rows, ca, cb) = (sa[0], sa[1], sb[1]);
        let mut out = Vec::with_capacity(rows * (ca + cb));
        {
            let inner = self.tape.inner.borrow();
            let av = &inner.entries[self.id].value;
            let bv = &inner.entries[rhs.id].value;
            for r in 0..rows {
                out.extend_from_slice(&av[r * ca..(r + 1) * ca]);
                out.extend_from_slice(&bv[r * cb..(r + 1) * cb]);
            }
        }
        let needs = self.requires_grad() || rhs.requires_grad();
        Ok(self.tape.push(
            vec![rows, ca + cb],
            out,
            Op::ConcatCols { a: self.id, b: rhs.id },
            needs,
        ))
    }

    pub fn transpose(&self) -> TensorResult<Tensor<'t, E>> {
        let sx = self.shape();
        if sx.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: fmt_shape(&sx),
                detail: "expected a rank-2 tensor".into(),
            });
        }
        let (rows, cols) = (sx[0], sx[1]);
        let mut out = vec![E::ZERO; rows * cols];
        {
            let inner = self.tape.inner.borrow();
            let xv = &inner.entries[self.id].value;
            for r in 0..rows {
                for c in 0..cols {
                    out[c * rows + r] = xv[r * cols + c];
                }
            }
        }
        let needs = self.requires_grad();
        Ok(self.tape.push(
            vec![cols, rows],
            out,
            Op::Transpose { x: self.id },
            needs,
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> TensorResult<Tensor<'t, E>> {
        let len: usize = shape.iter().product();
        if len != self.len() {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape: fmt_shape(shape),
                detail: format!("element count {} != {}", len, self.len()),
            });
        }
        let value = self.value();
        let needs = self.requires_grad();
        Ok(self
            .tape
            .push(shape.to_vec(), value, Op::Reshape { x: self.id }, needs))
    }

    /// All-pairs squared Euclidean distances between rows of `self` (m×c)
    /// and rows of `rhs` (n×c), yielding m×n. Computed via a matrix product
    /// and clamped at zero.
    pub fn pairwise_sqdist(&self, rhs: Tensor<'t, E>) -> TensorResult<Tensor<'t, E>> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "pairwise_sqdist",
                lhs: fmt_shape(&sa),
                rhs: fmt_shape(&sb),
            });
        }
        let (m, c, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![E::ZERO; m * n];
        {
            let mut inner = self.tape.inner.borrow_mut();
            let mut sig = inner.branch_sig;
            let av = &inner.entries[self.id].value;
            let bv = &inner.entries[rhs.id].value;
            // -2 a · b^T
            E::gemm_nt_alpha(m, c, n, E::from_f64(-2.0), av, bv, &mut out);
            let mut an = vec![E::ZERO; m];
            for i in 0..m {
                let mut s = E::ZERO;
                for cc in 0..c {
                    s += av[i * c + cc] * av[i * c + cc];
                }
                an[i] = s;
            }
            let mut bn = vec![E::ZERO; n];
            for j in 0..n {
                let mut s = E::ZERO;
                for cc in 0..c {
                    s += bv[j * c + cc] * bv[j * c + cc];
                }
                bn[j] = s;
            }
            for i in 0..m {
                for j in 0..n {
                    let v = out[i * n + j] + an[i] + bn[j];
                    if let Some(sg) = sig.as_mut() {
                        fold_sig(sg, (v > E::ZERO) as u64);
                    }
                    out[i * n + j] = if v > E::ZERO { v } else { E::ZERO };
                }
            }
            inner.branch_sig = sig;
        }
        let needs = self.requires_grad() || rhs.requires_grad();
        Ok(self.tape.push(
            vec![m, n],
            out,
            Op::PairwiseSqDist { a: self.id, b: rhs.id },
            needs,
        ))
    }

    /// Sum over all entries of the multi-bandwidth RBF kernel applied to a
    /// squared-distance matrix: `sum_ij mean_s exp(-d_ij / (2 sigma2_s))`.
    /// Bandwidths are variances (sigma^2).
    pub fn rbf_kernel_sum(&self, bandwidths: &[f64]) -> Tensor<'t, E> {
        assert!(!bandwidths.is_empty(), "rbf_kernel_sum: empty bandwidth list");
        let bw: Vec<E> = bandwidths.iter().map(|&b| E::from_f64(b)).collect();
        let plan = rbf_plan(&bw);
        let mut total = E::ZERO;
        {
            let inner = self.tape.inner.borrow();
            let dv = &inner.entries[self.id].value;
            for &d in dv.iter() {
                let base = (-d * plan.base_coeff).expe();
                for &(pow, coeff) in &plan.terms {
                    if pow >= 1 {
                        total += powi(base, pow);
                    } else {
                        total += (-d * coeff).expe();
                    }
                }
            }
        }
        let weight = E::from_f64(1.0 / bw.len() as f64);
        self.unop(
            vec![total * weight],
            vec![1],
            Op::RbfKernelSum { d: self.id, bandwidths: bw },
        )
    }
}
