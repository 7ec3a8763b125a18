//! Tape-based reverse-mode automatic differentiation over tensors.
//!
//! A [`Tape`] records primitive operations as they execute; replaying the
//! record backward yields gradients. Two properties are load-bearing for the
//! rest of the crate and are guaranteed here:
//!
//! * replay visits operations in exact reverse construction order, and
//!   gradient contributions accumulate in that fixed order, so repeated runs
//!   are bitwise identical;
//! * the forward kernels are shared (via [`Cx`]) between recorded and
//!   untracked execution, so an inference pass and a recorded pass produce
//!   bitwise-identical values.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{kernels, shape_len, Element, Tensor};

/// Process-wide instrumentation for tracked activations, used to verify the
/// memory bound of gradient-cached training (live nodes stay proportional to
/// the sub-batch size, not the batch size).
pub mod stats {
    use std::sync::atomic::{AtomicI64, Ordering};

    static LIVE: AtomicI64 = AtomicI64::new(0);
    static PEAK: AtomicI64 = AtomicI64::new(0);

    pub(super) fn node_created() {
        let now = LIVE.fetch_add(1, Ordering::Relaxed) + 1;
        PEAK.fetch_max(now, Ordering::Relaxed);
    }

    pub(super) fn nodes_dropped(n: usize) {
        LIVE.fetch_sub(n as i64, Ordering::Relaxed);
    }

    pub fn live_nodes() -> i64 {
        LIVE.load(Ordering::Relaxed)
    }

    /// Resets the peak watermark to the current live count.
    pub fn reset_peak() {
        PEAK.store(LIVE.load(Ordering::Relaxed), Ordering::Relaxed);
    }

    pub fn peak_live_nodes() -> i64 {
        PEAK.load(Ordering::Relaxed)
    }
}

static TAPE_IDS: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(1);

/// Handle to a value tracked on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape_id: u64,
    index: usize,
}

enum Op<T: Element> {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    MulElem(Var, Var),
    Scale(Var, T),
    /// Adds a constant tensor; the constant receives no gradient.
    AddConst(Var),
    /// `[m,n] + [n]` row broadcast.
    AddRow(Var, Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    GatherRows {
        table: Var,
        rows: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    SelectRow {
        x: Var,
        row: usize,
    },
    L2Normalize {
        x: Var,
        norm: T,
    },
    /// Row-wise dot products of two `[m,n]` tensors -> `[m,1]`.
    RowDot(Var, Var),
    /// Row-wise log-sum-exp of `[m,n]` -> `[m,1]`.
    LseRows(Var),
    /// Column vector of diagonal entries `[m,n] -> [m,1]` (requires n >= m).
    DiagCol(Var),
    MeanAll(Var),
    SumAll(Var),
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Shared forward kernels. Both the tape and the untracked evaluator go
/// through these functions, which keeps the two paths bitwise identical.
pub(crate) mod fwd {
    use super::*;

    pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        assert_eq!(a.rank(), 2, "matmul lhs rank");
        assert_eq!(b.rank(), 2, "matmul rhs rank");
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let (k2, n) = (b.shape()[0], b.shape()[1]);
        assert_eq!(k, k2, "matmul inner extents: {:?} x {:?}", a.shape(), b.shape());
        Tensor::from_vec_unchecked(vec![m, n], kernels::gemm(a.data(), b.data(), m, k, n))
    }

    pub fn transpose<T: Element>(a: &Tensor<T>) -> Tensor<T> {
        assert_eq!(a.rank(), 2);
        let (m, n) = (a.shape()[0], a.shape()[1]);
        Tensor::from_vec_unchecked(vec![n, m], kernels::transpose(a.data(), m, n))
    }

    pub fn zip<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
        assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
        Tensor::from_vec_unchecked(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add_row<T: Element>(a: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
        assert_eq!(a.rank(), 2);
        assert_eq!(bias.shape(), [a.shape()[1]], "row bias shape");
        let n = a.shape()[1];
        let mut out = a.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            for (o, &b) in row.iter_mut().zip(bias.data()) {
                *o = *o + b;
            }
        }
        Tensor::from_vec_unchecked(a.shape().to_vec(), out)
    }

    pub fn softmax_rows<T: Element>(a: &Tensor<T>) -> Tensor<T> {
        assert_eq!(a.rank(), 2);
        let n = a.shape()[1];
        let mut out = a.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            kernels::softmax_lane(row);
        }
        Tensor::from_vec_unchecked(a.shape().to_vec(), out)
    }

    /// Returns (output, per-slice mean, per-slice 1/std).
    pub fn layer_norm_rows<T: Element>(
        x: &Tensor<T>,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        eps: f64,
    ) -> (Tensor<T>, Vec<T>, Vec<T>) {
        let d = *x.shape().last().expect("layer_norm rank >= 1");
        assert_eq!(gamma.shape(), [d]);
        assert_eq!(beta.shape(), [d]);
        let slices = x.len() / d;
        let inv_d = T::from_f64(1.0 / d as f64);
        let eps_t = T::from_f64(eps);
        let mut out = vec![T::zero(); x.len()];
        let mut means = Vec::with_capacity(slices);
        let mut rstds = Vec::with_capacity(slices);
        for s in 0..slices {
            let xs = &x.data()[s * d..(s + 1) * d];
            let mut mean = T::zero();
            for &v in xs {
                mean += v;
            }
            mean = mean * inv_d;
            let mut var = T::zero();
            for &v in xs {
                let c = v - mean;
                var += c * c;
            }
            var = var * inv_d;
            let rstd = T::one() / (var + eps_t).sqrt();
            for (j, &v) in xs.iter().enumerate() {
                out[s * d + j] = (v - mean) * rstd * gamma.data()[j] + beta.data()[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        (
            Tensor::from_vec_unchecked(x.shape().to_vec(), out),
            means,
            rstds,
        )
    }

    pub fn gather_rows<T: Element>(table: &Tensor<T>, rows: &[usize]) -> Tensor<T> {
        assert_eq!(table.rank(), 2);
        let d = table.shape()[1];
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            assert!(r < table.shape()[0], "gather row {r} out of range");
            out.extend_from_slice(table.row(r));
        }
        Tensor::from_vec_unchecked(vec![rows.len(), d], out)
    }

    /// Parts may be rank-1 (`[d]`, one row) or rank-2 (`[r,d]`).
    pub fn concat_rows<T: Element>(parts: &[&Tensor<T>]) -> Tensor<T> {
        assert!(!parts.is_empty());
        let d = *parts[0].shape().last().unwrap();
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            match p.rank() {
                1 => {
                    assert_eq!(p.shape()[0], d);
                    rows += 1;
                }
                2 => {
                    assert_eq!(p.shape()[1], d);
                    rows += p.shape()[0];
                }
                r => panic!("concat_rows part rank {r}"),
            }
            out.extend_from_slice(p.data());
        }
        Tensor::from_vec_unchecked(vec![rows, d], out)
    }

    pub fn concat_cols<T: Element>(parts: &[&Tensor<T>]) -> Tensor<T> {
        assert!(!parts.is_empty());
        let m = parts[0].shape()[0];
        let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                assert_eq!(p.rank(), 2);
                assert_eq!(p.shape()[0], m, "concat_cols row mismatch");
                out.extend_from_slice(p.row(i));
            }
        }
        Tensor::from_vec_unchecked(vec![m, total], out)
    }

    pub fn slice_cols<T: Element>(x: &Tensor<T>, start: usize, len: usize) -> Tensor<T> {
        assert_eq!(x.rank(), 2);
        let (m, n) = (x.shape()[0], x.shape()[1]);
        assert!(start + len <= n, "slice_cols out of range");
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&x.row(i)[start..start + len]);
        }
        Tensor::from_vec_unchecked(vec![m, len], out)
    }

    pub fn select_row<T: Element>(x: &Tensor<T>, row: usize) -> Tensor<T> {
        assert_eq!(x.rank(), 2);
        assert!(row < x.shape()[0], "select_row out of range");
        Tensor::from_vec_unchecked(vec![x.shape()[1]], x.row(row).to_vec())
    }

    /// Returns (unit vector, original norm). Rank-1 only.
    pub fn l2_normalize<T: Element>(x: &Tensor<T>) -> (Tensor<T>, T) {
        assert_eq!(x.rank(), 1);
        let norm = kernels::l2_norm(x.data());
        let out = x.map(|v| v / norm);
        (out, norm)
    }
}

/// Execution context for forward passes: either a recording [`Tape`] or the
/// untracked [`EvalCx`]. Both run the same kernels in the same order.
pub trait Cx<T: Element> {
    type H: Clone;

    fn leaf(&mut self, t: &Tensor<T>) -> Self::H;
    fn value(&self, h: &Self::H) -> Tensor<T>;

    fn matmul(&mut self, a: &Self::H, b: &Self::H) -> Self::H;
    fn transpose(&mut self, a: &Self::H) -> Self::H;
    fn add(&mut self, a: &Self::H, b: &Self::H) -> Self::H;
    fn scale(&mut self, a: &Self::H, k: T) -> Self::H;
    fn add_const(&mut self, a: &Self::H, c: &Tensor<T>) -> Self::H;
    fn add_row(&mut self, a: &Self::H, bias: &Self::H) -> Self::H;
    fn gelu(&mut self, a: &Self::H) -> Self::H;
    fn softmax_rows(&mut self, a: &Self::H) -> Self::H;
    fn layer_norm_rows(&mut self, x: &Self::H, gamma: &Self::H, beta: &Self::H, eps: f64)
        -> Self::H;
    fn gather_rows(&mut self, table: &Self::H, rows: &[usize]) -> Self::H;
    fn concat_rows(&mut self, parts: &[Self::H]) -> Self::H;
    fn concat_cols(&mut self, parts: &[Self::H]) -> Self::H;
    fn slice_cols(&mut self, x: &Self::H, start: usize, len: usize) -> Self::H;
    fn select_row(&mut self, x: &Self::H, row: usize) -> Self::H;
    fn l2_normalize(&mut self, x: &Self::H) -> Self::H;
}

/// Untracked executor: computes values immediately, retains nothing.
#[derive(Default)]
pub struct EvalCx;

impl<T: Element> Cx<T> for EvalCx {
    type H = Tensor<T>;

    fn leaf(&mut self, t: &Tensor<T>) -> Tensor<T> {
        t.clone()
    }
    fn value(&self, h: &Tensor<T>) -> Tensor<T> {
        h.clone()
    }
    fn matmul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        fwd::matmul(a, b)
    }
    fn transpose(&mut self, a: &Tensor<T>) -> Tensor<T> {
        fwd::transpose(a)
    }
    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        fwd::zip(a, b, |x, y| x + y)
    }
    fn scale(&mut self, a: &Tensor<T>, k: T) -> Tensor<T> {
        a.map(|v| v * k)
    }
    fn add_const(&mut self, a: &Tensor<T>, c: &Tensor<T>) -> Tensor<T> {
        fwd::zip(a, c, |x, y| x + y)
    }
    fn add_row(&mut self, a: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
        fwd::add_row(a, bias)
    }
    fn gelu(&mut self, a: &Tensor<T>) -> Tensor<T> {
        a.map(kernels::gelu_scalar)
    }
    fn softmax_rows(&mut self, a: &Tensor<T>) -> Tensor<T> {
        fwd::softmax_rows(a)
    }
    fn layer_norm_rows(
        &mut self,
        x: &Tensor<T>,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        eps: f64,
    ) -> Tensor<T> {
        fwd::layer_norm_rows(x, gamma, beta, eps).0
    }
    fn gather_rows(&mut self, table: &Tensor<T>, rows: &[usize]) -> Tensor<T> {
        fwd::gather_rows(table, rows)
    }
    fn concat_rows(&mut self, parts: &[Tensor<T>]) -> Tensor<T> {
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        fwd::concat_rows(&refs)
    }
    fn concat_cols(&mut self, parts: &[Tensor<T>]) -> Tensor<T> {
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        fwd::concat_cols(&refs)
    }
    fn slice_cols(&mut self, x: &Tensor<T>, start: usize, len: usize) -> Tensor<T> {
        fwd::slice_cols(x, start, len)
    }
    fn select_row(&mut self, x: &Tensor<T>, row: usize) -> Tensor<T> {
        fwd::select_row(x, row)
    }
    fn l2_normalize(&mut self, x: &Tensor<T>) -> Tensor<T> {
        fwd::l2_normalize(x).0
    }
}

/// Recording tape. Gradients are computed once per tape; a second call is
/// rejected.
pub struct Tape<T: Element> {
    id: u64,
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Drop for Tape<T> {
    fn drop(&mut self) {
        stats::nodes_dropped(self.nodes.len());
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: TAPE_IDS.fetch_add(1, std::sync::atomic::Ordering::Relaxed),
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        debug_assert!(
            value.is_all_finite(),
            "non-finite value produced on tape (op output shape {:?})",
            value.shape()
        );
        let index = self.nodes.len();
        self.nodes.push(Node { value, op });
        stats::node_created();
        Var {
            tape_id: self.id,
            index,
        }
    }

    fn check(&self, v: Var) -> usize {
        assert_eq!(v.tape_id, self.id, "Var belongs to a different tape");
        v.index
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.check(v)].value
    }

    // Loss-graph primitives (tape-only: the loss is always differentiated).

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = fwd::zip(self.val(a), self.val(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        let value = fwd::zip(self.val(a), self.val(b), |x, y| x * y);
        self.push(value, Op::MulElem(a, b))
    }

    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.val(a), self.val(b));
        assert_eq!(av.shape(), bv.shape());
        assert_eq!(av.rank(), 2);
        let n = av.shape()[1];
        let out: Vec<T> = (0..av.shape()[0])
            .map(|i| kernels::dot(&av.data()[i * n..(i + 1) * n], &bv.data()[i * n..(i + 1) * n]))
            .collect();
        let value = Tensor::from_vec_unchecked(vec![av.shape()[0], 1], out);
        self.push(value, Op::RowDot(a, b))
    }

    pub fn lse_rows(&mut self, a: Var) -> Var {
        let av = self.val(a);
        assert_eq!(av.rank(), 2);
        let n = av.shape()[1];
        let out: Vec<T> = av
            .data()
            .chunks_exact(n)
            .map(kernels::log_sum_exp)
            .collect();
        let value = Tensor::from_vec_unchecked(vec![av.shape()[0], 1], out);
        self.push(value, Op::LseRows(a))
    }

    pub fn diag_col(&mut self, a: Var) -> Var {
        let av = self.val(a);
        assert_eq!(av.rank(), 2);
        let (m, n) = (av.shape()[0], av.shape()[1]);
        assert!(n >= m, "diag_col needs at least as many columns as rows");
        let out: Vec<T> = (0..m).map(|i| av.data()[i * n + i]).collect();
        let value = Tensor::from_vec_unchecked(vec![m, 1], out);
        self.push(value, Op::DiagCol(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let av = self.val(a);
        let inv = T::from_f64(1.0 / av.len() as f64);
        let mut s = T::zero();
        for &v in av.data() {
            s += v;
        }
        let value = Tensor::scalar(s * inv);
        self.push(value, Op::MeanAll(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let av = self.val(a);
        let mut s = T::zero();
        for &v in av.data() {
            s += v;
        }
        let value = Tensor::scalar(s);
        self.push(value, Op::SumAll(a))
    }

    /// Gradients of a scalar loss with respect to named tracked tensors.
    /// Untouched entries get zero gradients. Consumes the tape's ability to
    /// run backward again.
    pub fn grad(
        &mut self,
        loss: Var,
        wrt: &[(String, Var)],
    ) -> Result<BTreeMap<String, Tensor<T>>> {
        if self.val(loss).rank() != 0 {
            return Err(Error::invalid(format!(
                "grad needs a scalar loss, got shape {:?}",
                self.val(loss).shape()
            )));
        }
        let seed = Tensor::scalar(T::one());
        let mut store = self.backward_seeded(&[(loss, seed)])?;
        let mut out = BTreeMap::new();
        for (name, var) in wrt {
            if var.tape_id != self.id || var.index >= self.nodes.len() {
                return Err(Error::invalid(format!(
                    "parameter {name} is not tracked on this tape"
                )));
            }
            let g = store
                .take(*var)
                .unwrap_or_else(|| Tensor::zeros(self.nodes[var.index].value.shape()));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    /// Backward pass seeded with explicit output gradients. Used directly by
    /// gradient caching, where cached representation gradients replace the
    /// loss seed.
    pub fn backward_seeded(&mut self, seeds: &[(Var, Tensor<T>)]) -> Result<GradStore<T>> {
        if self.consumed {
            return Err(Error::invalid("tape already consumed by a backward pass"));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (var, seed) in seeds {
            let idx = self.check(*var);
            if seed.shape() != self.nodes[idx].value.shape() {
                return Err(Error::shape(format!(
                    "seed gradient shape {:?} does not match value shape {:?}",
                    seed.shape(),
                    self.nodes[idx].value.shape()
                )));
            }
            acc(&mut grads, idx, seed.clone());
        }

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            // Re-insert so callers can read gradients of interior nodes too.
            let g_for_inputs = g.clone();
            grads[idx] = Some(g);
            let g = g_for_inputs;
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (ai, bi) = (a.index, b.index);
                    let av = &self.nodes[ai].value;
                    let bv = &self.nodes[bi].value;
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[1];
                    let bt = kernels::transpose(bv.data(), k, n);
                    let ga = kernels::gemm(g.data(), &bt, m, n, k);
                    let at = kernels::transpose(av.data(), m, k);
                    let gb = kernels::gemm(&at, g.data(), k, m, n);
                    acc(&mut grads, ai, Tensor::from_vec_unchecked(vec![m, k], ga));
                    acc(&mut grads, bi, Tensor::from_vec_unchecked(vec![k, n], gb));
                }
                Op::Transpose(a) => {
                    let ai = a.index;
                    let (m, n) = (g.shape()[0], g.shape()[1]);
                    acc(
                        &mut grads,
                        ai,
                        Tensor::from_vec_unchecked(vec![n, m], kernels::transpose(g.data(), m, n)),
                    );
                }
                Op::Add(a, b) => {
                    let (ai, bi) = (a.index, b.index);
                    acc(&mut grads, ai, g.clone());
                    acc(&mut grads, bi, g);
                }
                Op::Sub(a, b) => {
                    let (ai, bi) = (a.index, b.index);
                    acc(&mut grads, ai, g.clone());
                    acc(&mut grads, bi, g.map(|v| -v));
                }
                Op::MulElem(a, b) => {
                    let (ai, bi) = (a.index, b.index);
                    let ga = fwd::zip(&g, &self.nodes[bi].value, |x, y| x * y);
                    let gb = fwd::zip(&g, &self.nodes[ai].value, |x, y| x * y);
                    acc(&mut grads, ai, ga);
                    acc(&mut grads, bi, gb);
                }
                Op::Scale(a, k) => {
                    let k = *k;
                    acc(&mut grads, a.index, g.map(|v| v * k));
                }
                Op::AddConst(a) => {
                    acc(&mut grads, a.index, g);
                }
                Op::AddRow(a, bias) => {
                    let (ai, bi) = (a.index, bias.index);
                    let n = g.shape()[1];
                    let mut gb = vec![T::zero(); n];
                    for row in g.data().chunks_exact(n) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, ai, g.clone());
                    acc(&mut grads, bi, Tensor::from_vec_unchecked(vec![n], gb));
                }
                Op::Gelu(a) => {
                    let ai = a.index;
                    let ga = fwd::zip(&g, &self.nodes[ai].value, |gv, xv| {
                        gv * kernels::gelu_grad_scalar(xv)
                    });
                    acc(&mut grads, ai, ga);
                }
                Op::SoftmaxRows(a) => {
                    let ai = a.index;
                    let y = &self.nodes[idx].value;
                    let n = y.shape()[1];
                    let mut out = vec![T::zero(); y.len()];
                    for (r, (g_row, y_row)) in g
                        .data()
                        .chunks_exact(n)
                        .zip(y.data().chunks_exact(n))
                        .enumerate()
                    {
                        let gy = kernels::dot(g_row, y_row);
                        for j in 0..n {
                            out[r * n + j] = y_row[j] * (g_row[j] - gy);
                        }
                    }
                    acc(
                        &mut grads,
                        ai,
                        Tensor::from_vec_unchecked(y.shape().to_vec(), out),
                    );
                }
                Op::LayerNormRows {
                    x,
                    gamma,
                    beta,
                    mean,
                    rstd,
                } => {
                    let (xi, gi, bi) = (x.index, gamma.index, beta.index);
                    let xv = &self.nodes[xi].value;
                    let gv = &self.nodes[gi].value;
                    let d = *xv.shape().last().unwrap();
                    let slices = xv.len() / d;
                    let inv_d = T::from_f64(1.0 / d as f64);
                    let mut dx = vec![T::zero(); xv.len()];
                    let mut dgamma = vec![T::zero(); d];
                    let mut dbeta = vec![T::zero(); d];
                    for s in 0..slices {
                        let xs = &xv.data()[s * d..(s + 1) * d];
                        let gs = &g.data()[s * d..(s + 1) * d];
                        let (mu, r) = (mean[s], rstd[s]);
                        let mut sum_gg = T::zero();
                        let mut sum_ggx = T::zero();
                        for j in 0..d {
                            let xhat = (xs[j] - mu) * r;
                            let gg = gs[j] * gv.data()[j];
                            sum_gg += gg;
                            sum_ggx += gg * xhat;
                            dgamma[j] += gs[j] * xhat;
                            dbeta[j] += gs[j];
                        }
                        let m_gg = sum_gg * inv_d;
                        let m_ggx = sum_ggx * inv_d;
                        for j in 0..d {
                            let xhat = (xs[j] - mu) * r;
                            let gg = gs[j] * gv.data()[j];
                            dx[s * d + j] = r * (gg - m_gg - xhat * m_ggx);
                        }
                    }
                    acc(
                        &mut grads,
                        xi,
                        Tensor::from_vec_unchecked(xv.shape().to_vec(), dx),
                    );
                    acc(&mut grads, gi, Tensor::from_vec_unchecked(vec![d], dgamma));
                    acc(&mut grads, bi, Tensor::from_vec_unchecked(vec![d], dbeta));
                }
                Op::GatherRows { table, rows } => {
                    let ti = table.index;
                    let tshape = self.nodes[ti].value.shape().to_vec();
                    let d = tshape[1];
                    let mut dt = vec![T::zero(); tshape[0] * d];
                    for (i, &r) in rows.iter().enumerate() {
                        let g_row = &g.data()[i * d..(i + 1) * d];
                        for (o, &v) in dt[r * d..(r + 1) * d].iter_mut().zip(g_row) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, ti, Tensor::from_vec_unchecked(tshape, dt));
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let d = g.shape()[1];
                    let mut row = 0;
                    for p in parts {
                        let pshape = self.nodes[p.index].value.shape().to_vec();
                        let nrows = if pshape.len() == 1 { 1 } else { pshape[0] };
                        let chunk = g.data()[row * d..(row + nrows) * d].to_vec();
                        acc(
                            &mut grads,
                            p.index,
                            Tensor::from_vec_unchecked(pshape, chunk),
                        );
                        row += nrows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let m = g.shape()[0];
                    let total = g.shape()[1];
                    let mut start = 0;
                    for p in parts {
                        let w = self.nodes[p.index].value.shape()[1];
                        let mut chunk = Vec::with_capacity(m * w);
                        for i in 0..m {
                            chunk.extend_from_slice(&g.data()[i * total + start..i * total + start + w]);
                        }
                        acc(
                            &mut grads,
                            p.index,
                            Tensor::from_vec_unchecked(vec![m, w], chunk),
                        );
                        start += w;
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let (xi, start, len) = (x.index, *start, *len);
                    let xshape = self.nodes[xi].value.shape().to_vec();
                    let (m, n) = (xshape[0], xshape[1]);
                    let mut dx = vec![T::zero(); m * n];
                    for i in 0..m {
                        for j in 0..len {
                            dx[i * n + start + j] = g.data()[i * len + j];
                        }
                    }
                    acc(&mut grads, xi, Tensor::from_vec_unchecked(xshape, dx));
                }
                Op::SelectRow { x, row } => {
                    let (xi, row) = (x.index, *row);
                    let xshape = self.nodes[xi].value.shape().to_vec();
                    let n = xshape[1];
                    let mut dx = vec![T::zero(); xshape[0] * n];
                    dx[row * n..(row + 1) * n].copy_from_slice(g.data());
                    acc(&mut grads, xi, Tensor::from_vec_unchecked(xshape, dx));
                }
                Op::L2Normalize { x, norm } => {
                    let (xi, norm) = (x.index, *norm);
                    let y = &self.nodes[idx].value;
                    let gy = kernels::dot(g.data(), y.data());
                    let dx: Vec<T> = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gj, &yj)| (gj - gy * yj) / norm)
                        .collect();
                    acc(
                        &mut grads,
                        xi,
                        Tensor::from_vec_unchecked(y.shape().to_vec(), dx),
                    );
                }
                Op::RowDot(a, b) => {
                    let (ai, bi) = (a.index, b.index);
                    let av = self.nodes[ai].value.clone();
                    let bv = self.nodes[bi].value.clone();
                    let n = av.shape()[1];
                    let mut da = vec![T::zero(); av.len()];
                    let mut db = vec![T::zero(); bv.len()];
                    for i in 0..av.shape()[0] {
                        let gi = g.data()[i];
                        for j in 0..n {
                            da[i * n + j] = gi * bv.data()[i * n + j];
                            db[i * n + j] = gi * av.data()[i * n + j];
                        }
                    }
                    acc(
                        &mut grads,
                        ai,
                        Tensor::from_vec_unchecked(av.shape().to_vec(), da),
                    );
                    acc(
                        &mut grads,
                        bi,
                        Tensor::from_vec_unchecked(bv.shape().to_vec(), db),
                    );
                }
                Op::LseRows(a) => {
                    let ai = a.index;
                    let av = &self.nodes[ai].value;
                    let n = av.shape()[1];
                    let mut dx = vec![T::zero(); av.len()];
                    for (i, row) in av.data().chunks_exact(n).enumerate() {
                        let gi = g.data()[i];
                        let mut sm = row.to_vec();
                        kernels::softmax_lane(&mut sm);
                        for j in 0..n {
                            dx[i * n + j] = gi * sm[j];
                        }
                    }
                    acc(
                        &mut grads,
                        ai,
                        Tensor::from_vec_unchecked(av.shape().to_vec(), dx),
                    );
                }
                Op::DiagCol(a) => {
                    let ai = a.index;
                    let ashape = self.nodes[ai].value.shape().to_vec();
                    let (m, n) = (ashape[0], ashape[1]);
                    let mut dx = vec![T::zero(); m * n];
                    for i in 0..m {
                        dx[i * n + i] = g.data()[i];
                    }
                    acc(&mut grads, ai, Tensor::from_vec_unchecked(ashape, dx));
                }
                Op::MeanAll(a) => {
                    let ai = a.index;
                    let ashape = self.nodes[ai].value.shape().to_vec();
                    let len = shape_len(&ashape);
                    let v = g.data()[0] * T::from_f64(1.0 / len as f64);
                    acc(&mut grads, ai, Tensor::full(&ashape, v));
                }
                Op::SumAll(a) => {
                    let ai = a.index;
                    let ashape = self.nodes[ai].value.shape().to_vec();
                    acc(&mut grads, ai, Tensor::full(&ashape, g.data()[0]));
                }
            }
        }
        Ok(GradStore { grads })
    }
}

impl<T: Element> Cx<T> for Tape<T> {
    type H = Var;

    fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.clone(), Op::Leaf)
    }

    fn value(&self, h: &Var) -> Tensor<T> {
        self.val(*h).clone()
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Var {
        let value = fwd::matmul(self.val(*a), self.val(*b));
        self.push(value, Op::Matmul(*a, *b))
    }

    fn transpose(&mut self, a: &Var) -> Var {
        let value = fwd::transpose(self.val(*a));
        self.push(value, Op::Transpose(*a))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Var {
        let value = fwd::zip(self.val(*a), self.val(*b), |x, y| x + y);
        self.push(value, Op::Add(*a, *b))
    }

    fn scale(&mut self, a: &Var, k: T) -> Var {
        let value = self.val(*a).map(|v| v * k);
        self.push(value, Op::Scale(*a, k))
    }

    fn add_const(&mut self, a: &Var, c: &Tensor<T>) -> Var {
        let value = fwd::zip(self.val(*a), c, |x, y| x + y);
        self.push(value, Op::AddConst(*a))
    }

    fn add_row(&mut self, a: &Var, bias: &Var) -> Var {
        let value = fwd::add_row(self.val(*a), self.val(*bias));
        self.push(value, Op::AddRow(*a, *bias))
    }

    fn gelu(&mut self, a: &Var) -> Var {
        let value = self.val(*a).map(kernels::gelu_scalar);
        self.push(value, Op::Gelu(*a))
    }

    fn softmax_rows(&mut self, a: &Var) -> Var {
        let value = fwd::softmax_rows(self.val(*a));
        self.push(value, Op::SoftmaxRows(*a))
    }

    fn layer_norm_rows(&mut self, x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Var {
        let (value, mean, rstd) =
            fwd::layer_norm_rows(self.val(*x), self.val(*gamma), self.val(*beta), eps);
        self.push(
            value,
            Op::LayerNormRows {
                x: *x,
                gamma: *gamma,
                beta: *beta,
                mean,
                rstd,
            },
        )
    }

    fn gather_rows(&mut self, table: &Var, rows: &[usize]) -> Var {
        let value = fwd::gather_rows(self.val(*table), rows);
        self.push(
            value,
            Op::GatherRows {
                table: *table,
                rows: rows.to_vec(),
            },
        )
    }

    fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|p| self.val(*p)).collect();
        let value = fwd::concat_rows(&refs);
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|p| self.val(*p)).collect();
        let value = fwd::concat_cols(&refs);
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    fn slice_cols(&mut self, x: &Var, start: usize, len: usize) -> Var {
        let value = fwd::slice_cols(self.val(*x), start, len);
        self.push(value, Op::SliceCols { x: *x, start, len })
    }

    fn select_row(&mut self, x: &Var, row: usize) -> Var {
        let value = fwd::select_row(self.val(*x), row);
        self.push(value, Op::SelectRow { x: *x, row })
    }

    fn l2_normalize(&mut self, x: &Var) -> Var {
        let (value, norm) = fwd::l2_normalize(self.val(*x));
        self.push(value, Op::L2Normalize { x: *x, norm })
    }
}

/// Gradients indexed by tape node, produced by a backward pass.
pub struct GradStore<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> GradStore<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.index).and_then(|g| g.take())
    }
}

fn acc<T: Element>(grads: &mut [Option<Tensor<T>>], idx: usize, delta: Tensor<T>) {
    match &mut grads[idx] {
        slot @ None => *slot = Some(delta),
        Some(g) => {
            debug_assert_eq!(g.shape(), delta.shape());
            for (o, &v) in g.data_mut().iter_mut().zip(delta.data()) {
                *o += v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fd;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::scalar(3.0));
        let y = tape.mul_elem(x, x);
        let grads = tape.grad(y, &[("x".into(), x)]).unwrap();
        assert_eq!(grads["x"].scalar_value().unwrap(), 6.0);
    }

    #[test]
    fn untouched_parameter_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.leaf(&Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let unused = tape.leaf(&Tensor::new(vec![2], vec![5.0, 6.0]).unwrap());
        let loss = tape.sum_all(c);
        let grads = tape
            .grad(loss, &[("c".into(), c), ("unused".into(), unused)])
            .unwrap();
        assert_eq!(grads["c"].data(), &[1.0, 1.0, 1.0]);
        assert_eq!(grads["unused"].data(), &[0.0, 0.0]);
    }

    #[test]
    fn second_backward_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::scalar(2.0));
        let y = tape.mul_elem(x, x);
        tape.grad(y, &[("x".into(), x)]).unwrap();
        let mut tape2 = Tape::<f64>::new();
        let x2 = tape2.leaf(&Tensor::scalar(2.0));
        let _ = x2;
        assert!(matches!(
            tape.grad(y, &[("x".into(), x)]),
            Err(Error::Invalid(_))
        ));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(
            tape.grad(x, &[("x".into(), x)]),
            Err(Error::Invalid(_))
        ));
    }

    #[test]
    fn foreign_var_rejected() {
        let mut a = Tape::<f64>::new();
        let mut b = Tape::<f64>::new();
        let xa = a.leaf(&Tensor::scalar(1.0));
        let xb = b.leaf(&Tensor::scalar(1.0));
        let loss = a.mul_elem(xa, xa);
        assert!(a.grad(loss, &[("xb".into(), xb)]).is_err());
    }

    /// Small three-layer network: every gradient entry must match central
    /// finite differences.
    #[test]
    fn toy_network_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let dims = [5usize, 7, 6, 4];
        let mut weights = Vec::new();
        for w in dims.windows(2) {
            let data: Vec<f64> = (0..w[0] * w[1]).map(|_| rng.gen_range(-1.0..1.0)).collect();
            weights.push(Tensor::new(vec![w[0], w[1]], data).unwrap());
        }
        let x = Tensor::new(
            vec![2, dims[0]],
            (0..2 * dims[0]).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();

        let run = |ws: &[Tensor<f64>]| -> f64 {
            let mut tape = Tape::<f64>::new();
            let mut h = tape.leaf(&x);
            for w in ws {
                let wv = tape.leaf(w);
                h = tape.matmul(&h, &wv);
                h = tape.gelu(&h);
            }
            let loss = tape.mean_all(h);
            tape.value(&loss).scalar_value().unwrap()
        };

        // analytic gradients
        let mut tape = Tape::<f64>::new();
        let mut h = tape.leaf(&x);
        let mut wvars = Vec::new();
        for w in &weights {
            let wv = tape.leaf(w);
            wvars.push(wv);
            h = tape.matmul(&h, &wv);
            h = tape.gelu(&h);
        }
        let loss = tape.mean_all(h);
        let named: Vec<(String, Var)> = wvars
            .iter()
            .enumerate()
            .map(|(i, v)| (format!("w{i}"), *v))
            .collect();
        let grads = tape.grad(loss, &named).unwrap();

        for (i, w) in weights.iter().enumerate() {
            let numeric = fd::central_diff_grad(w, fd::DEFAULT_FD_STEP, |wp| {
                let mut ws = weights.clone();
                ws[i] = wp.clone();
                Ok(run(&ws))
            })
            .unwrap();
            let err = fd::max_rel_error(&grads[&format!("w{i}")], &numeric, fd::REL_FLOOR);
            assert!(err <= fd::DEFAULT_REL_TOL, "layer {i}: rel err {err}");
        }
    }

    #[test]
    fn replay_is_bitwise_deterministic() {
        use rand::{Rng, SeedableRng};
        let build = || {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
            let x = Tensor::new(
                vec![3, 4],
                (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let w = Tensor::new(
                vec![4, 4],
                (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let mut tape = Tape::<f64>::new();
            let xv = tape.leaf(&x);
            let wv = tape.leaf(&w);
            let h = tape.matmul(&xv, &wv);
            let s = tape.softmax_rows(&h);
            let loss = tape.mean_all(s);
            let lv = tape.value(&loss).scalar_value().unwrap();
            let g = tape.grad(loss, &[("w".into(), wv)]).unwrap();
            (lv, g["w"].clone())
        };
        let (l1, g1) = build();
        let (l2, g2) = build();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert!(g1.bit_eq(&g2));
    }

    #[test]
    fn eval_cx_matches_tape_bitwise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::new(
            vec![3, 8],
            (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let g = Tensor::full(&[8], 1.0);
        let b = Tensor::zeros(&[8]);

        fn run<T: crate::tensor::Element, C: Cx<T>>(
            cx: &mut C,
            x: &Tensor<T>,
            g: &Tensor<T>,
            b: &Tensor<T>,
        ) -> Tensor<T> {
            let xv = cx.leaf(x);
            let gv = cx.leaf(g);
            let bv = cx.leaf(b);
            let n = cx.layer_norm_rows(&xv, &gv, &bv, 1e-5);
            let s = cx.softmax_rows(&n);
            let e = cx.gelu(&s);
            let r = cx.select_row(&e, 1);
            let u = cx.l2_normalize(&r);
            cx.value(&u)
        }

        let mut tape = Tape::<f64>::new();
        let from_tape = run(&mut tape, &x, &g, &b);
        let mut eval = EvalCx;
        let from_eval = run(&mut eval, &x, &g, &b);
        assert!(from_tape.bit_eq(&from_eval));
    }

    #[test]
    fn live_node_stats_track_tape_lifetime() {
        stats::reset_peak();
        let before = stats::live_nodes();
        {
            let mut tape = Tape::<f64>::new();
            let a = tape.leaf(&Tensor::scalar(1.0));
            let _ = tape.mul_elem(a, a);
            assert_eq!(stats::live_nodes(), before + 2);
        }
        assert_eq!(stats::live_nodes(), before);
        assert!(stats::peak_live_nodes() >= before + 2);
    }
}
