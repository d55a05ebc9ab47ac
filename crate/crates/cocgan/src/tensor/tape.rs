//! Define-by-run operation tape.
//!
//! Every forward op appends a node holding its output value and enough
//! information to replay the chain rule. The tape is rebuilt each forward
//! pass and dropped afterwards; nodes form a topological order by
//! construction, so the backward pass is a single reverse sweep that visits
//! each node exactly once.

use super::{Elem, ParamBank, ParamId, Tensor, NORM_EPS};
use crate::error::Error;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(u32);

const GELU_COEF: f64 = 0.044715;
// sqrt(2/pi)
const GELU_SCALE: f64 = 0.7978845608028654;

enum Op<E: Elem> {
    Leaf,
    Reshape { x: Var },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<u32> },
    BroadcastRow { v: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRowVec { x: Var, v: Var },
    ScaleRows { x: Var, s: Var },
    MulConst { x: Var, c: E },
    AddConst { x: Var },
    MulScalar { x: Var, s: Var },
    AddScalar { x: Var, s: Var },
    Recip { x: Var },
    Log { x: Var },
    Clamp { x: Var, lo: E, hi: E },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Gelu { x: Var },
    Matmul { a: Var, b: Var },
    MatmulNt { a: Var, b: Var },
    Linear { x: Var, w: Var, b: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, mu: Vec<E>, inv_std: Vec<E> },
    L2NormalizeRows { x: Var, norms: Vec<E> },
    SumAxis0 { x: Var },
    SumAxis1 { x: Var },
    SumAll { x: Var },
    MeanAll { x: Var },
    LogSoftmaxRows { x: Var },
    SegMatmulConst { m: Vec<E>, rows_out: usize, seg_len: usize, x: Var },
    SegMatmulNt { a: Var, b: Var, rows_a: usize, rows_b: usize },
    SegRowsDot { a: Var, b: Var, seg_len: usize },
    GatherElems { x: Var, idx: Vec<u32> },
    ScatterAddRows { x: Var, target: Vec<u32>, rows_out: usize },
}

impl<E: Elem> Op<E> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Reshape { .. } => "reshape",
            Op::ConcatRows { .. } => "concat_rows",
            Op::ConcatCols { .. } => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::BroadcastRow { .. } => "broadcast_row",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::AddRowVec { .. } => "add_row_vec",
            Op::ScaleRows { .. } => "scale_rows",
            Op::MulConst { .. } => "mul_const",
            Op::AddConst { .. } => "add_const",
            Op::MulScalar { .. } => "mul_scalar",
            Op::AddScalar { .. } => "add_scalar",
            Op::Recip { .. } => "recip",
            Op::Log { .. } => "log",
            Op::Clamp { .. } => "clamp",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Tanh { .. } => "tanh",
            Op::Gelu { .. } => "gelu",
            Op::Matmul { .. } => "matmul",
            Op::MatmulNt { .. } => "matmul_nt",
            Op::Linear { .. } => "linear",
            Op::LayerNorm { .. } => "layer_norm",
            Op::L2NormalizeRows { .. } => "l2_normalize_rows",
            Op::SumAxis0 { .. } => "sum_axis0",
            Op::SumAxis1 { .. } => "sum_axis1",
            Op::SumAll { .. } => "sum_all",
            Op::MeanAll { .. } => "mean_all",
            Op::LogSoftmaxRows { .. } => "log_softmax_rows",
            Op::SegMatmulConst { .. } => "seg_matmul_const",
            Op::SegMatmulNt { .. } => "seg_matmul_nt",
            Op::SegRowsDot { .. } => "seg_rows_dot",
            Op::GatherElems { .. } => "gather_elems",
            Op::ScatterAddRows { .. } => "scatter_add_rows",
        }
    }
}

struct Node<E: Elem> {
    op: Op<E>,
    shape: Vec<usize>,
    data: Vec<E>,
    needs_grad: bool,
}

/// Reverse-mode tape. One tape per forward pass, confined to one worker.
pub struct Tape<E: Elem> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Vec<E>>>,
    // (var, bank uid, param) registrations for export_grads
    param_links: Vec<(Var, u64, ParamId)>,
    ran_backward: bool,
}

impl<E: Elem> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), param_links: Vec::new(), ran_backward: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop all recorded nodes and gradients. Parameters live in their
    /// banks and are unaffected.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.param_links.clear();
        self.ran_backward = false;
    }

    pub fn value(&self, v: Var) -> &[E] {
        &self.nodes[v.0 as usize].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0 as usize].shape
    }

    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.grads[v.0 as usize].as_deref()
    }

    fn rows(&self, v: Var) -> usize {
        self.shape(v)[0]
    }

    fn cols(&self, v: Var) -> usize {
        let n = self.nodes[v.0 as usize].data.len();
        let r = self.shape(v)[0];
        if r == 0 {
            0
        } else {
            n / r
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0 as usize].needs_grad
    }

    fn push(&mut self, op: Op<E>, shape: Vec<usize>, data: Vec<E>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len(), "{} output shape/data mismatch", op.name());
        #[cfg(debug_assertions)]
        if !matches!(op, Op::Leaf) {
            if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
                panic!("non-finite value in output of {} at index {bad}", op.name());
            }
        }
        self.nodes.push(Node { op, shape, data, needs_grad });
        self.grads.push(None);
        Var(self.nodes.len() as u32 - 1)
    }

    // ── leaves ──────────────────────────────────────────────────────────

    /// Record a constant (no gradient flows into it).
    pub fn constant(&mut self, data: &[E], shape: &[usize]) -> Var {
        assert_eq!(data.len(), shape.iter().product::<usize>(), "constant shape mismatch");
        self.push(Op::Leaf, shape.to_vec(), data.to_vec(), false)
    }

    pub fn constant_owned(&mut self, data: Vec<E>, shape: &[usize]) -> Var {
        assert_eq!(data.len(), shape.iter().product::<usize>(), "constant shape mismatch");
        self.push(Op::Leaf, shape.to_vec(), data, false)
    }

    /// Record a free input leaf; gradients are kept if `requires_grad`.
    pub fn input(&mut self, t: &Tensor<E>, requires_grad: bool) -> Var {
        self.push(Op::Leaf, t.shape.clone(), t.data.clone(), requires_grad)
    }

    /// Register a bank parameter on this tape. Gradients flow back to the
    /// bank through [`Tape::export_grads`].
    pub fn param(&mut self, bank: &ParamBank<E>, id: ParamId) -> Var {
        let t = bank.get(id);
        let v = self.push(Op::Leaf, t.shape.clone(), t.data.clone(), t.requires_grad);
        if t.requires_grad {
            self.param_links.push((v, bank.uid(), id));
        }
        v
    }

    // ── structural ops ──────────────────────────────────────────────────

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        assert_eq!(
            self.nodes[x.0 as usize].data.len(),
            shape.iter().product::<usize>(),
            "reshape to {:?} changes element count",
            shape
        );
        let data = self.nodes[x.0 as usize].data.clone();
        let needs = self.needs(x);
        self.push(Op::Reshape { x }, shape.to_vec(), data, needs)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of zero parts");
        let cols = self.cols(parts[0]);
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            assert_eq!(self.cols(p), cols, "concat_rows column mismatch");
            rows += self.rows(p);
            data.extend_from_slice(&self.nodes[p.0 as usize].data);
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Op::ConcatRows { parts: parts.to_vec() }, vec![rows, cols], data, needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of zero parts");
        let rows = self.rows(parts[0]);
        let widths: Vec<usize> = parts.iter().map(|&p| self.cols(p)).collect();
        for &p in parts {
            assert_eq!(self.rows(p), rows, "concat_cols row mismatch");
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![E::ZERO; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = &self.nodes[p.0 as usize].data;
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Op::ConcatCols { parts: parts.to_vec() }, vec![rows, total], data, needs)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (rows, cols) = (self.rows(x), self.cols(x));
        assert!(start + len <= rows, "slice_rows {start}+{len} out of {rows} rows");
        let data = self.nodes[x.0 as usize].data[start * cols..(start + len) * cols].to_vec();
        let needs = self.needs(x);
        self.push(Op::SliceRows { x, start }, vec![len, cols], data, needs)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (rows, cols) = (self.rows(x), self.cols(x));
        assert!(start + len <= cols, "slice_cols {start}+{len} out of {cols} cols");
        let src = &self.nodes[x.0 as usize].data;
        let mut data = vec![E::ZERO; rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len].copy_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let needs = self.needs(x);
        self.push(Op::SliceCols { x, start }, vec![rows, len], data, needs)
    }

    /// Gather rows (first-axis slices) by index list. Indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[u32]) -> Var {
        let (rows, cols) = (self.rows(x), self.cols(x));
        let src = &self.nodes[x.0 as usize].data;
        let mut data = vec![E::ZERO; idx.len() * cols];
        for (o, &i) in idx.iter().enumerate() {
            assert!((i as usize) < rows, "gather_rows index {i} out of {rows} rows");
            data[o * cols..(o + 1) * cols].copy_from_slice(&src[i as usize * cols..(i as usize + 1) * cols]);
        }
        let mut shape = self.shape(x).to_vec();
        shape[0] = idx.len();
        let needs = self.needs(x);
        self.push(Op::GatherRows { x, idx: idx.to_vec() }, shape, data, needs)
    }

    /// Broadcast a row vector `[d]` over `n` rows, giving `[n, d]`.
    pub fn broadcast_row(&mut self, v: Var, n: usize) -> Var {
        let d = self.nodes[v.0 as usize].data.len();
        let src = self.nodes[v.0 as usize].data.clone();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(&src);
        }
        let needs = self.needs(v);
        self.push(Op::BroadcastRow { v }, vec![n, d], data, needs)
    }

    // ── elementwise arithmetic ──────────────────────────────────────────

    fn binary_same_shape(&mut self, a: Var, b: Var, op_name: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{op_name} shape mismatch");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "add");
        let data: Vec<E> = self.nodes[a.0 as usize]
            .data
            .iter()
            .zip(&self.nodes[b.0 as usize].data)
            .map(|(&x, &y)| E::add(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Add { a, b }, shape, data, needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "sub");
        let data: Vec<E> = self.nodes[a.0 as usize]
            .data
            .iter()
            .zip(&self.nodes[b.0 as usize].data)
            .map(|(&x, &y)| E::sub(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Sub { a, b }, shape, data, needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "mul");
        let data: Vec<E> = self.nodes[a.0 as usize]
            .data
            .iter()
            .zip(&self.nodes[b.0 as usize].data)
            .map(|(&x, &y)| E::mul(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Mul { a, b }, shape, data, needs)
    }

    /// `[n,d] + [d]` broadcast over rows.
    pub fn add_row_vec(&mut self, x: Var, v: Var) -> Var {
        let (rows, cols) = (self.rows(x), self.cols(x));
        assert_eq!(self.nodes[v.0 as usize].data.len(), cols, "add_row_vec width mismatch");
        let xs = &self.nodes[x.0 as usize].data;
        let vs = &self.nodes[v.0 as usize].data;
        let mut data = Vec::with_capacity(xs.len());
        for r in 0..rows {
            for c in 0..cols {
                data.push(E::add(xs[r * cols + c], vs[c]));
            }
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x) || self.needs(v);
        self.push(Op::AddRowVec { x, v }, shape, data, needs)
    }

    /// Multiply row `i` of `[n,d]` by scalar `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Var {
        let (rows, cols) = (self.rows(x), self.cols(x));
        assert_eq!(self.nodes[s.0 as usize].data.len(), rows, "scale_rows length mismatch");
        let xs = &self.nodes[x.0 as usize].data;
        let ss = &self.nodes[s.0 as usize].data;
        let mut data = Vec::with_capacity(xs.len());
        for r in 0..rows {
            let sv = ss[r];
            for c in 0..cols {
                data.push(E::mul(xs[r * cols + c], sv));
            }
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x) || self.needs(s);
        self.push(Op::ScaleRows { x, s }, shape, data, needs)
    }

    pub fn mul_const(&mut self, x: Var, c: f64) -> Var {
        let c = E::from_f64(c);
        let data: Vec<E> = self.nodes[x.0 as usize].data.iter().map(|&v| E::mul(v, c)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(Op::MulConst { x, c }, shape, data, needs)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let c = E::from_f64(c);
        let data: Vec<E> = self.nodes[x.0 as usize].data.iter().map(|&v| E::add(v, c)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(Op::AddConst { x }, shape, data, needs)
    }

    /// Multiply every element by a learnable scalar (`s` has one element).
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.nodes[s.0 as usize].data.len(), 1, "mul_scalar expects a 1-element var");
        let sv = self.nodes[s.0 as usize].data[0];
        let data: Vec<E> = self.nodes[x.0 as usize].data.iter().map(|&v| E::mul(v, sv)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x) || self.needs(s);
        self.push(Op::MulScalar { x, s }, shape, data, needs)
    }

    /// Add a learnable scalar to every element.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.nodes[s.0 as usize].data.len(), 1, "add_scalar expects a 1-element var");
        let sv = self.nodes[s.0 as usize].data[0];
        let data: Vec<E> = self.nodes[x.0 as usize].data.iter().map(|&v| E::add(v, sv)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x) || self.needs(s);
        self.push(Op::AddScalar { x, s }, shape, data, needs)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let data: Vec<E> = self.nodes[x.0 as usize].data.iter().map(|&v| E::div(E::ONE, v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(Op::Recip { x }, shape, data, needs)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let data: Vec<E> = self.nodes[x.0 as usize].data.iter().map(|&v| E::ln(v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(Op::Log { x }, shape, data, needs)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (E::from_f64(lo), E::from_f64(hi));
        let data: Vec<E> = self.nodes[x.0 as usize]
            .data
            .iter()
            .map(|&v| E::min(E::max(v, lo), hi))
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(Op::Clamp { x, lo, hi }, shape, data, needs)
    }

    // ── nonlinearities ──────────────────────────────────────────────────

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data: Vec<E> = self.nodes[x.0 as usize].data.iter().map(|&v| E::sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(Op::Sigmoid { x }, shape, data, needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let data: Vec<E> = self.nodes[x.0 as usize].data.iter().map(|&v| E::tanh_bulk(v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(Op::Tanh { x }, shape, data, needs)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data: Vec<E> = self.nodes[x.0 as usize].data.iter().map(|&v| gelu_fwd(v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(Op::Gelu { x }, shape, data, needs)
    }

    // ── matrix products ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = (self.rows(a), self.cols(a));
        let (k2, n) = (self.rows(b), self.cols(b));
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut data = vec![E::ZERO; m * n];
        E::gemm_nn(m, k, n, E::ONE, &self.nodes[a.0 as usize].data, &self.nodes[b.0 as usize].data, &mut data);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Matmul { a, b }, vec![m, n], data, needs)
    }

    /// `A[m,k] * B[n,k]^T -> [m,n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = (self.rows(a), self.cols(a));
        let (n, k2) = (self.rows(b), self.cols(b));
        assert_eq!(k, k2, "matmul_nt inner dims {k} vs {k2}");
        let mut data = vec![E::ZERO; m * n];
        E::gemm_nt(m, k, n, E::ONE, &self.nodes[a.0 as usize].data, &self.nodes[b.0 as usize].data, &mut data);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::MatmulNt { a, b }, vec![m, n], data, needs)
    }

    /// `X[m,k] * W[k,n] + b[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (m, k) = (self.rows(x), self.cols(x));
        let (k2, n) = (self.rows(w), self.cols(w));
        assert_eq!(k, k2, "linear input width {k} vs weight {k2}");
        assert_eq!(self.nodes[b.0 as usize].data.len(), n, "linear bias width");
        let bs = self.nodes[b.0 as usize].data.clone();
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            data.extend_from_slice(&bs);
        }
        E::gemm_nn(m, k, n, E::ONE, &self.nodes[x.0 as usize].data, &self.nodes[w.0 as usize].data, &mut data);
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(Op::Linear { x, w, b }, vec![m, n], data, needs)
    }

    // ── normalization ───────────────────────────────────────────────────

    /// Layer normalization over the feature (last) axis with affine scale
    /// and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (rows, cols) = (self.rows(x), self.cols(x));
        assert_eq!(self.nodes[gamma.0 as usize].data.len(), cols, "layer_norm gamma width");
        assert_eq!(self.nodes[beta.0 as usize].data.len(), cols, "layer_norm beta width");
        let eps = E::from_f64(NORM_EPS);
        let xs = &self.nodes[x.0 as usize].data;
        let gs = &self.nodes[gamma.0 as usize].data;
        let bs = &self.nodes[beta.0 as usize].data;
        let inv_n = E::from_f64(1.0 / cols as f64);
        let mut mu = vec![E::ZERO; rows];
        let mut inv_std = vec![E::ZERO; rows];
        let mut data = vec![E::ZERO; rows * cols];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let mut m = E::ZERO;
            for &v in row {
                m = E::add(m, v);
            }
            m = E::mul(m, inv_n);
            let mut var = E::ZERO;
            for &v in row {
                let d = E::sub(v, m);
                var = E::add(var, E::mul(d, d));
            }
            var = E::mul(var, inv_n);
            let is = E::div(E::ONE, E::sqrt(E::add(var, eps)));
            mu[r] = m;
            inv_std[r] = is;
            for c in 0..cols {
                let xn = E::mul(E::sub(row[c], m), is);
                data[r * cols + c] = E::add(E::mul(xn, gs[c]), bs[c]);
            }
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(Op::LayerNorm { x, gamma, beta, mu, inv_std }, shape, data, needs)
    }

    /// Normalize each row to unit L2 norm (epsilon-guarded).
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let (rows, cols) = (self.rows(x), self.cols(x));
        let eps = E::from_f64(NORM_EPS);
        let xs = &self.nodes[x.0 as usize].data;
        let mut norms = vec![E::ZERO; rows];
        let mut data = vec![E::ZERO; rows * cols];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let mut sq = E::ZERO;
            for &v in row {
                sq = E::add(sq, E::mul(v, v));
            }
            let norm = E::sqrt(sq);
            norms[r] = norm;
            let inv = E::div(E::ONE, E::add(norm, eps));
            for c in 0..cols {
                data[r * cols + c] = E::mul(row[c], inv);
            }
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(Op::L2NormalizeRows { x, norms }, shape, data, needs)
    }

    /// Pairwise cosine similarity between row sets: `[c,d] x [n,d] -> [c,n]`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.cols(a), self.cols(b), "cosine_similarity feature widths differ");
        let an = self.l2_normalize_rows(a);
        let bn = self.l2_normalize_rows(b);
        self.matmul_nt(an, bn)
    }

    // ── reductions ──────────────────────────────────────────────────────

    /// Column sums: `[n,d] -> [d]`.
    pub fn sum_axis0(&mut self, x: Var) -> Var {
        let (rows, cols) = (self.rows(x), self.cols(x));
        let xs = &self.nodes[x.0 as usize].data;
        let mut data = vec![E::ZERO; cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c] = E::add(data[c], xs[r * cols + c]);
            }
        }
        let needs = self.needs(x);
        self.push(Op::SumAxis0 { x }, vec![cols], data, needs)
    }

    /// Row sums: `[n,d] -> [n]`.
    pub fn sum_axis1(&mut self, x: Var) -> Var {
        let (rows, cols) = (self.rows(x), self.cols(x));
        let xs = &self.nodes[x.0 as usize].data;
        let mut data = vec![E::ZERO; rows];
        for r in 0..rows {
            let mut s = E::ZERO;
            for c in 0..cols {
                s = E::add(s, xs[r * cols + c]);
            }
            data[r] = s;
        }
        let needs = self.needs(x);
        self.push(Op::SumAxis1 { x }, vec![rows], data, needs)
    }

    pub fn mean_axis0(&mut self, x: Var) -> Var {
        let inv = 1.0 / self.rows(x) as f64;
        let s = self.sum_axis0(x);
        self.mul_const(s, inv)
    }

    pub fn mean_axis1(&mut self, x: Var) -> Var {
        let inv = 1.0 / self.cols(x) as f64;
        let s = self.sum_axis1(x);
        self.mul_const(s, inv)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut s = E::ZERO;
        for &v in &self.nodes[x.0 as usize].data {
            s = E::add(s, v);
        }
        let needs = self.needs(x);
        self.push(Op::SumAll { x }, vec![1], vec![s], needs)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0 as usize].data.len();
        let inv = E::from_f64(1.0 / n as f64);
        let mut s = E::ZERO;
        for &v in &self.nodes[x.0 as usize].data {
            s = E::add(s, v);
        }
        let needs = self.needs(x);
        self.push(Op::MeanAll { x }, vec![1], vec![E::mul(s, inv)], needs)
    }

    /// Row-wise log-softmax (max-shifted for stability).
    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let (rows, cols) = (self.rows(x), self.cols(x));
        let xs = &self.nodes[x.0 as usize].data;
        let mut data = vec![E::ZERO; rows * cols];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let mut mx = row[0];
            for &v in row {
                mx = E::max(mx, v);
            }
            let mut lse = E::ZERO;
            for &v in row {
                lse = E::add(lse, E::exp(E::sub(v, mx)));
            }
            let lse = E::add(E::ln(lse), mx);
            for c in 0..cols {
                data[r * cols + c] = E::sub(row[c], lse);
            }
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(Op::LogSoftmaxRows { x }, shape, data, needs)
    }

    // ── segment ops (batch of equally sized point sets) ─────────────────

    /// Apply one constant `[rows_out, seg_len]` matrix to every `seg_len`-row
    /// segment of `x`: `out_b = M * x_b`. Used for grid pooling over a batch.
    pub fn seg_matmul_const(&mut self, m: Vec<E>, rows_out: usize, seg_len: usize, x: Var) -> Var {
        let (rows, cols) = (self.rows(x), self.cols(x));
        assert_eq!(m.len(), rows_out * seg_len, "segment matrix size");
        assert_eq!(rows % seg_len, 0, "rows {rows} not a multiple of segment length {seg_len}");
        let segs = rows / seg_len;
        let xs = &self.nodes[x.0 as usize].data;
        let mut data = vec![E::ZERO; segs * rows_out * cols];
        for s in 0..segs {
            E::gemm_nn(
                rows_out,
                seg_len,
                cols,
                E::ONE,
                &m,
                &xs[s * seg_len * cols..(s + 1) * seg_len * cols],
                &mut data[s * rows_out * cols..(s + 1) * rows_out * cols],
            );
        }
        let needs = self.needs(x);
        self.push(Op::SegMatmulConst { m, rows_out, seg_len, x }, vec![segs * rows_out, cols], data, needs)
    }

    /// Per-segment `A_b * B_b^T`: `a` is `[segs*rows_a, d]`, `b` is
    /// `[segs*rows_b, d]`, result `[segs*rows_a, rows_b]`.
    pub fn seg_matmul_nt(&mut self, a: Var, b: Var, rows_a: usize, rows_b: usize) -> Var {
        let d = self.cols(a);
        assert_eq!(self.cols(b), d, "seg_matmul_nt feature widths differ");
        assert_eq!(self.rows(a) % rows_a, 0, "a rows not a multiple of {rows_a}");
        assert_eq!(self.rows(b) % rows_b, 0, "b rows not a multiple of {rows_b}");
        let segs = self.rows(a) / rows_a;
        assert_eq!(self.rows(b) / rows_b, segs, "segment counts differ");
        let av = &self.nodes[a.0 as usize].data;
        let bv = &self.nodes[b.0 as usize].data;
        let mut data = vec![E::ZERO; segs * rows_a * rows_b];
        for s in 0..segs {
            E::gemm_nt(
                rows_a,
                d,
                rows_b,
                E::ONE,
                &av[s * rows_a * d..(s + 1) * rows_a * d],
                &bv[s * rows_b * d..(s + 1) * rows_b * d],
                &mut data[s * rows_a * rows_b..(s + 1) * rows_a * rows_b],
            );
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::SegMatmulNt { a, b, rows_a, rows_b }, vec![segs * rows_a, rows_b], data, needs)
    }

    /// Per-row dot against each segment's shared row: `a` is `[segs, d]`,
    /// `b` is `[segs*seg_len, d]`, output `[segs*seg_len]` with
    /// `out[i] = dot(a[i / seg_len], b[i])`. This is the one-center
    /// similarity kernel.
    pub fn seg_rows_dot(&mut self, a: Var, b: Var, seg_len: usize) -> Var {
        let d = self.cols(a);
        assert_eq!(self.cols(b), d, "seg_rows_dot feature widths differ");
        let rows_b = self.rows(b);
        assert_eq!(rows_b % seg_len, 0, "rows not a multiple of segment length");
        assert_eq!(self.rows(a), rows_b / seg_len, "one shared row per segment");
        let av = &self.nodes[a.0 as usize].data;
        let bv = &self.nodes[b.0 as usize].data;
        let mut data = vec![E::ZERO; rows_b];
        for i in 0..rows_b {
            let s = i / seg_len;
            let mut acc = E::ZERO;
            for (x, y) in av[s * d..(s + 1) * d].iter().zip(&bv[i * d..(i + 1) * d]) {
                acc = E::add(acc, E::mul(*x, *y));
            }
            data[i] = acc;
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::SegRowsDot { a, b, seg_len }, vec![rows_b], data, needs)
    }

    /// Pick scalar elements from the flattened value buffer of `x`.
    pub fn gather_elems(&mut self, x: Var, idx: &[u32]) -> Var {
        let xs = &self.nodes[x.0 as usize].data;
        let data: Vec<E> = idx
            .iter()
            .map(|&i| {
                assert!((i as usize) < xs.len(), "gather_elems index {i} out of {}", xs.len());
                xs[i as usize]
            })
            .collect();
        let needs = self.needs(x);
        self.push(Op::GatherElems { x, idx: idx.to_vec() }, vec![idx.len()], data, needs)
    }

    /// Scatter rows of `x` into an accumulator: `out[target[i], :] += x[i, :]`.
    pub fn scatter_add_rows(&mut self, x: Var, target: &[u32], rows_out: usize) -> Var {
        let (rows, cols) = (self.rows(x), self.cols(x));
        assert_eq!(target.len(), rows, "one target row per input row");
        let xs = &self.nodes[x.0 as usize].data;
        let mut data = vec![E::ZERO; rows_out * cols];
        for (i, &t) in target.iter().enumerate() {
            assert!((t as usize) < rows_out, "scatter target {t} out of {rows_out}");
            let dst = &mut data[t as usize * cols..(t as usize + 1) * cols];
            for (dv, &sv) in dst.iter_mut().zip(&xs[i * cols..(i + 1) * cols]) {
                E::add_assign(dv, sv);
            }
        }
        let needs = self.needs(x);
        self.push(Op::ScatterAddRows { x, target: target.to_vec(), rows_out }, vec![rows_out, cols], data, needs)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Gradients accumulate into per-node
    /// buffers; call [`Tape::export_grads`] afterwards to move parameter
    /// gradients into their bank.
    pub fn backward(&mut self, root: Var) -> Result<(), Error> {
        if self.nodes[root.0 as usize].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        if self.ran_backward {
            return Err(Error::Contract(
                "backward already ran on this tape; use one tape per backward pass".into(),
            ));
        }
        self.ran_backward = true;
        self.grads[root.0 as usize] = Some(vec![E::ONE]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(d_out) = self.grads[i].take() else { continue };
            self.backprop_node(i, &d_out);
            self.grads[i] = Some(d_out);
        }
        Ok(())
    }

    /// Add accumulated parameter gradients into their bank (matched by bank
    /// uid). Gradients for other banks registered on this tape are ignored.
    pub fn export_grads(&self, bank: &mut ParamBank<E>) {
        for &(var, uid, id) in &self.param_links {
            if uid != bank.uid() {
                continue;
            }
            if let Some(g) = self.grads[var.0 as usize].as_deref() {
                bank.get_mut(id).accumulate_grad(g);
            }
        }
    }

    fn accum(&mut self, v: Var, contribution: &[E]) {
        if !self.nodes[v.0 as usize].needs_grad {
            return;
        }
        let n = self.nodes[v.0 as usize].data.len();
        debug_assert_eq!(contribution.len(), n);
        let g = self.grads[v.0 as usize].get_or_insert_with(|| vec![E::ZERO; n]);
        for (dst, &src) in g.iter_mut().zip(contribution) {
            E::add_assign(dst, src);
        }
    }

    fn grad_buf(&mut self, v: Var) -> Option<&mut [E]> {
        if !self.nodes[v.0 as usize].needs_grad {
            return None;
        }
        let n = self.nodes[v.0 as usize].data.len();
        Some(self.grads[v.0 as usize].get_or_insert_with(|| vec![E::ZERO; n]))
    }

    #[allow(clippy::needless_range_loop)]
    fn backprop_node(&mut self, i: usize, d: &[E]) {
        // The op is moved out so `self` can be borrowed mutably for
        // accumulation; ops are cheap to move (saved buffers move along).
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Reshape { x } => self.accum(*x, d),
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0 as usize].data.len();
                    let seg = d[off..off + n].to_vec();
                    self.accum(p, &seg);
                    off += n;
                }
            }
            Op::ConcatCols { parts } => {
                let rows = self.rows(parts[0]);
                let total: usize = parts.iter().map(|&p| self.cols(p)).sum();
                let mut off = 0;
                for &p in parts {
                    let w = self.cols(p);
                    if let Some(g) = self.grad_buf(p) {
                        for r in 0..rows {
                            for c in 0..w {
                                E::add_assign(&mut g[r * w + c], d[r * total + off + c]);
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SliceRows { x, start } => {
                let cols = self.cols(*x);
                let off = *start * cols;
                if let Some(g) = self.grad_buf(*x) {
                    for (dst, &src) in g[off..off + d.len()].iter_mut().zip(d) {
                        E::add_assign(dst, src);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = (self.rows(*x), self.cols(*x));
                let w = d.len() / rows;
                let start = *start;
                if let Some(g) = self.grad_buf(*x) {
                    for r in 0..rows {
                        for c in 0..w {
                            E::add_assign(&mut g[r * cols + start + c], d[r * w + c]);
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let cols = self.cols(*x);
                if let Some(g) = self.grad_buf(*x) {
                    for (o, &i) in idx.iter().enumerate() {
                        let dst = &mut g[i as usize * cols..(i as usize + 1) * cols];
                        for (dv, &sv) in dst.iter_mut().zip(&d[o * cols..(o + 1) * cols]) {
                            E::add_assign(dv, sv);
                        }
                    }
                }
            }
            Op::BroadcastRow { v } => {
                let w = self.nodes[v.0 as usize].data.len();
                if let Some(g) = self.grad_buf(*v) {
                    for (o, &dv) in d.iter().enumerate() {
                        E::add_assign(&mut g[o % w], dv);
                    }
                }
            }
            Op::Add { a, b } => {
                self.accum(*a, d);
                self.accum(*b, d);
            }
            Op::Sub { a, b } => {
                self.accum(*a, d);
                if let Some(g) = self.grad_buf(*b) {
                    for (dst, &src) in g.iter_mut().zip(d) {
                        E::add_assign(dst, E::neg(src));
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let bv = &self.nodes[b.0 as usize].data;
                    let contrib: Vec<E> = d.iter().zip(bv).map(|(&dv, &v)| E::mul(dv, v)).collect();
                    self.accum(*a, &contrib);
                }
                if self.needs(*b) {
                    let av = &self.nodes[a.0 as usize].data;
                    let contrib: Vec<E> = d.iter().zip(av).map(|(&dv, &v)| E::mul(dv, v)).collect();
                    self.accum(*b, &contrib);
                }
            }
            Op::AddRowVec { x, v } => {
                self.accum(*x, d);
                if self.needs(*v) {
                    let w = self.nodes[v.0 as usize].data.len();
                    let mut contrib = vec![E::ZERO; w];
                    for (o, &dv) in d.iter().enumerate() {
                        contrib[o % w] = E::add(contrib[o % w], dv);
                    }
                    self.accum(*v, &contrib);
                }
            }
            Op::ScaleRows { x, s } => {
                let (rows, cols) = (self.rows(*x), self.cols(*x));
                if self.needs(*x) {
                    let ss = self.nodes[s.0 as usize].data.clone();
                    if let Some(g) = self.grad_buf(*x) {
                        for r in 0..rows {
                            for c in 0..cols {
                                E::add_assign(&mut g[r * cols + c], E::mul(d[r * cols + c], ss[r]));
                            }
                        }
                    }
                }
                if self.needs(*s) {
                    let xs = &self.nodes[x.0 as usize].data;
                    let mut contrib = vec![E::ZERO; rows];
                    for r in 0..rows {
                        let mut acc = E::ZERO;
                        for c in 0..cols {
                            acc = E::add(acc, E::mul(d[r * cols + c], xs[r * cols + c]));
                        }
                        contrib[r] = acc;
                    }
                    self.accum(*s, &contrib);
                }
            }
            Op::MulConst { x, c } => {
                let contrib: Vec<E> = d.iter().map(|&dv| E::mul(dv, *c)).collect();
                self.accum(*x, &contrib);
            }
            Op::AddConst { x } => self.accum(*x, d),
            Op::MulScalar { x, s } => {
                if self.needs(*x) {
                    let sv = self.nodes[s.0 as usize].data[0];
                    let contrib: Vec<E> = d.iter().map(|&dv| E::mul(dv, sv)).collect();
                    self.accum(*x, &contrib);
                }
                if self.needs(*s) {
                    let xs = &self.nodes[x.0 as usize].data;
                    let mut acc = E::ZERO;
                    for (&dv, &xv) in d.iter().zip(xs) {
                        acc = E::add(acc, E::mul(dv, xv));
                    }
                    self.accum(*s, &[acc]);
                }
            }
            Op::AddScalar { x, s } => {
                self.accum(*x, d);
                if self.needs(*s) {
                    let mut acc = E::ZERO;
                    for &dv in d {
                        acc = E::add(acc, dv);
                    }
                    self.accum(*s, &[acc]);
                }
            }
            Op::Recip { x } => {
                let ys = &self.nodes[i].data;
                let contrib: Vec<E> = d
                    .iter()
                    .zip(ys)
                    .map(|(&dv, &y)| E::neg(E::mul(dv, E::mul(y, y))))
                    .collect();
                self.accum(*x, &contrib);
            }
            Op::Log { x } => {
                let xs = &self.nodes[x.0 as usize].data;
                let contrib: Vec<E> = d.iter().zip(xs).map(|(&dv, &xv)| E::div(dv, xv)).collect();
                self.accum(*x, &contrib);
            }
            Op::Clamp { x, lo, hi } => {
                let xs = &self.nodes[x.0 as usize].data;
                let contrib: Vec<E> = d
                    .iter()
                    .zip(xs)
                    .map(|(&dv, &xv)| if xv >= *lo && xv <= *hi { dv } else { E::ZERO })
                    .collect();
                self.accum(*x, &contrib);
            }
            Op::Sigmoid { x } => {
                let ys = &self.nodes[i].data;
                let contrib: Vec<E> = d
                    .iter()
                    .zip(ys)
                    .map(|(&dv, &y)| E::mul(dv, E::mul(y, E::sub(E::ONE, y))))
                    .collect();
                self.accum(*x, &contrib);
            }
            Op::Tanh { x } => {
                let ys = &self.nodes[i].data;
                let contrib: Vec<E> = d
                    .iter()
                    .zip(ys)
                    .map(|(&dv, &y)| E::mul(dv, E::sub(E::ONE, E::mul(y, y))))
                    .collect();
                self.accum(*x, &contrib);
            }
            Op::Gelu { x } => {
                let xs = &self.nodes[x.0 as usize].data;
                let contrib: Vec<E> = d.iter().zip(xs).map(|(&dv, &xv)| E::mul(dv, gelu_bwd(xv))).collect();
                self.accum(*x, &contrib);
            }
            Op::Matmul { a, b } => {
                let (m, k) = (self.rows(*a), self.cols(*a));
                let n = self.cols(*b);
                if self.needs(*a) {
                    let bv = self.nodes[b.0 as usize].data.clone();
                    if let Some(g) = self.grad_buf(*a) {
                        E::gemm_nt(m, n, k, E::ONE, d, &bv, g);
                    }
                }
                if self.needs(*b) {
                    let av = self.nodes[a.0 as usize].data.clone();
                    if let Some(g) = self.grad_buf(*b) {
                        E::gemm_tn(k, m, n, E::ONE, &av, d, g);
                    }
                }
            }
            Op::MatmulNt { a, b } => {
                let (m, k) = (self.rows(*a), self.cols(*a));
                let n = self.rows(*b);
                if self.needs(*a) {
                    let bv = self.nodes[b.0 as usize].data.clone();
                    if let Some(g) = self.grad_buf(*a) {
                        // dA[m,k] = d[m,n] * B[n,k]
                        E::gemm_nn(m, n, k, E::ONE, d, &bv, g);
                    }
                }
                if self.needs(*b) {
                    let av = self.nodes[a.0 as usize].data.clone();
                    if let Some(g) = self.grad_buf(*b) {
                        // dB[n,k] = d^T[n,m] * A[m,k]; d is stored [m,n]
                        E::gemm_tn(n, m, k, E::ONE, d, &av, g);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (m, k) = (self.rows(*x), self.cols(*x));
                let n = self.cols(*w);
                if self.needs(*x) {
                    let wv = self.nodes[w.0 as usize].data.clone();
                    if let Some(g) = self.grad_buf(*x) {
                        E::gemm_nt(m, n, k, E::ONE, d, &wv, g);
                    }
                }
                if self.needs(*w) {
                    let xv = self.nodes[x.0 as usize].data.clone();
                    if let Some(g) = self.grad_buf(*w) {
                        E::gemm_tn(k, m, n, E::ONE, &xv, d, g);
                    }
                }
                if self.needs(*b) {
                    let mut contrib = vec![E::ZERO; n];
                    for r in 0..m {
                        for c in 0..n {
                            contrib[c] = E::add(contrib[c], d[r * n + c]);
                        }
                    }
                    self.accum(*b, &contrib);
                }
            }
            Op::LayerNorm { x, gamma, beta, mu, inv_std } => {
                let (rows, cols) = (self.rows(*x), self.cols(*x));
                let xs = self.nodes[x.0 as usize].data.clone();
                let gs = self.nodes[gamma.0 as usize].data.clone();
                let inv_n = E::from_f64(1.0 / cols as f64);
                if self.needs(*x) {
                    let mut contrib = vec![E::ZERO; rows * cols];
                    for r in 0..rows {
                        let is = inv_std[r];
                        let m = mu[r];
                        // g = gamma .* dy ; dx = is*(g - mean(g) - xn*mean(g .* xn))
                        let mut mean_g = E::ZERO;
                        let mut mean_gx = E::ZERO;
                        for c in 0..cols {
                            let xn = E::mul(E::sub(xs[r * cols + c], m), is);
                            let gv = E::mul(gs[c], d[r * cols + c]);
                            mean_g = E::add(mean_g, gv);
                            mean_gx = E::add(mean_gx, E::mul(gv, xn));
                        }
                        mean_g = E::mul(mean_g, inv_n);
                        mean_gx = E::mul(mean_gx, inv_n);
                        for c in 0..cols {
                            let xn = E::mul(E::sub(xs[r * cols + c], m), is);
                            let gv = E::mul(gs[c], d[r * cols + c]);
                            contrib[r * cols + c] =
                                E::mul(is, E::sub(E::sub(gv, mean_g), E::mul(xn, mean_gx)));
                        }
                    }
                    self.accum(*x, &contrib);
                }
                if self.needs(*gamma) {
                    let mut contrib = vec![E::ZERO; cols];
                    for r in 0..rows {
                        let is = inv_std[r];
                        let m = mu[r];
                        for c in 0..cols {
                            let xn = E::mul(E::sub(xs[r * cols + c], m), is);
                            contrib[c] = E::add(contrib[c], E::mul(d[r * cols + c], xn));
                        }
                    }
                    self.accum(*gamma, &contrib);
                }
                if self.needs(*beta) {
                    let mut contrib = vec![E::ZERO; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            contrib[c] = E::add(contrib[c], d[r * cols + c]);
                        }
                    }
                    self.accum(*beta, &contrib);
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let (rows, cols) = (self.rows(*x), self.cols(*x));
                let xs = self.nodes[x.0 as usize].data.clone();
                let eps = E::from_f64(NORM_EPS);
                if self.needs(*x) {
                    let mut contrib = vec![E::ZERO; rows * cols];
                    for r in 0..rows {
                        let norm = norms[r];
                        let nn = E::add(norm, eps);
                        let inv = E::div(E::ONE, nn);
                        let mut dot = E::ZERO;
                        for c in 0..cols {
                            dot = E::add(dot, E::mul(d[r * cols + c], xs[r * cols + c]));
                        }
                        // d/N - x * (d.x) / (norm * N^2); second term vanishes at x = 0
                        let scale = if norm.to_f64() > 0.0 {
                            E::div(dot, E::mul(norm, E::mul(nn, nn)))
                        } else {
                            E::ZERO
                        };
                        for c in 0..cols {
                            contrib[r * cols + c] = E::sub(
                                E::mul(d[r * cols + c], inv),
                                E::mul(xs[r * cols + c], scale),
                            );
                        }
                    }
                    self.accum(*x, &contrib);
                }
            }
            Op::SumAxis0 { x } => {
                let (rows, cols) = (self.rows(*x), self.cols(*x));
                if let Some(g) = self.grad_buf(*x) {
                    for r in 0..rows {
                        for c in 0..cols {
                            E::add_assign(&mut g[r * cols + c], d[c]);
                        }
                    }
                }
            }
            Op::SumAxis1 { x } => {
                let (rows, cols) = (self.rows(*x), self.cols(*x));
                if let Some(g) = self.grad_buf(*x) {
                    for r in 0..rows {
                        for c in 0..cols {
                            E::add_assign(&mut g[r * cols + c], d[r]);
                        }
                    }
                }
            }
            Op::SumAll { x } => {
                let n = self.nodes[x.0 as usize].data.len();
                let contrib = vec![d[0]; n];
                self.accum(*x, &contrib);
            }
            Op::MeanAll { x } => {
                let n = self.nodes[x.0 as usize].data.len();
                let contrib = vec![E::mul(d[0], E::from_f64(1.0 / n as f64)); n];
                self.accum(*x, &contrib);
            }
            Op::LogSoftmaxRows { x } => {
                let (rows, cols) = (self.rows(*x), self.cols(*x));
                let ys = self.nodes[i].data.clone();
                if self.needs(*x) {
                    let mut contrib = vec![E::ZERO; rows * cols];
                    for r in 0..rows {
                        let mut dsum = E::ZERO;
                        for c in 0..cols {
                            dsum = E::add(dsum, d[r * cols + c]);
                        }
                        for c in 0..cols {
                            let p = E::exp(ys[r * cols + c]);
                            contrib[r * cols + c] = E::sub(d[r * cols + c], E::mul(p, dsum));
                        }
                    }
                    self.accum(*x, &contrib);
                }
            }
            Op::SegMatmulConst { m, rows_out, seg_len, x } => {
                let cols = self.cols(*x);
                let (rows_out, seg_len) = (*rows_out, *seg_len);
                let segs = self.rows(*x) / seg_len;
                let mv = m.clone();
                if let Some(g) = self.grad_buf(*x) {
                    for s in 0..segs {
                        // dx_b += M^T * d_b
                        E::gemm_tn(
                            seg_len,
                            rows_out,
                            cols,
                            E::ONE,
                            &mv,
                            &d[s * rows_out * cols..(s + 1) * rows_out * cols],
                            &mut g[s * seg_len * cols..(s + 1) * seg_len * cols],
                        );
                    }
                }
            }
            Op::SegMatmulNt { a, b, rows_a, rows_b } => {
                let dfeat = self.cols(*a);
                let (rows_a, rows_b) = (*rows_a, *rows_b);
                let segs = self.rows(*a) / rows_a;
                if self.needs(*a) {
                    let bv = self.nodes[b.0 as usize].data.clone();
                    if let Some(g) = self.grad_buf(*a) {
                        for s in 0..segs {
                            // dA_b += d_b * B_b
                            E::gemm_nn(
                                rows_a,
                                rows_b,
                                dfeat,
                                E::ONE,
                                &d[s * rows_a * rows_b..(s + 1) * rows_a * rows_b],
                                &bv[s * rows_b * dfeat..(s + 1) * rows_b * dfeat],
                                &mut g[s * rows_a * dfeat..(s + 1) * rows_a * dfeat],
                            );
                        }
                    }
                }
                if self.needs(*b) {
                    let av = self.nodes[a.0 as usize].data.clone();
                    if let Some(g) = self.grad_buf(*b) {
                        for s in 0..segs {
                            // dB_b += d_b^T * A_b
                            E::gemm_tn(
                                rows_b,
                                rows_a,
                                dfeat,
                                E::ONE,
                                &d[s * rows_a * rows_b..(s + 1) * rows_a * rows_b],
                                &av[s * rows_a * dfeat..(s + 1) * rows_a * dfeat],
                                &mut g[s * rows_b * dfeat..(s + 1) * rows_b * dfeat],
                            );
                        }
                    }
                }
            }
            Op::SegRowsDot { a, b, seg_len } => {
                let d_feat = self.cols(*a);
                let seg_len = *seg_len;
                if self.needs(*a) {
                    let bv = self.nodes[b.0 as usize].data.clone();
                    if let Some(g) = self.grad_buf(*a) {
                        for (i, &dv) in d.iter().enumerate() {
                            let s = i / seg_len;
                            let dst = &mut g[s * d_feat..(s + 1) * d_feat];
                            for (o, &y) in dst.iter_mut().zip(&bv[i * d_feat..(i + 1) * d_feat]) {
                                E::add_assign(o, E::mul(dv, y));
                            }
                        }
                    }
                }
                if self.needs(*b) {
                    let av = self.nodes[a.0 as usize].data.clone();
                    if let Some(g) = self.grad_buf(*b) {
                        for (i, &dv) in d.iter().enumerate() {
                            let s = i / seg_len;
                            let dst = &mut g[i * d_feat..(i + 1) * d_feat];
                            for (o, &x) in dst.iter_mut().zip(&av[s * d_feat..(s + 1) * d_feat]) {
                                E::add_assign(o, E::mul(dv, x));
                            }
                        }
                    }
                }
            }
            Op::GatherElems { x, idx } => {
                if let Some(g) = self.grad_buf(*x) {
                    for (o, &i) in idx.iter().enumerate() {
                        E::add_assign(&mut g[i as usize], d[o]);
                    }
                }
            }
            Op::ScatterAddRows { x, target, .. } => {
                let cols = self.cols(*x);
                if let Some(g) = self.grad_buf(*x) {
                    for (i, &t) in target.iter().enumerate() {
                        let src = &d[t as usize * cols..(t as usize + 1) * cols];
                        for (dv, &sv) in g[i * cols..(i + 1) * cols].iter_mut().zip(src) {
                            E::add_assign(dv, sv);
                        }
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }
}

fn gelu_fwd<E: Elem>(x: E) -> E {
    let half = E::from_f64(0.5);
    let coef = E::from_f64(GELU_COEF);
    let scale = E::from_f64(GELU_SCALE);
    let x3 = E::mul(x, E::mul(x, x));
    let u = E::mul(scale, E::add(x, E::mul(coef, x3)));
    let t = E::tanh_bulk(u);
    E::mul(E::mul(half, x), E::add(E::ONE, t))
}

fn gelu_bwd<E: Elem>(x: E) -> E {
    let half = E::from_f64(0.5);
    let coef = E::from_f64(GELU_COEF);
    let scale = E::from_f64(GELU_SCALE);
    let three = E::from_f64(3.0);
    let x2 = E::mul(x, x);
    let u = E::mul(scale, E::add(x, E::mul(coef, E::mul(x, x2))));
    let t = E::tanh_bulk(u);
    let du = E::mul(scale, E::add(E::ONE, E::mul(three, E::mul(coef, x2))));
    let sech2 = E::sub(E::ONE, E::mul(t, t));
    E::add(
        E::mul(half, E::add(E::ONE, t)),
        E::mul(E::mul(half, x), E::mul(sech2, du)),
    )
}
