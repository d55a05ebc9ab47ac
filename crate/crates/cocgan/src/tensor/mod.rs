//! Reverse-mode differentiable tensor core.
//!
//! Values are flat row-major buffers recorded on a define-by-run [`Tape`];
//! learnable parameters live outside the tape in a [`ParamBank`] and are
//! re-registered on every forward pass. Training runs in `f32`; oracle and
//! gradient-check code instantiates the same ops at `f64`.

mod gradcheck;
mod init;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use init::{param_init, InitScheme};
pub use tape::{Tape, Var};

use std::fmt::Debug;

/// Scalar element type the tensor core is generic over.
pub trait Elem: Copy + PartialOrd + Debug + Default + Send + Sync + 'static {
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;

    /// C[m,n] += alpha * A[m,k] * B[k,n], row-major contiguous.
    fn gemm_nn(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], c: &mut [Self]);
    /// C[m,n] += alpha * A[m,k] * B[n,k]^T.
    fn gemm_nt(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], c: &mut [Self]);
    /// C[m,n] += alpha * A[k,m]^T * B[k,n].
    fn gemm_tn(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], c: &mut [Self]);

    fn add_assign(a: &mut Self, b: Self);
    fn mul(a: Self, b: Self) -> Self;
    fn add(a: Self, b: Self) -> Self;
    fn sub(a: Self, b: Self) -> Self;
    fn div(a: Self, b: Self) -> Self;
    fn neg(a: Self) -> Self;
    fn sqrt(a: Self) -> Self;
    fn exp(a: Self) -> Self;
    fn ln(a: Self) -> Self;
    fn tanh(a: Self) -> Self;
    fn abs(a: Self) -> Self;
    fn max(a: Self, b: Self) -> Self;
    fn min(a: Self, b: Self) -> Self;

    /// exp for bulk elementwise kernels. The f32 implementation is a
    /// branch-free polynomial (~1 ulp) that the compiler can vectorize;
    /// f64 stays on libm so oracle-mode math is exact.
    fn exp_bulk(a: Self) -> Self;

    #[inline(always)]
    fn sigmoid(a: Self) -> Self {
        Self::div(Self::ONE, Self::add(Self::ONE, Self::exp_bulk(Self::neg(a))))
    }

    #[inline(always)]
    fn tanh_bulk(a: Self) -> Self {
        // tanh(x) = 2*sigmoid(2x) - 1
        let two = Self::add(Self::ONE, Self::ONE);
        Self::sub(Self::mul(two, Self::sigmoid(Self::mul(two, a))), Self::ONE)
    }
}

/// Branch-free single-precision exp (Cephes-style): exact at 0, ~1 ulp
/// elsewhere. Integer work goes through float bit patterns (no fp->int
/// casts), so the loop vectorizer can handle it.
#[inline(always)]
fn expf_fast(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const C1: f32 = 0.693_359_375;
    const C2: f32 = -2.121_944_4e-4;
    // 1.5 * 2^23: adding it rounds x*log2(e) to the nearest integer and
    // leaves that integer in the low mantissa bits
    const MAGIC: f32 = 12_582_912.0;
    const MAGIC_BITS: u32 = 0x4B40_0000;
    let x = x.clamp(-87.336_544, 88.722_839);
    let z = x * LOG2E + MAGIC;
    let n = z - MAGIC;
    let r = x - n * C1 - n * C2;
    // degree-6 minimax polynomial for exp(r) on [-ln2/2, ln2/2]
    let p = 1.987_569_1e-4;
    let p = p * r + 1.398_199_9e-3;
    let p = p * r + 8.333_452e-3;
    let p = p * r + 4.166_579_5e-2;
    let p = p * r + 1.666_666_6e-1;
    let p = p * r + 5e-1;
    let p = p * r * r + r + 1.0;
    let e = z.to_bits().wrapping_sub(MAGIC_BITS); // two's-complement exponent n
    let scale = f32::from_bits(e.wrapping_add(127) << 23);
    p * scale
}

// Striped 8-accumulator dot product: fixed summation order (deterministic)
// with enough independent chains to vectorize.
macro_rules! dot_striped {
    ($t:ty, $a:expr, $b:expr) => {{
        let a: &[$t] = $a;
        let b: &[$t] = $b;
        let mut acc = [0.0 as $t; 8];
        let chunks = a.len() / 8;
        for i in 0..chunks {
            for l in 0..8 {
                acc[l] += a[i * 8 + l] * b[i * 8 + l];
            }
        }
        let mut tail = 0.0 as $t;
        for i in chunks * 8..a.len() {
            tail += a[i] * b[i];
        }
        (((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))) + tail
    }};
}

macro_rules! impl_elem {
    ($t:ty, $gemm:path, $exp_bulk:expr) => {
        impl Elem for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }

            fn gemm_nn(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], c: &mut [Self]) {
                debug_assert_eq!(a.len(), m * k);
                debug_assert_eq!(b.len(), k * n);
                debug_assert_eq!(c.len(), m * n);
                // The packed-gemm path wins only for reasonably fat shapes;
                // skinny products (matvec-like, tiny inner dim) are faster as
                // plain vectorizable loops.
                if n == 1 {
                    for i in 0..m {
                        let row = &a[i * k..(i + 1) * k];
                        c[i] += alpha * dot_striped!($t, row, b);
                    }
                    return;
                }
                if m == 1 {
                    // vector-matrix: c[n] += alpha * sum_k a[k] * b[k, :]
                    for kk in 0..k {
                        let s = alpha * a[kk];
                        let brow = &b[kk * n..(kk + 1) * n];
                        for (o, &bv) in c.iter_mut().zip(brow) {
                            *o += s * bv;
                        }
                    }
                    return;
                }
                if k <= 4 {
                    for i in 0..m {
                        let row = &a[i * k..(i + 1) * k];
                        let out = &mut c[i * n..(i + 1) * n];
                        for (kk, &av) in row.iter().enumerate() {
                            let s = alpha * av;
                            for (o, &bv) in out.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                                *o += s * bv;
                            }
                        }
                    }
                    return;
                }
                unsafe {
                    $gemm(
                        m, k, n, alpha,
                        a.as_ptr(), k as isize, 1,
                        b.as_ptr(), n as isize, 1,
                        1.0, c.as_mut_ptr(), n as isize, 1,
                    );
                }
            }

            fn gemm_nt(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], c: &mut [Self]) {
                debug_assert_eq!(a.len(), m * k);
                debug_assert_eq!(b.len(), n * k);
                debug_assert_eq!(c.len(), m * n);
                if n == 1 {
                    for i in 0..m {
                        let row = &a[i * k..(i + 1) * k];
                        c[i] += alpha * dot_striped!($t, row, b);
                    }
                    return;
                }
                if m == 1 {
                    for j in 0..n {
                        let row = &b[j * k..(j + 1) * k];
                        c[j] += alpha * dot_striped!($t, a, row);
                    }
                    return;
                }
                unsafe {
                    $gemm(
                        m, k, n, alpha,
                        a.as_ptr(), k as isize, 1,
                        b.as_ptr(), 1, k as isize,
                        1.0, c.as_mut_ptr(), n as isize, 1,
                    );
                }
            }

            fn gemm_tn(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], c: &mut [Self]) {
                debug_assert_eq!(a.len(), k * m);
                debug_assert_eq!(b.len(), k * n);
                debug_assert_eq!(c.len(), m * n);
                if n == 1 {
                    // c[m] += alpha * sum_r a[r, :] * b[r]
                    for r in 0..k {
                        let s = alpha * b[r];
                        let row = &a[r * m..(r + 1) * m];
                        for (o, &av) in c.iter_mut().zip(row) {
                            *o += s * av;
                        }
                    }
                    return;
                }
                if m <= 8 {
                    // tall-skinny transpose: accumulate outer rows
                    for r in 0..k {
                        let arow = &a[r * m..(r + 1) * m];
                        let brow = &b[r * n..(r + 1) * n];
                        for (i, &av) in arow.iter().enumerate() {
                            let s = alpha * av;
                            let out = &mut c[i * n..(i + 1) * n];
                            for (o, &bv) in out.iter_mut().zip(brow) {
                                *o += s * bv;
                            }
                        }
                    }
                    return;
                }
                unsafe {
                    $gemm(
                        m, k, n, alpha,
                        a.as_ptr(), 1, m as isize,
                        b.as_ptr(), n as isize, 1,
                        1.0, c.as_mut_ptr(), n as isize, 1,
                    );
                }
            }

            #[inline]
            fn add_assign(a: &mut Self, b: Self) {
                *a += b;
            }
            #[inline]
            fn mul(a: Self, b: Self) -> Self {
                a * b
            }
            #[inline]
            fn add(a: Self, b: Self) -> Self {
                a + b
            }
            #[inline]
            fn sub(a: Self, b: Self) -> Self {
                a - b
            }
            #[inline]
            fn div(a: Self, b: Self) -> Self {
                a / b
            }
            #[inline]
            fn neg(a: Self) -> Self {
                -a
            }
            #[inline]
            fn sqrt(a: Self) -> Self {
                <$t>::sqrt(a)
            }
            #[inline]
            fn exp(a: Self) -> Self {
                <$t>::exp(a)
            }
            #[inline]
            fn ln(a: Self) -> Self {
                <$t>::ln(a)
            }
            #[inline]
            fn tanh(a: Self) -> Self {
                <$t>::tanh(a)
            }
            #[inline]
            fn abs(a: Self) -> Self {
                <$t>::abs(a)
            }
            #[inline]
            fn max(a: Self, b: Self) -> Self {
                <$t>::max(a, b)
            }
            #[inline]
            fn min(a: Self, b: Self) -> Self {
                <$t>::min(a, b)
            }

            #[inline(always)]
            fn exp_bulk(a: Self) -> Self {
                $exp_bulk(a)
            }
        }
    };
}

impl_elem!(f32, matrixmultiply::sgemm, expf_fast);
impl_elem!(f64, matrixmultiply::dgemm, f64::exp);

/// Epsilon added inside every norm and denominator (cosine similarity,
/// layer-norm, optimizer second moments).
pub const NORM_EPS: f64 = 1e-8;

#[cfg(target_os = "linux")]
extern "C" {
    fn mallopt(param: i32, value: i32) -> i32;
}

/// Keep multi-megabyte tape buffers on the heap free lists instead of
/// letting glibc munmap them: forward passes rebuild the same allocation
/// pattern every step, and re-faulting those pages dominated profile runs.
/// Idempotent; no-op off Linux.
pub fn tune_allocator() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| {
        #[cfg(target_os = "linux")]
        unsafe {
            mallopt(-3, 1 << 30); // M_MMAP_THRESHOLD
            mallopt(-1, 1 << 30); // M_TRIM_THRESHOLD
        }
    });
}

/// An owned n-dimensional value. `grad` is allocated lazily on the first
/// backward pass that reaches it.
#[derive(Clone, Debug)]
pub struct Tensor<E: Elem> {
    pub shape: Vec<usize>,
    pub data: Vec<E>,
    pub grad: Option<Vec<E>>,
    pub requires_grad: bool,
}

impl<E: Elem> Tensor<E> {
    pub fn new(data: Vec<E>, shape: &[usize]) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape: shape.to_vec(), data, grad: None, requires_grad: false }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::new(vec![E::ZERO; n], shape)
    }

    pub fn scalar(v: E) -> Self {
        Tensor::new(vec![v], &[1])
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// Accumulate `g` into the (lazily allocated) gradient buffer.
    pub fn accumulate_grad(&mut self, g: &[E]) {
        assert_eq!(g.len(), self.data.len(), "gradient shape mismatch");
        let grad = self.grad.get_or_insert_with(|| vec![E::ZERO; self.data.len()]);
        for (dst, &src) in grad.iter_mut().zip(g) {
            E::add_assign(dst, src);
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = E::ZERO);
        }
    }

    pub fn cast<F: Elem>(&self) -> Tensor<F> {
        let mut t = Tensor::new(
            self.data.iter().map(|v| F::from_f64(v.to_f64())).collect(),
            &self.shape,
        );
        t.requires_grad = self.requires_grad;
        t
    }
}

/// Handle to a parameter inside a [`ParamBank`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

static BANK_COUNTER: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(1);

/// Named parameter storage for one model. Parameters persist across tapes;
/// every forward pass registers them onto the pass's tape and
/// [`Tape::export_grads`] accumulates tape gradients back here.
#[derive(Clone, Debug)]
pub struct ParamBank<E: Elem> {
    uid: u64,
    names: Vec<String>,
    tensors: Vec<Tensor<E>>,
}

impl<E: Elem> Default for ParamBank<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> ParamBank<E> {
    pub fn new() -> Self {
        let uid = BANK_COUNTER.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        ParamBank { uid, names: Vec::new(), tensors: Vec::new() }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<E>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name:?}"
        );
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.tensors[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<E>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter_mut())
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    pub fn total_params(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Largest absolute parameter value across the whole bank.
    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| v.to_f64().abs())
            .fold(0.0, f64::max)
    }

    pub fn cast<F: Elem>(&self) -> ParamBank<F> {
        let mut out = ParamBank::new();
        for (name, t) in self.iter() {
            out.add(name, t.cast());
        }
        out
    }

    /// FNV-1a hash over shapes and raw little-endian f32 payloads. Used to
    /// label metric reports with the identity of the extractor that
    /// produced them.
    pub fn identity_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for (name, t) in self.iter() {
            name.bytes().for_each(&mut eat);
            for &d in &t.shape {
                (d as u32).to_le_bytes().iter().for_each(|&b| eat(b));
            }
            for v in &t.data {
                (v.to_f64() as f32).to_le_bytes().iter().for_each(|&b| eat(b));
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_product_invariant() {
        let t = Tensor::<f32>::zeros(&[3, 4]);
        assert_eq!(t.numel(), 12);
    }

    #[test]
    #[should_panic(expected = "does not match shape")]
    fn tensor_rejects_bad_shape() {
        let _ = Tensor::new(vec![1.0f32; 5], &[2, 3]);
    }

    #[test]
    fn grad_accumulates_and_zeroes() {
        let mut t = Tensor::new(vec![1.0f64, 2.0], &[2]).with_grad();
        t.accumulate_grad(&[0.5, 0.5]);
        t.accumulate_grad(&[1.0, 2.0]);
        assert_eq!(t.grad.as_deref(), Some(&[1.5, 2.5][..]));
        t.zero_grad();
        assert_eq!(t.grad.as_deref(), Some(&[0.0, 0.0][..]));
    }

    #[test]
    fn gemm_matches_hand_product() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        f64::gemm_nn(2, 2, 2, 1.0, &a, &b, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);

        // A * B^T with B stored row-major [n,k]
        let mut c2 = [0.0f64; 4];
        let bt = [5.0f64, 7.0, 6.0, 8.0]; // rows of B^T = columns of B
        f64::gemm_nt(2, 2, 2, 1.0, &a, &bt, &mut c2);
        assert_eq!(c2, [19.0, 22.0, 43.0, 50.0]);

        // A^T * B where A stored [k,m]
        let mut c3 = [0.0f64; 4];
        let at = [1.0f64, 3.0, 2.0, 4.0]; // A^T stored row-major [k=2, m=2] -> A = [[1,2],[3,4]]
        f64::gemm_tn(2, 2, 2, 1.0, &at, &b, &mut c3);
        assert_eq!(c3, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn bank_uids_are_unique() {
        let a = ParamBank::<f32>::new();
        let b = ParamBank::<f32>::new();
        assert_ne!(a.uid(), b.uid());
    }

    #[test]
    fn identity_hash_tracks_content() {
        let mut a = ParamBank::<f32>::new();
        a.add("w", Tensor::new(vec![1.0, 2.0], &[2]));
        let mut b = ParamBank::<f32>::new();
        b.add("w", Tensor::new(vec![1.0, 2.0], &[2]));
        assert_eq!(a.identity_hash(), b.identity_hash());
        b.get_mut(ParamId(0)).data[0] = 3.0;
        assert_ne!(a.identity_hash(), b.identity_hash());
    }
}
