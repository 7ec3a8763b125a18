//! Dense row-major tensors over `f32`/`f64` with a fixed, documented
//! accumulation order.
//!
//! Every reduction in this module (matmul, sums, norms) runs in ascending
//! index order so results are bitwise reproducible across runs and match the
//! naive reference loops used in tests. Public operations validate shapes and
//! reject non-finite outputs instead of letting NaN/Inf propagate.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Scalar storage type of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => write!(f, "f32"),
            DType::F64 => write!(f, "f64"),
        }
    }
}

/// Scalar element of a tensor. Implemented for `f32` and `f64` only.
pub trait Element:
    Copy
    + Send
    + Sync
    + PartialOrd
    + PartialEq
    + fmt::Debug
    + fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const DTYPE: DType;

    fn zero() -> Self;
    fn one() -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite_val(self) -> bool;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn max_val(self, other: Self) -> Self;
    fn neg_infinity() -> Self;
    fn to_le_bytes_vec(self) -> Vec<u8>;
    fn from_le_slice(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn is_finite_val(self) -> bool {
        self.is_finite()
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn ln(self) -> Self {
        self.ln()
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn tanh(self) -> Self {
        self.tanh()
    }
    fn abs(self) -> Self {
        self.abs()
    }
    fn max_val(self, other: Self) -> Self {
        self.max(other)
    }
    fn neg_infinity() -> Self {
        f32::NEG_INFINITY
    }
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn is_finite_val(self) -> bool {
        self.is_finite()
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn ln(self) -> Self {
        self.ln()
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn tanh(self) -> Self {
        self.tanh()
    }
    fn abs(self) -> Self {
        self.abs()
    }
    fn max_val(self, other: Self) -> Self {
        self.max(other)
    }
    fn neg_infinity() -> Self {
        f64::NEG_INFINITY
    }
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }
}

/// Dense row-major tensor. Immutable after construction; clones share storage.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Element> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{}>{:?}", T::DTYPE, self.shape)?;
        if self.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

pub(crate) fn shape_len(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Element> Tensor<T> {
    /// Builds a tensor, validating extents, length and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        let expect = shape_len(&shape);
        if data.len() != expect {
            return Err(Error::shape(format!(
                "data length {} does not match shape {:?} (expected {})",
                data.len(),
                shape,
                expect
            )));
        }
        let t = Self {
            shape,
            data: Arc::new(data),
        };
        t.ensure_finite("Tensor::new")?;
        Ok(t)
    }

    /// Internal constructor for values produced by our own kernels.
    pub(crate) fn from_vec_unchecked(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape_len(&shape), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_vec_unchecked(shape.to_vec(), vec![T::zero(); shape_len(shape)])
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::from_vec_unchecked(shape.to_vec(), vec![v; shape_len(shape)])
    }

    /// Rank-0 scalar.
    pub fn scalar(v: T) -> Self {
        Self::from_vec_unchecked(vec![], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn scalar_value(&self) -> Result<T> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::shape(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    /// Row slice of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[T] {
        assert_eq!(self.rank(), 2, "row() needs a rank-2 tensor");
        let n = self.shape[1];
        &self.data[i * n..(i + 1) * n]
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite_val() {
                return Err(Error::NonFinite(format!(
                    "{context}: element {i} of shape {:?} is {v}",
                    self.shape
                )));
            }
        }
        Ok(())
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite_val())
    }

    /// Exact bit-level equality, used by determinism tests.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_le_bytes_vec() == b.to_le_bytes_vec())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_vec_unchecked(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        if shape_len(&shape) != self.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn to_f64_tensor(&self) -> Tensor<f64> {
        Tensor::from_vec_unchecked(
            self.shape.clone(),
            self.data.iter().map(|v| v.to_f64()).collect(),
        )
    }

    pub fn to_f32_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec_unchecked(
            self.shape.clone(),
            self.data.iter().map(|v| v.to_f64() as f32).collect(),
        )
    }
}

// ---------------------------------------------------------------------------
// Raw kernels. Shared by the checked public ops and the autodiff backward
// passes so both paths do the identical float operations in identical order.
// ---------------------------------------------------------------------------

pub(crate) mod kernels {
    use super::Element;

    /// `out[i,j] += sum_p a[i,p] * b[p,j]`, p ascending per output element.
    ///
    /// The i-k-j loop order vectorizes over j while keeping, per element, the
    /// exact add sequence of the naive triple loop.
    pub fn gemm_acc<T: Element>(
        a: &[T],
        b: &[T],
        m: usize,
        k: usize,
        n: usize,
        out: &mut [T],
    ) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(out.len(), m * n);
        for i in 0..m {
            let a_row = &a[i * k..(i + 1) * k];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (p, &a_ip) in a_row.iter().enumerate() {
                let b_row = &b[p * n..(p + 1) * n];
                for (o, &b_pj) in out_row.iter_mut().zip(b_row.iter()) {
                    *o = *o + a_ip * b_pj;
                }
            }
        }
    }

    pub fn gemm<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
        let mut out = vec![T::zero(); m * n];
        gemm_acc(a, b, m, k, n, &mut out);
        out
    }

    pub fn transpose<T: Element>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
        let mut out = vec![T::zero(); a.len()];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = a[i * cols + j];
            }
        }
        out
    }

    /// In-place softmax of one lane with max subtraction.
    pub fn softmax_lane<T: Element>(lane: &mut [T]) {
        let mut max = T::neg_infinity();
        for &v in lane.iter() {
            max = max.max_val(v);
        }
        let mut sum = T::zero();
        for v in lane.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in lane.iter_mut() {
            *v = *v / sum;
        }
    }

    /// log(sum(exp(lane))) with max subtraction, ascending order.
    pub fn log_sum_exp<T: Element>(lane: &[T]) -> T {
        let mut max = T::neg_infinity();
        for &v in lane.iter() {
            max = max.max_val(v);
        }
        let mut sum = T::zero();
        for &v in lane.iter() {
            sum += (v - max).exp();
        }
        max + sum.ln()
    }

    /// Dot product in ascending index order.
    pub fn dot<T: Element>(a: &[T], b: &[T]) -> T {
        debug_assert_eq!(a.len(), b.len());
        let mut s = T::zero();
        for (&x, &y) in a.iter().zip(b.iter()) {
            s += x * y;
        }
        s
    }

    pub fn l2_norm<T: Element>(a: &[T]) -> T {
        dot(a, a).sqrt()
    }

    const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const GELU_A: f64 = 0.044_715;

    /// GELU, tanh approximation.
    pub fn gelu_scalar<T: Element>(x: T) -> T {
        let c = T::from_f64(GELU_C);
        let a = T::from_f64(GELU_A);
        let half = T::from_f64(0.5);
        let inner = c * (x + a * x * x * x);
        half * x * (T::one() + inner.tanh())
    }

    /// d/dx of the tanh-approximation GELU.
    pub fn gelu_grad_scalar<T: Element>(x: T) -> T {
        let c = T::from_f64(GELU_C);
        let a = T::from_f64(GELU_A);
        let half = T::from_f64(0.5);
        let three = T::from_f64(3.0);
        let inner = c * (x + a * x * x * x);
        let t = inner.tanh();
        let sech2 = T::one() - t * t;
        let dinner = c * (T::one() + three * a * x * x);
        half * (T::one() + t) + half * x * sech2 * dinner
    }
}

// ---------------------------------------------------------------------------
// Checked public operations
// ---------------------------------------------------------------------------

fn check_same_shape<T: Element>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn finite_checked<T: Element>(t: Tensor<T>, op: &str) -> Result<Tensor<T>> {
    t.ensure_finite(op)?;
    Ok(t)
}

/// `a[m,k] @ b[k,n] -> [m,n]`, accumulation in ascending p order.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::shape(format!(
            "matmul expects rank-2 operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner extents differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let out = kernels::gemm(a.data(), b.data(), m, k, n);
    finite_checked(Tensor::from_vec_unchecked(vec![m, n], out), "matmul")
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape(a, b, "add")?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    finite_checked(Tensor::from_vec_unchecked(a.shape().to_vec(), data), "add")
}

pub fn sub<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape(a, b, "sub")?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x - y)
        .collect();
    finite_checked(Tensor::from_vec_unchecked(a.shape().to_vec(), data), "sub")
}

pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape(a, b, "mul")?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x * y)
        .collect();
    finite_checked(Tensor::from_vec_unchecked(a.shape().to_vec(), data), "mul")
}

pub fn scale<T: Element>(a: &Tensor<T>, k: T) -> Result<Tensor<T>> {
    finite_checked(a.map(|v| v * k), "scale")
}

pub fn transpose<T: Element>(a: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 {
        return Err(Error::shape(format!(
            "transpose expects rank 2, got {:?}",
            a.shape()
        )));
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    Ok(Tensor::from_vec_unchecked(
        vec![n, m],
        kernels::transpose(a.data(), m, n),
    ))
}

/// Softmax along `axis`, computed with max subtraction for stability.
pub fn softmax<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::shape(format!(
            "softmax axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    let n = x.shape()[axis];
    if n == 0 {
        return Err(Error::shape("softmax over empty axis".to_string()));
    }
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let outer: usize = x.shape()[..axis].iter().product();
    let mut out = x.data().to_vec();
    let mut lane = vec![T::zero(); n];
    for o in 0..outer {
        for i in 0..inner {
            for (k, slot) in lane.iter_mut().enumerate() {
                *slot = out[o * n * inner + k * inner + i];
            }
            kernels::softmax_lane(&mut lane);
            for (k, &v) in lane.iter().enumerate() {
                out[o * n * inner + k * inner + i] = v;
            }
        }
    }
    finite_checked(Tensor::from_vec_unchecked(x.shape().to_vec(), out), "softmax")
}

/// Layer normalization over the last axis with scale `gamma` and shift `beta`.
/// Uses the population variance.
pub fn layer_norm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    if x.rank() == 0 {
        return Err(Error::shape("layer_norm needs rank >= 1".to_string()));
    }
    if eps <= 0.0 {
        return Err(Error::invalid("layer_norm eps must be > 0"));
    }
    let d = *x.shape().last().unwrap();
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape(format!(
            "layer_norm gamma/beta must have shape [{d}], got {:?}/{:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let slices = x.len() / d;
    let mut out = vec![T::zero(); x.len()];
    let inv_d = T::from_f64(1.0 / d as f64);
    let eps_t = T::from_f64(eps);
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
    }
    finite_checked(
        Tensor::from_vec_unchecked(x.shape().to_vec(), out),
        "layer_norm",
    )
}

pub fn gelu<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    finite_checked(x.map(kernels::gelu_scalar), "gelu")
}

pub fn dot<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    check_same_shape(a, b, "dot")?;
    Ok(kernels::dot(a.data(), b.data()))
}

pub fn l2_norm<T: Element>(a: &Tensor<T>) -> T {
    kernels::l2_norm(a.data())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let eye = t2(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let c = matmul(&a, &eye).unwrap();
        assert_eq!(c.data(), a.data());
    }

    #[test]
    fn matmul_column_vector() {
        let a = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = t2(2, 1, &[5.0, 6.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_zero() {
        let z = Tensor::<f64>::zeros(&[2, 2]);
        let b = t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let c = matmul(&z, &b).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_matches_naive_triple_loop_bitwise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let (m, k, n) = (
                rng.gen_range(1..9),
                rng.gen_range(1..9),
                rng.gen_range(1..9),
            );
            let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let got = matmul(
                &Tensor::new(vec![m, k], a.clone()).unwrap(),
                &Tensor::new(vec![k, n], b.clone()).unwrap(),
            )
            .unwrap();
            // Naive i-j-p reference with p ascending.
            let mut want = vec![0.0f64; m * n];
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0f64;
                    for p in 0..k {
                        acc += a[i * k + p] * b[p * n + j];
                    }
                    want[i * n + j] = acc;
                }
            }
            assert!(got
                .data()
                .iter()
                .zip(want.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = t2(2, 3, &[0.0; 6]);
        let b = t2(2, 2, &[0.0; 4]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_symmetry_and_exact_exponentials() {
        let x = Tensor::new(vec![2], vec![0.0f64, 0.0]).unwrap();
        let y = softmax(&x, 0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);

        let x = Tensor::new(vec![2], vec![0.0f64, 3.0f64.ln()]).unwrap();
        let y = softmax(&x, 0).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-12);
        assert!((y.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let x = Tensor::new(vec![4], vec![0.3f64, -1.2, 2.0, 0.0]).unwrap();
        let shifted = x.map(|v| v + 17.5);
        let a = softmax(&x, 0).unwrap();
        let b = softmax(&shifted, 0).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(vec![2, 3], vec![80.0f64, -80.0, 0.0, 5.0, 5.0, 5.0]).unwrap();
        let y = softmax(&x, 1).unwrap();
        for r in 0..2 {
            let s: f64 = y.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_middle_axis() {
        let x = Tensor::new(vec![2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        let y = softmax(&x, 1).unwrap();
        // lanes run along axis 1: (o, i) pairs
        for o in 0..2 {
            for i in 0..2 {
                let s = y.data()[o * 4 + i] + y.data()[o * 4 + 2 + i];
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_cases() {
        let g = Tensor::new(vec![2], vec![1.0f64, 1.0]).unwrap();
        let b = Tensor::new(vec![2], vec![0.0f64, 0.0]).unwrap();

        // constant slice -> zeros (eps guards the zero variance)
        let x = Tensor::new(vec![2], vec![3.0f64, 3.0]).unwrap();
        let y = layer_norm(&x, &g, &b, 1e-5).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-9));

        // already normalized stays put as eps -> 0
        let x = Tensor::new(vec![2], vec![1.0f64, -1.0]).unwrap();
        let y = layer_norm(&x, &g, &b, 1e-12).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-6);
        assert!((y.data()[1] + 1.0).abs() < 1e-6);

        // affine of the previous
        let g2 = Tensor::new(vec![2], vec![2.0f64, 2.0]).unwrap();
        let b2 = Tensor::new(vec![2], vec![1.0f64, 1.0]).unwrap();
        let y = layer_norm(&x, &g2, &b2, 1e-12).unwrap();
        assert!((y.data()[0] - 3.0).abs() < 1e-5);
        assert!((y.data()[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_rejects_bad_gamma() {
        let x = Tensor::new(vec![3], vec![1.0f64, 2.0, 3.0]).unwrap();
        let g = Tensor::new(vec![2], vec![1.0f64, 1.0]).unwrap();
        assert!(layer_norm(&x, &g, &g, 1e-5).is_err());
    }

    #[test]
    fn non_finite_is_rejected() {
        assert!(Tensor::new(vec![2], vec![1.0f64, f64::NAN]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::INFINITY]).is_err());
        let big = Tensor::new(vec![1], vec![1e308f64]).unwrap();
        assert!(matches!(scale(&big, 1e308), Err(Error::NonFinite(_))));
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Tensor::<f64>::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn scalar_roundtrip() {
        let s = Tensor::scalar(4.25f32);
        assert!(s.is_scalar());
        assert_eq!(s.scalar_value().unwrap(), 4.25);
    }
}
