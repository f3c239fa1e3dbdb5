//! Dense row-major tensors plus the raw compute kernels the tape ops share.

use crate::error::{Error, Result};
use crate::Real;
use rand::Rng;
use rand_distr::StandardNormal;

/// A dense row-major array of `Real` values. Shape `[]` is not used; scalars
/// are shape `[1]`. Every public constructor and every tape op checks that
/// the contents stay finite, so NaN/Inf surfaces as an error instead of
/// silently poisoning a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Real>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "Tensor::new",
                detail: format!("shape {:?} wants {} values, got {}", shape, n, data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], value: Real) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: Real) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    /// I.i.d. Gaussian entries with the given standard deviation.
    pub fn randn(shape: &[usize], std: Real, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| { let z: Real = rng.sample(StandardNormal); z * std }).collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Real {
        assert_eq!(self.numel(), 1, "item() on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("{:?} -> {:?} changes element count", self.shape, shape),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { context: context.to_string() })
        }
    }
}

/// `out += a[m,k] * b[k,n]`, all row-major. The i-k-j order keeps the inner
/// loop a contiguous axpy, which the compiler turns into FMA vector code.
pub fn mm_accum(a: &[Real], b: &[Real], m: usize, k: usize, n: usize, out: &mut [Real]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a[m,n] * b[k,n]^T` (b used transposed). Row-by-row dot products.
pub fn mm_nt_accum(a: &[Real], b: &[Real], m: usize, n: usize, k: usize, out: &mut [Real]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// `out += a[m,k]^T * b[m,n]` (a used transposed).
pub fn mm_tn_accum(a: &[Real], b: &[Real], m: usize, k: usize, n: usize, out: &mut [Real]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Numerically stable softplus: ln(1 + e^x).
pub fn softplus(x: Real) -> Real {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// mish(x) = x * tanh(softplus(x)). Smooth, zero at zero, asymptotically x.
pub fn mish(x: Real) -> Real {
    x * softplus(x).tanh()
}

/// d/dx mish(x) = tanh(sp) + x * (1 - tanh^2(sp)) * sigmoid(x).
pub fn mish_grad(x: Real) -> Real {
    let t = softplus(x).tanh();
    let sig = 1.0 / (1.0 + (-x).exp());
    t + x * (1.0 - t * t) * sig
}

/// Softmax over one contiguous row, writing probabilities into `out`.
/// With a mask, entries where `mask == 0` get probability exactly 0.0 and the
/// normalization runs over the unmasked entries only; the row must keep at
/// least one unmasked entry.
pub fn softmax_row(row: &[Real], mask: Option<&[Real]>, out: &mut [Real]) {
    let mut max = Real::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if mask.map_or(true, |m| m[i] != 0.0) && v > max {
            max = v;
        }
    }
    debug_assert!(max.is_finite(), "softmax row fully masked");
    let mut sum = 0.0;
    for (i, &v) in row.iter().enumerate() {
        let e = if mask.map_or(true, |m| m[i] != 0.0) { (v - max).exp() } else { 0.0 };
        out[i] = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
