//! Dense row-major tensors and the numeric kernels shared by the autodiff
//! engine, the models and the closed-form objectives.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};
use crate::par;

/// Floating-point element type. `f64` is the default everywhere; `f32` is
/// available for speed experiments.
pub trait Real: Float + FromPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static {
    /// Tolerance used when validating that a probability row sums to one.
    const SUM_TOLERANCE: f64;
    const NAME: &'static str;

    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f64 {
    const SUM_TOLERANCE: f64 = 1e-9;
    const NAME: &'static str = "f64";

    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

impl Real for f32 {
    const SUM_TOLERANCE: f64 = 1e-5;
    const NAME: &'static str = "f32";

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<F: Real = f64> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(
                "tensor",
                format!("extents must be positive, got {shape:?}"),
            ));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_vec(data: Vec<F>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n: usize = shape.iter().product();
        assert!(n > 0, "tensor extents must be positive: {shape:?}");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, F::one())
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> F) -> Self {
        let n: usize = shape.iter().product();
        assert!(n > 0, "tensor extents must be positive: {shape:?}");
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Builds a `[rows, cols]` tensor from nested rows.
    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Self::new(vec![r, c], rows.concat())
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[F] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows of a 2-D tensor, or the leading extent otherwise.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all trailing extents.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> F {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "zip_map",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(self, op: &'static str) -> Result<Self> {
        match self.data.iter().position(|x| !x.is_finite()) {
            None => Ok(self),
            Some(i) => Err(Error::domain(
                op,
                format!("non-finite value {} at flat index {i}", self.data[i]),
            )),
        }
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::of(x.as_f64())).collect(),
        }
    }

    /// Index of the largest entry of each row; ties resolve to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows()).map(|i| argmax(self.row(i))).collect()
    }
}

/// Lowest index attaining the maximum.
pub fn argmax<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Row-wise softmax of `logits / temperature`, with max-subtraction.
pub fn softmax<F: Real>(logits: &Tensor<F>, temperature: F) -> Result<Tensor<F>> {
    check_temperature(temperature)?;
    if !logits.all_finite() {
        return Err(Error::domain("softmax", "non-finite logits"));
    }
    let n = logits.cols();
    let mut out = logits.data.clone();
    for row in out.chunks_mut(n) {
        softmax_row_in_place(row, temperature);
    }
    Ok(Tensor {
        shape: logits.shape.clone(),
        data: out,
    })
}

/// Row-wise log-softmax of `logits / temperature`.
pub fn log_softmax<F: Real>(logits: &Tensor<F>, temperature: F) -> Result<Tensor<F>> {
    check_temperature(temperature)?;
    if !logits.all_finite() {
        return Err(Error::domain("log_softmax", "non-finite logits"));
    }
    let n = logits.cols();
    let mut out = logits.data.clone();
    for row in out.chunks_mut(n) {
        log_softmax_row_in_place(row, temperature);
    }
    Ok(Tensor {
        shape: logits.shape.clone(),
        data: out,
    })
}

pub(crate) fn check_temperature<F: Real>(temperature: F) -> Result<()> {
    if !(temperature > F::zero()) || !temperature.is_finite() {
        return Err(Error::Argument(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    Ok(())
}

pub(crate) fn softmax_row_in_place<F: Real>(row: &mut [F], temperature: F) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

pub(crate) fn log_softmax_row_in_place<F: Real>(row: &mut [F], temperature: F) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max) / temperature;
        total = total + v.exp();
    }
    let log_total = total.ln();
    for v in row.iter_mut() {
        *v = *v - log_total;
    }
}

/// `out[m,n] = a[m,k] · b[k,n]`, parallel over output rows.
pub fn matmul<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![F::zero(); m * n];
    par::for_each_chunk_mut(&mut out, n, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    });
    out
}

/// `out[k,n] = a[m,k]ᵀ · b[m,n]`, parallel over output rows.
pub fn matmul_tn<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut out = vec![F::zero(); k * n];
    par::for_each_chunk_mut(&mut out, n, |r, row| {
        for i in 0..m {
            let av = a[i * k + r];
            if av == F::zero() {
                continue;
            }
            let b_row = &b[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    });
    out
}

/// `out[m,k] = a[m,n] · b[k,n]ᵀ`, parallel over output rows.
pub fn matmul_nt<F: Real>(a: &[F], b: &[F], m: usize, n: usize, k: usize) -> Vec<F> {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![F::zero(); m * k];
    par::for_each_chunk_mut(&mut out, k, |i, row| {
        let a_row = &a[i * n..(i + 1) * n];
        for (j, o) in row.iter_mut().enumerate() {
            let b_row = &b[j * n..(j + 1) * n];
            *o = a_row.iter().zip(b_row).fold(F::zero(), |acc, (&x, &y)| acc + x * y);
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_analytic_rows() {
        let t = Tensor::from_rows(&[vec![3f64.ln(), 0.0]]).unwrap();
        let p = softmax(&t, 1.0).unwrap();
        assert!(close(p.data()[0], 0.75, 1e-15));
        assert!(close(p.data()[1], 0.25, 1e-15));

        let t = Tensor::from_rows(&[vec![1.7; 4]]).unwrap();
        for temp in [0.3, 1.0, 5.0] {
            let p = softmax(&t, temp).unwrap();
            assert!(p.data().iter().all(|&v| close(v, 0.25, 1e-15)));
        }

        let a = softmax(&Tensor::from_rows(&[vec![2.0, 0.0]]).unwrap(), 2.0).unwrap();
        let b = softmax(&Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(), 1.0).unwrap();
        assert_eq!(a, b);
        assert!(close(a.data()[0], 0.73106, 1e-5));
        assert!(close(a.data()[1], 0.26894, 1e-5));
    }

    #[test]
    fn softmax_rejects_bad_inputs() {
        let t = Tensor::from_rows(&[vec![f64::NAN, 0.0]]).unwrap();
        assert!(matches!(softmax(&t, 1.0), Err(Error::NumericDomain { .. })));
        let t = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(matches!(softmax(&t, 0.0), Err(Error::Argument(_))));
        assert!(matches!(softmax(&t, -1.0), Err(Error::Argument(_))));
    }

    #[test]
    fn softmax_large_logits_are_stable() {
        let t = Tensor::from_rows(&[vec![1000.0, 999.0, -1000.0]]).unwrap();
        let p = softmax(&t, 1.0).unwrap();
        assert!(p.all_finite());
        assert!(close(p.sum(), 1.0, 1e-12));
    }

    #[test]
    fn tensor_shape_invariant() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let c = matmul(&a, &b, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!(close(c[i * n + j], want, 1e-12));
            }
        }
        // aᵀ·c has shape [k, n] when c is [m, n]
        let tn = matmul_tn(&a, &c, m, k, n);
        for r in 0..k {
            for j in 0..n {
                let want: f64 = (0..m).map(|i| a[i * k + r] * c[i * n + j]).sum();
                assert!(close(tn[r * n + j], want, 1e-12));
            }
        }
        // c·bᵀ has shape [m, k]
        let nt = matmul_nt(&c, &b, m, n, k);
        for i in 0..m {
            for j in 0..k {
                let want: f64 = (0..n).map(|p| c[i * n + p] * b[j * n + p]).sum();
                assert!(close(nt[i * k + j], want, 1e-12));
            }
        }
    }
}
