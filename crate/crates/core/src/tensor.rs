//! Dense row-major arrays and the scalar trait shared by both precision modes.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{EndxError, Result};

/// Floating point element type. Implemented for `f32` (training) and `f64`
/// (gradient checks and oracles).
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + Sum + 'static
{
    const NAME: &'static str;

    /// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers.
    ///
    /// `a` is `m x k` after the optional transpose, `b` is `k x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }
}

macro_rules! impl_real {
    ($t:ty, $name:expr, $gemm:path) => {
        impl Real for $t {
            const NAME: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert_eq!(a.len(), m * k, "gemm: lhs has {} values, expected {}", a.len(), m * k);
                assert_eq!(b.len(), k * n, "gemm: rhs has {} values, expected {}", b.len(), k * n);
                assert_eq!(c.len(), m * n, "gemm: out has {} values, expected {}", c.len(), m * n);
                if m == 0 || n == 0 {
                    return;
                }
                // Strides describe the transposes without copying.
                let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, "f32", matrixmultiply::sgemm);
impl_real!(f64, "f64", matrixmultiply::dgemm);

/// A dense row-major array.
#[derive(Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Debug> Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        if shape.contains(&0) && !data.is_empty() {
            return Err(EndxError::Shape(format!("shape {shape:?} has a zero extent but {} values", data.len())));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(EndxError::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// Panicking constructor for internal call sites whose shapes are
    /// established by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<F>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![F::zero(); shape.iter().product()] }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: F) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(EndxError::Shape("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(&[rows.len(), cols], data)
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| F::lit(x)).collect())
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

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.data.len() / self.cols().max(1)
        }
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> F {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(EndxError::Shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect()
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap_or(G::nan())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    /// Plain matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(EndxError::Shape(format!("matmul {:?} x {:?}", self.shape, other.shape)));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![F::zero(); m * n];
        F::gemm(m, k, n, &self.data, false, &other.data, false, F::zero(), &mut out);
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    pub fn max_abs_diff(&self, other: &Tensor<F>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().to_f64().unwrap_or(f64::INFINITY))
            .fold(0.0, f64::max)
    }
}

/// Numerically stable row softmax over the last axis.
///
/// `mask`, when given, has one flag per element; `false` entries are
/// excluded from the support and come out as exact zeros.
pub fn softmax_rows<F: Real>(m: &Tensor<F>, mask: Option<&[bool]>) -> Result<Tensor<F>> {
    if let Some(mask) = mask {
        if mask.len() != m.len() {
            return Err(EndxError::Shape(format!("mask has {} flags for {} values", mask.len(), m.len())));
        }
    }
    if !m.all_finite() {
        return Err(EndxError::NonFinite { op: "softmax_rows".into() });
    }
    let mut out = m.clone();
    softmax_in_place(out.data_mut(), m.cols(), mask).map_err(|_| EndxError::EmptySoftmaxSupport)?;
    Ok(out)
}

/// Returns `Err(row)` for the first row whose mask has no valid entry; that
/// row is left filled with zeros.
pub(crate) fn softmax_in_place<F: Real>(data: &mut [F], cols: usize, mask: Option<&[bool]>) -> std::result::Result<(), usize> {
    let mut empty = None;
    for (r, row) in data.chunks_mut(cols.max(1)).enumerate() {
        let valid = |j: usize| mask.is_none_or(|m| m[r * cols + j]);
        let mut max = F::neg_infinity();
        for (j, &x) in row.iter().enumerate() {
            if valid(j) && x > max {
                max = x;
            }
        }
        if max == F::neg_infinity() {
            row.iter_mut().for_each(|x| *x = F::zero());
            empty.get_or_insert(r);
            continue;
        }
        let mut total = F::zero();
        for (j, x) in row.iter_mut().enumerate() {
            if valid(j) {
                *x = (*x - max).exp();
                total = total + *x;
            } else {
                *x = F::zero();
            }
        }
        row.iter_mut().for_each(|x| *x = *x / total);
    }
    match empty {
        Some(r) => Err(r),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetric_pair() {
        let m = Tensor::<f64>::from_f64(&[1, 2], &[0.0, 0.0]).unwrap();
        let s = softmax_rows(&m, None).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_known_values() {
        // exp-normalize evaluated directly: e^k / (e + e^2 + e^3)
        let z: f64 = [1f64, 2.0, 3.0].iter().map(|x| x.exp()).sum();
        let expected: Vec<f64> = [1f64, 2.0, 3.0].iter().map(|x| x.exp() / z).collect();
        let m = Tensor::<f64>::from_f64(&[1, 3], &[1.0, 2.0, 3.0]).unwrap();
        let s = softmax_rows(&m, None).unwrap();
        for (got, want) in s.data().iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((got - want).abs() < 1e-5);
        }
        for (got, want) in s.data().iter().zip(expected) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_shift_invariant() {
        let a = Tensor::<f64>::from_f64(&[2, 3], &[0.3, -1.2, 2.0, 5.0, 5.0, -7.0]).unwrap();
        let b = Tensor::<f64>::from_f64(&[2, 3], &[100.3, 98.8, 102.0, 5.0 - 40.0, 5.0 - 40.0, -47.0]).unwrap();
        let sa = softmax_rows(&a, None).unwrap();
        let sb = softmax_rows(&b, None).unwrap();
        assert!(sa.max_abs_diff(&sb) < 1e-12);
    }

    #[test]
    fn softmax_mask_zeroes_and_errors() {
        let m = Tensor::<f64>::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 1.0, 1.0, 1.0]).unwrap();
        let mask = [true, false, true, true, true, false];
        let s = softmax_rows(&m, Some(&mask)).unwrap();
        assert_eq!(s.at(0, 1), 0.0);
        assert_eq!(s.at(1, 2), 0.0);
        assert!((s.at(1, 0) - 0.5).abs() < 1e-15);
        let err = softmax_rows(&m, Some(&[false, false, false, true, true, true])).unwrap_err();
        assert_eq!(err.to_string(), "empty softmax support");
    }

    #[test]
    fn gemm_transposes_agree_with_loops() {
        let a = Tensor::<f64>::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::<f64>::from_f64(&[3, 2], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
        // a^T stored as 3x2 then transposed back through strides
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut out = vec![0.0; 4];
        f64::gemm(2, 3, 2, &at, true, &bt, true, 0.0, &mut out);
        assert_eq!(out, vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn shape_mismatch_is_error() {
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
    }
}
