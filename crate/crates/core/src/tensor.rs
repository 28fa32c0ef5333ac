//! Dense row-major matrices of `f64`.
//!
//! Every tensor in this crate is two-dimensional; a scalar is a `1×1`
//! tensor and a vector is an `n×1` column. Shape mismatches inside the
//! arithmetic helpers are programming errors and panic, the same way
//! indexing out of bounds does. Shape problems in user-supplied data are
//! caught earlier and reported as [`Error::Dimension`].

use crate::error::{Error, Result};

/// Reduction direction for sums, means and log-sum-exp.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Reduce every element to a `1×1` result.
    All,
    /// Collapse the row index: one value per column, shape `1×cols`.
    Rows,
    /// Collapse the column index: one value per row, shape `rows×1`.
    Cols,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.len() != 2 {
            return Err(Error::dim(format!(
                "tensors are two-dimensional, got shape {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Builds a `rows×cols` matrix; panics if `data` has the wrong length.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::dim("ragged rows"));
        }
        Ok(Self::matrix(n, m, rows.concat()))
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::full(rows, cols, 0.0)
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::full(rows, cols, 1.0)
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Self::matrix(rows, cols, vec![value; rows * cols])
    }

    pub fn scalar(value: f64) -> Self {
        Self::matrix(1, 1, vec![value])
    }

    pub fn column(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::matrix(n, 1, values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    /// The single value of a `1×1` tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        let cols = self.shape[1];
        self.data[r * cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows()).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        // Branch-free within a chunk so the check vectorizes.
        self.data
            .chunks(16)
            .all(|c| c.iter().fold(true, |ok, v| ok & v.is_finite()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "accumulate shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn transpose(&self) -> Tensor {
        let (n, m) = (self.rows(), self.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = self.data[i * m + j];
            }
        }
        Tensor::matrix(m, n, out)
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        self.matmul_t(false, other, false)
    }

    /// `op(self) · op(other)`, where `op` transposes its operand when the
    /// matching flag is set. Transposes are read in place, not copied. Every
    /// output entry is summed over the inner index in ascending order.
    pub fn matmul_t(&self, ta: bool, other: &Tensor, tb: bool) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let (n, k) = if ta { (c, r) } else { (r, c) };
        let (r2, c2) = (other.rows(), other.cols());
        let (k2, m) = if tb { (c2, r2) } else { (r2, c2) };
        assert_eq!(k, k2, "matmul inner dimensions");
        let a = |i: usize, p: usize| {
            if ta {
                self.data[p * c + i]
            } else {
                self.data[i * c + p]
            }
        };
        let mut out = vec![0.0; n * m];
        if tb {
            for i in 0..n {
                for j in 0..m {
                    let b = &other.data[j * c2..(j + 1) * c2];
                    out[i * m + j] = (0..k).fold(0.0, |acc, p| acc + a(i, p) * b[p]);
                }
            }
        } else {
            for i in 0..n {
                let dst = &mut out[i * m..(i + 1) * m];
                for p in 0..k {
                    let ap = a(i, p);
                    let src = &other.data[p * m..(p + 1) * m];
                    for (d, &b) in dst.iter_mut().zip(src) {
                        *d += ap * b;
                    }
                }
            }
        }
        Tensor::matrix(n, m, out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_axis(&self, axis: Axis) -> Tensor {
        let (n, m) = (self.rows(), self.cols());
        match axis {
            Axis::All => Tensor::scalar(self.sum()),
            Axis::Rows => {
                let mut out = vec![0.0; m];
                for i in 0..n {
                    for (o, v) in out.iter_mut().zip(self.row(i)) {
                        *o += v;
                    }
                }
                Tensor::matrix(1, m, out)
            }
            Axis::Cols => Tensor::column((0..n).map(|i| self.row(i).iter().sum()).collect()),
        }
    }

    /// Numerically stable `log Σ exp` along `axis`.
    ///
    /// Each reduction is shifted by its own maximum, so
    /// `logsumexp([c; n]) == c + ln n` holds exactly in exact arithmetic
    /// and without overflow for large `c`.
    pub fn logsumexp(&self, axis: Axis) -> Result<Tensor> {
        self.masked_logsumexp(axis, false)
    }

    /// Log-sum-exp that optionally treats the main diagonal as `-inf`.
    pub(crate) fn masked_logsumexp(&self, axis: Axis, skip_diagonal: bool) -> Result<Tensor> {
        let (n, m) = (self.rows(), self.cols());
        let reduced_len = match axis {
            Axis::All => n * m - if skip_diagonal { n.min(m) } else { 0 },
            Axis::Rows => n - usize::from(skip_diagonal && n > 0),
            Axis::Cols => m - usize::from(skip_diagonal && m > 0),
        };
        if reduced_len == 0 || n == 0 || m == 0 {
            return Err(Error::contract("log-sum-exp over an empty axis"));
        }
        if skip_diagonal && axis != Axis::All && n != m {
            return Err(Error::dim("diagonal mask needs a square matrix"));
        }
        let lse = |it: &mut dyn Iterator<Item = f64>| -> f64 {
            let vals: Vec<f64> = it.collect();
            let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return max;
            }
            max + vals.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
        };
        let keep = |i: usize, j: usize| !(skip_diagonal && i == j);
        Ok(match axis {
            Axis::All => {
                let mut it = (0..n)
                    .flat_map(|i| (0..m).map(move |j| (i, j)))
                    .filter(|&(i, j)| keep(i, j))
                    .map(|(i, j)| self.get(i, j));
                Tensor::scalar(lse(&mut it))
            }
            Axis::Rows => Tensor::matrix(
                1,
                m,
                (0..m)
                    .map(|j| {
                        let mut it = (0..n).filter(|&i| keep(i, j)).map(|i| self.get(i, j));
                        lse(&mut it)
                    })
                    .collect(),
            ),
            Axis::Cols => Tensor::column(
                (0..n)
                    .map(|i| {
                        let mut it = (0..m).filter(|&j| keep(i, j)).map(|j| self.get(i, j));
                        lse(&mut it)
                    })
                    .collect(),
            ),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![6], vec![0.0; 6]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn logsumexp_of_two_zeros_is_ln2() {
        let t = Tensor::matrix(1, 2, vec![0.0, 0.0]);
        assert_relative_eq!(t.logsumexp(Axis::All).unwrap().item(), 2f64.ln());
    }

    #[test]
    fn logsumexp_large_values_do_not_overflow() {
        let t = Tensor::matrix(1, 2, vec![1000.0, 1000.0]);
        let v = t.logsumexp(Axis::Cols).unwrap().item();
        assert!(v.is_finite());
        assert_relative_eq!(v, 1000.0 + 2f64.ln(), max_relative = 1e-15);
    }

    #[test]
    fn logsumexp_constant_row_is_c_plus_ln_n() {
        let t = Tensor::full(3, 7, -2.5);
        let out = t.logsumexp(Axis::Cols).unwrap();
        for v in out.data() {
            assert_relative_eq!(*v, -2.5 + 7f64.ln(), max_relative = 1e-14);
        }
    }

    #[test]
    fn logsumexp_empty_axis_is_an_error() {
        let t = Tensor::zeros(0, 3);
        assert!(matches!(t.logsumexp(Axis::All), Err(Error::Contract(_))));
        let one = Tensor::zeros(1, 1);
        assert!(one.masked_logsumexp(Axis::Rows, true).is_err());
    }

    #[test]
    fn logsumexp_matches_naive_at_small_magnitude() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let v: Vec<f64> = (0..9).map(|_| rng.random_range(-3.0..3.0)).collect();
            let naive = v.iter().map(|x| x.exp()).sum::<f64>().ln();
            let t = Tensor::matrix(1, 9, v);
            assert_relative_eq!(
                t.logsumexp(Axis::Cols).unwrap().item(),
                naive,
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn masked_logsumexp_skips_diagonal() {
        let t = Tensor::matrix(2, 2, vec![100.0, 1.0, 2.0, 100.0]);
        let cols = t.masked_logsumexp(Axis::Rows, true).unwrap();
        assert_relative_eq!(cols.data()[0], 2.0, max_relative = 1e-15);
        assert_relative_eq!(cols.data()[1], 1.0, max_relative = 1e-15);
    }

    #[test]
    fn matmul_and_transpose() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = a.transpose();
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[14.0, 32.0, 32.0, 77.0]);
    }

    #[test]
    fn strided_matmul_matches_loops() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut rand = |r: usize, c: usize| {
            Tensor::matrix(
                r,
                c,
                (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
        };
        let (n, k, m) = (7, 5, 3);
        let a = rand(n, k);
        let b = rand(k, m);
        let mut want = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                for p in 0..k {
                    want[i * m + j] += a.data()[i * k + p] * b.data()[p * m + j];
                }
            }
        }
        let (at, bt) = (a.transpose(), b.transpose());
        for got in [
            a.matmul(&b),
            at.matmul_t(true, &b, false),
            a.matmul_t(false, &bt, true),
            at.matmul_t(true, &bt, true),
        ] {
            assert_eq!(got.shape(), &[n, m]);
            for (g, w) in got.data().iter().zip(&want) {
                assert_relative_eq!(*g, *w, max_relative = 1e-12);
            }
        }
        assert_eq!(rand(4, 0).matmul(&rand(0, 2)).data(), &[0.0; 8]);
    }

    proptest! {
        #[test]
        fn logsumexp_shift_identity(v in prop::collection::vec(-300.0f64..300.0, 1..20)) {
            let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let n = v.len();
            let t = Tensor::matrix(1, n, v.clone());
            let shifted = Tensor::matrix(1, n, v.iter().map(|x| x - max).collect());
            let a = t.logsumexp(Axis::All).unwrap().item();
            let b = shifted.logsumexp(Axis::All).unwrap().item() + max;
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}
