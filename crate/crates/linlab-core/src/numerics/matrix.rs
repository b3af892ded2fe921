//! Row-major dense matrices and the handful of products the rest of the
//! crate is built on. The multiply kernels are blocked for cache reuse and
//! keep a fixed summation order, so results are reproducible bit-for-bit.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(alloc::format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        Ok(DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(alloc::format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(alloc::format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericFailure(
                "matrix entries must be finite".into(),
            ));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    /// `rows x cols` matrix of i.i.d. standard normals, fully determined by
    /// the generator state.
    pub fn gaussian(rows: usize, cols: usize, rng: &mut Rng) -> Result<Self> {
        let mut m = Self::zeros(rows, cols)?;
        rng.fill_normal(&mut m.data);
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix {
            rows: self.cols,
            cols: self.rows,
            data: vec![0.0; self.data.len()],
        };
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `y = A x`.
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.cols);
        assert_eq!(y.len(), self.rows);
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = dot(self.row(i), x);
        }
    }

    /// `y = A^T x`.
    pub fn matvec_t(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.rows);
        assert_eq!(y.len(), self.cols);
        y.fill(0.0);
        for (i, &xi) in x.iter().enumerate() {
            axpy(xi, self.row(i), y);
        }
    }

    /// `C = A B`.
    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.rows);
        let mut c = DenseMatrix {
            rows: self.rows,
            cols: other.cols,
            data: vec![0.0; self.rows * other.cols],
        };
        gemm(
            self.rows,
            self.cols,
            other.cols,
            &self.data,
            &other.data,
            &mut c.data,
        );
        c
    }

    /// `C = A B^T`.
    pub fn matmul_nt(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.cols);
        let mut c = DenseMatrix {
            rows: self.rows,
            cols: other.rows,
            data: vec![0.0; self.rows * other.rows],
        };
        for i in 0..self.rows {
            let a_row = self.row(i);
            let c_row = &mut c.data[i * other.rows..(i + 1) * other.rows];
            for (j, cj) in c_row.iter_mut().enumerate() {
                *cj = dot(a_row, other.row(j));
            }
        }
        c
    }

    /// Scales column `j` by `s[j]` in place.
    pub fn scale_cols(&mut self, s: &[f64]) {
        assert_eq!(s.len(), self.cols);
        for i in 0..self.rows {
            let cols = self.cols;
            let row = &mut self.data[i * cols..(i + 1) * cols];
            for (v, &sj) in row.iter_mut().zip(s) {
                *v *= sj;
            }
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        crate::fmath::sqrt(self.data.iter().map(|v| v * v).sum())
    }
}

/// Blocked `C += A B` on raw row-major buffers. Panics on length mismatch.
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    const JB: usize = 256;
    const KB: usize = 64;
    for jj in (0..n).step_by(JB) {
        let jw = JB.min(n - jj);
        for kk in (0..k).step_by(KB) {
            let kw = KB.min(k - kk);
            for i in 0..m {
                let a_row = &a[i * k + kk..i * k + kk + kw];
                let c_row = &mut c[i * n + jj..i * n + jj + jw];
                for (k2, &aik) in a_row.iter().enumerate() {
                    let b_row = &b[(kk + k2) * n + jj..(kk + k2) * n + jj + jw];
                    axpy(aik, b_row, c_row);
                }
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let a4 = &a[4 * i..4 * i + 4];
        let b4 = &b[4 * i..4 * i + 4];
        acc[0] += a4[0] * b4[0];
        acc[1] += a4[1] * b4[1];
        acc[2] += a4[2] * b4[2];
        acc[3] += a4[3] * b4[3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm(x: &[f64]) -> f64 {
    crate::fmath::sqrt(dot(x, x))
}

pub fn scale(x: &mut [f64], alpha: f64) {
    for v in x.iter_mut() {
        *v *= alpha;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_dimensions() {
        assert!(matches!(
            DenseMatrix::zeros(0, 3),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            DenseMatrix::gaussian(3, 0, &mut Rng::new(0)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn gaussian_scalar_is_deterministic() {
        let a = DenseMatrix::gaussian(1, 1, &mut Rng::new(5)).unwrap();
        let b = DenseMatrix::gaussian(1, 1, &mut Rng::new(5)).unwrap();
        assert_eq!(a.get(0, 0).to_bits(), b.get(0, 0).to_bits());
    }

    #[test]
    fn gaussian_sample_moments() {
        // Law-of-large-numbers window: 3 sigma of the estimators at n = 1e6.
        let m = DenseMatrix::gaussian(1000, 1000, &mut Rng::new(17)).unwrap();
        let n = m.data().len() as f64;
        let mean = m.data().iter().sum::<f64>() / n;
        let var = m.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!((-0.01..=0.01).contains(&mean), "mean {mean}");
        assert!((0.99..=1.01).contains(&var), "var {var}");
    }

    #[test]
    fn matmul_small_known() {
        let a = DenseMatrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b =
            DenseMatrix::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_nt_matches_matmul() {
        let mut rng = Rng::new(2);
        let a = DenseMatrix::gaussian(7, 13, &mut rng).unwrap();
        let b = DenseMatrix::gaussian(5, 13, &mut rng).unwrap();
        let c1 = a.matmul_nt(&b);
        let c2 = a.matmul(&b.transpose());
        for (x, y) in c1.data().iter().zip(c2.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gemm_blocked_matches_naive() {
        let mut rng = Rng::new(3);
        let (m, k, n) = (65, 130, 300);
        let a = DenseMatrix::gaussian(m, k, &mut rng).unwrap();
        let b = DenseMatrix::gaussian(k, n, &mut rng).unwrap();
        let c = a.matmul(&b);
        for &(i, j) in &[(0, 0), (64, 299), (31, 257), (17, 4)] {
            let mut s = 0.0;
            for t in 0..k {
                s += a.get(i, t) * b.get(t, j);
            }
            assert!((c.get(i, j) - s).abs() < 1e-10 * (1.0 + s.abs()));
        }
    }

    #[test]
    fn matvec_roundtrip_with_transpose() {
        let mut rng = Rng::new(4);
        let a = DenseMatrix::gaussian(6, 9, &mut rng).unwrap();
        let x: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let mut y = vec![0.0; 6];
        a.matvec(&x, &mut y);
        let at = a.transpose();
        let mut y2 = vec![0.0; 6];
        at.matvec_t(&x, &mut y2);
        for (u, v) in y.iter().zip(&y2) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}
