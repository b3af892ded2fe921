//! Deterministic sampling, dense linear algebra, spectral-norm estimation
//! and finite-difference helpers.

pub mod matrix;
pub mod rng;

pub use matrix::{axpy, dot, gemm, norm, scale, DenseMatrix};
pub use rng::Rng;

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;

/// Seed for the power-iteration start vector. Fixed so repeated runs agree.
const POWER_ITERATION_SEED: u64 = 0x5EED_0F_70_7E;

pub const DEFAULT_SPECTRAL_TOL: f64 = 1e-6;
pub const DEFAULT_SPECTRAL_MAX_ITER: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralEstimate {
    pub value: f64,
    pub iterations: usize,
}

/// Largest singular value of a linear operator given only `apply: x -> Ax`
/// and `apply_transpose: y -> A^T y`, by power iteration on the Gram
/// operator `A^T A`. Never materializes the matrix.
///
/// Converges when successive estimates differ by at most `tol` relative;
/// after `max_iter` iterations without that, returns
/// [`Error::ConvergenceFailure`] carrying the last estimate.
pub fn spectral_norm<A, At>(
    mut apply: A,
    mut apply_transpose: At,
    dim_in: usize,
    dim_out: usize,
    tol: f64,
    max_iter: usize,
) -> Result<SpectralEstimate>
where
    A: FnMut(&[f64], &mut [f64]),
    At: FnMut(&[f64], &mut [f64]),
{
    if dim_in == 0 || dim_out == 0 {
        return Err(Error::InvalidArgument("operator dimensions must be positive".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument("tol must be positive".into()));
    }
    let mut rng = Rng::new(POWER_ITERATION_SEED);
    let mut v = vec![0.0; dim_in];
    rng.fill_normal(&mut v);
    let nv = norm(&v);
    scale(&mut v, 1.0 / nv);

    let mut av = vec![0.0; dim_out];
    let mut atav = vec![0.0; dim_in];
    let mut sigma_prev = f64::NAN;
    for it in 1..=max_iter {
        apply(&v, &mut av);
        // With ||v|| = 1 the Rayleigh quotient of A^T A is just ||Av||^2.
        let sigma = norm(&av);
        if sigma == 0.0 {
            return Ok(SpectralEstimate {
                value: 0.0,
                iterations: it,
            });
        }
        if sigma_prev.is_finite() && fmath::abs(sigma - sigma_prev) <= tol * sigma {
            return Ok(SpectralEstimate {
                value: sigma,
                iterations: it,
            });
        }
        sigma_prev = sigma;
        apply_transpose(&av, &mut atav);
        let nz = norm(&atav);
        if nz == 0.0 {
            return Ok(SpectralEstimate {
                value: sigma,
                iterations: it,
            });
        }
        for (vi, zi) in v.iter_mut().zip(&atav) {
            *vi = zi / nz;
        }
    }
    Err(Error::ConvergenceFailure {
        last: sigma_prev,
        iterations: max_iter,
    })
}

/// [`spectral_norm`] for an explicit matrix.
pub fn spectral_norm_matrix(
    a: &DenseMatrix,
    tol: f64,
    max_iter: usize,
) -> Result<SpectralEstimate> {
    spectral_norm(
        |x, y| a.matvec(x, y),
        |x, y| a.matvec_t(x, y),
        a.cols(),
        a.rows(),
        tol,
        max_iter,
    )
}

/// Uniform point on the sphere of the given radius: a normalized Gaussian
/// draw scaled to `radius`. The all-zero draw (probability zero) is
/// resampled. `radius = 0` returns the zero vector.
pub fn sphere_sample(dim: usize, radius: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    if dim == 0 {
        return Err(Error::InvalidArgument("sphere dimension must be >= 1".into()));
    }
    if radius < 0.0 {
        return Err(Error::InvalidArgument("radius must be non-negative".into()));
    }
    let mut v = vec![0.0; dim];
    if radius == 0.0 {
        return Ok(v);
    }
    loop {
        rng.fill_normal(&mut v);
        let n = norm(&v);
        if n > 0.0 {
            scale(&mut v, radius / n);
            return Ok(v);
        }
    }
}

/// Default central-difference step for coordinate value `xi`.
pub fn fd_step(xi: f64) -> f64 {
    1e-5 * (1.0 + fmath::abs(xi))
}

/// Central difference `(f(x + h e_i) - f(x - h e_i)) / (2h)`.
pub fn central_diff<F>(f: F, x: &[f64], i: usize, h: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if i >= x.len() {
        return Err(Error::InvalidArgument(alloc::format!(
            "coordinate {i} out of range for dimension {}",
            x.len()
        )));
    }
    if !(h > 0.0) {
        return Err(Error::InvalidArgument("step must be positive".into()));
    }
    let mut xp = x.to_vec();
    xp[i] = x[i] + h;
    let fp = f(&xp);
    xp[i] = x[i] - h;
    let fm = f(&xp);
    if !fp.is_finite() || !fm.is_finite() {
        return Err(Error::NumericFailure(
            "function not finite at perturbed point".into(),
        ));
    }
    Ok((fp - fm) / (2.0 * h))
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, sorted
/// descending. Used as a small dense oracle and for PSD checks.
pub fn jacobi_eigenvalues(a: &DenseMatrix) -> Result<Vec<f64>> {
    if a.rows() != a.cols() {
        return Err(Error::InvalidArgument("matrix must be square".into()));
    }
    let n = a.rows();
    let mut m = a.clone();
    let off = |m: &DenseMatrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m.get(i, j) * m.get(i, j);
                }
            }
        }
        s
    };
    let scale0 = m.frobenius_norm().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        if fmath::sqrt(off(&m)) <= 1e-14 * scale0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if fmath::abs(apq) <= 1e-300 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + fmath::sqrt(1.0 + tau * tau))
                } else {
                    -1.0 / (-tau + fmath::sqrt(1.0 + tau * tau))
                };
                let c = 1.0 / fmath::sqrt(1.0 + t * t);
                let s = t * c;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m.get(i, i)).collect();
    eig.sort_unstable_by(|x, y| y.total_cmp(x));
    Ok(eig)
}
