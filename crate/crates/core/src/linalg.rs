//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, Schur, SymmetricEigen};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

const EIG_EPS: f64 = 1e-14;
const EIG_MAX_ITER: usize = 10_000;

pub fn kron(a: &Mat, b: &Mat) -> Mat {
    a.kronecker(b)
}

pub fn mat_pow(a: &Mat, k: u32) -> Mat {
    let mut out = Mat::identity(a.nrows(), a.ncols());
    for _ in 0..k {
        out = &out * a;
    }
    out
}

pub fn block_diag(blocks: &[Mat]) -> Mat {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Column-stacking of a matrix.
pub fn vec_of(m: &Mat) -> Vector {
    Vector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec_of`] for a square `d×d` matrix.
pub fn unvec(v: &Vector, d: usize) -> Mat {
    Mat::from_column_slice(d, d, v.as_slice())
}

pub fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn all_finite(m: &Mat) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub fn is_symmetric(m: &Mat, tol: f64) -> bool {
    m.is_square() && max_abs(&(m - m.transpose())) <= tol * (1.0 + max_abs(m))
}

/// Largest eigenvalue modulus of a general real square matrix.
pub fn spectral_radius(m: &Mat) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::Argument(format!(
            "spectral radius of non-square {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    if !all_finite(m) {
        return Err(Error::Numerical("matrix has non-finite entries".into()));
    }
    // The QR sweeps test deflation relative to neighbouring diagonal entries
    // and can stall on eigenvalues near zero; a shift moves them away.
    let scale = m.amax().max(f64::MIN_POSITIVE);
    for (shift, eps) in [(0.0, EIG_EPS), (0.3719 * scale, EIG_EPS), (-0.6131 * scale, 1e-12), (0.3719 * scale, 1e-10)] {
        let shifted = m + Mat::identity(m.nrows(), m.ncols()) * shift;
        if let Some(schur) = Schur::try_new(shifted, eps, EIG_MAX_ITER) {
            return Ok(schur
                .complex_eigenvalues()
                .iter()
                .fold(0.0_f64, |acc, z| acc.max((z - shift).norm())));
        }
    }
    Err(Error::Numerical(format!(
        "Schur decomposition of {}x{} matrix did not converge in {EIG_MAX_ITER} sweeps",
        m.nrows(),
        m.ncols()
    )))
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(m: &Mat) -> Result<Vec<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(sym, EIG_EPS, EIG_MAX_ITER)
        .ok_or_else(|| Error::Numerical("symmetric eigendecomposition did not converge".into()))?;
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| a.total_cmp(b));
    Ok(vals)
}

/// Square-root factor `L` with `L Lᵀ = sigma` for a PSD matrix.
///
/// Diagonal inputs skip the eigendecomposition so the factor is exact.
pub fn psd_factor(sigma: &Mat) -> Result<Mat> {
    let n = sigma.nrows();
    let diagonal = (0..n).all(|i| (0..n).all(|j| i == j || sigma[(i, j)] == 0.0));
    if diagonal {
        let mut l = Mat::zeros(n, n);
        for i in 0..n {
            if sigma[(i, i)] < -1e-12 {
                return Err(Error::Config(format!(
                    "covariance diagonal entry {i} is negative ({})",
                    sigma[(i, i)]
                )));
            }
            l[(i, i)] = sigma[(i, i)].max(0.0).sqrt();
        }
        return Ok(l);
    }
    let sym = (sigma + sigma.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(sym, EIG_EPS, EIG_MAX_ITER)
        .ok_or_else(|| Error::Numerical("covariance eigendecomposition did not converge".into()))?;
    let mut l = eig.eigenvectors.clone();
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda < -1e-12 {
            return Err(Error::Config(format!(
                "covariance is not positive semidefinite (eigenvalue {lambda})"
            )));
        }
        let s = lambda.max(0.0).sqrt();
        for i in 0..n {
            l[(i, j)] *= s;
        }
    }
    Ok(l)
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<Mat> {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::Config("ragged matrix rows".into()));
    }
    Ok(Mat::from_fn(r, c, |i, j| rows[i][j]))
}

pub fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn diag(values: &[f64]) -> Mat {
    Mat::from_diagonal(&Vector::from_column_slice(values))
}
