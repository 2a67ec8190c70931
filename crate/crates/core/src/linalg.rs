//! Fixed-capacity dense linear algebra for the small systems used by mixtures.
//!
//! Every tangent-space quantity lives in a `MAX_DIM`-sized stack matrix.
//! Unused trailing dimensions of covariances are padded with the identity
//! (and vectors with zeros) so that Cholesky factors, solves and
//! log-determinants over the full storage agree with the active block.

use nalgebra::{Cholesky, DMatrix, Matrix2, SMatrix, SVector, SymmetricEigen};

pub const MAX_DIM: usize = 7;

pub type VecD = SVector<f64, MAX_DIM>;
pub type MatD = SMatrix<f64, MAX_DIM, MAX_DIM>;

/// Copies the leading `dim x dim` block of `m` and pads the rest with identity.
pub fn pad_identity(dim: usize, m: &MatD) -> MatD {
    let mut out = MatD::identity();
    for i in 0..dim {
        for j in 0..dim {
            out[(i, j)] = m[(i, j)];
        }
    }
    out
}

/// Embeds a dynamic square matrix as a padded fixed one.
pub fn from_dmatrix(m: &DMatrix<f64>) -> MatD {
    assert!(m.nrows() == m.ncols() && m.nrows() <= MAX_DIM);
    let mut out = MatD::identity();
    out.view_mut((0, 0), (m.nrows(), m.ncols())).copy_from(m);
    out
}

pub fn to_dmatrix(dim: usize, m: &MatD) -> DMatrix<f64> {
    m.view((0, 0), (dim, dim)).into_owned()
}

/// Lower Cholesky factor of a padded SPD matrix.
pub fn cholesky(m: &MatD) -> Option<MatD> {
    if m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let l = Cholesky::new(*m)?.unpack();
    if l.diagonal().iter().all(|&d| d > 0.0 && d.is_finite()) {
        Some(l)
    } else {
        None
    }
}

/// Sum of `ln L_ii` over the active block, i.e. half the log-determinant.
pub fn half_log_det(dim: usize, l: &MatD) -> f64 {
    (0..dim).map(|i| l[(i, i)].ln()).sum()
}

/// Solves `L y = b` for lower-triangular `L`, touching only the first `dim` rows.
pub fn solve_lower(dim: usize, l: &MatD, b: &VecD) -> VecD {
    let mut y = VecD::zeros();
    for i in 0..dim {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    y
}

/// `L^T x = y` for lower-triangular `L`.
pub fn solve_upper_transposed(dim: usize, l: &MatD, y: &VecD) -> VecD {
    let mut x = VecD::zeros();
    for i in (0..dim).rev() {
        let mut s = y[i];
        for k in i + 1..dim {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// `x^T A^{-1} x` given the Cholesky factor of `A`.
pub fn mahalanobis_sq(dim: usize, l: &MatD, x: &VecD) -> f64 {
    solve_lower(dim, l, x).norm_squared()
}

/// Makes the active block exactly symmetric.
pub fn symmetrize(dim: usize, m: &mut MatD) {
    for i in 0..dim {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Largest absolute asymmetry of the active block relative to its scale.
pub fn asymmetry(dim: usize, m: &MatD) -> f64 {
    let mut scale = 1.0f64;
    let mut worst = 0.0f64;
    for i in 0..dim {
        for j in 0..dim {
            scale = scale.max(m[(i, j)].abs());
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst / scale
}

/// Symmetric 2x2 matrix with eigenvalues clamped from below.
pub fn clamp_eigen2(m: &Matrix2<f64>, floor: f64) -> Matrix2<f64> {
    let sym = 0.5 * (m + m.transpose());
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| if v.is_finite() { v.max(floor) } else { floor });
    let q = eig.eigenvectors;
    q * Matrix2::from_diagonal(&vals) * q.transpose()
}

/// Lower Cholesky factor of an SPD 2x2 matrix.
pub fn cholesky2(m: &Matrix2<f64>) -> Option<Matrix2<f64>> {
    let a = m[(0, 0)];
    if !(a > 0.0) || !a.is_finite() {
        return None;
    }
    let l00 = a.sqrt();
    let l10 = m[(1, 0)] / l00;
    let d = m[(1, 1)] - l10 * l10;
    if !(d > 0.0) || !d.is_finite() {
        return None;
    }
    Some(Matrix2::new(l00, 0.0, l10, d.sqrt()))
}
