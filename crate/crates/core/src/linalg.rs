//! Small dense helpers on top of nalgebra.

use crate::scalar::Real;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

pub type Chol<T> = Cholesky<T, Dyn>;

pub fn symmetrize<T: Real>(a: &DMatrix<T>) -> DMatrix<T> {
    let half = T::of(0.5);
    (a + a.transpose()) * half
}

pub fn cholesky<T: Real>(a: &DMatrix<T>) -> Option<Chol<T>> {
    Cholesky::new(a.clone())
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues<T: Real>(a: &DMatrix<T>) -> Vec<T> {
    if a.nrows() == 0 {
        return Vec::new();
    }
    let mut ev: Vec<T> = SymmetricEigen::new(a.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(|x, y| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal));
    ev
}

/// Smallest eigenvalue and a unit eigenvector for it.
pub fn min_eigenpair<T: Real>(a: &DMatrix<T>) -> (T, DVector<T>) {
    let eig = SymmetricEigen::new(a.clone());
    let mut best = 0;
    for i in 1..eig.eigenvalues.len() {
        if eig.eigenvalues[i] < eig.eigenvalues[best] {
            best = i;
        }
    }
    (eig.eigenvalues[best], eig.eigenvectors.column(best).into_owned())
}

/// Largest singular value of a symmetric matrix.
pub fn spectral_norm_sym<T: Real>(a: &DMatrix<T>) -> T {
    sym_eigenvalues(a).into_iter().fold(T::zero(), |m, e| m.max(e.abs()))
}

/// Largest singular value of a general square matrix.
pub fn spectral_norm<T: Real>(a: &DMatrix<T>) -> T {
    a.clone().svd(false, false).singular_values.iter().fold(T::zero(), |m, &s| m.max(s))
}

/// Eigenvalue clipping onto the PSD cone.
pub fn psd_project<T: Real>(a: &DMatrix<T>) -> DMatrix<T> {
    let eig = SymmetricEigen::new(symmetrize(a));
    let clipped = eig.eigenvalues.map(|e| e.max(T::zero()));
    let v = &eig.eigenvectors;
    symmetrize(&(v * DMatrix::from_diagonal(&clipped) * v.transpose()))
}

pub fn sub_vector<T: Real>(v: &DVector<T>, idx: &[usize]) -> DVector<T> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

pub fn sub_matrix<T: Real>(m: &DMatrix<T>, idx: &[usize]) -> DMatrix<T> {
    DMatrix::from_fn(idx.len(), idx.len(), |a, b| m[(idx[a], idx[b])])
}

/// `acc[idx, idx] += scale * block`.
pub fn scatter_add<T: Real>(acc: &mut DMatrix<T>, idx: &[usize], block: &DMatrix<T>, scale: T) {
    for (a, &i) in idx.iter().enumerate() {
        for (b, &k) in idx.iter().enumerate() {
            acc[(i, k)] += scale * block[(a, b)];
        }
    }
}

pub fn trace_product<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> T {
    // tr(AB) without forming AB
    let mut s = T::zero();
    for i in 0..a.nrows() {
        for k in 0..a.ncols() {
            s += a[(i, k)] * b[(k, i)];
        }
    }
    s
}

/// Solve `H x = b` for symmetric PSD `H`; falls back to the minimum-norm
/// (pseudo-inverse) solution when `H` is singular. The flag reports the fallback.
pub fn solve_psd<T: Real>(h: &DMatrix<T>, b: &DVector<T>) -> (DVector<T>, bool) {
    if h.nrows() == 0 {
        return (DVector::zeros(0), false);
    }
    let scale = h.diagonal().iter().fold(T::zero(), |m, &d| m.max(d.abs()));
    if scale > T::zero() {
        if let Some(c) = cholesky(h) {
            let min_piv = c.l_dirty().diagonal().iter().fold(T::infinity(), |m, &d| m.min(d));
            if min_piv * min_piv > scale * T::epsilon() * T::of(1e3) {
                return (c.solve(b), false);
            }
        }
    }
    (pinv_solve(h, b), true)
}

pub fn pinv_solve<T: Real>(h: &DMatrix<T>, b: &DVector<T>) -> DVector<T> {
    let eig = SymmetricEigen::new(symmetrize(h));
    let top = eig.eigenvalues.iter().fold(T::zero(), |m, &e| m.max(e.abs()));
    let cut = top * T::epsilon() * T::of_usize(h.nrows().max(1)) * T::of(10.0);
    let v = &eig.eigenvectors;
    let coef = v.transpose() * b;
    let mut x = DVector::zeros(h.nrows());
    for i in 0..h.nrows() {
        let e = eig.eigenvalues[i];
        if e.abs() > cut {
            x += v.column(i) * (coef[i] / e);
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psd_projection_clips_negative_part() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -2.0]);
        let p = psd_project(&a);
        assert!((p[(0, 0)] - 1.0f64).abs() < 1e-14);
        assert!(p[(1, 1)].abs() < 1e-14);
    }

    #[test]
    fn singular_solve_is_min_norm() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![2.0, 2.0]);
        let (x, fallback) = solve_psd(&h, &b);
        assert!(fallback);
        assert!((x[0] - 1.0f64).abs() < 1e-12 && (x[1] - 1.0f64).abs() < 1e-12);
    }

    #[test]
    fn trace_product_matches_dense() {
        let a = DMatrix::<f64>::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = DMatrix::<f64>::from_row_slice(3, 2, &[1.0, 0.5, -1.0, 2.0, 0.0, 1.0]);
        assert!((trace_product(&a, &b) - (&a * &b).trace()).abs() < 1e-12f64);
    }
}
