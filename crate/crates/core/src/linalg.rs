//! Dense linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;
pub type CMat = DMatrix<Complex64>;

/// Solve `a x = b` by partial-pivot LU.
pub fn solve(a: Mat, b: &Vector, what: &str) -> Result<Vector> {
    a.lu()
        .solve(b)
        .ok_or_else(|| Error::Singular(what.to_string()))
}

pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// 1-norm condition number through an explicit inverse. Returns infinity
/// for an exactly singular matrix.
pub fn cond1(a: &Mat) -> f64 {
    let norm1 = |m: &Mat| {
        (0..m.ncols())
            .map(|j| m.column(j).iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    };
    match a.clone().try_inverse() {
        Some(inv) => norm1(a) * norm1(&inv),
        None => f64::INFINITY,
    }
}

/// Eigenvalues of a real square matrix.
pub fn eigenvalues(a: &Mat) -> Vec<Complex64> {
    if a.nrows() == 0 {
        return Vec::new();
    }
    a.complex_eigenvalues().iter().copied().collect()
}

pub fn max_real_eigenvalue(a: &Mat) -> f64 {
    eigenvalues(a)
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Complex Schur factorization `a = q t q^H` with `t` upper triangular.
pub fn complex_schur(a: &CMat) -> (CMat, CMat) {
    let schur = a.clone().schur();
    let (q, mut t) = schur.unpack();
    // The complex Schur form is triangular; clear rounding below the diagonal.
    for j in 0..t.ncols() {
        for i in (j + 1)..t.nrows() {
            t[(i, j)] = Complex64::new(0.0, 0.0);
        }
    }
    (q, t)
}

/// Roots of `c[0] + c[1] z + ... + c[d] z^d` via companion-matrix eigenvalues.
/// Trailing (near-)zero leading coefficients are dropped first.
pub fn poly_roots(coeffs: &[Complex64]) -> Vec<Complex64> {
    let scale = coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max);
    if scale == 0.0 {
        return Vec::new();
    }
    let mut deg = coeffs.len() - 1;
    while deg > 0 && coeffs[deg].norm() <= 1e-14 * scale {
        deg -= 1;
    }
    if deg == 0 {
        return Vec::new();
    }
    let lead = coeffs[deg];
    let mut comp = CMat::zeros(deg, deg);
    for i in 1..deg {
        comp[(i, i - 1)] = Complex64::new(1.0, 0.0);
    }
    for i in 0..deg {
        comp[(i, deg - 1)] = -coeffs[i] / lead;
    }
    let (_, t) = complex_schur(&comp);
    (0..deg).map(|i| t[(i, i)]).collect()
}

pub fn eval_poly(coeffs: &[Complex64], z: Complex64) -> Complex64 {
    coeffs
        .iter()
        .rev()
        .fold(Complex64::new(0.0, 0.0), |acc, c| acc * z + c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    #[test]
    fn quadratic_roots() {
        // (z - 1)(z - 3) = 3 - 4z + z^2
        let mut r: Vec<f64> = poly_roots(&[c(3.0), c(-4.0), c(1.0)])
            .iter()
            .map(|z| z.re)
            .collect();
        r.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((r[0] - 1.0).abs() < 1e-12 && (r[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn complex_roots_and_degree_drop() {
        // z^2 + 1 with a zero padding coefficient
        let roots = poly_roots(&[c(1.0), c(0.0), c(1.0), c(0.0)]);
        assert_eq!(roots.len(), 2);
        for z in roots {
            assert!((z.norm() - 1.0).abs() < 1e-12 && z.re.abs() < 1e-12);
        }
    }

    #[test]
    fn schur_reconstructs() {
        let a = CMat::from_fn(5, 5, |i, j| Complex64::new((i * 3 + j) as f64 % 7.0 - 3.0, (i as f64 - j as f64) * 0.3));
        let (q, t) = complex_schur(&a);
        let back = &q * &t * q.adjoint();
        assert!((back - a).norm() < 1e-10);
    }

    #[test]
    fn cond_of_singular_is_infinite() {
        let a = Mat::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(cond1(&a) > 1e15);
        assert!((cond1(&Mat::identity(3, 3)) - 1.0).abs() < 1e-12);
    }
}
