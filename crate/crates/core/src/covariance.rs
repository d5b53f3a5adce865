//! Stationary covariance of a stochastically forced equilibrium.
//!
//! The linearized model is augmented with the OU load states,
//! `dz = A z dt + B dW` with `z = [Δx, Δu]`, and the stationary covariance
//! solves `A P + P Aᵀ = −B Bᵀ`. Algebraic covariances follow from the
//! linear map `Δy = K z`.

use num_complex::Complex64;

use crate::dynamics::{DaeSystem, LinearizedSystem};
use crate::error::{Error, Result};
use crate::grid::BusId;
use crate::linalg::{self, CMat, Mat};
use crate::stochastic::OuParams;

/// Eigenvalues with real part above this are treated as not decaying.
pub const HURWITZ_MARGIN: f64 = -1e-8;

#[derive(Debug, Clone)]
pub struct AugmentedSystem {
    pub a: Mat,
    pub b: Mat,
    pub n_x: usize,
    pub n_u: usize,
}

pub fn build_augmented(lin: &LinearizedSystem, ou: &OuParams) -> Result<AugmentedSystem> {
    ou.validate()?;
    let n_x = lin.a_s.nrows();
    let n_u = lin.gu.ncols();
    if ou.buses.len() != n_u {
        return Err(Error::Config(format!(
            "OU parameters cover {} buses, model has {n_u} noise inputs",
            ou.buses.len()
        )));
    }
    let gy_inv_gu = lin.gy.clone().lu().solve(&lin.gu).ok_or(Error::AlgebraicSingularity)?;
    let coupling = -(&lin.fy * gy_inv_gu);
    let n = n_x + n_u;
    let mut a = Mat::zeros(n, n);
    a.view_mut((0, 0), (n_x, n_x)).copy_from(&lin.a_s);
    a.view_mut((0, n_x), (n_x, n_u)).copy_from(&coupling);
    let mut b = Mat::zeros(n, n_u);
    for j in 0..n_u {
        a[(n_x + j, n_x + j)] = -ou.rate[j];
        b[(n_x + j, j)] = ou.sigma[j];
    }
    Ok(AugmentedSystem { a, b, n_x, n_u })
}

/// Solve `A X + X Aᵀ = −B Bᵀ` for Hurwitz `A` (Bartels-Stewart on the
/// complex Schur form).
pub fn solve_lyapunov(a: &Mat, b: &Mat) -> Result<Mat> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n {
        return Err(Error::Config("Lyapunov operands have mismatched shapes".into()));
    }
    let re = linalg::max_real_eigenvalue(a);
    if re > HURWITZ_MARGIN {
        return Err(Error::Unstable(re));
    }
    let c = b * b.transpose();
    let (q, t) = linalg::complex_schur(&a.map(|v| Complex64::new(v, 0.0)));
    let mut x = schur_solve(&q, &t, &c);
    // Two rounds of refinement on the residual recover the digits lost to
    // the Schur basis when A has widely spread time scales.
    for _ in 0..2 {
        let r = a * &x + &x * a.transpose() + &c;
        x += schur_solve(&q, &t, &r);
    }
    Ok((&x + x.transpose()) * 0.5)
}

/// `X` with `A X + X Aᵀ = −C`, given the complex Schur factors `A = Q T Qᴴ`.
fn schur_solve(q: &CMat, t: &CMat, c: &Mat) -> Mat {
    let n = q.nrows();
    let f: CMat = -(q.adjoint() * c.map(|v| Complex64::new(v, 0.0)) * q);
    // T Y + Y Tᴴ = F, columns from the last one down.
    let mut y = CMat::zeros(n, n);
    for j in (0..n).rev() {
        let mut rhs = f.column(j).into_owned();
        for k in (j + 1)..n {
            let w = t[(j, k)].conj();
            if w != Complex64::new(0.0, 0.0) {
                rhs -= y.column(k) * w;
            }
        }
        let shift = t[(j, j)].conj();
        // back substitution with the upper-triangular T + shift·I
        for i in (0..n).rev() {
            let mut acc = rhs[i];
            for k in (i + 1)..n {
                acc -= t[(i, k)] * y[(k, j)];
            }
            y[(i, j)] = acc / (t[(i, i)] + shift);
        }
    }
    (q * y * q.adjoint()).map(|v| v.re)
}

/// `‖A X + X Aᵀ + B Bᵀ‖∞` (max absolute entry).
pub fn lyapunov_residual(a: &Mat, b: &Mat, x: &Mat) -> f64 {
    (a * x + x * a.transpose() + b * b.transpose()).amax()
}

/// `K = [−g_y⁻¹ g_x, −g_y⁻¹ g_u]` mapping `z` to `Δy`.
pub fn algebraic_map(lin: &LinearizedSystem) -> Result<Mat> {
    let lu = lin.gy.clone().lu();
    let kx = lu.solve(&lin.gx).ok_or(Error::AlgebraicSingularity)?;
    let ku = lu.solve(&lin.gu).ok_or(Error::AlgebraicSingularity)?;
    let (ny, nx, nu) = (lin.gy.nrows(), kx.ncols(), ku.ncols());
    let mut k = Mat::zeros(ny, nx + nu);
    k.view_mut((0, 0), (ny, nx)).copy_from(&(-kx));
    k.view_mut((0, nx), (ny, nu)).copy_from(&(-ku));
    Ok(k)
}

#[derive(Debug, Clone)]
pub struct CovarianceResult {
    pub s: f64,
    pub sigma_z: Mat,
    pub sigma_y: Mat,
    /// Voltage-magnitude variance per bus position, p.u.².
    pub voltage_variances: Vec<f64>,
}

/// `σ_y² = K σ_z² Kᵀ` and the `|V|` diagonal, given the bus count.
pub fn algebraic_covariance(sigma_z: &Mat, lin: &LinearizedSystem, n_bus: usize) -> Result<(Mat, Vec<f64>)> {
    let k = algebraic_map(lin)?;
    let sy = &k * sigma_z * k.transpose();
    let sy = (&sy + sy.transpose()) * 0.5;
    let vv = (0..n_bus).map(|i| sy[(n_bus + i, n_bus + i)]).collect();
    Ok((sy, vv))
}

/// Full prediction at loading `s` for a model whose noise inputs are the
/// OU buses. The model's setpoints are reset to the equilibrium at `s`.
pub fn predict(dae: &mut DaeSystem, s: f64, ou: &OuParams) -> Result<CovarianceResult> {
    if ou.buses != dae.noise_buses() {
        return Err(Error::Config("OU buses differ from the model's noise buses".into()));
    }
    let point = dae.find_equilibrium(s)?;
    let lin = dae.linearize(&point)?;
    let aug = build_augmented(&lin, ou)?;
    let sigma_z = solve_lyapunov(&aug.a, &aug.b)?;
    let (sigma_y, voltage_variances) = algebraic_covariance(&sigma_z, &lin, dae.n_bus())?;
    Ok(CovarianceResult {
        s,
        sigma_z,
        sigma_y,
        voltage_variances,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticalVarianceSet {
    pub buses: Vec<BusId>,
    pub variances: Vec<f64>,
    pub s_m: f64,
    /// Simulation time of the state estimate the set was derived from.
    pub timestamp: f64,
}

impl CriticalVarianceSet {
    pub fn get(&self, bus: BusId) -> Option<f64> {
        self.buses.iter().position(|&b| b == bus).map(|i| self.variances[i])
    }
}

/// Predicted variances at the margin loading `s_m` for the monitored buses.
/// Works on a copy of `dae`, so its current SVC setting is respected and its
/// setpoints are left alone.
pub fn critical_variances(
    dae: &DaeSystem,
    s_m: f64,
    ou: &OuParams,
    monitored: &[BusId],
    timestamp: f64,
) -> Result<CriticalVarianceSet> {
    let mut model = dae.clone();
    let res = predict(&mut model, s_m, ou).map_err(|e| match e {
        Error::Equilibrium(msg) => Error::Equilibrium(format!(
            "{msg}; no equilibrium at the margin loading s_m = {s_m}, reduce the margin"
        )),
        other => other,
    })?;
    let net = dae.network();
    let variances = monitored
        .iter()
        .map(|&b| net.index_of(b).map(|i| res.voltage_variances[i].max(0.0)))
        .collect::<Result<Vec<_>>>()?;
    Ok(CriticalVarianceSet {
        buses: monitored.to_vec(),
        variances,
        s_m,
        timestamp,
    })
}

/// First-order voltage variance of a single load bus, `(dV/dP)² σ_P²`.
pub fn delta_method_variance(dv_dp: f64, var_p: f64) -> f64 {
    dv_dp * dv_dp * var_p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_closed_form() {
        let x = solve_lyapunov(&Mat::from_element(1, 1, -1.0), &Mat::from_element(1, 1, 2f64.sqrt())).unwrap();
        assert!((x[(0, 0)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn decoupled_closed_form() {
        let a = Mat::from_diagonal(&crate::linalg::Vector::from_vec(vec![-1.0, -2.5, -0.3]));
        let b = Mat::from_diagonal(&crate::linalg::Vector::from_vec(vec![0.5, 1.0, 2.0]));
        let x = solve_lyapunov(&a, &b).unwrap();
        for i in 0..3 {
            let want = b[(i, i)].powi(2) / (-2.0 * a[(i, i)]);
            assert!((x[(i, i)] - want).abs() < 1e-13);
        }
        assert!(x[(0, 1)].abs() < 1e-14);
    }

    #[test]
    fn unstable_matrix_is_rejected() {
        let a = Mat::from_row_slice(2, 2, &[0.1, 1.0, 0.0, -1.0]);
        let err = solve_lyapunov(&a, &Mat::identity(2, 2)).unwrap_err();
        assert_eq!(err.class(), "unstable");
    }

    #[test]
    fn delta_method_arithmetic() {
        assert_eq!(delta_method_variance(-0.2, 0.0), 0.0);
        assert!((delta_method_variance(-0.2, 1e-4) - 4e-6).abs() < 1e-18);
    }
}
