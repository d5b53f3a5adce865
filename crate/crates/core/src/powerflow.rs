//! Newton-Raphson power flow in polar coordinates, PV-curve tracing and the
//! closed-form two-bus nose curve.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::{BusKind, Network};
use crate::linalg::{self, CMat, Mat, Vector};

/// How generator buses are constrained.
#[derive(Debug, Clone, PartialEq)]
pub enum GeneratorMode {
    /// PV buses hold `P` and `|V|`; the reference bus absorbs the imbalance.
    Dispatch,
    /// Every PV and reference bus is pinned to the given complex voltage
    /// (indexed by bus position). Matches the fixed-generator continuation
    /// model where only PQ buses move.
    FixedPhasor(Vec<Complex64>),
}

#[derive(Debug, Clone)]
pub struct PowerFlowOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for PowerFlowOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowSolution {
    /// Complex bus voltages, by bus position.
    pub voltages: Vec<Complex64>,
    /// Net complex injection `S_i = V_i conj(I_i)` at every bus.
    pub injections: Vec<Complex64>,
    pub iterations: usize,
    pub max_mismatch: f64,
}

impl PowerFlowSolution {
    pub fn magnitudes(&self) -> Vec<f64> {
        self.voltages.iter().map(|v| v.norm()).collect()
    }

    pub fn angles(&self) -> Vec<f64> {
        self.voltages.iter().map(|v| v.arg()).collect()
    }
}

/// `S = diag(V) conj(Y V)`.
pub fn injections(y: &CMat, v: &[Complex64]) -> Vec<Complex64> {
    let n = v.len();
    (0..n)
        .map(|i| {
            let current: Complex64 = (0..n).map(|k| y[(i, k)] * v[k]).sum();
            v[i] * current.conj()
        })
        .collect()
}

/// Partial derivatives of the injections with respect to voltage angles and
/// magnitudes, `(dS/dθ, dS/d|V|)`.
pub fn injection_sensitivities(y: &CMat, v: &[Complex64]) -> (CMat, CMat) {
    let n = v.len();
    let current: Vec<Complex64> = (0..n)
        .map(|i| (0..n).map(|k| y[(i, k)] * v[k]).sum())
        .collect();
    let unit: Vec<Complex64> = v.iter().map(|z| z / z.norm()).collect();
    let j = Complex64::new(0.0, 1.0);
    let mut d_ang = CMat::zeros(n, n);
    let mut d_mag = CMat::zeros(n, n);
    for i in 0..n {
        for k in 0..n {
            // dS_i/dθ_k = j V_i conj(δ_ik I_i − Y_ik V_k)
            let mut a = -(y[(i, k)] * v[k]).conj();
            let mut m = (y[(i, k)] * unit[k]).conj() * v[i];
            if i == k {
                a += current[i].conj();
                m += current[i].conj() * unit[i];
            }
            d_ang[(i, k)] = j * v[i] * a;
            d_mag[(i, k)] = m;
        }
    }
    (d_ang, d_mag)
}

/// Solve the power flow for the given per-bus loads (p.u.).
///
/// `guess` supplies the starting complex voltages; the magnitudes of PV and
/// reference buses are replaced by their setpoints in dispatch mode.
pub fn solve_newton(
    net: &Network,
    loads: &[Complex64],
    guess: &[Complex64],
    mode: &GeneratorMode,
    opts: &PowerFlowOptions,
) -> Result<PowerFlowSolution> {
    let n = net.n_bus();
    if loads.len() != n || guess.len() != n {
        return Err(Error::Config("load and guess vectors must match the bus count".into()));
    }
    if guess.iter().any(|v| v.norm() == 0.0) {
        return Err(Error::Config("initial guess has a zero voltage magnitude".into()));
    }
    let y = net.admittance();
    let p_gen = net.scheduled_generation();

    let mut v: Vec<Complex64> = guess.to_vec();
    let (ang_idx, mag_idx): (Vec<usize>, Vec<usize>) = match mode {
        GeneratorMode::Dispatch => {
            for (i, b) in net.buses.iter().enumerate() {
                if let Some(vs) = b.voltage_setpoint {
                    let theta = if b.kind == BusKind::Reference { 0.0 } else { v[i].arg() };
                    v[i] = Complex64::from_polar(vs, theta);
                }
            }
            let ang = net
                .buses
                .iter()
                .enumerate()
                .filter(|(_, b)| b.kind != BusKind::Reference)
                .map(|(i, _)| i)
                .collect();
            (ang, net.pq_indices())
        }
        GeneratorMode::FixedPhasor(fixed) => {
            if fixed.len() != n {
                return Err(Error::Config("fixed phasor vector must match the bus count".into()));
            }
            for i in net.generator_indices() {
                v[i] = fixed[i];
            }
            (net.pq_indices(), net.pq_indices())
        }
    };

    // Scheduled injection; only the rows of unknowns are ever compared.
    let spec: Vec<Complex64> = (0..n)
        .map(|i| Complex64::new(p_gen[i], 0.0) - loads[i])
        .collect();
    let mismatch = |v: &[Complex64]| -> (Vector, f64) {
        let s = injections(&y, v);
        let mut f = Vector::zeros(ang_idx.len() + mag_idx.len());
        for (r, &i) in ang_idx.iter().enumerate() {
            f[r] = spec[i].re - s[i].re;
        }
        for (r, &i) in mag_idx.iter().enumerate() {
            f[ang_idx.len() + r] = spec[i].im - s[i].im;
        }
        let worst = linalg::inf_norm(f.as_slice());
        (f, worst)
    };

    let (mut f, mut worst) = mismatch(&v);
    let mut iterations = 0;
    while worst > opts.tolerance {
        if iterations == opts.max_iterations || !worst.is_finite() {
            return Err(Error::NonConvergence {
                iterations,
                mismatch: worst,
            });
        }
        let (d_ang, d_mag) = injection_sensitivities(&y, &v);
        let na = ang_idx.len();
        let dim = na + mag_idx.len();
        let mut jac = Mat::zeros(dim, dim);
        for (r, &i) in ang_idx.iter().enumerate() {
            for (c, &k) in ang_idx.iter().enumerate() {
                jac[(r, c)] = d_ang[(i, k)].re;
            }
            for (c, &k) in mag_idx.iter().enumerate() {
                jac[(r, na + c)] = d_mag[(i, k)].re;
            }
        }
        for (r, &i) in mag_idx.iter().enumerate() {
            for (c, &k) in ang_idx.iter().enumerate() {
                jac[(na + r, c)] = d_ang[(i, k)].im;
            }
            for (c, &k) in mag_idx.iter().enumerate() {
                jac[(na + r, na + c)] = d_mag[(i, k)].im;
            }
        }
        let dx = match jac.lu().solve(&f) {
            Some(dx) => dx,
            None => {
                return Err(Error::NonConvergence {
                    iterations,
                    mismatch: worst,
                })
            }
        };
        let mut theta: Vec<f64> = v.iter().map(|z| z.arg()).collect();
        let mut mag: Vec<f64> = v.iter().map(|z| z.norm()).collect();
        for (r, &i) in ang_idx.iter().enumerate() {
            theta[i] += dx[r];
        }
        for (r, &i) in mag_idx.iter().enumerate() {
            mag[i] += dx[na + r];
        }
        for &i in ang_idx.iter().chain(mag_idx.iter()) {
            v[i] = Complex64::from_polar(mag[i], theta[i]);
        }
        iterations += 1;
        (f, worst) = mismatch(&v);
    }
    let _ = f;
    Ok(PowerFlowSolution {
        injections: injections(&y, &v),
        voltages: v,
        iterations,
        max_mismatch: worst,
    })
}

/// Flat start: PQ buses at 1∠0, generator buses at their setpoints.
pub fn flat_start(net: &Network) -> Vec<Complex64> {
    net.buses
        .iter()
        .map(|b| Complex64::new(b.voltage_setpoint.unwrap_or(1.0), 0.0))
        .collect()
}

/// Base-case power flow from a flat start with the case's own loads.
pub fn solve_base(net: &Network) -> Result<PowerFlowSolution> {
    solve_newton(
        net,
        &net.base_loads(),
        &flat_start(net),
        &GeneratorMode::Dispatch,
        &PowerFlowOptions::default(),
    )
}

/// One point of a PV curve: the loading factor and either the converged
/// solution or the failure.
#[derive(Debug, Clone)]
pub struct PvPoint {
    pub s: f64,
    pub solution: std::result::Result<PowerFlowSolution, f64>,
}

#[derive(Debug, Clone)]
pub struct PvCurve {
    pub points: Vec<PvPoint>,
    pub first_failure: Option<usize>,
}

impl PvCurve {
    /// Largest loading factor that converged before the first failure.
    pub fn last_converged(&self) -> Option<f64> {
        let end = self.first_failure.unwrap_or(self.points.len());
        end.checked_sub(1).map(|i| self.points[i].s)
    }
}

/// Trace voltages along `S_i = S_0i (1 + s k_i)` over a monotone grid,
/// warm-starting each point from the previous converged solution so the
/// high-voltage branch is followed.
pub fn pv_curve_newton(
    net: &Network,
    k: &[f64],
    grid: &[f64],
    start: &[Complex64],
    mode: &GeneratorMode,
    opts: &PowerFlowOptions,
) -> Result<PvCurve> {
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Config("s grid must be monotone increasing".into()));
    }
    if k.len() != net.n_bus() {
        return Err(Error::Config("loading direction must match the bus count".into()));
    }
    let mut guess = start.to_vec();
    let mut points = Vec::with_capacity(grid.len());
    let mut first_failure = None;
    for (idx, &s) in grid.iter().enumerate() {
        let loads = net.scaled_loads(s, k);
        match solve_newton(net, &loads, &guess, mode, opts) {
            Ok(sol) => {
                guess.clone_from(&sol.voltages);
                points.push(PvPoint { s, solution: Ok(sol) });
            }
            Err(Error::NonConvergence { mismatch, .. }) => {
                first_failure.get_or_insert(idx);
                points.push(PvPoint {
                    s,
                    solution: Err(mismatch),
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(PvCurve {
        points,
        first_failure,
    })
}

/// Source behind a series admittance feeding one constant-power load, with
/// an optional shunt capacitor at the load bus.
#[derive(Debug, Clone, Copy)]
pub struct TwoBusSystem {
    pub source_voltage: f64,
    pub series_admittance: Complex64,
    pub shunt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoBusPoint {
    pub p: f64,
    pub v_high: f64,
    pub v_low: f64,
}

#[derive(Debug, Clone)]
pub struct TwoBusCurve {
    pub points: Vec<TwoBusPoint>,
    /// Maximum-power point `(P_D, V_t)`.
    pub nose: (f64, f64),
}

impl TwoBusSystem {
    pub fn new(source_voltage: f64, series_admittance: Complex64, shunt: f64) -> Result<Self> {
        if series_admittance.norm() == 0.0 {
            return Err(Error::Config("line admittance must be nonzero".into()));
        }
        Ok(Self {
            source_voltage,
            series_admittance,
            shunt,
        })
    }

    /// Thevenin source magnitude and impedance seen from the load bus.
    pub fn thevenin(&self) -> (f64, Complex64) {
        let z = self.series_admittance.inv();
        let factor = Complex64::new(1.0, 0.0) + Complex64::new(0.0, self.shunt) * z;
        (self.source_voltage / factor.norm(), z / factor)
    }

    fn check_pf(pf: f64) -> Result<f64> {
        if !(pf > 0.0 && pf <= 1.0) {
            return Err(Error::Config(format!("power factor {pf} outside (0, 1]")));
        }
        Ok((1.0 / (pf * pf) - 1.0).sqrt())
    }

    /// Nose point `(P_max, V_nose)` at lagging power factor `pf`.
    pub fn nose(&self, pf: f64) -> Result<(f64, f64)> {
        let tan_phi = Self::check_pf(pf)?;
        let (e, z) = self.thevenin();
        let a = z.re + z.im * tan_phi;
        let sec = (1.0 + tan_phi * tan_phi).sqrt();
        let p = e * e / (2.0 * (a + z.norm() * sec));
        Ok((p, (z.norm() * p * sec).sqrt()))
    }

    /// Both solutions `(V_high, V_low)` at load `p`; `None` beyond the nose.
    pub fn voltages(&self, p: f64, pf: f64) -> Result<Option<(f64, f64)>> {
        let tan_phi = Self::check_pf(pf)?;
        let (e, z) = self.thevenin();
        let q = p * tan_phi;
        let b = e * e - 2.0 * (z.re * p + z.im * q);
        let c = z.norm_sqr() * (p * p + q * q);
        let disc = b * b - 4.0 * c;
        if disc < 0.0 || b < 0.0 {
            return Ok(None);
        }
        let hi = ((b + disc.sqrt()) / 2.0).sqrt();
        let lo = ((b - disc.sqrt()).max(0.0) / 2.0).sqrt();
        Ok(Some((hi, lo)))
    }

    /// `dV/dP` along the high-voltage branch.
    pub fn dv_dp(&self, p: f64, pf: f64) -> Result<Option<f64>> {
        let tan_phi = Self::check_pf(pf)?;
        let (e, z) = self.thevenin();
        let Some((v, _)) = self.voltages(p, pf)? else {
            return Ok(None);
        };
        // Implicit differentiation of V^4 + (2(Rp + Xq) - E^2) V^2 + |Z|^2 (p^2 + q^2) = 0.
        let a = z.re + z.im * tan_phi;
        let w = v * v;
        let df_dw = 2.0 * w + 2.0 * a * p - e * e;
        let df_dp = 2.0 * a * w + 2.0 * z.norm_sqr() * p * (1.0 + tan_phi * tan_phi);
        if df_dw == 0.0 {
            return Ok(None);
        }
        Ok(Some(-df_dp / df_dw / (2.0 * v)))
    }

    /// Full PV curve on `n` load levels from zero to the nose.
    pub fn curve(&self, pf: f64, n: usize) -> Result<TwoBusCurve> {
        let nose = self.nose(pf)?;
        let n = n.max(2);
        let points = (0..n)
            .filter_map(|i| {
                let p = nose.0 * i as f64 / (n - 1) as f64;
                let (v_high, v_low) = match self.voltages(p, pf) {
                    Ok(Some(v)) => v,
                    // rounding at the nose itself
                    _ => (nose.1, nose.1),
                };
                Some(TwoBusPoint { p, v_high, v_low })
            })
            .collect();
        Ok(TwoBusCurve { points, nose })
    }
}

/// Closed-form PV curve of the two-bus system: unit source,
/// series line admittance, shunt `b_s` at the load bus.
pub fn two_bus_pv_curve(line_admittance: Complex64, power_factor: f64, b_s: f64) -> Result<TwoBusCurve> {
    TwoBusSystem::new(1.0, line_admittance, b_s)?.curve(power_factor, 201)
}
