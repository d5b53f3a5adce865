//! Holomorphic-embedding continuation power flow.
//!
//! Load buses follow `S_i(s) = S_0i (1 + s k_i)`. Starting from a solved base
//! case, generator voltages are frozen (magnitude and angle) and every PQ-bus
//! voltage becomes a power series in `s`. The reciprocal `W_i(s) = 1 / V_i*(s*)`
//! is carried as a second series so that each order reduces to one real linear
//! solve against a matrix that never changes.
//!
//! Padé approximants of the voltage series extend the evaluation right up to
//! the nose. The collapse point is located from quadratic approximants of the
//! same series, with Padé numerator roots kept alongside.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::grid::{BusId, Network};
use crate::linalg::{self, Mat, Vector};
use crate::powerflow::{pv_curve_newton, GeneratorMode, PowerFlowOptions, PowerFlowSolution};

pub const DEFAULT_TERMS: usize = 41;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Voltage and reciprocal series for every PQ bus.
#[derive(Debug, Clone)]
pub struct PowerSeriesSet {
    /// PQ bus ids, in network order.
    pub buses: Vec<BusId>,
    /// Bus positions matching `buses`.
    pub positions: Vec<usize>,
    /// `v[b][n]`: order-`n` coefficient of bus `b`'s voltage.
    pub v: Vec<Vec<Complex64>>,
    /// `w[b][n]`: coefficients of `1 / V*(s*)`.
    pub w: Vec<Vec<Complex64>>,
    pub terms: usize,
    pub direction: Vec<f64>,
    /// Base-case voltages at every bus; generator entries stay fixed.
    pub base: Vec<Complex64>,
}

impl PowerSeriesSet {
    /// Raw partial sums at `s`, returned for every bus.
    pub fn evaluate(&self, s: f64) -> Vec<Complex64> {
        let mut out = self.base.clone();
        for (b, &pos) in self.positions.iter().enumerate() {
            out[pos] = self.v[b]
                .iter()
                .rev()
                .fold(ZERO, |acc, c| acc * s + c);
        }
        out
    }

    /// Largest violation of `Σ_m V[m] W*[n-m] = δ_n0` over buses and orders.
    pub fn convolution_residual(&self) -> f64 {
        let mut worst = 0.0_f64;
        for (v, w) in self.v.iter().zip(&self.w) {
            for n in 0..self.terms {
                let sum: Complex64 = (0..=n).map(|m| v[m] * w[n - m].conj()).sum();
                let target = if n == 0 { 1.0 } else { 0.0 };
                worst = worst.max((sum - target).norm());
            }
        }
        worst
    }
}

/// Build the voltage series to `terms` coefficients.
pub fn embed_and_recurse(
    net: &Network,
    base: &PowerFlowSolution,
    k: &[f64],
    terms: usize,
) -> Result<PowerSeriesSet> {
    let n_bus = net.n_bus();
    if k.len() != n_bus {
        return Err(Error::Config("loading direction must match the bus count".into()));
    }
    if terms < 3 || terms % 2 == 0 {
        return Err(Error::Config(format!("term count must be odd and at least 3, got {terms}")));
    }
    let pq = net.pq_indices();
    let np = pq.len();
    let y = net.admittance();
    // Injections at PQ buses are the negated loads.
    let a: Vec<Complex64> = pq.iter().map(|&i| -net.buses[i].base_load).collect();
    let b: Vec<Complex64> = pq.iter().zip(&a).map(|(&i, ai)| ai * k[i]).collect();

    let v0: Vec<Complex64> = pq.iter().map(|&i| base.voltages[i]).collect();
    // Recursion is carried out on U = 1/V and conjugated at the end.
    let u0: Vec<Complex64> = v0.iter().map(|v| v.inv()).collect();

    // Real form of  Σ_k Y_ik x_k + c_i conj(x_i),  c_i = conj(a_i U_i[0]^2).
    let mut m = Mat::zeros(2 * np, 2 * np);
    for (r, &i) in pq.iter().enumerate() {
        for (c, &j) in pq.iter().enumerate() {
            let yij = y[(i, j)];
            m[(r, c)] = yij.re;
            m[(r, np + c)] = -yij.im;
            m[(np + r, c)] = yij.im;
            m[(np + r, np + c)] = yij.re;
        }
        let ci = (a[r] * u0[r] * u0[r]).conj();
        m[(r, r)] += ci.re;
        m[(r, np + r)] += ci.im;
        m[(np + r, r)] += ci.im;
        m[(np + r, np + r)] -= ci.re;
    }
    let lu = m.lu();
    if !lu.is_invertible() {
        return Err(Error::Singular("HELM recursion matrix; base case sits at the bifurcation".into()));
    }

    let mut v: Vec<Vec<Complex64>> = v0.iter().map(|&x| vec![x]).collect();
    let mut u: Vec<Vec<Complex64>> = u0.iter().map(|&x| vec![x]).collect();
    for order in 1..terms {
        let mut rhs = Vector::zeros(2 * np);
        let mut rem = vec![ZERO; np];
        for r in 0..np {
            let conv: Complex64 = (1..order).map(|q| v[r][q] * u[r][order - q]).sum();
            rem[r] = -u0[r] * conv;
            let val = b[r].conj() * u[r][order - 1].conj() + a[r].conj() * rem[r].conj();
            rhs[r] = val.re;
            rhs[np + r] = val.im;
        }
        let x = lu
            .solve(&rhs)
            .ok_or_else(|| Error::Singular("HELM recursion matrix".into()))?;
        for r in 0..np {
            let vn = Complex64::new(x[r], x[np + r]);
            v[r].push(vn);
            u[r].push(rem[r] - u0[r] * u0[r] * vn);
        }
    }
    let w = u
        .into_iter()
        .map(|s| s.into_iter().map(|c| c.conj()).collect())
        .collect();
    Ok(PowerSeriesSet {
        buses: pq.iter().map(|&i| net.buses[i].id).collect(),
        positions: pq,
        v,
        w,
        terms,
        direction: k.to_vec(),
        base: base.voltages.clone(),
    })
}

/// Rational approximant `A(s/ρ) / B(s/ρ)` of one bus's voltage series.
#[derive(Debug, Clone, PartialEq)]
pub struct PadePair {
    pub bus: BusId,
    /// Numerator and denominator coefficients in the scaled variable `s/ρ`.
    pub a: Vec<Complex64>,
    pub b: Vec<Complex64>,
    /// Variable scale ρ; coefficients of the original series are `c_n / ρ^n` of the scaled one.
    pub scale: f64,
    /// Set when the degrees had to be reduced below `(N_c - 1) / 2`.
    pub reduced: bool,
}

impl PadePair {
    pub fn numerator_degree(&self) -> usize {
        self.a.len() - 1
    }

    pub fn denominator_degree(&self) -> usize {
        self.b.len() - 1
    }

    /// Numerator polynomial in the original variable `s`.
    pub fn numerator(&self) -> Vec<Complex64> {
        unscale(&self.a, self.scale)
    }

    pub fn denominator(&self) -> Vec<Complex64> {
        unscale(&self.b, self.scale)
    }

    pub fn numerator_roots(&self) -> Vec<Complex64> {
        linalg::poly_roots(&self.a).into_iter().map(|z| z * self.scale).collect()
    }

    pub fn denominator_roots(&self) -> Vec<Complex64> {
        linalg::poly_roots(&self.b).into_iter().map(|z| z * self.scale).collect()
    }

    pub fn evaluate(&self, s: f64) -> Result<Complex64> {
        let t = Complex64::new(s / self.scale, 0.0);
        let den = linalg::eval_poly(&self.b, t);
        if den.norm() < 1e-12 {
            return Err(Error::PoleHit(s));
        }
        Ok(linalg::eval_poly(&self.a, t) / den)
    }

    /// First `n` Taylor coefficients of `A/B` in the original variable.
    pub fn expansion(&self, n: usize) -> Vec<Complex64> {
        let a = self.numerator();
        let b = self.denominator();
        let mut c = vec![ZERO; n];
        for i in 0..n {
            let mut acc = a.get(i).copied().unwrap_or(ZERO);
            for j in 1..b.len().min(i + 1) {
                acc -= b[j] * c[i - j];
            }
            c[i] = acc / b[0];
        }
        c
    }
}

fn unscale(p: &[Complex64], scale: f64) -> Vec<Complex64> {
    let mut f = 1.0;
    p.iter()
        .map(|c| {
            let out = c * f;
            f /= scale;
            out
        })
        .collect()
}

/// Rough radius of convergence from the tail of the series, used only to
/// condition the Padé systems.
fn series_scale(c: &[Complex64]) -> f64 {
    let c0 = c[0].norm();
    if c0 == 0.0 {
        return 1.0;
    }
    let n = c.len();
    let mut growth = 0.0_f64;
    for (i, ci) in c.iter().enumerate().skip(n / 2).filter(|(i, _)| *i > 0) {
        let r = ci.norm() / c0;
        if r > 0.0 {
            growth = growth.max(r.powf(1.0 / i as f64));
        }
    }
    if growth > 0.0 && growth.is_finite() {
        1.0 / growth
    } else {
        1.0
    }
}

/// Diagonal Padé approximant through the coefficients given, with degrees
/// reduced by numerical rank when the series is degenerate.
pub fn pade(bus: BusId, series: &[Complex64]) -> Result<PadePair> {
    let n = series.len();
    if n < 3 || n % 2 == 0 {
        return Err(Error::Config(format!("Padé needs an odd coefficient count of at least 3, got {n}")));
    }
    let scale = series_scale(series);
    let c: Vec<Complex64> = {
        let mut f = 1.0;
        series
            .iter()
            .map(|x| {
                let out = x * f;
                f *= scale;
                out
            })
            .collect()
    };
    let norm = c.iter().map(|x| x.norm()).fold(0.0, f64::max);
    if norm == 0.0 {
        return Ok(PadePair {
            bus,
            a: vec![ZERO],
            b: vec![Complex64::new(1.0, 0.0)],
            scale,
            reduced: true,
        });
    }
    let coef = |i: isize| if i < 0 { ZERO } else { c[i as usize] };
    let mut l = (n - 1) / 2;
    let mut m = l;
    let mut reduced = false;
    let tol = 1e-14 * norm;
    let b = loop {
        if m == 0 {
            break vec![Complex64::new(1.0, 0.0)];
        }
        // Rows i = 1..=m of Σ_j b_j c_{l+i-j} = 0, columns j = 0..=m; padded square.
        let mat = DMatrix::from_fn(m + 1, m + 1, |i, j| {
            if i == m {
                ZERO
            } else {
                coef(l as isize + i as isize + 1 - j as isize)
            }
        });
        let svd = mat.svd(false, true);
        let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
        if rank < m {
            reduced = true;
            let drop = m - rank;
            m -= drop;
            l = l.saturating_sub(drop);
            continue;
        }
        let v_t = svd.v_t.expect("requested right singular vectors");
        let (min_idx, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
        let null: Vec<Complex64> = (0..=m).map(|j| v_t[(min_idx, j)].conj()).collect();
        if null[0].norm() < 1e-12 {
            return Err(Error::DegenerateSeries(format!(
                "bus {bus}: Padé denominator vanishes at the origin"
            )));
        }
        let b0 = null[0];
        break null.into_iter().map(|x| x / b0).collect();
    };
    let mut a: Vec<Complex64> = (0..=l)
        .map(|i| (0..b.len().min(i + 1)).map(|j| b[j] * c[i - j]).sum())
        .collect();
    while a.len() > 1 && a.last().is_some_and(|x| x.norm() <= tol) {
        a.pop();
    }
    Ok(PadePair { bus, a, b, scale, reduced })
}

/// Padé approximants for every PQ bus.
pub fn pade_all(series: &PowerSeriesSet, exec: Execution) -> Result<Vec<PadePair>> {
    let idx: Vec<usize> = (0..series.buses.len()).collect();
    exec::map(exec, &idx, |&b| pade(series.buses[b], &series.v[b]))
        .into_iter()
        .collect()
}

/// Quadratic approximant `P + Q f + R f^2 = O(s^N)` of one voltage series.
///
/// A square-root branch point of `f` shows up as a simple root of the
/// discriminant `Q^2 - 4PR`, which locates the nose far more sharply than
/// Padé numerator zeros, whose accumulation point is only approached as
/// `O(1/N^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticApproximant {
    pub bus: BusId,
    pub p: Vec<Complex64>,
    pub q: Vec<Complex64>,
    pub r: Vec<Complex64>,
    /// Variable scale, as for [`PadePair`].
    pub scale: f64,
}

impl QuadraticApproximant {
    pub fn degree(&self) -> usize {
        self.p.len() - 1
    }

    /// Discriminant coefficients in the scaled variable.
    pub fn discriminant(&self) -> Vec<Complex64> {
        let qq = convolve(&self.q, &self.q);
        let pr = convolve(&self.p, &self.r);
        qq.iter().zip(&pr).map(|(a, b)| a - 4.0 * b).collect()
    }

    /// Positive real discriminant roots in the original variable, ascending.
    pub fn branch_points(&self) -> Vec<f64> {
        let mut out: Vec<f64> = linalg::poly_roots(&self.discriminant())
            .into_iter()
            .map(|z| z * self.scale)
            .filter(|z| is_positive_real(*z))
            .map(|z| z.re)
            .collect();
        out.sort_by(f64::total_cmp);
        out
    }
}

fn convolve(a: &[Complex64], b: &[Complex64]) -> Vec<Complex64> {
    let mut out = vec![ZERO; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn is_positive_real(z: Complex64) -> bool {
    z.re > 0.0 && z.im.abs() / (1.0 + z.re.abs()) < 1e-6
}

/// Highest-degree quadratic approximant the coefficients support, lowering
/// the degree until the linear conditions have full numerical rank.
pub fn quadratic_approximant(bus: BusId, series: &[Complex64]) -> Option<QuadraticApproximant> {
    let n = series.len();
    let scale = series_scale(series);
    let mut f = 1.0;
    let c: Vec<Complex64> = series
        .iter()
        .map(|x| {
            let out = x * f;
            f *= scale;
            out
        })
        .collect();
    let c2 = convolve(&c, &c);
    let mut d = ((n + 1) / 3).checked_sub(1)?;
    while d > 0 {
        let rows = 3 * d + 2;
        let cols = 3 * d + 3;
        // Padded with one zero row so the full right singular basis is returned.
        let mat = DMatrix::from_fn(cols, cols, |i, j| {
            if i >= rows {
                return ZERO;
            }
            match j {
                j if j <= d => {
                    if i == j {
                        Complex64::new(1.0, 0.0)
                    } else {
                        ZERO
                    }
                }
                j if j <= 2 * d + 1 => {
                    let k = j - d - 1;
                    if i >= k { c[i - k] } else { ZERO }
                }
                j => {
                    let k = j - 2 * d - 2;
                    if i >= k { c2[i - k] } else { ZERO }
                }
            }
        });
        let svd = mat.svd(false, true);
        let sigma_max = svd.singular_values.iter().copied().fold(0.0, f64::max);
        let rank = svd
            .singular_values
            .iter()
            .filter(|&&s| s > 1e-13 * sigma_max)
            .count();
        if rank < rows {
            d -= 1;
            continue;
        }
        let v_t = svd.v_t?;
        let (min_idx, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
        let x: Vec<Complex64> = (0..cols).map(|j| v_t[(min_idx, j)].conj()).collect();
        return Some(QuadraticApproximant {
            bus,
            p: x[..=d].to_vec(),
            q: x[d + 1..=2 * d + 1].to_vec(),
            r: x[2 * d + 2..].to_vec(),
            scale,
        });
    }
    None
}

#[derive(Debug, Clone)]
pub struct CriticalLoading {
    pub s_c: f64,
    /// Bus whose approximant produced the smallest accepted root.
    pub bus: BusId,
    /// Accepted positive real Padé numerator roots per bus, ascending.
    pub roots: Vec<(BusId, Vec<f64>)>,
    /// Positive real branch points per bus from the quadratic approximants.
    pub branch_points: Vec<(BusId, Vec<f64>)>,
}

/// Positive real numerator roots, ascending, with pole-zero doublets removed.
pub fn real_positive_roots(p: &PadePair) -> Vec<f64> {
    let poles = p.denominator_roots();
    let mut out: Vec<f64> = p
        .numerator_roots()
        .into_iter()
        .filter(|z| is_positive_real(*z))
        .filter(|z| {
            !poles
                .iter()
                .any(|q| (q - z).norm() < 1e-8 * (1.0 + z.norm()))
        })
        .map(|z| z.re)
        .collect();
    out.sort_by(f64::total_cmp);
    out
}

fn smallest(lists: &[(BusId, Vec<f64>)]) -> Option<(BusId, f64)> {
    lists
        .iter()
        .filter_map(|(b, r)| r.first().map(|&s| (*b, s)))
        .min_by(|x, y| x.1.total_cmp(&y.1))
}

/// Collapse loading from the voltage series and their Padé approximants.
///
/// The smallest positive real branch point over all buses is taken; when no
/// quadratic approximant yields one, the smallest Padé numerator root is used.
pub fn critical_loading(series: &PowerSeriesSet, pades: &[PadePair], exec: Execution) -> Result<CriticalLoading> {
    let roots: Vec<(BusId, Vec<f64>)> = exec::map(exec, pades, |p| (p.bus, real_positive_roots(p)));
    let idx: Vec<usize> = (0..series.buses.len()).collect();
    let branch_points: Vec<(BusId, Vec<f64>)> = exec::map(exec, &idx, |&b| {
        let bus = series.buses[b];
        let varies = series.v[b][1..].iter().any(|c| c.norm() > 0.0);
        let pts = if varies {
            quadratic_approximant(bus, &series.v[b])
                .map(|qa| qa.branch_points())
                .unwrap_or_default()
        } else {
            Vec::new()
        };
        (bus, pts)
    });
    let (bus, s_c) = smallest(&branch_points)
        .or_else(|| smallest(&roots))
        .ok_or(Error::NoCollapse)?;
    Ok(CriticalLoading {
        s_c,
        bus,
        roots,
        branch_points,
    })
}

/// Voltages at loading `s` from the Padé approximants; every bus is returned.
pub fn evaluate_voltages(series: &PowerSeriesSet, pades: &[PadePair], s: f64) -> Result<Vec<Complex64>> {
    if s == 0.0 {
        return Ok(series.base.clone());
    }
    let mut out = series.base.clone();
    for (p, &pos) in pades.iter().zip(&series.positions) {
        out[pos] = p.evaluate(s)?;
    }
    Ok(out)
}

/// Everything a continuation run produces.
#[derive(Debug, Clone)]
pub struct Continuation {
    pub series: PowerSeriesSet,
    pub pades: Vec<PadePair>,
    pub critical: CriticalLoading,
}

impl Continuation {
    pub fn run(net: &Network, base: &PowerFlowSolution, k: &[f64], terms: usize, exec: Execution) -> Result<Self> {
        if k.iter().all(|&x| x == 0.0) {
            return Err(Error::NoCollapse);
        }
        let series = embed_and_recurse(net, base, k, terms)?;
        let pades = pade_all(&series, exec)?;
        let critical = critical_loading(&series, &pades, exec)?;
        Ok(Self { series, pades, critical })
    }

    pub fn s_c(&self) -> f64 {
        self.critical.s_c
    }

    /// Series below half the collapse loading, Padé beyond.
    pub fn voltages(&self, s: f64) -> Result<Vec<Complex64>> {
        if s <= 0.5 * self.critical.s_c {
            Ok(self.series.evaluate(s))
        } else {
            evaluate_voltages(&self.series, &self.pades, s)
        }
    }
}

/// Largest per-bus voltage magnitude difference between the continuation and
/// Newton at one loading; `None` where Newton did not converge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonComparison {
    pub s: f64,
    pub max_error: Option<f64>,
}

/// Newton along the same fixed-generator loading path, warm-started point to
/// point, compared with the continuation voltages.
pub fn compare_with_newton(
    net: &Network,
    base: &PowerFlowSolution,
    k: &[f64],
    cont: &Continuation,
    grid: &[f64],
) -> Result<Vec<NewtonComparison>> {
    let mode = GeneratorMode::FixedPhasor(base.voltages.clone());
    let opts = PowerFlowOptions {
        tolerance: 1e-13,
        ..Default::default()
    };
    let curve = pv_curve_newton(net, k, grid, &base.voltages, &mode, &opts)?;
    curve
        .points
        .iter()
        .map(|p| {
            let max_error = match &p.solution {
                Ok(sol) => {
                    let h = cont.voltages(p.s)?;
                    Some(h.iter().zip(&sol.voltages).map(|(a, b)| (a.norm() - b.norm()).abs()).fold(0.0, f64::max))
                }
                Err(_) => None,
            };
            Ok(NewtonComparison { s: p.s, max_error })
        })
        .collect()
}
