//! Stochastic load models and the first-passage survival law.
//!
//! Fast fluctuations are an Ornstein-Uhlenbeck process per load bus; the slow
//! loading factor is a Wiener walk (or a deterministic ramp). The effective
//! load at bus `i` is `S_0i (1 + s(t) k_i) (1 + u_i(t))`, with `u` applied to P
//! and Q alike so the power factor is preserved.

use std::fmt::Write as _;
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::grid::BusId;

/// Stream ids keep the fast and slow sequences of one seed independent.
const FAST_STREAM: u64 = 1;
const SLOW_STREAM: u64 = 2;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Diagonal OU parameters: `du = -E u dt + Σ dW`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OuParams {
    pub buses: Vec<BusId>,
    /// Inverse correlation times `E_ii` (1/s).
    pub rate: Vec<f64>,
    /// Driving intensities `Σ_ii`.
    pub sigma: Vec<f64>,
}

impl OuParams {
    /// Same rate on every bus, with `Σ` set so the stationary standard
    /// deviation of `u` equals `std`.
    pub fn uniform(buses: Vec<BusId>, rate: f64, std: f64) -> Self {
        let n = buses.len();
        Self {
            buses,
            rate: vec![rate; n],
            sigma: vec![std * (2.0 * rate).sqrt(); n],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rate.len() != self.buses.len() || self.sigma.len() != self.buses.len() {
            return Err(Error::Config("OU rate and sigma must have one entry per bus".into()));
        }
        if self.rate.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
            return Err(Error::Config("OU rates must be positive".into()));
        }
        if self.sigma.iter().any(|&s| !(s >= 0.0) || !s.is_finite()) {
            return Err(Error::Config("OU sigma entries must be non-negative".into()));
        }
        Ok(())
    }

    /// Stationary variance `Σ² / (2E)` per bus.
    pub fn stationary_variance(&self) -> Vec<f64> {
        self.rate
            .iter()
            .zip(&self.sigma)
            .map(|(e, s)| s * s / (2.0 * e))
            .collect()
    }
}

/// Streaming Euler-Maruyama integrator for [`OuParams`].
#[derive(Debug, Clone)]
pub struct OuProcess {
    params: OuParams,
    state: Vec<f64>,
    rng: ChaCha8Rng,
}

impl OuProcess {
    pub fn new(params: OuParams, seed: u64) -> Result<Self> {
        params.validate()?;
        let n = params.buses.len();
        Ok(Self {
            params,
            state: vec![0.0; n],
            rng: rng(seed, FAST_STREAM),
        })
    }

    pub fn with_state(mut self, u0: &[f64]) -> Result<Self> {
        if u0.len() != self.state.len() {
            return Err(Error::Config("initial OU state has the wrong length".into()));
        }
        self.state.copy_from_slice(u0);
        Ok(self)
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn step(&mut self, dt: f64) -> &[f64] {
        let sq = dt.sqrt();
        for i in 0..self.state.len() {
            let xi: f64 = self.rng.sample(StandardNormal);
            let u = self.state[i];
            self.state[i] = u - self.params.rate[i] * u * dt + self.params.sigma[i] * sq * xi;
        }
        &self.state
    }
}

/// `n_steps + 1` rows (initial zero state included), one column per bus.
pub fn simulate_ou(params: &OuParams, dt: f64, n_steps: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if !(dt > 0.0) {
        return Err(Error::Config("OU step must be positive".into()));
    }
    let mut p = OuProcess::new(params.clone(), seed)?;
    let mut out = Vec::with_capacity(n_steps + 1);
    out.push(p.state().to_vec());
    for _ in 0..n_steps {
        out.push(p.step(dt).to_vec());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WienerParams {
    /// Diffusion coefficient `D` (loading factor² per second).
    pub d: f64,
    /// Step interval in seconds; each step has variance `2 D step`.
    pub step: f64,
}

impl WienerParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.d >= 0.0) || !self.d.is_finite() {
            return Err(Error::Config("Wiener D must be non-negative".into()));
        }
        if !(self.step > 0.0) {
            return Err(Error::Config("Wiener step interval must be positive".into()));
        }
        Ok(())
    }
}

/// Walk from the origin; `n_steps + 1` values.
pub fn simulate_wiener(params: &WienerParams, n_steps: usize, seed: u64) -> Result<Vec<f64>> {
    params.validate()?;
    let mut r = rng(seed, SLOW_STREAM);
    let sd = (2.0 * params.d * params.step).sqrt();
    let mut out = Vec::with_capacity(n_steps + 1);
    let mut s = 0.0;
    out.push(s);
    for _ in 0..n_steps {
        let xi: f64 = r.sample(StandardNormal);
        s += sd * xi;
        out.push(s);
    }
    Ok(out)
}

/// Deterministic override: `s[k] = rate · k · dt`.
pub fn simulate_ramp(rate: f64, dt: f64, n_steps: usize) -> Vec<f64> {
    (0..=n_steps).map(|k| rate * k as f64 * dt).collect()
}

/// How the slow loading factor evolves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SlowDrift {
    /// Loading factor held at a constant value.
    Fixed { s: f64 },
    /// Monotone ramp, loading factor per second.
    Ramp { rate: f64 },
    Wiener(WienerParams),
}

/// Maximum-likelihood diffusion estimate from a recorded slow trajectory.
pub fn estimate_diffusion(s: &[f64], step: f64) -> Result<f64> {
    if s.len() < 2 || !(step > 0.0) {
        return Err(Error::Config("need at least two samples and a positive step".into()));
    }
    let sum: f64 = s.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum();
    Ok(sum / (s.len() - 1) as f64 / (2.0 * step))
}

pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

/// Inverse error function on (-1, 1).
///
/// Starts from Giles' single-precision polynomial and polishes with two
/// Halley steps against the full-precision `erf`.
pub fn erf_inv(y: f64) -> f64 {
    if y <= -1.0 {
        return if y == -1.0 { f64::NEG_INFINITY } else { f64::NAN };
    }
    if y >= 1.0 {
        return if y == 1.0 { f64::INFINITY } else { f64::NAN };
    }
    let sign = y.signum();
    let a = y.abs();
    let w = -((1.0 - a) * (1.0 + a)).ln();
    let mut x = if w < 5.0 {
        let w = w - 2.5;
        let mut p = 2.810_226_36e-08;
        for c in [
            3.432_739_39e-07,
            -3.523_387_7e-06,
            -4.391_506_54e-06,
            0.000_218_580_87,
            -0.001_253_725_03,
            -0.004_177_681_64,
            0.246_640_727,
            1.501_409_41,
        ] {
            p = c + p * w;
        }
        p * a
    } else {
        let w = w.sqrt() - 3.0;
        let mut p = -0.000_200_214_257;
        for c in [
            0.000_100_950_558,
            0.001_349_343_22,
            -0.003_673_428_44,
            0.005_739_507_73,
            -0.007_622_461_3,
            0.009_438_870_47,
            1.001_674_06,
            2.832_976_82,
        ] {
            p = c + p * w;
        }
        p * a
    };
    // Near 1 the residual is formed from erfc so it keeps relative precision.
    let tail = 1.0 - a;
    for _ in 0..2 {
        let err = if a > 0.5 { tail - libm::erfc(x) } else { erf(x) - a };
        let deriv = std::f64::consts::FRAC_2_SQRT_PI * (-x * x).exp();
        // Halley: the second derivative of erf is -2x times the first.
        x -= err / (deriv + x * err);
    }
    sign * x
}

/// Probability that a walk starting `gap` below the absorbing boundary has
/// not crossed it within `horizon`: `erf(gap / √(4 D Δt))`.
///
/// A zero gap gives 0. With no diffusion or a zero horizon any positive gap
/// survives with probability 1.
pub fn survival_probability(gap: f64, d: f64, horizon: f64) -> Result<f64> {
    if !(gap >= 0.0) || !(d >= 0.0) || !(horizon >= 0.0) {
        return Err(Error::Config(format!(
            "survival probability needs gap, D and horizon ≥ 0 (got {gap}, {d}, {horizon})"
        )));
    }
    if gap == 0.0 {
        return Ok(0.0);
    }
    let spread = (4.0 * d * horizon).sqrt();
    if spread == 0.0 {
        return Ok(1.0);
    }
    Ok(erf(gap / spread))
}

pub fn collapse_probability(sp: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&sp) {
        return Err(Error::Config(format!("survival probability {sp} outside [0, 1]")));
    }
    Ok(1.0 - sp)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FirstPassageSpec {
    pub s_c: f64,
    /// Operator survival target, strictly between 0 and 1.
    pub sp_star: f64,
    /// Horizon `Δt` in seconds.
    pub horizon: f64,
    pub d: f64,
}

/// Largest loading whose survival over the horizon still meets `sp_star`.
pub fn margin_loading(spec: &FirstPassageSpec) -> Result<f64> {
    if !(spec.sp_star > 0.0 && spec.sp_star < 1.0) {
        return Err(Error::Config(format!("SP* = {} must lie in (0, 1)", spec.sp_star)));
    }
    if !(spec.d >= 0.0) || !(spec.horizon >= 0.0) || !(spec.s_c > 0.0) {
        return Err(Error::Config("margin needs s_c > 0 and D, horizon ≥ 0".into()));
    }
    let s_m = spec.s_c - (4.0 * spec.d * spec.horizon).sqrt() * erf_inv(spec.sp_star);
    if !(s_m > 0.0) {
        return Err(Error::NoMargin { s_c: spec.s_c, s_m });
    }
    Ok(s_m)
}

/// Fraction of discrete absorbing-boundary walks that stay below `gap` for
/// `n_steps` steps spanning `horizon`. Paths are split into fixed blocks with
/// their own streams, so the answer does not depend on the thread count.
pub fn first_passage_survival(
    gap: f64,
    d: f64,
    horizon: f64,
    n_steps: usize,
    n_paths: usize,
    seed: u64,
    exec: Execution,
) -> f64 {
    const BLOCK: usize = 1000;
    let sd = (2.0 * d * horizon / n_steps as f64).sqrt();
    let blocks = n_paths.div_ceil(BLOCK);
    let survived: usize = exec::map_range(exec, blocks, |b| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(1000 + b as u64);
        let count = BLOCK.min(n_paths - b * BLOCK);
        (0..count)
            .filter(|_| {
                let mut s = 0.0;
                for _ in 0..n_steps {
                    let xi: f64 = r.sample(StandardNormal);
                    s += sd * xi;
                    if s >= gap {
                        return false;
                    }
                }
                true
            })
            .count()
    })
    .into_iter()
    .sum();
    survived as f64 / n_paths as f64
}

/// Recorded fast and slow noise for one simulation, replayable bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRealization {
    pub seed: u64,
    pub dt: f64,
    pub buses: Vec<BusId>,
    /// Loading factor at every integration step.
    pub slow: Vec<f64>,
    /// `fast[k][j]`: OU value at step `k` for `buses[j]`.
    pub fast: Vec<Vec<f64>>,
}

impl NoiseRealization {
    /// Draw a realization covering `n_steps` integration steps.
    ///
    /// Wiener steps are held constant between their own step instants.
    pub fn generate(ou: &OuParams, drift: &SlowDrift, dt: f64, n_steps: usize, seed: u64) -> Result<Self> {
        let fast = simulate_ou(ou, dt, n_steps, seed)?;
        let slow = match drift {
            SlowDrift::Fixed { s } => vec![*s; n_steps + 1],
            SlowDrift::Ramp { rate } => simulate_ramp(*rate, dt, n_steps),
            SlowDrift::Wiener(w) => {
                let span = n_steps as f64 * dt;
                let n_slow = (span / w.step).ceil() as usize;
                let walk = simulate_wiener(w, n_slow, seed)?;
                (0..=n_steps)
                    .map(|k| {
                        let idx = ((k as f64 * dt) / w.step).floor() as usize;
                        walk[idx.min(n_slow)]
                    })
                    .collect()
            }
        };
        Ok(Self {
            seed,
            dt,
            buses: ou.buses.clone(),
            slow,
            fast,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.slow.len() - 1
    }

    /// Loads at step `k`, given base loads and rates indexed by bus position
    /// and the position of each noisy bus.
    pub fn loads_at(&self, k: usize, base: &[Complex64], rate: &[f64], positions: &[usize]) -> Vec<Complex64> {
        let s = self.slow[k];
        let mut out: Vec<Complex64> = base.iter().zip(rate).map(|(b, r)| b * (1.0 + s * r)).collect();
        for (j, &pos) in positions.iter().enumerate() {
            out[pos] *= 1.0 + self.fast[k][j];
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let ids: Vec<String> = self.buses.iter().map(|b| b.to_string()).collect();
        let mut out = format!(
            "# seed={} dt={} n={} buses={}\nstep,s",
            self.seed,
            self.dt,
            self.n_steps(),
            ids.join(";")
        );
        for id in &ids {
            let _ = write!(out, ",u_{id}");
        }
        out.push('\n');
        for (k, (s, u)) in self.slow.iter().zip(&self.fast).enumerate() {
            let _ = write!(out, "{k},{s}");
            for x in u {
                let _ = write!(out, ",{x}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Noise(msg);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty noise file".into()))?;
        let header = header
            .strip_prefix('#')
            .ok_or_else(|| bad("missing `#` header line".into()))?;
        let mut seed = None;
        let mut dt = None;
        let mut n = None;
        let mut buses = None;
        for field in header.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| bad(format!("malformed header field `{field}`")))?;
            match key {
                "seed" => seed = value.parse::<u64>().ok(),
                "dt" => dt = value.parse::<f64>().ok(),
                "n" => n = value.parse::<usize>().ok(),
                "buses" => {
                    buses = if value.is_empty() {
                        Some(Vec::new())
                    } else {
                        value.split(';').map(|b| b.parse::<BusId>().ok()).collect()
                    }
                }
                other => return Err(bad(format!("unknown header field `{other}`"))),
            }
        }
        let (seed, dt, n, buses) = match (seed, dt, n, buses) {
            (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
            _ => return Err(bad("header needs valid seed, dt, n and buses".into())),
        };
        lines.next().ok_or_else(|| bad("missing column header".into()))?;
        let mut slow = Vec::with_capacity(n + 1);
        let mut fast = Vec::with_capacity(n + 1);
        for (row, line) in lines.enumerate() {
            let vals: Vec<&str> = line.split(',').collect();
            if vals.len() != buses.len() + 2 {
                return Err(bad(format!("row {row}: expected {} columns", buses.len() + 2)));
            }
            if vals[0].parse::<usize>().ok() != Some(row) {
                return Err(bad(format!("row {row}: step index out of sequence")));
            }
            let parse = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("row {row}: bad number `{s}`")));
            slow.push(parse(vals[1])?);
            fast.push(vals[2..].iter().map(|s| parse(s)).collect::<Result<Vec<_>>>()?);
        }
        if slow.len() != n + 1 {
            return Err(bad(format!("header says {n} steps but file has {}", slow.len().saturating_sub(1))));
        }
        Ok(Self {
            seed,
            dt,
            buses,
            slow,
            fast,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_relaxes_exponentially() {
        let p = OuParams {
            buses: vec![1],
            rate: vec![0.5],
            sigma: vec![0.0],
        };
        let mut ou = OuProcess::new(p, 3).unwrap().with_state(&[1.0]).unwrap();
        let dt = 0.01;
        for k in 1..=100 {
            let u = ou.step(dt)[0];
            assert!((u - (1.0 - 0.5 * dt).powi(k)).abs() < 1e-14);
        }
    }

    #[test]
    fn ou_stationary_variance() {
        let p = OuParams {
            buses: vec![1],
            rate: vec![2.0],
            sigma: vec![0.3],
        };
        let traj = simulate_ou(&p, 0.01, 1_000_000, 11).unwrap();
        let xs: Vec<f64> = traj.iter().skip(1000).map(|r| r[0]).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        let expected = 0.09 / 4.0;
        assert!(((var - expected) / expected).abs() < 0.05, "{var} vs {expected}");
    }

    #[test]
    fn distinct_seeds_are_uncorrelated() {
        let p = OuParams::uniform(vec![1], 1.0, 0.01);
        let a = simulate_ou(&p, 0.05, 200_000, 1).unwrap();
        let b = simulate_ou(&p, 0.05, 200_000, 2).unwrap();
        let xa: Vec<f64> = a.iter().map(|r| r[0]).collect();
        let xb: Vec<f64> = b.iter().map(|r| r[0]).collect();
        let n = xa.len() as f64;
        let (ma, mb) = (xa.iter().sum::<f64>() / n, xb.iter().sum::<f64>() / n);
        let cov: f64 = xa.iter().zip(&xb).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
        let va: f64 = xa.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n;
        let vb: f64 = xb.iter().map(|x| (x - mb).powi(2)).sum::<f64>() / n;
        assert!((cov / (va * vb).sqrt()).abs() < 0.02);
    }

    #[test]
    fn wiener_basics() {
        let zero = simulate_wiener(&WienerParams { d: 0.0, step: 1.0 }, 50, 4).unwrap();
        assert!(zero.iter().all(|&s| s == 0.0));
        let w = WienerParams { d: 0.01, step: 1.0 };
        let paths = 100_000;
        let n = 20;
        let mut acc = 0.0;
        for p in 0..paths {
            let s = simulate_wiener(&w, n, p as u64).unwrap();
            acc += s[n] * s[n];
        }
        let var = acc / paths as f64;
        let expected = 2.0 * 0.01 * n as f64;
        assert!(((var - expected) / expected).abs() < 0.05, "{var}");
    }

    #[test]
    fn ramp_is_exact() {
        let r = simulate_ramp(0.0005, 0.01, 1000);
        for (k, s) in r.iter().enumerate() {
            assert_eq!(*s, 0.0005 * k as f64 * 0.01);
        }
    }

    /// Maclaurin series of erf, summed until terms vanish.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        let mut n = 0;
        while term.abs() > 1e-18 * sum.abs() {
            n += 1;
            term *= -x * x / n as f64;
            sum += term / (2 * n + 1) as f64;
        }
        sum * std::f64::consts::FRAC_2_SQRT_PI
    }

    #[test]
    fn erf_matches_series_and_inverts() {
        for i in 0..=60 {
            let x = -3.0 + 0.1 * i as f64;
            assert!((erf(x) - erf_series(x)).abs() < 1e-12, "x = {x}");
        }
        for i in 1..200 {
            let y = -1.0 + 0.01 * i as f64;
            assert!((erf(erf_inv(y)) - y).abs() < 1e-14, "y = {y}");
        }
        assert!((erf_inv(1.0 - 1e-12) - 5.042_031_898_572_696).abs() < 1e-6);
        assert_eq!(erf_inv(1.0), f64::INFINITY);
        assert!(erf_inv(1.5).is_nan());
    }

    #[test]
    fn survival_edges() {
        assert_eq!(survival_probability(0.0, 0.1, 10.0).unwrap(), 0.0);
        assert_eq!(survival_probability(0.3, 0.0, 10.0).unwrap(), 1.0);
        assert!(survival_probability(50.0, 0.01, 1.0).unwrap() > 1.0 - 1e-15);
        assert!((survival_probability(1.0, 0.25, 1.0).unwrap() - 0.842_700_792_949_714_9).abs() < 1e-12);
        assert!(survival_probability(-1.0, 0.1, 1.0).is_err());
        assert_eq!(collapse_probability(1.0).unwrap(), 0.0);
        assert_eq!(collapse_probability(0.0).unwrap(), 1.0);
        assert!((collapse_probability(0.8427).unwrap() - 0.1573).abs() < 1e-12);
    }

    #[test]
    fn margin_examples() {
        let spec = FirstPassageSpec {
            s_c: 1.99,
            sp_star: erf(1.0),
            horizon: 1.0,
            d: 0.25,
        };
        assert!((margin_loading(&spec).unwrap() - 0.99).abs() < 1e-12);
        let tiny = FirstPassageSpec { d: 1e-18, ..spec };
        assert!((margin_loading(&tiny).unwrap() - 1.99).abs() < 1e-8);
        let hopeless = FirstPassageSpec { d: 10.0, ..spec };
        assert_eq!(margin_loading(&hopeless).unwrap_err().class(), "margin");
    }

    #[test]
    fn diffusion_estimate_recovers_d() {
        let w = WienerParams { d: 0.003, step: 0.5 };
        let s = simulate_wiener(&w, 200_000, 9).unwrap();
        let d = estimate_diffusion(&s, 0.5).unwrap();
        assert!((d - 0.003).abs() < 0.02 * 0.003);
    }

    #[test]
    fn realization_csv_round_trip_is_exact() {
        let ou = OuParams::uniform(vec![2, 5], 1.0, 0.01);
        let drift = SlowDrift::Wiener(WienerParams { d: 1e-4, step: 1.0 });
        let r = NoiseRealization::generate(&ou, &drift, 0.01, 500, 77).unwrap();
        let back = NoiseRealization::from_csv(&r.to_csv()).unwrap();
        assert_eq!(r, back);
        for (a, b) in r.fast.iter().flatten().zip(back.fast.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // slow values change only on whole seconds
        assert_eq!(r.slow[0], r.slow[99]);
        assert!(NoiseRealization::from_csv("step,s\n").is_err());
    }
}
