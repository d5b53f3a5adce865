//! Quasi-static SVC controllers acting once per buffering window.
//!
//! RBC regulates the SVC bus voltage, MBC adds a term for every monitored
//! bus whose window mean sits below `μ_crit`, and VBC adds one more for every
//! monitored bus whose detrended window variance exceeds its critical value.

use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::covariance::{self, CriticalVarianceSet};
use crate::dynamics::{DaeSystem, WindowController, WindowData};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::grid::BusId;
use crate::helm::{Continuation, DEFAULT_TERMS};
use crate::powerflow;
use crate::stochastic::{self, FirstPassageSpec, OuParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Buffering window, seconds.
    pub window: f64,
    /// Sample rate, Hz.
    pub rate: f64,
    pub order: usize,
    /// Savitzky-Golay frame length in samples; `None` picks the largest odd
    /// length that fits the buffer.
    pub frame: Option<usize>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            window: 3.0,
            rate: 30.0,
            order: 2,
            frame: None,
        }
    }
}

impl FilterConfig {
    pub fn buffer_len(&self) -> usize {
        (self.window * self.rate).round() as usize
    }

    pub fn frame_len(&self) -> usize {
        self.frame.unwrap_or_else(|| {
            let n = self.buffer_len();
            if n % 2 == 1 {
                n
            } else {
                n.saturating_sub(1)
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.frame_len();
        if m % 2 == 0 || m > self.buffer_len() || m <= self.order {
            return Err(Error::Config(format!(
                "filter frame {m} must be odd, longer than the order and no longer than the buffer ({})",
                self.buffer_len()
            )));
        }
        if self.order > 2 {
            return Err(Error::Config("only detrending orders 0 to 2 are supported".into()));
        }
        Ok(())
    }
}

/// Window mean, or `None` for an underfull buffer.
pub fn baf(buffer: &[f64], cfg: &FilterConfig) -> Option<f64> {
    if buffer.len() < cfg.buffer_len() || buffer.is_empty() {
        return None;
    }
    Some(buffer.iter().sum::<f64>() / buffer.len() as f64)
}

/// Least-squares polynomial fit over `x[start..start + m]`, evaluated at `at`.
fn local_fit(x: &[f64], start: usize, m: usize, order: usize, at: usize) -> f64 {
    let c = start as f64 + (m as f64 - 1.0) / 2.0;
    let p = order + 1;
    let mut ata = Matrix3::<f64>::zeros();
    let mut atb = Vector3::<f64>::zeros();
    for (j, &v) in x[start..start + m].iter().enumerate() {
        let t = (start + j) as f64 - c;
        let row = [1.0, t, t * t];
        for a in 0..p {
            atb[a] += row[a] * v;
            for b in 0..p {
                ata[(a, b)] += row[a] * row[b];
            }
        }
    }
    for a in p..3 {
        ata[(a, a)] = 1.0;
    }
    let coef = ata.lu().solve(&atb).unwrap_or_else(Vector3::zeros);
    let t = at as f64 - c;
    coef[0] + coef[1] * t + coef[2] * t * t
}

/// Buffer minus its Savitzky-Golay smoothing. Interior points use the
/// centred frame; the first and last half-frame use the edge frames' fits.
pub fn detrend_sgf(buffer: &[f64], cfg: &FilterConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = buffer.len();
    let m = cfg.frame_len();
    if m > n {
        return Err(Error::Config(format!("frame {m} is longer than the buffer ({n})")));
    }
    let half = m / 2;
    Ok((0..n)
        .map(|i| {
            let start = i.saturating_sub(half).min(n - m);
            buffer[i] - local_fit(buffer, start, m, cfg.order, i)
        })
        .collect())
}

/// Population variance of the detrended window, or `None` when underfull.
pub fn bvf(buffer: &[f64], cfg: &FilterConfig) -> Result<Option<f64>> {
    if buffer.len() < cfg.buffer_len() || buffer.is_empty() {
        return Ok(None);
    }
    let r = detrend_sgf(buffer, cfg)?;
    let mean = r.iter().sum::<f64>() / r.len() as f64;
    Ok(Some(r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / r.len() as f64))
}

pub fn step_gate(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    Rbc,
    Mbc,
    Vbc,
}

impl ControllerKind {
    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Rbc => "rbc",
            ControllerKind::Mbc => "mbc",
            ControllerKind::Vbc => "vbc",
        }
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rbc" => Ok(ControllerKind::Rbc),
            "mbc" => Ok(ControllerKind::Mbc),
            "vbc" => Ok(ControllerKind::Vbc),
            other => Err(Error::Config(format!("unknown controller `{other}`"))),
        }
    }
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Inputs for turning a collapse loading into a margin loading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarginSettings {
    pub sp_star: f64,
    /// Seconds.
    pub horizon: f64,
    /// Slow-drift diffusion, loading²/s.
    pub diffusion: f64,
}

impl Default for MarginSettings {
    fn default() -> Self {
        Self {
            sp_star: 0.99,
            horizon: 600.0,
            diffusion: 1e-6,
        }
    }
}

/// When thresholds are recomputed from a fresh operating state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefreshPolicy {
    /// Accumulated `|Δb|` since the last refresh, p.u.
    pub delta_b: f64,
    pub every_windows: usize,
}

impl Default for RefreshPolicy {
    fn default() -> Self {
        Self {
            delta_b: 0.05,
            every_windows: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub kind: ControllerKind,
    pub k_r: f64,
    pub k_m: f64,
    /// `None` derives the gain from the first threshold set.
    pub k_v: Option<f64>,
    /// `None` uses the SVC bus voltage at the start of the run.
    pub v_ref: Option<f64>,
    pub mu_crit: f64,
    /// Susceptance limits in p.u.; `None` takes them from the case.
    pub b_min: Option<f64>,
    pub b_max: Option<f64>,
    /// `None` uses the case's load pocket.
    pub monitored: Option<Vec<BusId>>,
    pub filter: FilterConfig,
    pub margin: MarginSettings,
    pub refresh: RefreshPolicy,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            kind: ControllerKind::Rbc,
            k_r: 5.0,
            k_m: 10.0,
            k_v: None,
            v_ref: None,
            mu_crit: 0.98,
            b_min: None,
            b_max: None,
            monitored: None,
            filter: FilterConfig::default(),
            margin: MarginSettings::default(),
            refresh: RefreshPolicy::default(),
        }
    }
}

impl ControllerConfig {
    pub fn of_kind(kind: ControllerKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.filter.validate()?;
        if self.k_r < 0.0 || self.k_m < 0.0 || self.k_v.is_some_and(|k| k < 0.0) {
            return Err(Error::Config("controller gains must be non-negative".into()));
        }
        if let (Some(lo), Some(hi)) = (self.b_min, self.b_max) {
            if !(lo < hi) {
                return Err(Error::Config("b_min must be below b_max".into()));
            }
        }
        Ok(())
    }
}

/// Variance gain that makes a bus at twice its threshold count as much as a
/// bus this far below `μ_crit`.
pub const K_V_REFERENCE_DIP: f64 = 0.02;

/// `K_v` such that `K_v · σ²_crit` equals `K_m · 0.02`, using the mean
/// threshold over the monitored buses.
pub fn auto_k_v(k_m: f64, thresholds: &CriticalVarianceSet) -> f64 {
    let n = thresholds.variances.len().max(1) as f64;
    let mean = thresholds.variances.iter().sum::<f64>() / n;
    if mean > 0.0 {
        k_m * K_V_REFERENCE_DIP / mean
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvcState {
    pub b: f64,
    pub b_min: f64,
    pub b_max: f64,
    pub last_update: f64,
    pub saturated: bool,
}

impl SvcState {
    pub fn new(b: f64, b_min: f64, b_max: f64) -> Result<Self> {
        if !(b_min < b_max) {
            return Err(Error::Config("b_min must be below b_max".into()));
        }
        Ok(Self {
            b: b.clamp(b_min, b_max),
            b_min,
            b_max,
            last_update: 0.0,
            saturated: false,
        })
    }

    /// Apply a requested change, clamped to the limits; returns the change
    /// actually made.
    pub fn apply(&mut self, delta: f64, t: f64) -> f64 {
        let wanted = self.b + delta;
        let next = wanted.clamp(self.b_min, self.b_max);
        self.saturated = next != wanted;
        let made = next - self.b;
        self.b = next;
        self.last_update = t;
        made
    }
}

/// Local voltage loop: `K_r (V_ref − mean(V_t))`.
pub fn rbc_update(local: &[f64], cfg: &ControllerConfig, v_ref: f64) -> Option<f64> {
    baf(local, &cfg.filter).map(|m| cfg.k_r * (v_ref - m))
}

fn wams_term(wams: &[Vec<f64>], cfg: &ControllerConfig) -> Option<f64> {
    let mut sum = 0.0;
    for w in wams {
        sum += step_gate(cfg.mu_crit - baf(w, &cfg.filter)?);
    }
    Some(cfg.k_m * sum)
}

/// RBC plus `K_m Σ gate(μ_crit − mean(V_i))`.
pub fn mbc_update(local: &[f64], wams: &[Vec<f64>], cfg: &ControllerConfig, v_ref: f64) -> Option<f64> {
    Some(rbc_update(local, cfg, v_ref)? + wams_term(wams, cfg)?)
}

/// MBC plus `K_v Σ gate(var(V_i) − σ²_crit,i)`; `wams[i]` belongs to
/// `buses[i]`.
pub fn vbc_update(
    local: &[f64],
    wams: &[Vec<f64>],
    buses: &[BusId],
    cfg: &ControllerConfig,
    v_ref: f64,
    k_v: f64,
    thresholds: &CriticalVarianceSet,
) -> Result<Option<f64>> {
    let Some(base) = mbc_update(local, wams, cfg, v_ref) else {
        return Ok(None);
    };
    let mut sum = 0.0;
    for (w, &bus) in wams.iter().zip(buses) {
        let crit = thresholds
            .get(bus)
            .ok_or_else(|| Error::Config(format!("no critical variance for bus {bus}")))?;
        let Some(var) = bvf(w, &cfg.filter)? else {
            return Ok(None);
        };
        sum += step_gate(var - crit);
    }
    Ok(Some(base + k_v * sum))
}

/// Collapse loading with the SVC at `b`, then the margin loading for the
/// survival target, then the predicted variances there.
pub fn compute_thresholds(
    dae: &DaeSystem,
    ou: &OuParams,
    monitored: &[BusId],
    margin: &MarginSettings,
    t: f64,
) -> Result<(f64, f64, CriticalVarianceSet)> {
    let mut net = dae.network().clone();
    if let Some(pos) = dae.svc_position() {
        net = net.set_shunt(net.buses[pos].id, dae.b_svc())?;
    }
    let base = powerflow::solve_base(&net)?;
    let k = net.loading_direction();
    let s_c = Continuation::run(&net, &base, &k, DEFAULT_TERMS, Execution::Sequential)?.s_c();
    let s_m = stochastic::margin_loading(&FirstPassageSpec {
        s_c,
        sp_star: margin.sp_star,
        horizon: margin.horizon,
        d: margin.diffusion,
    })?;
    let set = covariance::critical_variances(dae, s_m, ou, monitored, t)?;
    Ok((s_c, s_m, set))
}

/// Keeps the VBC thresholds current.
#[derive(Debug, Clone)]
pub struct ThresholdOrchestrator {
    pub ou: OuParams,
    pub monitored: Vec<BusId>,
    pub margin: MarginSettings,
    pub policy: RefreshPolicy,
    pub thresholds: Option<CriticalVarianceSet>,
    pub s_c: Option<f64>,
    pub refreshes: usize,
    accumulated_db: f64,
    windows_since: usize,
}

impl ThresholdOrchestrator {
    pub fn new(ou: OuParams, monitored: Vec<BusId>, margin: MarginSettings, policy: RefreshPolicy) -> Self {
        Self {
            ou,
            monitored,
            margin,
            policy,
            thresholds: None,
            s_c: None,
            refreshes: 0,
            accumulated_db: 0.0,
            windows_since: 0,
        }
    }

    pub fn record_change(&mut self, db: f64) {
        self.accumulated_db += db.abs();
    }

    pub fn due(&self) -> bool {
        self.thresholds.is_none()
            || self.accumulated_db > self.policy.delta_b
            || self.windows_since >= self.policy.every_windows
    }

    /// Called once per window. Recomputes when due; on failure the previous
    /// thresholds stay in force. Returns whether a new set was installed.
    pub fn on_window(&mut self, dae: &DaeSystem, t: f64) -> bool {
        self.windows_since += 1;
        if !self.due() {
            return false;
        }
        self.windows_since = 0;
        self.accumulated_db = 0.0;
        match compute_thresholds(dae, &self.ou, &self.monitored, &self.margin, t) {
            Ok((s_c, _, set)) => {
                self.s_c = Some(s_c);
                self.thresholds = Some(set);
                self.refreshes += 1;
                true
            }
            Err(e) => {
                warn!("threshold refresh at t = {t:.2} s failed ({e}); keeping previous thresholds");
                false
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerLogRow {
    pub t: f64,
    pub kind: ControllerKind,
    pub v_local: f64,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub delta_b: f64,
    pub b_svc: f64,
    pub saturated: bool,
}

/// SVC controller that plugs into the integrator.
#[derive(Debug, Clone)]
pub struct SvcController {
    pub cfg: ControllerConfig,
    pub svc: SvcState,
    pub v_ref: Option<f64>,
    pub k_v: Option<f64>,
    pub orchestrator: Option<ThresholdOrchestrator>,
    pub log: Vec<ControllerLogRow>,
    monitored: Vec<BusId>,
    monitored_pos: Vec<usize>,
    svc_pos: usize,
}

impl SvcController {
    /// `ou` is needed by VBC to predict thresholds.
    pub fn new(cfg: ControllerConfig, dae: &DaeSystem, ou: Option<&OuParams>) -> Result<Self> {
        cfg.validate()?;
        let net = dae.network();
        let spec = net
            .svc
            .as_ref()
            .ok_or_else(|| Error::Config("case has no SVC bus".into()))?;
        let svc_pos = dae.svc_position().expect("svc present");
        let monitored = cfg.monitored.clone().unwrap_or_else(|| net.pocket.clone());
        let monitored_pos = monitored.iter().map(|&b| net.index_of(b)).collect::<Result<Vec<_>>>()?;
        let svc = SvcState::new(
            dae.b_svc(),
            cfg.b_min.unwrap_or(spec.b_min),
            cfg.b_max.unwrap_or(spec.b_max),
        )?;
        let orchestrator = if cfg.kind == ControllerKind::Vbc {
            let ou = ou.ok_or_else(|| Error::Config("VBC needs OU parameters".into()))?;
            Some(ThresholdOrchestrator::new(ou.clone(), monitored.clone(), cfg.margin, cfg.refresh))
        } else {
            None
        };
        Ok(Self {
            v_ref: cfg.v_ref,
            k_v: cfg.k_v,
            cfg,
            svc,
            orchestrator,
            log: Vec::new(),
            monitored,
            monitored_pos,
            svc_pos,
        })
    }

    pub fn monitored(&self) -> &[BusId] {
        &self.monitored
    }

    pub fn log_csv(&self) -> String {
        let mut out = String::from("t,controller,v_local");
        for prefix in ["mean", "var", "crit"] {
            for b in &self.monitored {
                let _ = write!(out, ",{prefix}_{b}");
            }
        }
        out.push_str(",delta_b,b_svc,saturated\n");
        for r in &self.log {
            let _ = write!(out, "{},{},{}", r.t, r.kind, r.v_local);
            for v in r.means.iter().chain(&r.variances).chain(&r.thresholds) {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{},{},{}", r.delta_b, r.b_svc, u8::from(r.saturated));
        }
        out
    }

    pub fn write_log(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.log_csv()).map_err(|e| Error::io(path, e))
    }
}

impl WindowController for SvcController {
    fn on_window(&mut self, dae: &DaeSystem, w: &WindowData<'_>) -> Result<Option<f64>> {
        let local: Vec<f64> = w.magnitudes.iter().map(|m| m[self.svc_pos]).collect();
        let wams: Vec<Vec<f64>> = self
            .monitored_pos
            .iter()
            .map(|&p| w.magnitudes.iter().map(|m| m[p]).collect())
            .collect();
        // The reference defaults to the SVC bus voltage before any action.
        let v_ref = *self.v_ref.get_or_insert(w.point.y[dae.n_bus() + self.svc_pos]);
        if let Some(orch) = self.orchestrator.as_mut() {
            orch.on_window(dae, w.t);
            if self.k_v.is_none() {
                if let Some(th) = &orch.thresholds {
                    self.k_v = Some(auto_k_v(self.cfg.k_m, th));
                }
            }
        }
        let raw = match self.cfg.kind {
            ControllerKind::Rbc => rbc_update(&local, &self.cfg, v_ref),
            ControllerKind::Mbc => mbc_update(&local, &wams, &self.cfg, v_ref),
            ControllerKind::Vbc => {
                let orch = self.orchestrator.as_ref().expect("vbc has an orchestrator");
                match &orch.thresholds {
                    Some(th) => vbc_update(
                        &local,
                        &wams,
                        &self.monitored,
                        &self.cfg,
                        v_ref,
                        self.k_v.unwrap_or(0.0),
                        th,
                    )?,
                    None => mbc_update(&local, &wams, &self.cfg, v_ref),
                }
            }
        };
        let Some(delta) = raw else {
            return Ok(None);
        };
        let made = self.svc.apply(delta, w.t);
        if let Some(orch) = self.orchestrator.as_mut() {
            orch.record_change(made);
        }
        let means = wams.iter().map(|b| baf(b, &self.cfg.filter).unwrap_or(f64::NAN)).collect();
        let variances = wams
            .iter()
            .map(|b| bvf(b, &self.cfg.filter).ok().flatten().unwrap_or(f64::NAN))
            .collect();
        let thresholds = match self.orchestrator.as_ref().and_then(|o| o.thresholds.as_ref()) {
            Some(th) => th.variances.clone(),
            None => vec![f64::NAN; self.monitored.len()],
        };
        self.log.push(ControllerLogRow {
            t: w.t,
            kind: self.cfg.kind,
            v_local: baf(&local, &self.cfg.filter).unwrap_or(f64::NAN),
            means,
            variances,
            thresholds,
            delta_b: made,
            b_svc: self.svc.b,
            saturated: self.svc.saturated,
        });
        Ok(Some(self.svc.b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baf_examples() {
        let cfg = FilterConfig::default();
        assert_eq!(baf(&[1.0; 90], &cfg), Some(1.0));
        let alt: Vec<f64> = (0..90).map(|i| if i % 2 == 0 { 0.99 } else { 1.01 }).collect();
        assert!((baf(&alt, &cfg).unwrap() - 1.0).abs() < 1e-15);
        let ramp: Vec<f64> = (0..90).map(|i| 0.98 + 0.02 * i as f64 / 89.0).collect();
        assert!((baf(&ramp, &cfg).unwrap() - 0.99).abs() < 1e-6);
        assert_eq!(baf(&[1.0; 10], &cfg), None);
    }

    #[test]
    fn default_frame_is_largest_odd_fit() {
        assert_eq!(FilterConfig::default().frame_len(), 89);
        let bad = FilterConfig {
            frame: Some(91),
            ..Default::default()
        };
        assert!(detrend_sgf(&[0.0; 90], &bad).is_err());
    }

    #[test]
    fn gate_examples() {
        assert_eq!(step_gate(0.5), 0.5);
        assert_eq!(step_gate(-0.5), 0.0);
        assert_eq!(step_gate(0.0), 0.0);
    }

    #[test]
    fn rbc_arithmetic_and_clamp() {
        let cfg = ControllerConfig::default();
        assert_eq!(rbc_update(&[1.0; 90], &cfg, 1.0), Some(0.0));
        let d = rbc_update(&[0.99; 90], &cfg, 1.0).unwrap();
        assert!((d - 0.05).abs() < 1e-12);
        let mut svc = SvcState::new(1.9, 0.0, 2.0).unwrap();
        let made = svc.apply(0.5, 3.0);
        assert_eq!(svc.b, 2.0);
        assert!(svc.saturated);
        assert!((made - 0.1).abs() < 1e-12);
        svc.apply(-0.1, 6.0);
        assert!(!svc.saturated);
    }

    #[test]
    fn mbc_adds_gated_wams_term() {
        let cfg = ControllerConfig::of_kind(ControllerKind::Mbc);
        let local = vec![0.99; 90];
        let above = vec![vec![0.985; 90], vec![1.0; 90]];
        assert_eq!(mbc_update(&local, &above, &cfg, 1.0), rbc_update(&local, &cfg, 1.0));
        let one_low = vec![vec![0.96; 90], vec![1.0; 90]];
        let d = mbc_update(&local, &one_low, &cfg, 1.0).unwrap() - rbc_update(&local, &cfg, 1.0).unwrap();
        assert!((d - 0.2).abs() < 1e-12);
    }
}
