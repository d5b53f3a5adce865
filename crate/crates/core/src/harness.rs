//! Scenarios, controller comparisons on shared noise, and report export.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::controllers::{ControllerConfig, ControllerKind, SvcController};
use crate::dynamics::{self, IntegrationOptions, NoController, Trajectory, WindowController};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::grid::{BusId, Network};
use crate::stochastic::{NoiseRealization, OuParams, SlowDrift};

const SCENARIOS: &[(&str, &str)] = &[
    ("threebus_reference", include_str!("../scenarios/threebus_reference.json")),
    ("ieee39_pocket", include_str!("../scenarios/ieee39_pocket.json")),
];

/// Fast-noise settings shared by every noisy load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OuSpec {
    /// Inverse correlation time, 1/s.
    pub rate: f64,
    /// Stationary standard deviation of the relative load noise.
    pub std: f64,
    /// `None` puts noise on every bus with a base load.
    pub buses: Option<Vec<BusId>>,
}

impl Default for OuSpec {
    fn default() -> Self {
        Self {
            rate: 1.0,
            std: 0.01,
            buses: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// Bundled case name or path to a case file.
    pub case: String,
    pub drift: SlowDrift,
    /// Loading factor at `t = 0`; the drift is added to it.
    #[serde(default)]
    pub start_loading: f64,
    /// Initial SVC susceptance, p.u.
    #[serde(default)]
    pub b_init: f64,
    #[serde(default)]
    pub ou: OuSpec,
    pub controllers: Vec<ControllerConfig>,
    /// Seconds.
    pub horizon: f64,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub integration: IntegrationOptions,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let sc: Scenario = serde_json::from_str(text).map_err(|e| {
            Error::schema(
                format!("line {} column {}", e.line(), e.column()),
                e.to_string(),
            )
        })?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Self::from_json(&text)
    }

    pub fn bundled(name: &str) -> Result<Self> {
        SCENARIOS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| Self::from_json(t))
            .unwrap_or_else(|| Err(Error::Config(format!("no bundled scenario `{name}`"))))
    }

    pub fn bundled_names() -> impl Iterator<Item = &'static str> {
        SCENARIOS.iter().map(|(n, _)| *n)
    }

    /// Bundled name, or else a path.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        if SCENARIOS.iter().any(|(n, _)| *n == name_or_path) {
            Self::bundled(name_or_path)
        } else {
            Self::load(name_or_path)
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) {
            return Err(Error::Config("horizon must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("scenario needs at least one seed".into()));
        }
        if !(self.ou.rate > 0.0) || !(self.ou.std >= 0.0) {
            return Err(Error::Config("OU rate must be positive and std non-negative".into()));
        }
        self.integration.validate()?;
        for c in &self.controllers {
            c.validate()?;
        }
        Ok(())
    }

    pub fn network(&self) -> Result<Network> {
        Network::resolve(&self.case)
    }

    pub fn n_steps(&self) -> usize {
        (self.horizon / self.integration.dt).round() as usize
    }

    fn ou_params(&self, noise_buses: Vec<BusId>) -> OuParams {
        OuParams::uniform(noise_buses, self.ou.rate, self.ou.std)
    }

    /// The shared realization for one seed, with the start loading folded
    /// into the slow component.
    pub fn noise(&self, net: &Network, seed: u64) -> Result<NoiseRealization> {
        let dae = dynamics::assemble_dae(net, self.ou.buses.as_deref())?;
        let ou = self.ou_params(dae.noise_buses());
        let mut noise = NoiseRealization::generate(&ou, &self.drift, self.integration.dt, self.n_steps(), seed)?;
        for s in &mut noise.slow {
            *s += self.start_loading;
        }
        Ok(noise)
    }
}

/// Outcome of one controller on one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub label: String,
    pub kind: Option<ControllerKind>,
    pub seed: u64,
    /// Time of collapse, or `None` if the run reached the horizon.
    pub collapse_time: Option<f64>,
    /// Collapse time, or the horizon when no collapse happened.
    pub survival: f64,
    /// Total active demand at the last converged step over the base demand,
    /// percent, fast noise excluded.
    pub load_increase: f64,
    pub final_b_svc: f64,
    pub trajectory: Trajectory,
    pub controller_log: Option<String>,
}

fn load_increase_pct(net: &Network, s: f64) -> f64 {
    let k = net.loading_direction();
    let base: f64 = net.base_loads().iter().map(|l| l.re).sum();
    let now: f64 = net.scaled_loads(s, &k).iter().map(|l| l.re).sum();
    if base > 0.0 {
        100.0 * (now / base - 1.0)
    } else {
        0.0
    }
}

/// Label for a controller config, unique within a scenario.
pub fn controller_labels(controllers: &[ControllerConfig]) -> Vec<String> {
    let mut out = Vec::with_capacity(controllers.len());
    for (i, c) in controllers.iter().enumerate() {
        let name = c.kind.name();
        let clash = controllers.iter().filter(|o| o.kind == c.kind).count() > 1;
        out.push(if clash { format!("{name}#{i}") } else { name.to_string() });
    }
    out
}

/// Run one controller (or none) on the realization for `seed`.
pub fn run_with_noise(
    scenario: &Scenario,
    net: &Network,
    controller: Option<&ControllerConfig>,
    label: &str,
    noise: &NoiseRealization,
) -> Result<RunResult> {
    let mut dae = dynamics::assemble_dae(net, scenario.ou.buses.as_deref())?;
    if dae.svc_position().is_some() {
        dae.set_svc(scenario.b_init)?;
    }
    let start = dae.find_equilibrium(noise.slow[0])?;
    let ou = scenario.ou_params(dae.noise_buses());
    let mut ctrl = match controller {
        Some(c) => Some(SvcController::new(c.clone(), &dae, Some(&ou))?),
        None => None,
    };
    let hook: &mut dyn WindowController = match ctrl.as_mut() {
        Some(c) => c,
        None => &mut NoController,
    };
    let traj = dynamics::integrate(&mut dae, &start, noise, &scenario.integration, hook)?;
    let collapse_time = traj.collapse_time();
    let last_s = noise.slow[traj.steps];
    Ok(RunResult {
        label: label.to_string(),
        kind: controller.map(|c| c.kind),
        seed: noise.seed,
        survival: collapse_time.unwrap_or(traj.steps as f64 * scenario.integration.dt),
        collapse_time,
        load_increase: load_increase_pct(net, last_s),
        final_b_svc: traj.final_point.b_svc,
        trajectory: traj,
        controller_log: ctrl.map(|c| c.log_csv()),
    })
}

/// Run the `index`-th configured controller on one seed.
pub fn run_scenario(scenario: &Scenario, index: usize, seed: u64) -> Result<RunResult> {
    let cfg = scenario
        .controllers
        .get(index)
        .ok_or_else(|| Error::Config(format!("scenario has no controller #{index}")))?;
    let net = scenario.network()?;
    let noise = scenario.noise(&net, seed)?;
    let label = controller_labels(&scenario.controllers)[index].clone();
    let result = run_with_noise(scenario, &net, Some(cfg), &label, &noise)?;
    if let Some(dir) = &scenario.output {
        write_run(&result, dir)?;
    }
    Ok(result)
}

/// Trajectory and controller log of one run, named by label and seed.
pub fn write_run(result: &RunResult, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    let p = dir.join(format!("trajectory_{}_{}.csv", result.label, result.seed));
    result.trajectory.write_csv(&p)?;
    out.push(p);
    if let Some(log) = &result.controller_log {
        let p = dir.join(format!("controller_{}_{}.csv", result.label, result.seed));
        std::fs::write(&p, log).map_err(|e| Error::io(&p, e))?;
        out.push(p);
    }
    Ok(out)
}

/// Run the first configured controller of the given kind.
pub fn run_kind(scenario: &Scenario, kind: ControllerKind, seed: u64) -> Result<RunResult> {
    let index = scenario
        .controllers
        .iter()
        .position(|c| c.kind == kind)
        .ok_or_else(|| Error::Config(format!("scenario has no {kind} controller")))?;
    run_scenario(scenario, index, seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedDeltas {
    pub seed: u64,
    /// `(a, b, survival_a − survival_b)` for every ordered pair `a` after `b`
    /// in the configuration order.
    pub deltas: Vec<(String, String, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub scenario: String,
    pub labels: Vec<String>,
    pub kinds: Vec<ControllerKind>,
    pub seeds: Vec<u64>,
    /// `results[seed_index][controller_index]`.
    pub results: Vec<Vec<RunResult>>,
}

impl ComparisonReport {
    pub fn mean_survival(&self) -> Vec<f64> {
        (0..self.labels.len())
            .map(|c| {
                let n = self.results.len().max(1) as f64;
                self.results.iter().map(|r| r[c].survival).sum::<f64>() / n
            })
            .collect()
    }

    pub fn deltas(&self) -> Vec<SeedDeltas> {
        self.results
            .iter()
            .zip(&self.seeds)
            .map(|(row, &seed)| {
                let mut deltas = Vec::new();
                for a in 0..row.len() {
                    for b in 0..a {
                        deltas.push((self.labels[a].clone(), self.labels[b].clone(), row[a].survival - row[b].survival));
                    }
                }
                SeedDeltas { seed, deltas }
            })
            .collect()
    }

    fn index_of(&self, kind: ControllerKind) -> Option<usize> {
        self.kinds.iter().position(|&k| k == kind)
    }

    /// Fraction of seeds with strictly increasing survival in the order
    /// RBC, MBC, VBC (over whichever of them are present).
    pub fn ordering_verdict(&self) -> f64 {
        let order: Vec<usize> = [ControllerKind::Rbc, ControllerKind::Mbc, ControllerKind::Vbc]
            .iter()
            .filter_map(|&k| self.index_of(k))
            .collect();
        if self.results.is_empty() || order.len() < 2 {
            return 0.0;
        }
        let good = self
            .results
            .iter()
            .filter(|row| order.windows(2).all(|w| row[w[1]].survival > row[w[0]].survival))
            .count();
        good as f64 / self.results.len() as f64
    }

    /// Same as [`Self::ordering_verdict`] on load increase at collapse.
    pub fn load_ordering_verdict(&self) -> f64 {
        let order: Vec<usize> = [ControllerKind::Rbc, ControllerKind::Mbc, ControllerKind::Vbc]
            .iter()
            .filter_map(|&k| self.index_of(k))
            .collect();
        if self.results.is_empty() || order.len() < 2 {
            return 0.0;
        }
        let good = self
            .results
            .iter()
            .filter(|row| order.windows(2).all(|w| row[w[1]].load_increase > row[w[0]].load_increase))
            .count();
        good as f64 / self.results.len() as f64
    }
}

/// Every configured controller on every seed; each seed's realization is
/// generated once and shared by all controllers.
pub fn compare_controllers(scenario: &Scenario, exec: Execution) -> Result<ComparisonReport> {
    if scenario.controllers.len() < 2 {
        return Err(Error::Config("comparison needs at least two controllers".into()));
    }
    let net = scenario.network()?;
    let labels = controller_labels(&scenario.controllers);
    let noises = exec::map(exec, &scenario.seeds, |&seed| scenario.noise(&net, seed))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = (0..noises.len())
        .flat_map(|s| (0..scenario.controllers.len()).map(move |c| (s, c)))
        .collect();
    let flat = exec::map(exec, &jobs, |&(s, c)| {
        run_with_noise(scenario, &net, Some(&scenario.controllers[c]), &labels[c], &noises[s])
    });
    let mut results: Vec<Vec<RunResult>> = vec![Vec::new(); noises.len()];
    for ((s, _), r) in jobs.iter().zip(flat) {
        results[*s].push(r?);
    }
    Ok(ComparisonReport {
        scenario: scenario.name.clone(),
        labels,
        kinds: scenario.controllers.iter().map(|c| c.kind).collect(),
        seeds: scenario.seeds.clone(),
        results,
    })
}

pub const RESULTS_HEADER: &str = "seed,controller,collapse_time,survival,load_increase_pct,final_b_svc";
pub const SERIES_HEADER: &str = "seed,controller,t,series,value";

/// Per-run results table.
pub fn results_csv(report: &ComparisonReport) -> String {
    let mut out = format!("{RESULTS_HEADER}\n");
    for row in &report.results {
        for r in row {
            let ct = r.collapse_time.map(|t| t.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.seed, r.label, ct, r.survival, r.load_increase, r.final_b_svc
            );
        }
    }
    out
}

/// Long-format time series: load, SVC susceptance and every bus magnitude.
pub fn series_csv(report: &ComparisonReport) -> String {
    let mut out = format!("{SERIES_HEADER}\n");
    for row in &report.results {
        for r in row {
            let tr = &r.trajectory;
            for smp in &tr.samples {
                let _ = writeln!(out, "{},{},{},p_load,{}", r.seed, r.label, smp.t, smp.p_load);
                let _ = writeln!(out, "{},{},{},q_load,{}", r.seed, r.label, smp.t, smp.q_load);
                let _ = writeln!(out, "{},{},{},b_svc,{}", r.seed, r.label, smp.t, smp.b_svc);
                for (id, v) in tr.bus_ids.iter().zip(&smp.magnitudes) {
                    let _ = writeln!(out, "{},{},{},v_{id},{v}", r.seed, r.label, smp.t);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub scenario: String,
    pub controllers: Vec<String>,
    pub seeds: Vec<u64>,
    pub mean_survival: Vec<f64>,
    pub ordering_verdict: f64,
    pub load_ordering_verdict: f64,
    pub deltas: Vec<SummaryDelta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryDelta {
    pub seed: u64,
    pub a: String,
    pub b: String,
    pub survival_delta: f64,
}

pub fn summary(report: &ComparisonReport) -> ReportSummary {
    ReportSummary {
        scenario: report.scenario.clone(),
        controllers: report.labels.clone(),
        seeds: report.seeds.clone(),
        mean_survival: report.mean_survival(),
        ordering_verdict: report.ordering_verdict(),
        load_ordering_verdict: report.load_ordering_verdict(),
        deltas: report
            .deltas()
            .into_iter()
            .flat_map(|d| {
                d.deltas.into_iter().map(move |(a, b, v)| SummaryDelta {
                    seed: d.seed,
                    a,
                    b,
                    survival_delta: v,
                })
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    /// Results table and summary only.
    #[default]
    Summary,
    /// Also the long-format series, trajectories and controller logs.
    Full,
}

/// Write `results.csv`, `summary.json` and, for the full format,
/// `series.csv` plus one trajectory and controller log per run.
pub fn export_report(report: &ComparisonReport, dir: impl AsRef<Path>, format: ReportFormat) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        written.push(p);
        Ok(())
    };
    put("results.csv".into(), results_csv(report))?;
    put(
        "summary.json".into(),
        serde_json::to_string_pretty(&summary(report)).expect("summary serializes"),
    )?;
    if format == ReportFormat::Full {
        put("series.csv".into(), series_csv(report))?;
        for row in &report.results {
            for r in row {
                written.extend(write_run(r, dir)?);
            }
        }
    }
    Ok(written)
}

/// One parsed line of `results.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub seed: u64,
    pub controller: String,
    pub collapse_time: Option<f64>,
    pub survival: f64,
    pub load_increase: f64,
    pub final_b_svc: f64,
}

pub fn parse_results_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(RESULTS_HEADER) {
        return Err(Error::schema("results.csv", "unexpected header"));
    }
    let num = |s: &str, line: usize| {
        s.parse::<f64>()
            .map_err(|_| Error::schema(format!("results.csv line {line}"), format!("bad number `{s}`")))
    };
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(Error::schema(format!("results.csv line {}", i + 2), "expected 6 fields"));
            }
            Ok(ResultRow {
                seed: f[0]
                    .parse()
                    .map_err(|_| Error::schema(format!("results.csv line {}", i + 2), "bad seed"))?,
                controller: f[1].to_string(),
                collapse_time: if f[2].is_empty() { None } else { Some(num(f[2], i + 2)?) },
                survival: num(f[3], i + 2)?,
                load_increase: num(f[4], i + 2)?,
                final_b_svc: num(f[5], i + 2)?,
            })
        })
        .collect()
}

/// Read back a report directory's summary.
pub fn read_summary(dir: impl AsRef<Path>) -> Result<ReportSummary> {
    let p = dir.as_ref().join("summary.json");
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| Error::schema(p.display().to_string(), e.to_string()))
}
