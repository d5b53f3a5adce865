//! Time-domain integration with collapse detection.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::LU;
use nalgebra::Dyn;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::model::{DaeSystem, OperatingPoint};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::stochastic::NoiseRealization;

/// Phasor measurement pattern at a 100 Hz integration rate: samples land 3,
/// 3 and 4 steps apart, giving 30 samples per second.
const SAMPLE_PATTERN: [usize; 3] = [3, 3, 4];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegrationOptions {
    pub dt: f64,
    pub newton_tolerance: f64,
    pub max_newton: usize,
    /// Condition number of `g_y` above which the run is declared collapsed.
    pub cond_limit: f64,
    /// Integration steps per control window.
    pub window_steps: usize,
    /// Keep every n-th step in the recorded trajectory.
    pub decimation: usize,
}

impl Default for IntegrationOptions {
    fn default() -> Self {
        Self {
            dt: 0.01,
            newton_tolerance: 1e-8,
            max_newton: 25,
            cond_limit: 1e10,
            window_steps: 300,
            decimation: 10,
        }
    }
}

impl IntegrationOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || self.max_newton == 0 || self.window_steps == 0 || self.decimation == 0 {
            return Err(Error::Config("integration options must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CollapseTrigger {
    /// Newton on the step equations ran out of iterations.
    NonConvergence { mismatch: f64 },
    /// The algebraic Jacobian became numerically singular.
    IllConditioned { cond: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollapseReport {
    pub time: f64,
    pub s: f64,
    pub b_svc: f64,
    pub trigger: CollapseTrigger,
    /// Last algebraic state that satisfied the step equations.
    pub last_y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySample {
    pub t: f64,
    pub s: f64,
    pub b_svc: f64,
    pub magnitudes: Vec<f64>,
    pub angles: Vec<f64>,
    /// Total system load including noise, p.u.
    pub p_load: f64,
    pub q_load: f64,
}

/// Phasor-rate samples handed to a controller at the end of each window.
#[derive(Debug, Clone)]
pub struct WindowData<'a> {
    pub index: usize,
    pub t: f64,
    pub s: f64,
    pub b_svc: f64,
    pub times: &'a [f64],
    /// `magnitudes[k][i]`: voltage magnitude of bus position `i` at sample `k`.
    pub magnitudes: &'a [Vec<f64>],
    pub point: &'a OperatingPoint,
}

/// Called at every window boundary; a returned value becomes the new SVC
/// susceptance (p.u.).
pub trait WindowController {
    fn on_window(&mut self, dae: &DaeSystem, window: &WindowData<'_>) -> Result<Option<f64>>;
}

/// Leaves the SVC untouched.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoController;

impl WindowController for NoController {
    fn on_window(&mut self, _: &DaeSystem, _: &WindowData<'_>) -> Result<Option<f64>> {
        Ok(None)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub bus_ids: Vec<u32>,
    pub samples: Vec<TrajectorySample>,
    pub collapse: Option<CollapseReport>,
    pub final_point: OperatingPoint,
    pub steps: usize,
    pub factorizations: usize,
}

impl Trajectory {
    pub fn collapse_time(&self) -> Option<f64> {
        self.collapse.as_ref().map(|c| c.time)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,s,b_svc,p_load,q_load");
        for id in &self.bus_ids {
            let _ = write!(out, ",v_{id}");
        }
        for id in &self.bus_ids {
            let _ = write!(out, ",theta_{id}");
        }
        out.push('\n');
        for smp in &self.samples {
            let _ = write!(out, "{},{},{},{},{}", smp.t, smp.s, smp.b_svc, smp.p_load, smp.q_load);
            for v in smp.magnitudes.iter().chain(&smp.angles) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

struct Stepper<'a> {
    dae: &'a DaeSystem,
    opts: &'a IntegrationOptions,
    nx: usize,
    ny: usize,
    lu: Option<LU<f64, Dyn, Dyn>>,
    factorizations: usize,
}

enum StepOutcome {
    Ok { x: Vec<f64>, y: Vec<f64> },
    Collapse(CollapseTrigger),
}

impl Stepper<'_> {
    fn refactor(&mut self, x: &[f64], y: &[f64], h: f64) -> Option<CollapseTrigger> {
        let (fx, fy, gx, gy) = self.dae.jacobians(x, y);
        let cond = linalg::cond1(&gy);
        if !(cond <= self.opts.cond_limit) {
            return Some(CollapseTrigger::IllConditioned { cond });
        }
        let n = self.nx + self.ny;
        let mut j = Mat::zeros(n, n);
        let hh = 0.5 * h;
        j.view_mut((0, 0), (self.nx, self.nx)).copy_from(&(Mat::identity(self.nx, self.nx) - fx * hh));
        j.view_mut((0, self.nx), (self.nx, self.ny)).copy_from(&(fy * -hh));
        j.view_mut((self.nx, 0), (self.ny, self.nx)).copy_from(&gx);
        j.view_mut((self.nx, self.nx), (self.ny, self.ny)).copy_from(&gy);
        self.lu = Some(j.lu());
        self.factorizations += 1;
        None
    }

    /// One trapezoidal step from `(x0, y0)` with loads at the new instant.
    /// A step size of zero re-solves only the algebraic equations.
    fn step(&mut self, x0: &[f64], y0: &[f64], loads: &[Complex64], h: f64) -> StepOutcome {
        let (nx, ny) = (self.nx, self.ny);
        let f0 = self.dae.f(x0, y0);
        let mut x = x0.to_vec();
        let mut y = y0.to_vec();
        let mut refactored = false;
        // Newton iterations since the factorization in use was computed.
        let mut age = 0;
        let mut prev = f64::INFINITY;
        let mut last = f64::INFINITY;
        for _ in 0..=self.opts.max_newton {
            let f1 = self.dae.f(&x, &y);
            let g1 = self.dae.g(&x, &y, loads);
            let mut r = Vector::zeros(nx + ny);
            for i in 0..nx {
                r[i] = x[i] - x0[i] - 0.5 * h * (f0[i] + f1[i]);
            }
            r.rows_mut(nx, ny).copy_from(&g1);
            let norm = linalg::inf_norm(r.as_slice());
            last = norm;
            if norm < self.opts.newton_tolerance {
                return StepOutcome::Ok { x, y };
            }
            if !norm.is_finite() {
                break;
            }
            let slow = norm > 0.25 * prev;
            if self.lu.is_none() || (age > 0 && slow) || age >= 4 {
                if let Some(t) = self.refactor(&x, &y, h) {
                    return StepOutcome::Collapse(t);
                }
                refactored = true;
                age = 0;
            }
            age += 1;
            prev = norm;
            let lu = self.lu.as_ref().expect("factorized above");
            let Some(dz) = lu.solve(&(-r)) else {
                break;
            };
            for i in 0..nx {
                x[i] += dz[i];
            }
            for i in 0..ny {
                y[i] += dz[nx + i];
            }
        }
        // A stale factorization may be all that failed; retry once from scratch.
        if !refactored {
            self.lu = None;
            return self.step(x0, y0, loads, h);
        }
        StepOutcome::Collapse(CollapseTrigger::NonConvergence { mismatch: last })
    }
}

/// Integrate from `start` across the full noise realization, or until
/// collapse. The slow component of `noise` is the loading factor at each
/// step; its fast component must cover the model's noise buses in order.
pub fn integrate(
    dae: &mut DaeSystem,
    start: &OperatingPoint,
    noise: &NoiseRealization,
    opts: &IntegrationOptions,
    controller: &mut dyn WindowController,
) -> Result<Trajectory> {
    opts.validate()?;
    if (noise.dt - opts.dt).abs() > 1e-12 * opts.dt {
        return Err(Error::Config(format!(
            "noise step {} differs from integration step {}",
            noise.dt, opts.dt
        )));
    }
    if noise.buses != dae.noise_buses() {
        return Err(Error::Config(format!(
            "noise buses {:?} do not match model load buses {:?}",
            noise.buses,
            dae.noise_buses()
        )));
    }
    if start.x.len() != dae.n_x() || start.y.len() != dae.n_y() {
        return Err(Error::Config("start point has the wrong dimension".into()));
    }
    let n = dae.n_bus();
    let bus_ids: Vec<u32> = dae.network().buses.iter().map(|b| b.id).collect();
    let h = opts.dt;
    let mut x = start.x.clone();
    let mut y = start.y.clone();
    let mut samples = Vec::new();
    let mut win_times = Vec::with_capacity(128);
    let mut win_mags: Vec<Vec<f64>> = Vec::with_capacity(128);
    let mut next_sample = SAMPLE_PATTERN[0];
    let mut pattern_pos = 0;
    let mut window_index = 0;
    let mut factorizations = 0;
    let mut lu = None;
    let mut collapse = None;

    let record = |k: usize, y: &[f64], dae: &DaeSystem, out: &mut Vec<TrajectorySample>| {
        let loads = dae.loads(noise.slow[k], &noise.fast[k]);
        out.push(TrajectorySample {
            t: k as f64 * h,
            s: noise.slow[k],
            b_svc: dae.b_svc(),
            magnitudes: y[n..2 * n].to_vec(),
            angles: y[..n].to_vec(),
            p_load: loads.iter().map(|l| l.re).sum(),
            q_load: loads.iter().map(|l| l.im).sum(),
        });
    };
    record(0, &y, dae, &mut samples);

    let total = noise.n_steps();
    let mut steps = 0;
    for k in 0..total {
        let loads = dae.loads(noise.slow[k + 1], &noise.fast[k + 1]);
        let mut stepper = Stepper {
            dae,
            opts,
            nx: x.len(),
            ny: y.len(),
            lu: lu.take(),
            factorizations: 0,
        };
        let outcome = stepper.step(&x, &y, &loads, h);
        factorizations += stepper.factorizations;
        lu = stepper.lu.take();
        let t1 = (k + 1) as f64 * h;
        match outcome {
            StepOutcome::Ok { x: x1, y: y1 } => {
                x = x1;
                y = y1;
            }
            StepOutcome::Collapse(trigger) => {
                collapse = Some(CollapseReport {
                    time: t1,
                    s: noise.slow[k + 1],
                    b_svc: dae.b_svc(),
                    trigger,
                    last_y: y.clone(),
                });
                break;
            }
        }
        steps = k + 1;
        if steps % opts.decimation == 0 {
            record(steps, &y, dae, &mut samples);
        }
        if steps == next_sample {
            win_times.push(t1);
            win_mags.push(y[n..2 * n].to_vec());
            pattern_pos = (pattern_pos + 1) % SAMPLE_PATTERN.len();
            next_sample += SAMPLE_PATTERN[pattern_pos];
        }
        if steps % opts.window_steps == 0 {
            let point = OperatingPoint {
                x: x.clone(),
                y: y.clone(),
                s: noise.slow[steps],
                b_svc: dae.b_svc(),
            };
            let data = WindowData {
                index: window_index,
                t: t1,
                s: noise.slow[steps],
                b_svc: dae.b_svc(),
                times: &win_times,
                magnitudes: &win_mags,
                point: &point,
            };
            let update = controller.on_window(dae, &data)?;
            window_index += 1;
            win_times.clear();
            win_mags.clear();
            if let Some(b) = update {
                if b != dae.b_svc() {
                    dae.set_svc(b)?;
                    lu = None;
                    let mut stepper = Stepper {
                        dae,
                        opts,
                        nx: x.len(),
                        ny: y.len(),
                        lu: None,
                        factorizations: 0,
                    };
                    let outcome = stepper.step(&x, &y, &loads, 0.0);
                    factorizations += stepper.factorizations;
                    match outcome {
                        StepOutcome::Ok { y: y1, .. } => y = y1,
                        StepOutcome::Collapse(trigger) => {
                            collapse = Some(CollapseReport {
                                time: t1,
                                s: noise.slow[steps],
                                b_svc: dae.b_svc(),
                                trigger,
                                last_y: y.clone(),
                            });
                            break;
                        }
                    }
                }
            }
        }
    }
    Ok(Trajectory {
        bus_ids,
        samples,
        collapse,
        final_point: OperatingPoint {
            s: noise.slow[steps],
            b_svc: dae.b_svc(),
            x,
            y,
        },
        steps,
        factorizations,
    })
}
