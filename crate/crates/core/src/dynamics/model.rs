//! Differential-algebraic model of the network with its machines.
//!
//! Angles are measured in a frame that turns with the reference machine's
//! rotor, so that machine contributes no angle state and a uniform rotation
//! of every angle is not a free direction of the model.
//!
//! Differential states per machine: `δ` (omitted for the reference machine),
//! `ω`, `e'q`, `e'd`, AVR `v_m`, `v_r`, `e_fd`, `r_f`, governor `p_sv`, `p_ch`,
//! `p_rh`. Algebraic variables: every bus angle, every bus magnitude, then
//! `(i_d, i_q)` per machine. Residual rows follow the same order: active
//! balance per bus, reactive balance per bus, then the two stator equations
//! per machine.

use num_complex::Complex64;

use super::machine::SystemMachine;
use crate::error::{Error, Result};
use crate::grid::{BusId, BusKind, Network};
use crate::linalg::{CMat, Mat, Vector};
use crate::powerflow::{self, GeneratorMode, PowerFlowOptions};

/// Nominal electrical speed, rad/s (60 Hz).
pub const OMEGA_S: f64 = 2.0 * std::f64::consts::PI * 60.0;

const N_MACHINE_STATES: usize = 10;

#[derive(Debug, Clone)]
struct Slot {
    bus: usize,
    delta: Option<usize>,
    /// Index of `ω`; the other nine states follow in order.
    base: usize,
}

impl Slot {
    fn omega(&self) -> usize {
        self.base
    }
    fn eq(&self) -> usize {
        self.base + 1
    }
    fn ed(&self) -> usize {
        self.base + 2
    }
    fn vm(&self) -> usize {
        self.base + 3
    }
    fn vr(&self) -> usize {
        self.base + 4
    }
    fn efd(&self) -> usize {
        self.base + 5
    }
    fn rf(&self) -> usize {
        self.base + 6
    }
    fn psv(&self) -> usize {
        self.base + 7
    }
    fn pch(&self) -> usize {
        self.base + 8
    }
    fn prh(&self) -> usize {
        self.base + 9
    }
}

/// Setpoints fixed by the equilibrium: AVR reference and governor load
/// reference per machine.
#[derive(Debug, Clone, PartialEq)]
pub struct Setpoints {
    pub v_ref: Vec<f64>,
    pub p_ref: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DaeSystem {
    network: Network,
    machines: Vec<SystemMachine>,
    slots: Vec<Slot>,
    reference: usize,
    n_x: usize,
    y_bus: CMat,
    b_svc: f64,
    svc_pos: Option<usize>,
    base_loads: Vec<Complex64>,
    rates: Vec<f64>,
    /// Bus positions whose loads carry fast noise, in `u` order.
    noise_pos: Vec<usize>,
    setpoints: Setpoints,
}

/// A consistent `(x, y)` pair with the loading it was computed for.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatingPoint {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub s: f64,
    pub b_svc: f64,
}

/// Jacobian blocks at one point, plus the reduced state matrix.
#[derive(Debug, Clone)]
pub struct LinearizedSystem {
    pub fx: Mat,
    pub fy: Mat,
    pub gx: Mat,
    pub gy: Mat,
    pub gu: Mat,
    pub a_s: Mat,
}

/// Assemble the model for every machine in the network. Fast noise enters at
/// every bus with a nonzero base load unless `noise_buses` narrows it.
pub fn assemble_dae(network: &Network, noise_buses: Option<&[BusId]>) -> Result<DaeSystem> {
    let n = network.n_bus();
    let mut machine_at = vec![None; n];
    for (m, mm) in network.machines.iter().enumerate() {
        let pos = network.index_of(mm.bus)?;
        if network.buses[pos].kind == BusKind::Pq {
            return Err(Error::Machines(format!("machine at PQ bus {}", mm.bus)));
        }
        machine_at[pos] = Some(m);
    }
    for i in network.generator_indices() {
        if machine_at[i].is_none() {
            return Err(Error::Machines(format!(
                "generator bus {} has no machine model",
                network.buses[i].id
            )));
        }
    }
    let machines: Vec<SystemMachine> = network
        .machines
        .iter()
        .map(|m| m.on_system_base(network.base_mva))
        .collect();
    let ref_bus = network.reference_index();
    let reference = machine_at[ref_bus].expect("checked above");
    let mut slots = Vec::with_capacity(machines.len());
    let mut next = 0;
    for (m, mm) in network.machines.iter().enumerate() {
        let bus = network.index_of(mm.bus)?;
        let delta = if m == reference {
            None
        } else {
            next += 1;
            Some(next - 1)
        };
        slots.push(Slot { bus, delta, base: next });
        next += N_MACHINE_STATES;
    }
    let noise_pos = match noise_buses {
        Some(ids) => ids.iter().map(|&b| network.index_of(b)).collect::<Result<Vec<_>>>()?,
        None => network
            .buses
            .iter()
            .enumerate()
            .filter(|(_, b)| b.base_load.norm() > 0.0)
            .map(|(i, _)| i)
            .collect(),
    };
    let svc_pos = match &network.svc {
        Some(s) => Some(network.index_of(s.bus)?),
        None => None,
    };
    let m = machines.len();
    Ok(DaeSystem {
        y_bus: network.admittance(),
        base_loads: network.base_loads(),
        rates: network.loading_direction(),
        network: network.clone(),
        machines,
        slots,
        reference,
        n_x: next,
        b_svc: 0.0,
        svc_pos,
        noise_pos,
        setpoints: Setpoints {
            v_ref: vec![1.0; m],
            p_ref: vec![0.0; m],
        },
    })
}

impl DaeSystem {
    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_y(&self) -> usize {
        2 * self.network.n_bus() + 2 * self.machines.len()
    }

    pub fn n_u(&self) -> usize {
        self.noise_pos.len()
    }

    pub fn n_bus(&self) -> usize {
        self.network.n_bus()
    }

    pub fn noise_positions(&self) -> &[usize] {
        &self.noise_pos
    }

    pub fn noise_buses(&self) -> Vec<BusId> {
        self.noise_pos.iter().map(|&i| self.network.buses[i].id).collect()
    }

    pub fn setpoints(&self) -> &Setpoints {
        &self.setpoints
    }

    pub fn set_setpoints(&mut self, sp: Setpoints) {
        self.setpoints = sp;
    }

    pub fn svc_position(&self) -> Option<usize> {
        self.svc_pos
    }

    pub fn b_svc(&self) -> f64 {
        self.b_svc
    }

    /// Replace the SVC susceptance (p.u.) in the bus admittance matrix.
    pub fn set_svc(&mut self, b: f64) -> Result<()> {
        let pos = self
            .svc_pos
            .ok_or_else(|| Error::Config("case has no SVC bus".into()))?;
        self.y_bus[(pos, pos)] += Complex64::new(0.0, b - self.b_svc);
        self.b_svc = b;
        Ok(())
    }

    /// `S_0 (1 + s k)(1 + u)` per bus; `u` is indexed like the noise buses.
    pub fn loads(&self, s: f64, u: &[f64]) -> Vec<Complex64> {
        let mut out: Vec<Complex64> = self
            .base_loads
            .iter()
            .zip(&self.rates)
            .map(|(b, k)| b * (1.0 + s * k))
            .collect();
        for (j, &pos) in self.noise_pos.iter().enumerate() {
            if let Some(uj) = u.get(j) {
                out[pos] *= 1.0 + uj;
            }
        }
        out
    }

    fn delta(&self, m: usize, x: &[f64]) -> f64 {
        self.slots[m].delta.map_or(0.0, |i| x[i])
    }

    fn current_idx(&self, m: usize) -> (usize, usize) {
        let n = self.n_bus();
        (2 * n + 2 * m, 2 * n + 2 * m + 1)
    }

    /// Complex bus voltages from `y`.
    pub fn bus_voltages(&self, y: &[f64]) -> Vec<Complex64> {
        let n = self.n_bus();
        (0..n).map(|i| Complex64::from_polar(y[n + i], y[i])).collect()
    }

    fn mechanical_power(&self, m: usize, x: &[f64]) -> f64 {
        let s = &self.slots[m];
        let f = self.machines[m].gov.fhp;
        f * x[s.pch()] + (1.0 - f) * x[s.prh()]
    }

    pub fn f(&self, x: &[f64], y: &[f64]) -> Vector {
        let mut out = Vector::zeros(self.n_x);
        let n = self.n_bus();
        let w_ref = x[self.slots[self.reference].omega()];
        for (m, (mc, s)) in self.machines.iter().zip(&self.slots).enumerate() {
            let (id, iq) = self.current_idx(m);
            let (i_d, i_q) = (y[id], y[iq]);
            let w = x[s.omega()];
            if let Some(d) = s.delta {
                out[d] = OMEGA_S * (w - w_ref);
            }
            let (eq, ed) = (x[s.eq()], x[s.ed()]);
            let te = ed * i_d + eq * i_q + (mc.xq1 - mc.xd1) * i_d * i_q;
            out[s.omega()] = (self.mechanical_power(m, x) - te - mc.d * (w - 1.0)) / (2.0 * mc.h);
            out[s.eq()] = (-eq - (mc.xd - mc.xd1) * i_d + x[s.efd()]) / mc.td01;
            out[s.ed()] = (-ed + (mc.xq - mc.xq1) * i_q) / mc.tq01;
            let a = &mc.avr;
            out[s.vm()] = (y[n + s.bus] - x[s.vm()]) / a.tr;
            out[s.vr()] = (-x[s.vr()] + a.ka * x[s.rf()] - a.ka * a.kf / a.tf * x[s.efd()]
                + a.ka * (self.setpoints.v_ref[m] - x[s.vm()]))
                / a.ta;
            out[s.efd()] = (-a.ke * x[s.efd()] + x[s.vr()]) / a.te;
            out[s.rf()] = (-x[s.rf()] + a.kf / a.tf * x[s.efd()]) / a.tf;
            let g = &mc.gov;
            out[s.psv()] = (-x[s.psv()] + self.setpoints.p_ref[m] - (w - 1.0) / g.r) / g.ts;
            out[s.pch()] = (-x[s.pch()] + x[s.psv()]) / g.tch;
            out[s.prh()] = (-x[s.prh()] + x[s.pch()]) / g.trh;
        }
        out
    }

    /// Algebraic residual for the given per-bus loads.
    pub fn g(&self, x: &[f64], y: &[f64], loads: &[Complex64]) -> Vector {
        let n = self.n_bus();
        let mut out = Vector::zeros(self.n_y());
        let v = self.bus_voltages(y);
        let s_net = powerflow::injections(&self.y_bus, &v);
        for i in 0..n {
            out[i] = -loads[i].re - s_net[i].re;
            out[n + i] = -loads[i].im - s_net[i].im;
        }
        for (m, (mc, s)) in self.machines.iter().zip(&self.slots).enumerate() {
            let (id, iq) = self.current_idx(m);
            let (i_d, i_q) = (y[id], y[iq]);
            let vm = y[n + s.bus];
            let phi = self.delta(m, x) - y[s.bus];
            let (sn, cs) = phi.sin_cos();
            out[s.bus] += i_d * vm * sn + i_q * vm * cs;
            out[n + s.bus] += i_d * vm * cs - i_q * vm * sn;
            out[id] = x[s.ed()] - vm * sn - mc.ra * i_d + mc.xq1 * i_q;
            out[iq] = x[s.eq()] - vm * cs - mc.ra * i_q - mc.xd1 * i_d;
        }
        out
    }

    /// Analytic `(f_x, f_y, g_x, g_y)`.
    pub fn jacobians(&self, x: &[f64], y: &[f64]) -> (Mat, Mat, Mat, Mat) {
        let n = self.n_bus();
        let (nx, ny) = (self.n_x, self.n_y());
        let mut fx = Mat::zeros(nx, nx);
        let mut fy = Mat::zeros(nx, ny);
        let mut gx = Mat::zeros(ny, nx);
        let mut gy = Mat::zeros(ny, ny);

        let v = self.bus_voltages(y);
        let (d_ang, d_mag) = powerflow::injection_sensitivities(&self.y_bus, &v);
        for i in 0..n {
            for k in 0..n {
                gy[(i, k)] = -d_ang[(i, k)].re;
                gy[(i, n + k)] = -d_mag[(i, k)].re;
                gy[(n + i, k)] = -d_ang[(i, k)].im;
                gy[(n + i, n + k)] = -d_mag[(i, k)].im;
            }
        }

        let w_ref_idx = self.slots[self.reference].omega();
        for (m, (mc, s)) in self.machines.iter().zip(&self.slots).enumerate() {
            let (id, iq) = self.current_idx(m);
            let (i_d, i_q) = (y[id], y[iq]);
            let b = s.bus;
            let vm = y[n + b];
            let phi = self.delta(m, x) - y[b];
            let (sn, cs) = phi.sin_cos();

            // injections at the machine bus
            let dp_dphi = i_d * vm * cs - i_q * vm * sn;
            let dq_dphi = -i_d * vm * sn - i_q * vm * cs;
            gy[(b, b)] -= dp_dphi;
            gy[(n + b, b)] -= dq_dphi;
            gy[(b, n + b)] += i_d * sn + i_q * cs;
            gy[(n + b, n + b)] += i_d * cs - i_q * sn;
            gy[(b, id)] = vm * sn;
            gy[(b, iq)] = vm * cs;
            gy[(n + b, id)] = vm * cs;
            gy[(n + b, iq)] = -vm * sn;
            // stator
            gy[(id, b)] = vm * cs;
            gy[(id, n + b)] = -sn;
            gy[(id, id)] = -mc.ra;
            gy[(id, iq)] = mc.xq1;
            gy[(iq, b)] = -vm * sn;
            gy[(iq, n + b)] = -cs;
            gy[(iq, id)] = -mc.xd1;
            gy[(iq, iq)] = -mc.ra;
            gx[(id, s.ed())] = 1.0;
            gx[(iq, s.eq())] = 1.0;
            if let Some(d) = s.delta {
                gx[(b, d)] = dp_dphi;
                gx[(n + b, d)] = dq_dphi;
                gx[(id, d)] = -vm * cs;
                gx[(iq, d)] = vm * sn;
                fx[(d, s.omega())] += OMEGA_S;
                fx[(d, w_ref_idx)] -= OMEGA_S;
            }

            let h2 = 2.0 * mc.h;
            let (eq, ed) = (x[s.eq()], x[s.ed()]);
            let f = mc.gov.fhp;
            fx[(s.omega(), s.pch())] = f / h2;
            fx[(s.omega(), s.prh())] = (1.0 - f) / h2;
            fx[(s.omega(), s.omega())] = -mc.d / h2;
            fx[(s.omega(), s.ed())] = -i_d / h2;
            fx[(s.omega(), s.eq())] = -i_q / h2;
            fy[(s.omega(), id)] = -(ed + (mc.xq1 - mc.xd1) * i_q) / h2;
            fy[(s.omega(), iq)] = -(eq + (mc.xq1 - mc.xd1) * i_d) / h2;

            fx[(s.eq(), s.eq())] = -1.0 / mc.td01;
            fx[(s.eq(), s.efd())] = 1.0 / mc.td01;
            fy[(s.eq(), id)] = -(mc.xd - mc.xd1) / mc.td01;
            fx[(s.ed(), s.ed())] = -1.0 / mc.tq01;
            fy[(s.ed(), iq)] = (mc.xq - mc.xq1) / mc.tq01;

            let a = &mc.avr;
            fx[(s.vm(), s.vm())] = -1.0 / a.tr;
            fy[(s.vm(), n + b)] = 1.0 / a.tr;
            fx[(s.vr(), s.vr())] = -1.0 / a.ta;
            fx[(s.vr(), s.rf())] = a.ka / a.ta;
            fx[(s.vr(), s.efd())] = -a.ka * a.kf / (a.tf * a.ta);
            fx[(s.vr(), s.vm())] = -a.ka / a.ta;
            fx[(s.efd(), s.efd())] = -a.ke / a.te;
            fx[(s.efd(), s.vr())] = 1.0 / a.te;
            fx[(s.rf(), s.rf())] = -1.0 / a.tf;
            fx[(s.rf(), s.efd())] = a.kf / (a.tf * a.tf);

            let g = &mc.gov;
            fx[(s.psv(), s.psv())] = -1.0 / g.ts;
            fx[(s.psv(), s.omega())] = -1.0 / (g.r * g.ts);
            fx[(s.pch(), s.pch())] = -1.0 / g.tch;
            fx[(s.pch(), s.psv())] = 1.0 / g.tch;
            fx[(s.prh(), s.prh())] = -1.0 / g.trh;
            fx[(s.prh(), s.pch())] = 1.0 / g.trh;
        }
        (fx, fy, gx, gy)
    }

    /// Sensitivity of `g` to the fast load noise at loading `s`.
    pub fn g_u(&self, s: f64) -> Mat {
        let n = self.n_bus();
        let loads = self.loads(s, &[]);
        let mut gu = Mat::zeros(self.n_y(), self.n_u());
        for (j, &pos) in self.noise_pos.iter().enumerate() {
            gu[(pos, j)] = -loads[pos].re;
            gu[(n + pos, j)] = -loads[pos].im;
        }
        gu
    }

    pub fn linearize(&self, point: &OperatingPoint) -> Result<LinearizedSystem> {
        let (fx, fy, gx, gy) = self.jacobians(&point.x, &point.y);
        let lu = gy.clone().lu();
        let gy_inv_gx = lu.solve(&gx).ok_or(Error::AlgebraicSingularity)?;
        if gy_inv_gx.iter().any(|v| !v.is_finite()) {
            return Err(Error::AlgebraicSingularity);
        }
        let a_s = &fx - &fy * gy_inv_gx;
        Ok(LinearizedSystem {
            gu: self.g_u(point.s),
            fx,
            fy,
            gx,
            gy,
            a_s,
        })
    }

    /// Static power flow at loading `s` with generator voltages frozen at the
    /// base case, then machine and control states back-solved so that every
    /// derivative vanishes with `ω = 1`. Stores the AVR and governor
    /// references this implies.
    pub fn find_equilibrium(&mut self, s: f64) -> Result<OperatingPoint> {
        let mut net = self.network.clone();
        if let Some(pos) = self.svc_pos {
            let id = net.buses[pos].id;
            net = net.set_shunt(id, self.b_svc)?;
        }
        let opts = PowerFlowOptions::default();
        let base = powerflow::solve_base(&net).map_err(|e| Error::Equilibrium(format!("base case: {e}")))?;
        let sol = if s == 0.0 {
            base
        } else {
            powerflow::solve_newton(
                &net,
                &self.loads(s, &[]),
                &base.voltages,
                &GeneratorMode::FixedPhasor(base.voltages.clone()),
                &opts,
            )
            .map_err(|e| Error::Equilibrium(format!("loading s = {s}: {e}")))?
        };
        let n = self.n_bus();
        let loads = self.loads(s, &[]);
        let mut x = vec![0.0; self.n_x];
        let mut y = vec![0.0; self.n_y()];
        let mut v_ref = vec![0.0; self.machines.len()];
        let mut p_ref = vec![0.0; self.machines.len()];

        // Rotor angles first, in the power-flow frame.
        let mut internal = Vec::with_capacity(self.machines.len());
        for (mc, s) in self.machines.iter().zip(&self.slots) {
            let v = sol.voltages[s.bus];
            let gen = sol.injections[s.bus] + loads[s.bus];
            let i = (gen / v).conj();
            let e_q = v + Complex64::new(mc.ra, mc.xq) * i;
            internal.push((v, i, e_q.arg()));
        }
        let frame = internal[self.reference].2;
        for i in 0..n {
            y[i] = sol.voltages[i].arg() - frame;
            y[n + i] = sol.voltages[i].norm();
        }
        for (m, (mc, s)) in self.machines.iter().zip(&self.slots).enumerate() {
            let (v, i, delta) = internal[m];
            let rot = Complex64::from_polar(1.0, -(delta - std::f64::consts::FRAC_PI_2));
            let vdq = v * rot;
            let idq = i * rot;
            let (vd, vq, i_d, i_q) = (vdq.re, vdq.im, idq.re, idq.im);
            let ed = vd + mc.ra * i_d - mc.xq1 * i_q;
            let eq = vq + mc.ra * i_q + mc.xd1 * i_d;
            let efd = eq + (mc.xd - mc.xd1) * i_d;
            let (id_idx, iq_idx) = self.current_idx(m);
            y[id_idx] = i_d;
            y[iq_idx] = i_q;
            if let Some(d) = s.delta {
                x[d] = delta - frame;
            }
            x[s.omega()] = 1.0;
            x[s.eq()] = eq;
            x[s.ed()] = ed;
            let a = &mc.avr;
            x[s.vm()] = v.norm();
            x[s.efd()] = efd;
            x[s.vr()] = a.ke * efd;
            x[s.rf()] = a.kf / a.tf * efd;
            v_ref[m] = v.norm() + a.ke * efd / a.ka;
            let pm = ed * i_d + eq * i_q + (mc.xq1 - mc.xd1) * i_d * i_q;
            x[s.psv()] = pm;
            x[s.pch()] = pm;
            x[s.prh()] = pm;
            p_ref[m] = pm;
        }
        self.setpoints = Setpoints { v_ref, p_ref };
        let point = OperatingPoint {
            x,
            y,
            s,
            b_svc: self.b_svc,
        };
        let fr = crate::linalg::inf_norm(self.f(&point.x, &point.y).as_slice());
        let gr = crate::linalg::inf_norm(self.g(&point.x, &point.y, &loads).as_slice());
        if fr > 1e-9 || gr > 1e-9 {
            return Err(Error::Equilibrium(format!(
                "back-solved point is not stationary (|f| = {fr:.2e}, |g| = {gr:.2e})"
            )));
        }
        Ok(point)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_reduces_to_power_flow_residual() {
        let net = Network::bundled("threebus").unwrap();
        let dae = assemble_dae(&net, None).unwrap();
        let loads_a = dae.loads(0.1, &[]);
        let loads_b = dae.loads(0.1, &vec![0.0; dae.n_u()]);
        assert_eq!(loads_a, loads_b);
        let expected = net.scaled_loads(0.1, &net.loading_direction());
        for (a, b) in loads_a.iter().zip(&expected) {
            assert!((a - b).norm() < 1e-15);
        }
    }

    #[test]
    fn svc_update_is_reversible() {
        let net = Network::bundled("threebus").unwrap();
        let mut dae = assemble_dae(&net, None).unwrap();
        let y0 = dae.y_bus.clone();
        dae.set_svc(0.7).unwrap();
        dae.set_svc(0.0).unwrap();
        assert!((dae.y_bus.clone() - y0).norm() < 1e-15);
        let mut no_svc = assemble_dae(&Network::bundled("ieee39").unwrap(), None).unwrap();
        assert!(no_svc.set_svc(1.0).is_err());
    }

    #[test]
    fn g_u_touches_only_load_balance_rows() {
        let net = Network::bundled("ieee39").unwrap();
        let dae = assemble_dae(&net, None).unwrap();
        let gu = dae.g_u(0.3);
        let n = dae.n_bus();
        for r in 0..gu.nrows() {
            for c in 0..gu.ncols() {
                if gu[(r, c)] != 0.0 {
                    let pos = dae.noise_positions()[c];
                    assert!(r == pos || r == n + pos);
                }
            }
        }
    }
}
