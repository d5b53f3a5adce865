//! Generator, exciter and governor constants.
//!
//! Case files carry these on the machine's own MVA rating; [`MachineModel::on_system_base`]
//! converts impedances, inertia, damping and droop to the network base.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// IEEE Type-I style exciter with measurement lag and rate feedback.
///
/// States: measured voltage `v_m`, regulator output `v_r`, field voltage
/// `e_fd`, rate-feedback signal `r_f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AvrParams {
    pub ka: f64,
    pub ta: f64,
    pub ke: f64,
    pub te: f64,
    pub kf: f64,
    pub tf: f64,
    pub tr: f64,
}

/// Droop governor with servo, steam chest and reheater lags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GovernorParams {
    /// Permanent droop, p.u. speed per p.u. power (machine base).
    pub r: f64,
    pub ts: f64,
    pub tch: f64,
    pub trh: f64,
    /// High-pressure turbine power fraction.
    pub fhp: f64,
}

/// Two-axis synchronous machine with its controls, as written in case files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachineModel {
    pub bus: u32,
    /// Rating in MVA; all per-unit constants below are on this base.
    pub mva: f64,
    /// Scheduled active power in MW (PV-bus dispatch for the static power flow).
    pub p_gen: f64,
    pub h: f64,
    pub d: f64,
    pub xd: f64,
    pub xq: f64,
    pub xd1: f64,
    pub xq1: f64,
    pub td01: f64,
    pub tq01: f64,
    #[serde(default)]
    pub ra: f64,
    pub avr: AvrParams,
    pub gov: GovernorParams,
}

/// Machine constants converted to the system base.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemMachine {
    pub bus: u32,
    pub h: f64,
    pub d: f64,
    pub xd: f64,
    pub xq: f64,
    pub xd1: f64,
    pub xq1: f64,
    pub td01: f64,
    pub tq01: f64,
    pub ra: f64,
    pub avr: AvrParams,
    pub gov: GovernorParams,
}

impl MachineModel {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mva", self.mva),
            ("h", self.h),
            ("xd", self.xd),
            ("xq", self.xq),
            ("xd1", self.xd1),
            ("xq1", self.xq1),
            ("td01", self.td01),
            ("tq01", self.tq01),
            ("avr.ta", self.avr.ta),
            ("avr.te", self.avr.te),
            ("avr.tf", self.avr.tf),
            ("avr.tr", self.avr.tr),
            ("avr.ka", self.avr.ka),
            ("gov.r", self.gov.r),
            ("gov.ts", self.gov.ts),
            ("gov.tch", self.gov.tch),
            ("gov.trh", self.gov.trh),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Machines(format!(
                    "machine at bus {}: `{name}` must be positive, got {v}",
                    self.bus
                )));
            }
        }
        if self.d < 0.0 || self.ra < 0.0 || self.avr.kf < 0.0 || self.avr.ke < 0.0 {
            return Err(Error::Machines(format!(
                "machine at bus {}: negative damping, resistance or feedback gain",
                self.bus
            )));
        }
        if !(0.0..=1.0).contains(&self.gov.fhp) {
            return Err(Error::Machines(format!(
                "machine at bus {}: gov.fhp must lie in [0, 1]",
                self.bus
            )));
        }
        Ok(())
    }

    pub fn on_system_base(&self, base_mva: f64) -> SystemMachine {
        let z = base_mva / self.mva;
        let m = self.mva / base_mva;
        SystemMachine {
            bus: self.bus,
            h: self.h * m,
            d: self.d * m,
            xd: self.xd * z,
            xq: self.xq * z,
            xd1: self.xd1 * z,
            xq1: self.xq1 * z,
            td01: self.td01,
            tq01: self.tq01,
            ra: self.ra * z,
            avr: self.avr.clone(),
            gov: GovernorParams {
                r: self.gov.r * z,
                ..self.gov.clone()
            },
        }
    }
}
