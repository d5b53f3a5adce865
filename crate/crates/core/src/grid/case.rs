//! Case documents: the on-disk JSON form of a [`Network`].
//!
//! Loads are given in MW / MVAr and bus shunts in MVAr at 1 p.u.; branch
//! impedances are already per-unit on `base_mva`. Everything is normalized to
//! per-unit when a document becomes a [`Network`].

use serde::{Deserialize, Serialize};

use super::{Branch, Bus, BusKind, Network, SvcSpec};
use crate::dynamics::machine::MachineModel;
use crate::error::{Error, Result};
use num_complex::Complex64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseDoc {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub name: String,
    pub base_mva: f64,
    pub buses: Vec<BusRecord>,
    pub branches: Vec<BranchRecord>,
    #[serde(default)]
    pub machines: Vec<MachineModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub svc: Option<SvcRecord>,
    /// Monitored load-pocket buses.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pocket: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusRecord {
    pub id: u32,
    pub kind: BusKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_set: Option<f64>,
    pub p_load: f64,
    pub q_load: f64,
    pub b_shunt: f64,
    pub k_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchRecord {
    pub from: u32,
    pub to: u32,
    pub r: f64,
    pub x: f64,
    pub b: f64,
    pub status: u8,
    /// Off-nominal turns ratio on the `from` side; 1.0 when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SvcRecord {
    pub bus: u32,
    /// Susceptance limits in MVAr at 1 p.u.
    pub b_min: f64,
    pub b_max: f64,
}

impl CaseDoc {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            Error::schema(
                format!("line {} column {}", e.line(), e.column()),
                e.to_string(),
            )
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("case documents always serialize")
    }

    pub fn into_network(self) -> Result<Network> {
        if !(self.base_mva > 0.0) {
            return Err(Error::schema("base_mva", "must be positive"));
        }
        if self.buses.is_empty() {
            return Err(Error::schema("buses", "bus list is empty"));
        }
        let base = self.base_mva;
        let buses = self
            .buses
            .iter()
            .enumerate()
            .map(|(i, b)| {
                for (field, v) in [
                    ("p_load", b.p_load),
                    ("q_load", b.q_load),
                    ("b_shunt", b.b_shunt),
                    ("k_rate", b.k_rate),
                ] {
                    if !v.is_finite() {
                        return Err(Error::schema(format!("buses[{i}].{field}"), "not finite"));
                    }
                }
                Ok(Bus {
                    id: b.id,
                    kind: b.kind,
                    voltage_setpoint: b.v_set,
                    base_load: Complex64::new(b.p_load / base, b.q_load / base),
                    shunt_susceptance: b.b_shunt / base,
                    loading_rate: b.k_rate,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let branches = self
            .branches
            .iter()
            .enumerate()
            .map(|(i, br)| {
                if br.status > 1 {
                    return Err(Error::schema(format!("branches[{i}].status"), "must be 0 or 1"));
                }
                let tap = br.tap.unwrap_or(1.0);
                if !(tap > 0.0) {
                    return Err(Error::schema(format!("branches[{i}].tap"), "must be positive"));
                }
                let z = Complex64::new(br.r, br.x);
                let y = if z.norm() > 0.0 { z.inv() } else { Complex64::new(0.0, 0.0) };
                Ok(Branch {
                    from: br.from,
                    to: br.to,
                    series_admittance: y,
                    shunt_charging: br.b,
                    tap,
                    in_service: br.status == 1,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        for (i, m) in self.machines.iter().enumerate() {
            m.validate().map_err(|e| Error::schema(format!("machines[{i}]"), e.to_string()))?;
        }
        let svc = match self.svc {
            Some(s) => {
                if !(s.b_min < s.b_max) {
                    return Err(Error::schema("svc", "b_min must be below b_max"));
                }
                Some(SvcSpec {
                    bus: s.bus,
                    b_min: s.b_min / base,
                    b_max: s.b_max / base,
                })
            }
            None => None,
        };
        Network::new(self.name, base, buses, branches, self.machines, svc, self.pocket)
    }
}

impl Network {
    /// Back to a case document in physical units.
    pub fn to_case(&self) -> CaseDoc {
        let base = self.base_mva;
        CaseDoc {
            name: self.name.clone(),
            base_mva: base,
            buses: self
                .buses
                .iter()
                .map(|b| BusRecord {
                    id: b.id,
                    kind: b.kind,
                    v_set: b.voltage_setpoint,
                    p_load: b.base_load.re * base,
                    q_load: b.base_load.im * base,
                    b_shunt: b.shunt_susceptance * base,
                    k_rate: b.loading_rate,
                })
                .collect(),
            branches: self
                .branches
                .iter()
                .map(|br| {
                    let z = br.series_admittance.inv();
                    BranchRecord {
                        from: br.from,
                        to: br.to,
                        r: z.re,
                        x: z.im,
                        b: br.shunt_charging,
                        status: u8::from(br.in_service),
                        tap: (br.tap != 1.0).then_some(br.tap),
                    }
                })
                .collect(),
            machines: self.machines.clone(),
            svc: self.svc.as_ref().map(|s| SvcRecord {
                bus: s.bus,
                b_min: s.b_min * base,
                b_max: s.b_max * base,
            }),
            pocket: self.pocket.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_fields_are_rejected() {
        let text = r#"{"base_mva": 100, "buses": [], "branches": [], "extra": 1}"#;
        let err = CaseDoc::parse(text).unwrap_err();
        assert_eq!(err.class(), "schema");
        assert!(err.to_string().contains("extra"));
    }

    #[test]
    fn empty_bus_list_is_a_schema_error() {
        let doc = CaseDoc::parse(r#"{"base_mva": 100, "buses": [], "branches": []}"#).unwrap();
        match doc.into_network() {
            Err(Error::Schema { path, .. }) => assert_eq!(path, "buses"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_bus_ids_rejected() {
        let text = r#"{"base_mva": 100,
            "buses": [
              {"id": 1, "kind": "reference", "v_set": 1.0, "p_load": 0, "q_load": 0, "b_shunt": 0, "k_rate": 0},
              {"id": 1, "kind": "pq", "p_load": 10, "q_load": 0, "b_shunt": 0, "k_rate": 1}],
            "branches": []}"#;
        let err = CaseDoc::parse(text).unwrap().into_network().unwrap_err();
        assert!(matches!(err, Error::DuplicateBus(1)));
    }

    #[test]
    fn bad_status_reports_field_path() {
        let text = r#"{"base_mva": 100,
            "buses": [
              {"id": 1, "kind": "reference", "v_set": 1.0, "p_load": 0, "q_load": 0, "b_shunt": 0, "k_rate": 0},
              {"id": 2, "kind": "pq", "p_load": 10, "q_load": 0, "b_shunt": 0, "k_rate": 1}],
            "branches": [{"from": 1, "to": 2, "r": 0, "x": 0.1, "b": 0, "status": 7}]}"#;
        match CaseDoc::parse(text).unwrap().into_network() {
            Err(Error::Schema { path, .. }) => assert_eq!(path, "branches[0].status"),
            other => panic!("{other:?}"),
        }
    }
}
