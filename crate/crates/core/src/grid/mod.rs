//! Per-unit network model, admittance matrix and the bundled case library.

pub mod case;

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dynamics::machine::MachineModel;
use crate::error::{Error, Result};
use crate::linalg::CMat;

pub use case::CaseDoc;

pub type BusId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Pq,
    Pv,
    Reference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: BusId,
    pub kind: BusKind,
    /// Voltage magnitude setpoint (PV and reference buses only).
    pub voltage_setpoint: Option<f64>,
    /// Base complex load `P + jQ` in per-unit.
    pub base_load: Complex64,
    pub shunt_susceptance: f64,
    /// Loading rate `k_i`.
    pub loading_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub from: BusId,
    pub to: BusId,
    pub series_admittance: Complex64,
    /// Total line charging, split equally between the ends.
    pub shunt_charging: f64,
    pub tap: f64,
    pub in_service: bool,
}

/// Controllable shunt compensator location and limits (per-unit).
#[derive(Debug, Clone, PartialEq)]
pub struct SvcSpec {
    pub bus: BusId,
    pub b_min: f64,
    pub b_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub name: String,
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub machines: Vec<MachineModel>,
    pub svc: Option<SvcSpec>,
    pub pocket: Vec<BusId>,
    index: BTreeMap<BusId, usize>,
}

const BUNDLED: &[(&str, &str)] = &[
    ("twobus", include_str!("../../cases/twobus.json")),
    ("threebus", include_str!("../../cases/threebus.json")),
    ("ieee39", include_str!("../../cases/ieee39.json")),
    ("ieee39_svc", include_str!("../../cases/ieee39_svc.json")),
];

impl Network {
    pub fn new(
        name: String,
        base_mva: f64,
        buses: Vec<Bus>,
        branches: Vec<Branch>,
        machines: Vec<MachineModel>,
        svc: Option<SvcSpec>,
        pocket: Vec<BusId>,
    ) -> Result<Self> {
        if buses.is_empty() {
            return Err(Error::schema("buses", "bus list is empty"));
        }
        let mut index = BTreeMap::new();
        for (i, b) in buses.iter().enumerate() {
            if index.insert(b.id, i).is_some() {
                return Err(Error::DuplicateBus(b.id));
            }
        }
        let refs = buses.iter().filter(|b| b.kind == BusKind::Reference).count();
        if refs != 1 {
            return Err(Error::InvalidNetwork(format!(
                "expected exactly one reference bus, found {refs}"
            )));
        }
        for b in &buses {
            match (b.kind, b.voltage_setpoint) {
                (BusKind::Pq, Some(_)) => {
                    return Err(Error::InvalidNetwork(format!("PQ bus {} has a voltage setpoint", b.id)))
                }
                (BusKind::Pv | BusKind::Reference, None) => {
                    return Err(Error::InvalidNetwork(format!("bus {} needs a voltage setpoint", b.id)))
                }
                (BusKind::Pv | BusKind::Reference, Some(v)) if !(v > 0.0) => {
                    return Err(Error::InvalidNetwork(format!("bus {} setpoint must be positive", b.id)))
                }
                _ => {}
            }
            if b.kind != BusKind::Pq && b.loading_rate != 0.0 {
                return Err(Error::InvalidNetwork(format!(
                    "loading rate must be zero on generator bus {}",
                    b.id
                )));
            }
        }
        for br in &branches {
            for end in [br.from, br.to] {
                if !index.contains_key(&end) {
                    return Err(Error::UnknownBus(end));
                }
            }
            if br.from == br.to {
                return Err(Error::InvalidNetwork(format!("branch {}-{} is a self loop", br.from, br.to)));
            }
            if br.in_service && br.series_admittance.norm() == 0.0 {
                return Err(Error::InvalidNetwork(format!(
                    "in-service branch {}-{} has zero series admittance",
                    br.from, br.to
                )));
            }
        }
        let mut seen = BTreeMap::new();
        for m in &machines {
            let i = *index.get(&m.bus).ok_or(Error::UnknownBus(m.bus))?;
            if buses[i].kind == BusKind::Pq {
                return Err(Error::Machines(format!("machine at PQ bus {}", m.bus)));
            }
            if seen.insert(m.bus, ()).is_some() {
                return Err(Error::Machines(format!("more than one machine at bus {}", m.bus)));
            }
        }
        if let Some(svc) = &svc {
            let i = *index.get(&svc.bus).ok_or(Error::UnknownBus(svc.bus))?;
            if buses[i].kind != BusKind::Pq {
                return Err(Error::InvalidNetwork(format!("SVC bus {} must be a PQ bus", svc.bus)));
            }
        }
        for id in &pocket {
            if !index.contains_key(id) {
                return Err(Error::UnknownBus(*id));
            }
        }
        let net = Network {
            name,
            base_mva,
            buses,
            branches,
            machines,
            svc,
            pocket,
            index,
        };
        net.check_connected()?;
        Ok(net)
    }

    /// Parse a JSON case document.
    pub fn load_case(text: &str) -> Result<Self> {
        CaseDoc::parse(text)?.into_network()
    }

    pub fn load_case_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::load_case(&text)
    }

    /// One of the bundled cases: `twobus`, `threebus`, `ieee39`, `ieee39_svc`.
    pub fn bundled(name: &str) -> Result<Self> {
        let text = BUNDLED
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| *t)
            .ok_or_else(|| Error::Config(format!("no bundled case named `{name}`")))?;
        Self::load_case(text)
    }

    pub fn bundled_names() -> impl Iterator<Item = &'static str> {
        BUNDLED.iter().map(|(n, _)| *n)
    }

    /// Bundled name, or else a path to a case file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        if BUNDLED.iter().any(|(n, _)| *n == name_or_path) {
            Self::bundled(name_or_path)
        } else {
            Self::load_case_file(name_or_path)
        }
    }

    pub fn to_json(&self) -> String {
        self.to_case().to_json()
    }

    pub fn n_bus(&self) -> usize {
        self.buses.len()
    }

    pub fn index_of(&self, id: BusId) -> Result<usize> {
        self.index.get(&id).copied().ok_or(Error::UnknownBus(id))
    }

    pub fn reference_index(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.kind == BusKind::Reference)
            .expect("validated: one reference bus")
    }

    pub fn pq_indices(&self) -> Vec<usize> {
        self.kind_indices(|k| k == BusKind::Pq)
    }

    pub fn pv_indices(&self) -> Vec<usize> {
        self.kind_indices(|k| k == BusKind::Pv)
    }

    /// PV and reference buses.
    pub fn generator_indices(&self) -> Vec<usize> {
        self.kind_indices(|k| k != BusKind::Pq)
    }

    fn kind_indices(&self, keep: impl Fn(BusKind) -> bool) -> Vec<usize> {
        self.buses
            .iter()
            .enumerate()
            .filter(|(_, b)| keep(b.kind))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn base_loads(&self) -> Vec<Complex64> {
        self.buses.iter().map(|b| b.base_load).collect()
    }

    /// Loading direction vector `k` from the case file.
    pub fn loading_direction(&self) -> Vec<f64> {
        self.buses.iter().map(|b| b.loading_rate).collect()
    }

    /// Loading direction from `bus,k` lines (optional header, `#` comments).
    /// Buses not listed get zero.
    pub fn direction_from_csv(&self, text: &str) -> Result<Vec<f64>> {
        let mut k = vec![0.0; self.n_bus()];
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || (n == 0 && line.starts_with("bus")) {
                continue;
            }
            let at = || format!("direction line {}", n + 1);
            let (bus, val) = line
                .split_once(',')
                .ok_or_else(|| Error::schema(at(), "expected `bus,k`"))?;
            let id: BusId = bus.trim().parse().map_err(|_| Error::schema(at(), "bad bus id"))?;
            let v: f64 = val.trim().parse().map_err(|_| Error::schema(at(), "bad rate"))?;
            if !v.is_finite() {
                return Err(Error::schema(at(), "rate must be finite"));
            }
            k[self.index_of(id)?] = v;
        }
        Ok(k)
    }

    pub fn direction_from_file(&self, path: impl AsRef<Path>) -> Result<Vec<f64>> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        self.direction_from_csv(&text)
    }

    /// Loads scaled along `k`: `S_i = S_0i + s k_i S_0i`.
    pub fn scaled_loads(&self, s: f64, k: &[f64]) -> Vec<Complex64> {
        self.buses
            .iter()
            .zip(k)
            .map(|(b, ki)| b.base_load * (1.0 + s * ki))
            .collect()
    }

    /// Scheduled generation per bus from the machine list (MW → p.u.).
    pub fn scheduled_generation(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.n_bus()];
        for m in &self.machines {
            p[self.index[&m.bus]] += m.p_gen / self.base_mva;
        }
        p
    }

    /// Copy with a different base load set (per-unit). Used to re-base the
    /// loading parameter at a new operating point.
    pub fn with_base_loads(&self, loads: &[Complex64]) -> Network {
        let mut net = self.clone();
        for (b, s) in net.buses.iter_mut().zip(loads) {
            b.base_load = *s;
        }
        net
    }

    /// Places a shunt capacitor of susceptance `b_s` (p.u.) at `bus`.
    pub fn set_shunt(&self, bus: BusId, b_s: f64) -> Result<Network> {
        let i = self.index_of(bus)?;
        let mut net = self.clone();
        net.buses[i].shunt_susceptance += b_s;
        Ok(net)
    }

    /// Copy with one branch taken out of service.
    pub fn without_branch(&self, pos: usize) -> Result<Network> {
        let mut net = self.clone();
        let br = net
            .branches
            .get_mut(pos)
            .ok_or_else(|| Error::Config(format!("no branch at position {pos}")))?;
        br.in_service = false;
        net.check_connected()?;
        Ok(net)
    }

    fn check_connected(&self) -> Result<()> {
        let n = self.n_bus();
        let mut adj = vec![Vec::new(); n];
        for br in self.branches.iter().filter(|b| b.in_service) {
            let (f, t) = (self.index[&br.from], self.index[&br.to]);
            adj[f].push(t);
            adj[t].push(f);
        }
        let root = self.reference_index();
        let mut seen = vec![false; n];
        seen[root] = true;
        let mut queue = VecDeque::from([root]);
        while let Some(i) = queue.pop_front() {
            for &j in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        let isolated: Vec<BusId> = (0..n).filter(|&i| !seen[i]).map(|i| self.buses[i].id).collect();
        if isolated.is_empty() {
            Ok(())
        } else {
            Err(Error::Disconnected(isolated))
        }
    }

    /// Bus admittance matrix with π-model branches and bus shunts.
    pub fn admittance(&self) -> CMat {
        let n = self.n_bus();
        let mut y = CMat::zeros(n, n);
        for br in self.branches.iter().filter(|b| b.in_service) {
            let (f, t) = (self.index[&br.from], self.index[&br.to]);
            let ys = br.series_admittance;
            let half = Complex64::new(0.0, br.shunt_charging / 2.0);
            let tap = br.tap;
            y[(f, f)] += (ys + half) / (tap * tap);
            y[(t, t)] += ys + half;
            y[(f, t)] -= ys / tap;
            y[(t, f)] -= ys / tap;
        }
        for (i, b) in self.buses.iter().enumerate() {
            y[(i, i)] += Complex64::new(0.0, b.shunt_susceptance);
        }
        y
    }
}

/// Builds the bus admittance matrix.
pub fn build_admittance_matrix(network: &Network) -> CMat {
    network.admittance()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_bus(y: Complex64) -> Network {
        let buses = vec![
            Bus {
                id: 1,
                kind: BusKind::Reference,
                voltage_setpoint: Some(1.0),
                base_load: Complex64::new(0.0, 0.0),
                shunt_susceptance: 0.0,
                loading_rate: 0.0,
            },
            Bus {
                id: 2,
                kind: BusKind::Pq,
                voltage_setpoint: None,
                base_load: Complex64::new(0.5, 0.1),
                shunt_susceptance: 0.0,
                loading_rate: 1.0,
            },
        ];
        let branches = vec![Branch {
            from: 1,
            to: 2,
            series_admittance: y,
            shunt_charging: 0.0,
            tap: 1.0,
            in_service: true,
        }];
        Network::new("t".into(), 100.0, buses, branches, vec![], None, vec![]).unwrap()
    }

    #[test]
    fn single_line_admittance() {
        let y = Complex64::new(1.0, -10.0);
        let ybus = two_bus(y).admittance();
        assert_eq!(ybus[(0, 0)], y);
        assert_eq!(ybus[(1, 1)], y);
        assert_eq!(ybus[(0, 1)], -y);
        assert_eq!(ybus[(1, 0)], -y);
    }

    #[test]
    fn shunt_touches_only_its_diagonal() {
        let net = two_bus(Complex64::new(1.0, -10.0));
        let y0 = net.admittance();
        assert_eq!(net.set_shunt(2, 0.0).unwrap().admittance(), y0);
        let y1 = net.set_shunt(2, 0.5).unwrap().admittance();
        let diff = &y1 - &y0;
        assert_eq!(diff[(1, 1)], Complex64::new(0.0, 0.5));
        assert_eq!(diff.iter().filter(|z| z.norm() > 0.0).count(), 1);
        assert!(matches!(net.set_shunt(9, 0.1), Err(Error::UnknownBus(9))));
    }

    #[test]
    fn disconnected_component_is_named() {
        let mut net = two_bus(Complex64::new(1.0, -10.0));
        net.branches[0].in_service = false;
        match net.check_connected() {
            Err(Error::Disconnected(ids)) => assert_eq!(ids, vec![2]),
            other => panic!("{other:?}"),
        }
        assert!(two_bus(Complex64::new(1.0, -10.0)).without_branch(0).is_err());
    }

    #[test]
    fn invariants_enforced() {
        let net = two_bus(Complex64::new(1.0, -10.0));
        let mut buses = net.buses.clone();
        buses[1].voltage_setpoint = Some(1.0);
        assert!(Network::new("x".into(), 100.0, buses, net.branches.clone(), vec![], None, vec![]).is_err());
        let mut buses = net.buses.clone();
        buses[0].loading_rate = 1.0;
        assert!(Network::new("x".into(), 100.0, buses, net.branches.clone(), vec![], None, vec![]).is_err());
        let mut buses = net.buses.clone();
        buses[1].kind = BusKind::Reference;
        buses[1].voltage_setpoint = Some(1.0);
        buses[1].loading_rate = 0.0;
        assert!(Network::new("x".into(), 100.0, buses, net.branches.clone(), vec![], None, vec![]).is_err());
    }
}
