//! Network case model: buses, lines, generators, load and PV time series.
//!
//! Cases are ingested from a single JSON document (see `data/case33.json`
//! for the shipped feeder). Power quantities in the file are MW/MVAr/MVA and
//! are converted to per-unit on `meta.base_mva` at parse time; line
//! conductance/susceptance are already per-unit in the file.

use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum CaseError {
    #[error("failed to read case file: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed case document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("schema violation in {record}: {reason}")]
    Schema { record: String, reason: String },
    #[error("{record} references unknown bus {bus}")]
    UnknownBus { record: String, bus: usize },
    #[error("duplicate id {id} in {section}")]
    DuplicateId { section: String, id: usize },
    #[error("{record}: expected {expected} periods, found {found}")]
    LengthMismatch {
        record: String,
        expected: usize,
        found: usize,
    },
    #[error("line graph is disconnected: bus {bus} unreachable from bus {root}")]
    Disconnected { bus: usize, root: usize },
    #[error("power base must be positive, got {0}")]
    NonPositiveBase(f64),
}

/// One network bus. Voltage bounds are per-unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    pub v_min: f64,
    pub v_max: f64,
    #[serde(default)]
    pub has_aggregator: bool,
}

/// A series branch between two buses. `conductance`/`susceptance` follow the
/// polar flow convention where both are nonnegative for a resistive-inductive
/// line; `s_max` is the per-unit apparent-power rating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub id: usize,
    pub from_bus: usize,
    pub to_bus: usize,
    pub conductance: f64,
    pub susceptance: f64,
    pub s_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub id: usize,
    pub bus: usize,
    pub s_max: f64,
}

/// Per-period demand at one bus (per-unit, length `T`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadProfile {
    pub load_id: usize,
    pub bus: usize,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

/// Per-period expected PV output plus the beta shape parameters that describe
/// the underlying generation distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PVProfile {
    pub bus: usize,
    pub capacity: f64,
    pub p: Vec<f64>,
    pub beta_params: Vec<(f64, f64)>,
}

/// A validated, per-unit network case. Immutable after construction; share
/// read-only across concurrent solves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkCase {
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub generators: Vec<Generator>,
    pub loads: Vec<LoadProfile>,
    pub pv_profiles: Vec<PVProfile>,
    pub base_mva: f64,
    pub base_kv: f64,
    #[serde(rename = "T")]
    pub periods: usize,
    pub delta_h: f64,
    pub prices: Vec<f64>,
}

/// Convert MW/MVAr/MVA to per-unit on the given power base.
pub fn to_per_unit(value: f64, base_mva: f64) -> Result<f64, CaseError> {
    if base_mva <= 0.0 {
        return Err(CaseError::NonPositiveBase(base_mva));
    }
    Ok(value / base_mva)
}

// ---------------------------------------------------------------------------
// File schema (units: MW / MVAr / MVA / kV; admittances per-unit)
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct CaseFile {
    meta: MetaRec,
    buses: Vec<Bus>,
    lines: Vec<Line>,
    generators: Vec<Generator>,
    loads: Vec<LoadProfile>,
    #[serde(default)]
    pv: Vec<PVProfile>,
    prices: Vec<f64>,
}

#[derive(Debug, Deserialize)]
struct MetaRec {
    base_mva: f64,
    base_kv: f64,
    #[serde(rename = "T")]
    periods: usize,
    delta_h: f64,
}

/// Parse and validate a case file, converting all power quantities to
/// per-unit on `meta.base_mva`.
pub fn parse_case<P: AsRef<Path>>(path: P) -> Result<NetworkCase, CaseError> {
    let text = std::fs::read_to_string(path)?;
    parse_case_str(&text)
}

/// Same as [`parse_case`] but from an in-memory document.
pub fn parse_case_str(text: &str) -> Result<NetworkCase, CaseError> {
    let file: CaseFile = serde_json::from_str(text)?;
    let base = file.meta.base_mva;
    if base <= 0.0 {
        return Err(CaseError::NonPositiveBase(base));
    }

    let mut case = NetworkCase {
        buses: file.buses,
        lines: file.lines,
        generators: file.generators,
        loads: file.loads,
        pv_profiles: file.pv,
        base_mva: base,
        base_kv: file.meta.base_kv,
        periods: file.meta.periods,
        delta_h: file.meta.delta_h,
        prices: file.prices,
    };

    // MW -> per-unit for everything the file states in physical units.
    for g in &mut case.generators {
        g.s_max = to_per_unit(g.s_max, base)?;
    }
    for l in &mut case.lines {
        l.s_max = to_per_unit(l.s_max, base)?;
    }
    for d in &mut case.loads {
        for v in d.p.iter_mut().chain(d.q.iter_mut()) {
            *v /= base;
        }
    }
    for pv in &mut case.pv_profiles {
        pv.capacity = to_per_unit(pv.capacity, base)?;
        for v in pv.p.iter_mut() {
            *v /= base;
        }
    }

    case.validate()?;
    Ok(case)
}

impl NetworkCase {
    /// Run all structural invariants. Called by [`parse_case`]; callers that
    /// build cases programmatically should call it themselves.
    pub fn validate(&self) -> Result<(), CaseError> {
        if self.buses.is_empty() {
            return Err(CaseError::Schema {
                record: "buses".into(),
                reason: "at least one bus required".into(),
            });
        }
        let mut seen = HashSet::new();
        for b in &self.buses {
            if !seen.insert(b.id) {
                return Err(CaseError::DuplicateId {
                    section: "buses".into(),
                    id: b.id,
                });
            }
            if !(b.v_min > 0.0 && b.v_min < b.v_max) {
                return Err(CaseError::Schema {
                    record: format!("bus {}", b.id),
                    reason: format!("voltage bounds must satisfy 0 < v_min < v_max, got [{}, {}]", b.v_min, b.v_max),
                });
            }
        }
        // Contiguous 1..=N ids.
        let n = self.buses.len();
        for id in 1..=n {
            if !seen.contains(&id) {
                return Err(CaseError::Schema {
                    record: "buses".into(),
                    reason: format!("bus ids must be contiguous 1..={n}, missing {id}"),
                });
            }
        }

        let mut line_ids = HashSet::new();
        for l in &self.lines {
            if !line_ids.insert(l.id) {
                return Err(CaseError::DuplicateId {
                    section: "lines".into(),
                    id: l.id,
                });
            }
            for bus in [l.from_bus, l.to_bus] {
                if !seen.contains(&bus) {
                    return Err(CaseError::UnknownBus {
                        record: format!("line {}", l.id),
                        bus,
                    });
                }
            }
            if l.from_bus == l.to_bus {
                return Err(CaseError::Schema {
                    record: format!("line {}", l.id),
                    reason: "from_bus equals to_bus".into(),
                });
            }
            if l.s_max <= 0.0 {
                return Err(CaseError::Schema {
                    record: format!("line {}", l.id),
                    reason: "s_max must be positive".into(),
                });
            }
        }

        let mut gen_ids = HashSet::new();
        for g in &self.generators {
            if !gen_ids.insert(g.id) {
                return Err(CaseError::DuplicateId {
                    section: "generators".into(),
                    id: g.id,
                });
            }
            if !seen.contains(&g.bus) {
                return Err(CaseError::UnknownBus {
                    record: format!("generator {}", g.id),
                    bus: g.bus,
                });
            }
            if g.s_max <= 0.0 {
                return Err(CaseError::Schema {
                    record: format!("generator {}", g.id),
                    reason: "s_max must be positive".into(),
                });
            }
        }

        let t = self.periods;
        if self.prices.len() != t {
            return Err(CaseError::LengthMismatch {
                record: "prices".into(),
                expected: t,
                found: self.prices.len(),
            });
        }
        if self.prices.iter().any(|p| *p < 0.0) {
            return Err(CaseError::Schema {
                record: "prices".into(),
                reason: "prices must be nonnegative".into(),
            });
        }
        if self.delta_h <= 0.0 {
            return Err(CaseError::Schema {
                record: "meta".into(),
                reason: "delta_h must be positive".into(),
            });
        }

        let mut load_ids = HashSet::new();
        for d in &self.loads {
            if !load_ids.insert(d.load_id) {
                return Err(CaseError::DuplicateId {
                    section: "loads".into(),
                    id: d.load_id,
                });
            }
            if !seen.contains(&d.bus) {
                return Err(CaseError::UnknownBus {
                    record: format!("load {}", d.load_id),
                    bus: d.bus,
                });
            }
            for (name, series) in [("p", &d.p), ("q", &d.q)] {
                if series.len() != t {
                    return Err(CaseError::LengthMismatch {
                        record: format!("load {} ({name})", d.load_id),
                        expected: t,
                        found: series.len(),
                    });
                }
            }
            if d.p.iter().any(|v| *v < 0.0) {
                return Err(CaseError::Schema {
                    record: format!("load {}", d.load_id),
                    reason: "active demand must be nonnegative".into(),
                });
            }
        }

        for pv in &self.pv_profiles {
            if !seen.contains(&pv.bus) {
                return Err(CaseError::UnknownBus {
                    record: format!("pv at bus {}", pv.bus),
                    bus: pv.bus,
                });
            }
            for (name, len) in [("p", pv.p.len()), ("beta_params", pv.beta_params.len())] {
                if len != t {
                    return Err(CaseError::LengthMismatch {
                        record: format!("pv at bus {} ({name})", pv.bus),
                        expected: t,
                        found: len,
                    });
                }
            }
            for (k, &(a, b)) in pv.beta_params.iter().enumerate() {
                if a <= 0.0 || b <= 0.0 {
                    return Err(CaseError::Schema {
                        record: format!("pv at bus {}", pv.bus),
                        reason: format!("beta parameters must be positive, got ({a}, {b}) at period {}", k + 1),
                    });
                }
            }
            for (k, &p) in pv.p.iter().enumerate() {
                if p < 0.0 || p > pv.capacity + 1e-12 {
                    return Err(CaseError::Schema {
                        record: format!("pv at bus {}", pv.bus),
                        reason: format!("expected output {p} outside [0, capacity] at period {}", k + 1),
                    });
                }
            }
        }

        self.check_connected()?;
        Ok(())
    }

    fn check_connected(&self) -> Result<(), CaseError> {
        let n = self.buses.len();
        let root = 1;
        let mut adj = vec![Vec::new(); n + 1];
        for l in &self.lines {
            adj[l.from_bus].push(l.to_bus);
            adj[l.to_bus].push(l.from_bus);
        }
        let mut reached = vec![false; n + 1];
        let mut stack = vec![root];
        reached[root] = true;
        while let Some(b) = stack.pop() {
            for &next in &adj[b] {
                if !reached[next] {
                    reached[next] = true;
                    stack.push(next);
                }
            }
        }
        for id in 1..=n {
            if !reached[id] {
                return Err(CaseError::Disconnected { bus: id, root });
            }
        }
        Ok(())
    }

    /// A connected case is radial when it has exactly `buses - 1` lines.
    pub fn is_radial(&self) -> bool {
        self.lines.len() == self.buses.len() - 1
    }

    pub fn bus_count(&self) -> usize {
        self.buses.len()
    }

    /// Ids of buses hosting an EV aggregator, ascending.
    pub fn aggregator_buses(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .buses
            .iter()
            .filter(|b| b.has_aggregator)
            .map(|b| b.id)
            .collect();
        ids.sort_unstable();
        ids
    }

    pub fn bus(&self, id: usize) -> &Bus {
        self.buses.iter().find(|b| b.id == id).expect("validated bus id")
    }

    /// Lines incident to `bus` (either endpoint).
    pub fn lines_at(&self, bus: usize) -> impl Iterator<Item = &Line> {
        self.lines
            .iter()
            .filter(move |l| l.from_bus == bus || l.to_bus == bus)
    }

    pub fn generators_at(&self, bus: usize) -> impl Iterator<Item = &Generator> {
        self.generators.iter().filter(move |g| g.bus == bus)
    }

    pub fn loads_at(&self, bus: usize) -> impl Iterator<Item = &LoadProfile> {
        self.loads.iter().filter(move |d| d.bus == bus)
    }

    pub fn pv_at(&self, bus: usize) -> Option<&PVProfile> {
        self.pv_profiles.iter().find(|p| p.bus == bus)
    }

    /// Expected net active draw at `bus` in 0-based period `t`:
    /// total demand minus expected PV output (per-unit).
    pub fn nominal_net_p(&self, bus: usize, t: usize) -> f64 {
        let demand: f64 = self.loads_at(bus).map(|d| d.p[t]).sum();
        let pv = self.pv_at(bus).map_or(0.0, |p| p.p[t]);
        demand - pv
    }

    /// Expected net reactive draw at `bus` in 0-based period `t` (per-unit).
    pub fn nominal_net_q(&self, bus: usize, t: usize) -> f64 {
        self.loads_at(bus).map(|d| d.q[t]).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_case_json(t: usize, price_len: usize) -> String {
        let prices: Vec<String> = (0..price_len).map(|_| "40.0".to_string()).collect();
        let series: Vec<String> = (0..t).map(|_| "1.0".to_string()).collect();
        format!(
            r#"{{
              "meta": {{"base_mva": 10.0, "base_kv": 12.66, "T": {t}, "delta_h": 0.25}},
              "buses": [
                {{"id": 1, "v_min": 0.95, "v_max": 1.05}},
                {{"id": 2, "v_min": 0.9, "v_max": 1.05, "has_aggregator": true}}
              ],
              "lines": [
                {{"id": 1, "from_bus": 1, "to_bus": 2, "conductance": 5.0, "susceptance": 10.0, "s_max": 5.0}}
              ],
              "generators": [{{"id": 1, "bus": 1, "s_max": 10.0}}],
              "loads": [{{"load_id": 1, "bus": 2, "p": [{p}], "q": [{p}]}}],
              "pv": [],
              "prices": [{prices}]
            }}"#,
            t = t,
            p = series.join(","),
            prices = prices.join(","),
        )
    }

    #[test]
    fn parses_and_converts_to_per_unit() {
        let case = parse_case_str(&tiny_case_json(2, 2)).unwrap();
        assert_eq!(case.periods, 2);
        assert_eq!(case.loads[0].p[0], 0.1); // 1 MW on 10 MVA
        assert_eq!(case.generators[0].s_max, 1.0);
        assert_eq!(case.lines[0].s_max, 0.5);
        assert!(case.is_radial());
    }

    #[test]
    fn unknown_bus_is_rejected() {
        let text = tiny_case_json(2, 2).replace(r#""to_bus": 2"#, r#""to_bus": 99"#);
        let err = parse_case_str(&text).unwrap_err();
        assert!(matches!(err, CaseError::UnknownBus { bus: 99, .. }), "{err}");
    }

    #[test]
    fn series_length_mismatch_is_rejected() {
        let err = parse_case_str(&tiny_case_json(2, 3)).unwrap_err();
        assert!(matches!(err, CaseError::LengthMismatch { .. }), "{err}");
    }

    #[test]
    fn duplicate_bus_id_is_rejected() {
        let text = tiny_case_json(2, 2).replace(r#""id": 2, "v_min": 0.9"#, r#""id": 1, "v_min": 0.9"#);
        let err = parse_case_str(&text).unwrap_err();
        // Either duplicate or broken contiguity, depending on validation order.
        assert!(
            matches!(err, CaseError::DuplicateId { .. } | CaseError::Schema { .. }),
            "{err}"
        );
    }

    #[test]
    fn per_unit_conversion() {
        assert_eq!(to_per_unit(10.0, 10.0).unwrap(), 1.0);
        assert_eq!(to_per_unit(0.15, 10.0).unwrap(), 0.015);
        assert_eq!(to_per_unit(0.0, 10.0).unwrap(), 0.0);
        assert!(to_per_unit(1.0, 0.0).is_err());
        assert!(to_per_unit(1.0, -2.0).is_err());
    }

    #[test]
    fn serde_round_trip_is_exact() {
        let case = parse_case_str(&tiny_case_json(2, 2)).unwrap();
        let text = serde_json::to_string(&case).unwrap();
        let back: NetworkCase = serde_json::from_str(&text).unwrap();
        assert_eq!(case, back);
    }
}
