//! Per-aggregator minimum-cost EV charging.
//!
//! Builds the convex fleet-scheduling problem — linear cost, per-EV charge
//! dynamics, socket discs, departure targets, SOC box, availability windows,
//! and the per-period envelope caps handed down by the DSO — and solves it
//! with the conic engine. Powers are kW/kVAr, energies kWh, prices $/MWh.
//!
//! Solved points are polished deterministically to machine-exact invariants:
//! SOC trajectories are recomputed from the charge powers (telescoping is
//! then exact), envelope overshoots within solver tolerance are scaled out,
//! and any departure deficit is topped back up in the cheapest periods with
//! envelope and socket headroom.

use crate::dso::FlexibilitySchedule;
use crate::exec;
use crate::fleet::EvSpec;
use crate::grid::NetworkCase;
use crate::solver::{
    solve_conic, ProblemSpec, Radius, Sense, SolveReport, SolveStatus, SolverError, SolverOptions,
    INF,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, thiserror::Error)]
pub enum SchedulerError {
    #[error("envelope has {found} periods, fleet horizon needs {expected}")]
    EnvelopeMismatch { expected: usize, found: usize },
    #[error("charging problem infeasible: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("no flexibility row for bus {0}")]
    MissingEnvelope(usize),
}

/// One EV's solved trajectory. `p_ev`/`q_ev` are kW/kVAr per period (zero
/// outside the availability window); `soc[t]` is the state of charge after
/// period `t+1`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvSchedule {
    pub bus: usize,
    pub ev: usize,
    pub p_ev: Vec<f64>,
    pub q_ev: Vec<f64>,
    pub soc: Vec<f64>,
}

/// Fleet schedules for one aggregator plus the charging cost in dollars.
#[derive(Debug, Clone)]
pub struct AggregatorResult {
    pub schedules: Vec<EvSchedule>,
    pub cost: f64,
    pub report: SolveReport,
}

/// One step of the charge dynamics: the SOC after charging at `p_ev` kW for
/// one period of `delta_h` hours.
pub fn soc_update(soc_prev: f64, p_ev: f64, eta: f64, delta_h: f64, capacity_kwh: f64) -> f64 {
    soc_prev + eta * p_ev * delta_h / capacity_kwh
}

/// Variable layout of the aggregator problem: per EV and period, charge
/// power, reactive power, and state of charge.
#[derive(Debug, Clone, Copy)]
pub struct AggLayout {
    pub n_ev: usize,
    pub periods: usize,
}

impl AggLayout {
    pub fn p(&self, k: usize, t: usize) -> usize {
        (k * self.periods + t) * 3
    }
    pub fn q(&self, k: usize, t: usize) -> usize {
        (k * self.periods + t) * 3 + 1
    }
    pub fn soc(&self, k: usize, t: usize) -> usize {
        (k * self.periods + t) * 3 + 2
    }
}

/// Per-period envelope for one bus, in kW / kVAr. `q_kvar` entries are
/// nonpositive: they cap total reactive injection.
#[derive(Debug, Clone)]
pub struct Envelope {
    pub p_kw: Vec<f64>,
    pub q_kvar: Vec<f64>,
}

impl Envelope {
    /// Extract the row for `bus` from a DSO schedule, converting per-unit to
    /// kW/kVAr on `base_mva`.
    pub fn from_schedule(
        schedule: &FlexibilitySchedule,
        bus: usize,
        base_mva: f64,
    ) -> Result<Self, SchedulerError> {
        let (p, q) = schedule
            .row(bus)
            .ok_or(SchedulerError::MissingEnvelope(bus))?;
        Ok(Self {
            p_kw: p.iter().map(|v| v * base_mva * 1000.0).collect(),
            q_kvar: q.iter().map(|v| v * base_mva * 1000.0).collect(),
        })
    }
}

fn available(ev: &EvSpec, t: usize) -> bool {
    // t is 0-based; windows are 1-based inclusive.
    t + 1 >= ev.t_arr && t + 1 <= ev.t_dep
}

/// Build the fleet charging problem over `prices` ($/MWh, length `T`).
pub fn build_aggregator_problem(
    fleet: &[EvSpec],
    prices: &[f64],
    delta_h: f64,
    envelope: &Envelope,
) -> Result<(ProblemSpec, AggLayout), SchedulerError> {
    let periods = prices.len();
    if envelope.p_kw.len() != periods || envelope.q_kvar.len() != periods {
        return Err(SchedulerError::EnvelopeMismatch {
            expected: periods,
            found: envelope.p_kw.len().min(envelope.q_kvar.len()),
        });
    }
    let layout = AggLayout { n_ev: fleet.len(), periods };
    let mut spec = ProblemSpec::new();

    for (k, ev) in fleet.iter().enumerate() {
        for t in 0..periods {
            let avail = available(ev, t);
            let p_hi = if avail { ev.socket_kva } else { 0.0 };
            let q_lo = if avail { -ev.socket_kva } else { 0.0 };
            let i_p = spec.add_var(format!("p_ev[{},{},{}]", ev.bus, ev.id, t + 1), 0.0, p_hi, 0.0);
            let i_q = spec.add_var(format!("q_ev[{},{},{}]", ev.bus, ev.id, t + 1), q_lo, 0.0, 0.0);
            let i_soc = spec.add_var(
                format!("soc[{},{},{}]", ev.bus, ev.id, t + 1),
                -INF,
                INF,
                ev.soc_init,
            );
            debug_assert_eq!(i_p, layout.p(k, t));
            debug_assert_eq!(i_q, layout.q(k, t));
            debug_assert_eq!(i_soc, layout.soc(k, t));
        }
    }

    for (k, ev) in fleet.iter().enumerate() {
        let gain = ev.eta * delta_h / ev.capacity_kwh;
        for t in 0..periods {
            // Charge dynamics: soc_t - soc_{t-1} - gain * p_t = 0.
            let mut entries = vec![(layout.soc(k, t), 1.0), (layout.p(k, t), -gain)];
            let rhs = if t == 0 {
                ev.soc_init
            } else {
                entries.push((layout.soc(k, t - 1), -1.0));
                0.0
            };
            spec.add_lin(
                "dynamics",
                format!("dynamics[{},{},{}]", ev.bus, ev.id, t + 1),
                entries,
                rhs,
                rhs,
            );
            spec.add_disc(
                "socket",
                format!("socket[{},{},{}]", ev.bus, ev.id, t + 1),
                layout.p(k, t),
                Some(layout.q(k, t)),
                Radius::Const(ev.socket_kva),
            );
            spec.add_lin(
                "soc_box",
                format!("soc_box[{},{},{}]", ev.bus, ev.id, t + 1),
                vec![(layout.soc(k, t), 1.0)],
                ev.soc_min,
                ev.soc_max,
            );
            // Availability cap on the charge power (zero outside the window).
            let cap = if available(ev, t) { ev.socket_kva } else { 0.0 };
            spec.add_lin(
                "window",
                format!("window[{},{},{}]", ev.bus, ev.id, t + 1),
                vec![(layout.p(k, t), 1.0)],
                -INF,
                cap,
            );
        }
        spec.add_lin(
            "departure",
            format!("departure[{},{}]", ev.bus, ev.id),
            vec![(layout.soc(k, ev.t_dep - 1), 1.0)],
            ev.soc_desired,
            INF,
        );
    }

    for t in 0..periods {
        let p_entries: Vec<(usize, f64)> =
            (0..fleet.len()).map(|k| (layout.p(k, t), 1.0)).collect();
        spec.add_lin(
            "envelope_p",
            format!("envelope_p[{}]", t + 1),
            p_entries,
            -INF,
            envelope.p_kw[t],
        );
        let q_entries: Vec<(usize, f64)> =
            (0..fleet.len()).map(|k| (layout.q(k, t), 1.0)).collect();
        spec.add_lin(
            "envelope_q",
            format!("envelope_q[{}]", t + 1),
            q_entries,
            envelope.q_kvar[t],
            INF,
        );
    }

    let mut objective = Vec::with_capacity(fleet.len() * periods);
    for k in 0..fleet.len() {
        for t in 0..periods {
            objective.push((layout.p(k, t), prices[t] * delta_h / 1000.0));
        }
    }
    spec.set_objective(Sense::Minimize, objective);

    Ok((spec, layout))
}

/// Name the constraint family that makes an envelope unservable, before
/// handing the solver's infeasibility certificate back to the caller.
fn diagnose_infeasibility(fleet: &[EvSpec], delta_h: f64, envelope: &Envelope) -> String {
    for ev in fleet {
        let available_kwh: f64 = ev
            .window()
            .map(|t| ev.socket_kva.min(envelope.p_kw[t - 1].max(0.0)) * delta_h)
            .sum();
        if available_kwh + 1e-9 < ev.energy_needed_kwh() {
            return format!(
                "departure[{},{}]: needs {:.3} kWh but window capacity under the envelope is {:.3} kWh",
                ev.bus,
                ev.id,
                ev.energy_needed_kwh(),
                available_kwh
            );
        }
    }
    // Individually servable: the envelope must be congested across EVs.
    "envelope_p: aggregate fleet demand exceeds the envelope in some periods".to_string()
}

/// Solve the fleet charging problem for one aggregator.
pub fn schedule_fleet(
    fleet: &[EvSpec],
    prices: &[f64],
    delta_h: f64,
    envelope: &Envelope,
    options: &SolverOptions,
) -> Result<AggregatorResult, SchedulerError> {
    let periods = prices.len();
    let (spec, layout) = build_aggregator_problem(fleet, prices, delta_h, envelope)?;
    let report = solve_conic(&spec, options)?;
    match report.status {
        SolveStatus::Optimal => {}
        SolveStatus::Infeasible => {
            return Err(SchedulerError::Infeasible(diagnose_infeasibility(
                fleet, delta_h, envelope,
            )))
        }
        other => {
            return Err(SchedulerError::Infeasible(format!(
                "solver stopped with {other:?}: {}",
                report.message
            )))
        }
    }

    // Polish: exact windows, exact envelope, SOC recomputed from powers.
    let mut p: Vec<Vec<f64>> = (0..fleet.len())
        .map(|k| (0..periods).map(|t| report.solution[layout.p(k, t)]).collect())
        .collect();
    let mut q: Vec<Vec<f64>> = (0..fleet.len())
        .map(|k| (0..periods).map(|t| report.solution[layout.q(k, t)]).collect())
        .collect();
    for (k, ev) in fleet.iter().enumerate() {
        for t in 0..periods {
            if available(ev, t) {
                p[k][t] = p[k][t].clamp(0.0, ev.socket_kva);
            } else {
                p[k][t] = 0.0;
                q[k][t] = 0.0;
            }
        }
    }
    // Scale down periods that overshoot the active envelope.
    for t in 0..periods {
        let total: f64 = (0..fleet.len()).map(|k| p[k][t]).sum();
        let cap = envelope.p_kw[t].max(0.0);
        if total > cap {
            let scale = if total > 0.0 { cap / total } else { 0.0 };
            for pk in p.iter_mut() {
                pk[t] *= scale;
            }
        }
    }
    // Top up departure deficits in the cheapest periods with headroom.
    let mut slack: Vec<f64> = (0..periods)
        .map(|t| {
            let used: f64 = (0..fleet.len()).map(|k| p[k][t]).sum();
            (envelope.p_kw[t].max(0.0) - used).max(0.0)
        })
        .collect();
    let mut price_order: Vec<usize> = (0..periods).collect();
    price_order.sort_by(|a, b| prices[*a].partial_cmp(&prices[*b]).unwrap().then(a.cmp(b)));
    for (k, ev) in fleet.iter().enumerate() {
        let gain = ev.eta * delta_h / ev.capacity_kwh;
        let soc_dep: f64 =
            ev.soc_init + gain * ev.window().map(|t1| p[k][t1 - 1]).sum::<f64>();
        let mut deficit_kw = (ev.soc_desired - soc_dep).max(0.0) / gain;
        if deficit_kw <= 0.0 {
            continue;
        }
        for &t in &price_order {
            if deficit_kw <= 0.0 {
                break;
            }
            if !available(ev, t) {
                continue;
            }
            let room = (ev.socket_kva - p[k][t]).min(slack[t]).max(0.0);
            let add = room.min(deficit_kw);
            if add > 0.0 {
                p[k][t] += add;
                slack[t] -= add;
                deficit_kw -= add;
            }
        }
        if deficit_kw > 1e-7 {
            return Err(SchedulerError::Infeasible(diagnose_infeasibility(
                fleet, delta_h, envelope,
            )));
        }
    }
    // Reactive side: keep within the socket disc given the final powers and
    // within the injection cap per period.
    for (k, ev) in fleet.iter().enumerate() {
        for t in 0..periods {
            let head = (ev.socket_kva * ev.socket_kva - p[k][t] * p[k][t]).max(0.0).sqrt();
            q[k][t] = q[k][t].clamp(-head, 0.0);
        }
    }
    for t in 0..periods {
        let total: f64 = (0..fleet.len()).map(|k| q[k][t]).sum();
        let cap = envelope.q_kvar[t].min(0.0);
        if total < cap {
            let scale = cap / total; // both negative, 0 < scale < 1
            for qk in q.iter_mut() {
                qk[t] *= scale;
            }
        }
    }

    let mut schedules = Vec::with_capacity(fleet.len());
    let mut cost = 0.0;
    for (k, ev) in fleet.iter().enumerate() {
        let mut soc = vec![0.0; periods];
        let mut state = ev.soc_init;
        for t in 0..periods {
            state = soc_update(state, p[k][t], ev.eta, delta_h, ev.capacity_kwh);
            soc[t] = state;
        }
        for t in 0..periods {
            cost += prices[t] * p[k][t] / 1000.0 * delta_h;
        }
        schedules.push(EvSchedule {
            bus: ev.bus,
            ev: ev.id,
            p_ev: std::mem::take(&mut p[k]),
            q_ev: std::mem::take(&mut q[k]),
            soc,
        });
    }

    Ok(AggregatorResult { schedules, cost, report })
}

/// Schedule every aggregator bus of a case against one DSO schedule;
/// aggregators run in parallel under the `parallel` feature. Returns
/// per-bus results keyed by bus id.
pub fn schedule_all_buses(
    case: &NetworkCase,
    fleets: &BTreeMap<usize, Vec<EvSpec>>,
    schedule: &FlexibilitySchedule,
    options: &SolverOptions,
) -> Result<BTreeMap<usize, AggregatorResult>, SchedulerError> {
    let buses: Vec<usize> = schedule.buses.clone();
    let results = exec::map_indexed(buses.len(), |i| {
        let bus = buses[i];
        let empty = Vec::new();
        let fleet = fleets.get(&bus).unwrap_or(&empty);
        let envelope = Envelope::from_schedule(schedule, bus, case.base_mva)?;
        schedule_fleet(fleet, &case.prices, case.delta_h, &envelope, options)
    });
    let mut out = BTreeMap::new();
    for (i, r) in results.into_iter().enumerate() {
        out.insert(buses[i], r?);
    }
    Ok(out)
}

/// Total fleet charging cost per labeled envelope (the four-model operating
/// cost table). Each entry pairs the model label with `sum_n zeta_n`.
pub fn operation_cost_matrix(
    case: &NetworkCase,
    fleets: &BTreeMap<usize, Vec<EvSpec>>,
    labeled_schedules: &[(String, FlexibilitySchedule)],
    options: &SolverOptions,
) -> Result<Vec<(String, f64)>, SchedulerError> {
    let mut rows = Vec::with_capacity(labeled_schedules.len());
    for (label, schedule) in labeled_schedules {
        let per_bus = schedule_all_buses(case, fleets, schedule, options)?;
        let total: f64 = per_bus.values().map(|r| r.cost).sum();
        rows.push((label.clone(), total));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ev(bus: usize, id: usize, t_arr: usize, t_dep: usize, soc_init: f64, soc_desired: f64) -> EvSpec {
        EvSpec {
            bus,
            id,
            capacity_kwh: 30.0,
            socket_kva: 11.0,
            eta: 0.9,
            soc_min: 0.2,
            soc_max: 0.8,
            soc_init,
            soc_desired,
            t_arr,
            t_dep,
        }
    }

    fn ample_envelope(periods: usize) -> Envelope {
        Envelope { p_kw: vec![1000.0; periods], q_kvar: vec![-1000.0; periods] }
    }

    #[test]
    fn soc_update_examples() {
        assert_eq!(soc_update(0.37, 0.0, 0.9, 0.25, 30.0), 0.37);
        assert_relative_eq!(soc_update(0.50, 11.0, 0.9, 0.25, 30.0), 0.5825, epsilon = 1e-12);
        // eta = 1, p * delta = capacity: one full charge.
        assert_relative_eq!(soc_update(0.0, 30.0, 1.0, 1.0, 30.0), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn two_ev_constraint_counts() {
        let fleet = vec![ev(25, 1, 1, 3, 0.4, 0.6), ev(25, 2, 2, 4, 0.3, 0.5)];
        let prices = vec![50.0; 4];
        let (spec, _) = build_aggregator_problem(&fleet, &prices, 0.25, &ample_envelope(4)).unwrap();
        let t = 4;
        assert_eq!(spec.family_count("dynamics"), 2 * t);
        assert_eq!(spec.family_count("socket"), 2 * t);
        assert_eq!(spec.family_count("departure"), 2);
        assert_eq!(spec.family_count("soc_box"), 2 * t);
        assert_eq!(spec.family_count("window"), 2 * t);
        assert_eq!(spec.family_count("envelope_p"), t);
        assert_eq!(spec.family_count("envelope_q"), t);
        assert_eq!(spec.n_vars(), 3 * 2 * t);
    }

    #[test]
    fn empty_fleet_costs_nothing() {
        let prices = vec![50.0; 4];
        let res = schedule_fleet(&[], &prices, 0.25, &ample_envelope(4), &SolverOptions::default())
            .unwrap();
        assert_eq!(res.cost, 0.0);
        assert!(res.schedules.is_empty());
    }

    #[test]
    fn zero_envelope_with_needy_ev_is_infeasible() {
        let fleet = vec![ev(25, 1, 1, 4, 0.4, 0.6)];
        let prices = vec![50.0; 4];
        let envelope = Envelope { p_kw: vec![0.0; 4], q_kvar: vec![0.0; 4] };
        let err = schedule_fleet(&fleet, &prices, 0.25, &envelope, &SolverOptions::default())
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("departure"), "should flag the departure row: {msg}");
    }

    #[test]
    fn constant_price_cost_is_energy_times_price() {
        // Energy conservation makes every feasible schedule meeting the
        // departure target with equality cost the same under a flat price.
        let fleet = vec![ev(25, 1, 1, 8, 0.4, 0.7)];
        let prices = vec![80.0; 8];
        let res = schedule_fleet(&fleet, &prices, 0.25, &ample_envelope(8), &SolverOptions::default())
            .unwrap();
        let energy_kwh = (0.7 - 0.4) * 30.0 / 0.9;
        assert_relative_eq!(res.cost, 80.0 * energy_kwh / 1000.0, epsilon = 1e-6);
    }

    #[test]
    fn charging_prefers_the_cheap_period() {
        let fleet = vec![ev(25, 1, 1, 2, 0.4, 0.46)];
        let prices = vec![10.0, 200.0];
        let res = schedule_fleet(&fleet, &prices, 0.25, &ample_envelope(2), &SolverOptions::default())
            .unwrap();
        let s = &res.schedules[0];
        // 0.06 * 30 / 0.9 = 2.0 kWh, within one period at 11 kW (2.75 kWh).
        assert!(s.p_ev[0] > 1.0, "cheap period should carry the charge");
        assert!(s.p_ev[1] < 1e-6, "expensive period should stay idle");
    }

    #[test]
    fn invariants_hold_on_solved_fleet() {
        let fleet = vec![
            ev(25, 1, 2, 6, 0.30, 0.62),
            ev(25, 2, 1, 5, 0.45, 0.71),
            ev(25, 3, 3, 8, 0.52, 0.60),
        ];
        let prices = vec![40.0, 90.0, 30.0, 70.0, 55.0, 80.0, 20.0, 60.0];
        let envelope = Envelope { p_kw: vec![14.0; 8], q_kvar: vec![-9.0; 8] };
        let res = schedule_fleet(&fleet, &prices, 0.25, &envelope, &SolverOptions::default())
            .unwrap();
        for (s, ev) in res.schedules.iter().zip(&fleet) {
            // Window zeroing and socket discs.
            for t in 0..8 {
                if !(t + 1 >= ev.t_arr && t + 1 <= ev.t_dep) {
                    assert_eq!(s.p_ev[t], 0.0);
                    assert_eq!(s.q_ev[t], 0.0);
                }
                let s2 = s.p_ev[t] * s.p_ev[t] + s.q_ev[t] * s.q_ev[t];
                assert!(s2 <= ev.socket_kva * ev.socket_kva + 1e-9);
                assert!(s.soc[t] >= ev.soc_min - 1e-9 && s.soc[t] <= ev.soc_max + 1e-9);
            }
            // Departure contract and exact telescoping.
            assert!(s.soc[ev.t_dep - 1] >= ev.soc_desired - 1e-9);
            let total: f64 = s.p_ev.iter().sum();
            let telescoped = ev.soc_init + 0.9 * 0.25 * total / 30.0;
            assert!((s.soc[7] - telescoped).abs() <= 1e-9);
        }
        // Aggregate envelope compliance, exact.
        for t in 0..8 {
            let p_total: f64 = res.schedules.iter().map(|s| s.p_ev[t]).sum();
            assert!(p_total <= envelope.p_kw[t] + 1e-9);
            let q_total: f64 = res.schedules.iter().map(|s| s.q_ev[t]).sum();
            assert!(q_total >= envelope.q_kvar[t] - 1e-9);
        }
        // Cost recomputation.
        let mut recomputed = 0.0;
        for s in &res.schedules {
            for t in 0..8 {
                recomputed += prices[t] * s.p_ev[t] / 1000.0 * 0.25;
            }
        }
        assert!((res.cost - recomputed).abs() <= 1e-9);
    }

    #[test]
    fn raising_a_price_never_attracts_charge() {
        let fleet = vec![ev(25, 1, 1, 6, 0.30, 0.70)];
        let mut prices = vec![50.0, 60.0, 40.0, 45.0, 55.0, 65.0];
        let envelope = ample_envelope(6);
        let opts = SolverOptions::default();
        let base = schedule_fleet(&fleet, &prices, 0.25, &envelope, &opts).unwrap();
        let before = base.schedules[0].p_ev[2];
        prices[2] = 400.0;
        let bumped = schedule_fleet(&fleet, &prices, 0.25, &envelope, &opts).unwrap();
        let after = bumped.schedules[0].p_ev[2];
        assert!(after <= before + 1e-6, "raising the price attracted charge: {before} -> {after}");
    }

    #[test]
    fn envelope_length_mismatch_is_rejected() {
        let fleet = vec![ev(25, 1, 1, 2, 0.4, 0.5)];
        let prices = vec![50.0; 4];
        let envelope = Envelope { p_kw: vec![10.0; 3], q_kvar: vec![0.0; 3] };
        let err = build_aggregator_problem(&fleet, &prices, 0.25, &envelope).unwrap_err();
        assert!(matches!(err, SchedulerError::EnvelopeMismatch { .. }));
    }
}
