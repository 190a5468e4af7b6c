//! Polar AC power-flow kernel.
//!
//! Pure functions over one period of network state: line-flow expressions,
//! bus balance residuals, operating-limit residuals, and analytic first
//! derivatives of every residual. The DSO problem builder assembles its
//! constraint rows from these; the post-solve audit re-evaluates them
//! independently of the solver.
//!
//! Orientation convention: a flow leaving bus `n` along line `l` is computed
//! with `n` as the sending end. When `n` is the receiving end the expression
//! is evaluated with the endpoints swapped, so losses accrue on both ends.

use crate::grid::NetworkCase;
use std::collections::BTreeMap;

/// Per-unit feasibility tolerance applied to all residual checks.
pub const FEAS_TOL: f64 = 1e-6;

/// Voltage magnitude and angle at one bus in one period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BusState {
    pub v: f64,
    pub theta: f64,
}

/// State of every bus in one period; vectors are indexed by `bus id - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodState {
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
}

impl PeriodState {
    /// All voltages at 1.0 pu, all angles at zero.
    pub fn flat(n_bus: usize) -> Self {
        Self {
            v: vec![1.0; n_bus],
            theta: vec![0.0; n_bus],
        }
    }

    pub fn bus(&self, bus_id: usize) -> BusState {
        BusState {
            v: self.v[bus_id - 1],
            theta: self.theta[bus_id - 1],
        }
    }
}

/// Sending-end oriented line flow (per-unit).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LineFlow {
    pub p: f64,
    pub q: f64,
}

/// Generator output in one period (per-unit).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GeneratorDispatch {
    pub p: f64,
    pub q: f64,
}

/// Flexible load drawn (p) and reactive quantity (q) at an aggregator bus,
/// keyed by bus id. Buses absent from the map carry zero flex.
pub type FlexMap = BTreeMap<usize, (f64, f64)>;

/// Active power entering line `l` at its sending end.
///
/// `g`/`b` are the conductance and susceptance of the line in the convention
/// where both are nonnegative for a resistive-inductive branch.
pub fn line_flow_p(v_s: f64, v_r: f64, theta_s: f64, theta_r: f64, g: f64, b: f64) -> f64 {
    let d = theta_s - theta_r;
    g * v_s * v_s - g * v_s * v_r * d.cos() + b * v_s * v_r * d.sin()
}

/// Reactive power entering line `l` at its sending end.
pub fn line_flow_q(v_s: f64, v_r: f64, theta_s: f64, theta_r: f64, g: f64, b: f64) -> f64 {
    let d = theta_s - theta_r;
    b * v_s * v_s - b * v_s * v_r * d.cos() - g * v_s * v_r * d.sin()
}

/// Partial derivatives of the sending-end flow pair with respect to
/// `(v_s, v_r, theta_s, theta_r)`.
#[derive(Debug, Clone, Copy)]
pub struct FlowPartials {
    pub p: f64,
    pub q: f64,
    pub dp: [f64; 4],
    pub dq: [f64; 4],
}

pub fn flow_partials(v_s: f64, v_r: f64, theta_s: f64, theta_r: f64, g: f64, b: f64) -> FlowPartials {
    let d = theta_s - theta_r;
    let (sin_d, cos_d) = d.sin_cos();
    let p = g * v_s * v_s - g * v_s * v_r * cos_d + b * v_s * v_r * sin_d;
    let q = b * v_s * v_s - b * v_s * v_r * cos_d - g * v_s * v_r * sin_d;
    let dp_dth = g * v_s * v_r * sin_d + b * v_s * v_r * cos_d;
    let dq_dth = b * v_s * v_r * sin_d - g * v_s * v_r * cos_d;
    FlowPartials {
        p,
        q,
        dp: [
            2.0 * g * v_s - g * v_r * cos_d + b * v_r * sin_d,
            -g * v_s * cos_d + b * v_s * sin_d,
            dp_dth,
            -dp_dth,
        ],
        dq: [
            2.0 * b * v_s - b * v_r * cos_d - g * v_r * sin_d,
            -b * v_s * cos_d - g * v_s * sin_d,
            dq_dth,
            -dq_dth,
        ],
    }
}

/// Flow leaving `bus` along `line` (per-unit), with `bus` as sending end.
/// `line` is a positional index into `case.lines`.
pub fn oriented_flow(case: &NetworkCase, line: usize, state: &PeriodState, bus: usize) -> LineFlow {
    let l = &case.lines[line];
    let (s, r) = if l.from_bus == bus {
        (l.from_bus, l.to_bus)
    } else {
        debug_assert_eq!(l.to_bus, bus, "bus must be an endpoint of the line");
        (l.to_bus, l.from_bus)
    };
    let bs = state.bus(s);
    let br = state.bus(r);
    LineFlow {
        p: line_flow_p(bs.v, br.v, bs.theta, br.theta, l.conductance, l.susceptance),
        q: line_flow_q(bs.v, br.v, bs.theta, br.theta, l.conductance, l.susceptance),
    }
}

/// Active balance residual at `bus` in 0-based period `t`:
/// generation minus outgoing flows minus flexible load minus net demand.
pub fn balance_residual_p(
    case: &NetworkCase,
    bus: usize,
    t: usize,
    state: &PeriodState,
    dispatch: &[GeneratorDispatch],
    flex_p: f64,
) -> f64 {
    let gen: f64 = case
        .generators
        .iter()
        .enumerate()
        .filter(|(_, g)| g.bus == bus)
        .map(|(i, _)| dispatch[i].p)
        .sum();
    let flows: f64 = case
        .lines
        .iter()
        .enumerate()
        .filter(|(_, l)| l.from_bus == bus || l.to_bus == bus)
        .map(|(i, _)| oriented_flow(case, i, state, bus).p)
        .sum();
    gen - flows - flex_p - case.nominal_net_p(bus, t)
}

/// Reactive balance residual at `bus` in 0-based period `t`.
pub fn balance_residual_q(
    case: &NetworkCase,
    bus: usize,
    t: usize,
    state: &PeriodState,
    dispatch: &[GeneratorDispatch],
    flex_q: f64,
) -> f64 {
    let gen: f64 = case
        .generators
        .iter()
        .enumerate()
        .filter(|(_, g)| g.bus == bus)
        .map(|(i, _)| dispatch[i].q)
        .sum();
    let flows: f64 = case
        .lines
        .iter()
        .enumerate()
        .filter(|(_, l)| l.from_bus == bus || l.to_bus == bus)
        .map(|(i, _)| oriented_flow(case, i, state, bus).q)
        .sum();
    gen - flows - flex_q - case.nominal_net_q(bus, t)
}

/// Identifies one constraint row of the grid model. Line and generator
/// indices are positional (into `case.lines` / `case.generators`); buses are
/// addressed by id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintId {
    FlowDefP { line: usize },
    FlowDefQ { line: usize },
    BalanceP { bus: usize },
    BalanceQ { bus: usize },
    GenCapacity { gen: usize },
    LineCapacity { line: usize },
    VoltageLower { bus: usize },
    VoltageUpper { bus: usize },
}

impl std::fmt::Display for ConstraintId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::FlowDefP { line } => write!(f, "flow_def_p[line {line}]"),
            Self::FlowDefQ { line } => write!(f, "flow_def_q[line {line}]"),
            Self::BalanceP { bus } => write!(f, "balance_p[bus {bus}]"),
            Self::BalanceQ { bus } => write!(f, "balance_q[bus {bus}]"),
            Self::GenCapacity { gen } => write!(f, "gen_capacity[gen {gen}]"),
            Self::LineCapacity { line } => write!(f, "line_capacity[line {line}]"),
            Self::VoltageLower { bus } => write!(f, "v_lower[bus {bus}]"),
            Self::VoltageUpper { bus } => write!(f, "v_upper[bus {bus}]"),
        }
    }
}

/// One operating-limit residual; feasible iff `value >= -FEAS_TOL`.
#[derive(Debug, Clone, Copy)]
pub struct LimitResidual {
    pub period: usize,
    pub id: ConstraintId,
    pub value: f64,
    pub feasible: bool,
}

/// Capacity and voltage-band residuals for every generator, line, and bus
/// over all solved periods. `states`, `dispatch`, `flows` are indexed by
/// 0-based period.
pub fn limit_residuals(
    case: &NetworkCase,
    states: &[PeriodState],
    dispatch: &[Vec<GeneratorDispatch>],
    flows: &[Vec<LineFlow>],
) -> Vec<LimitResidual> {
    let mut out = Vec::new();
    let mut push = |period: usize, id: ConstraintId, value: f64| {
        out.push(LimitResidual {
            period,
            id,
            value,
            feasible: value >= -FEAS_TOL,
        });
    };
    for t in 0..states.len() {
        for (gi, g) in case.generators.iter().enumerate() {
            let d = dispatch[t][gi];
            push(t, ConstraintId::GenCapacity { gen: gi }, g.s_max * g.s_max - d.p * d.p - d.q * d.q);
        }
        for (li, l) in case.lines.iter().enumerate() {
            let fl = flows[t][li];
            push(t, ConstraintId::LineCapacity { line: li }, l.s_max * l.s_max - fl.p * fl.p - fl.q * fl.q);
        }
        for b in &case.buses {
            let v = states[t].v[b.id - 1];
            push(t, ConstraintId::VoltageLower { bus: b.id }, v - b.v_min);
            push(t, ConstraintId::VoltageUpper { bus: b.id }, b.v_max - v);
        }
    }
    out
}

/// Symbolic reference to one decision variable of the single-period grid
/// model. Buses by id; generators and lines positional.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VarRef {
    V(usize),
    Theta(usize),
    GenP(usize),
    GenQ(usize),
    LineP(usize),
    LineQ(usize),
    FlexP(usize),
    FlexQ(usize),
}

/// One Jacobian row: the residual's nonzero partials.
#[derive(Debug, Clone)]
pub struct JacRow {
    pub id: ConstraintId,
    pub value: f64,
    pub entries: Vec<(VarRef, f64)>,
}

/// Residuals and analytic first derivatives of every grid-model row in one
/// period: flow definitions (`P_l/Q_l` minus the polar expression), bus
/// balances, capacity discs, and voltage bands.
pub fn jacobian(
    case: &NetworkCase,
    t: usize,
    state: &PeriodState,
    dispatch: &[GeneratorDispatch],
    flows: &[LineFlow],
    flex: &FlexMap,
) -> Vec<JacRow> {
    let mut rows = Vec::new();

    // Flow definitions: variable minus expression, sending-end orientation.
    for (li, l) in case.lines.iter().enumerate() {
        let s = state.bus(l.from_bus);
        let r = state.bus(l.to_bus);
        let fp = flow_partials(s.v, r.v, s.theta, r.theta, l.conductance, l.susceptance);
        rows.push(JacRow {
            id: ConstraintId::FlowDefP { line: li },
            value: flows[li].p - fp.p,
            entries: vec![
                (VarRef::LineP(li), 1.0),
                (VarRef::V(l.from_bus), -fp.dp[0]),
                (VarRef::V(l.to_bus), -fp.dp[1]),
                (VarRef::Theta(l.from_bus), -fp.dp[2]),
                (VarRef::Theta(l.to_bus), -fp.dp[3]),
            ],
        });
        rows.push(JacRow {
            id: ConstraintId::FlowDefQ { line: li },
            value: flows[li].q - fp.q,
            entries: vec![
                (VarRef::LineQ(li), 1.0),
                (VarRef::V(l.from_bus), -fp.dq[0]),
                (VarRef::V(l.to_bus), -fp.dq[1]),
                (VarRef::Theta(l.from_bus), -fp.dq[2]),
                (VarRef::Theta(l.to_bus), -fp.dq[3]),
            ],
        });
    }

    // Bus balances. Flows are re-derived from (V, theta) with the leaving
    // orientation, so these rows touch voltage variables, not flow variables.
    for b in &case.buses {
        let (flex_p, flex_q) = flex.get(&b.id).copied().unwrap_or((0.0, 0.0));
        let mut p_entries: Vec<(VarRef, f64)> = Vec::new();
        let mut q_entries: Vec<(VarRef, f64)> = Vec::new();
        for (gi, g) in case.generators.iter().enumerate() {
            if g.bus == b.id {
                p_entries.push((VarRef::GenP(gi), 1.0));
                q_entries.push((VarRef::GenQ(gi), 1.0));
            }
        }
        let mut dv_p: BTreeMap<usize, f64> = BTreeMap::new();
        let mut dth_p: BTreeMap<usize, f64> = BTreeMap::new();
        let mut dv_q: BTreeMap<usize, f64> = BTreeMap::new();
        let mut dth_q: BTreeMap<usize, f64> = BTreeMap::new();
        for l in &case.lines {
            let (s_id, r_id) = if l.from_bus == b.id {
                (l.from_bus, l.to_bus)
            } else if l.to_bus == b.id {
                (l.to_bus, l.from_bus)
            } else {
                continue;
            };
            let s = state.bus(s_id);
            let r = state.bus(r_id);
            let fp = flow_partials(s.v, r.v, s.theta, r.theta, l.conductance, l.susceptance);
            // Outgoing flow enters the residual negatively.
            *dv_p.entry(s_id).or_insert(0.0) -= fp.dp[0];
            *dv_p.entry(r_id).or_insert(0.0) -= fp.dp[1];
            *dth_p.entry(s_id).or_insert(0.0) -= fp.dp[2];
            *dth_p.entry(r_id).or_insert(0.0) -= fp.dp[3];
            *dv_q.entry(s_id).or_insert(0.0) -= fp.dq[0];
            *dv_q.entry(r_id).or_insert(0.0) -= fp.dq[1];
            *dth_q.entry(s_id).or_insert(0.0) -= fp.dq[2];
            *dth_q.entry(r_id).or_insert(0.0) -= fp.dq[3];
        }
        for (bus, c) in &dv_p {
            p_entries.push((VarRef::V(*bus), *c));
        }
        for (bus, c) in &dth_p {
            p_entries.push((VarRef::Theta(*bus), *c));
        }
        for (bus, c) in &dv_q {
            q_entries.push((VarRef::V(*bus), *c));
        }
        for (bus, c) in &dth_q {
            q_entries.push((VarRef::Theta(*bus), *c));
        }
        if b.has_aggregator {
            p_entries.push((VarRef::FlexP(b.id), -1.0));
            q_entries.push((VarRef::FlexQ(b.id), -1.0));
        }
        rows.push(JacRow {
            id: ConstraintId::BalanceP { bus: b.id },
            value: balance_residual_p(case, b.id, t, state, dispatch, flex_p),
            entries: p_entries,
        });
        rows.push(JacRow {
            id: ConstraintId::BalanceQ { bus: b.id },
            value: balance_residual_q(case, b.id, t, state, dispatch, flex_q),
            entries: q_entries,
        });
    }

    // Capacity discs and voltage bands.
    for (gi, g) in case.generators.iter().enumerate() {
        let d = dispatch[gi];
        rows.push(JacRow {
            id: ConstraintId::GenCapacity { gen: gi },
            value: g.s_max * g.s_max - d.p * d.p - d.q * d.q,
            entries: vec![(VarRef::GenP(gi), -2.0 * d.p), (VarRef::GenQ(gi), -2.0 * d.q)],
        });
    }
    for (li, l) in case.lines.iter().enumerate() {
        let fl = flows[li];
        rows.push(JacRow {
            id: ConstraintId::LineCapacity { line: li },
            value: l.s_max * l.s_max - fl.p * fl.p - fl.q * fl.q,
            entries: vec![(VarRef::LineP(li), -2.0 * fl.p), (VarRef::LineQ(li), -2.0 * fl.q)],
        });
    }
    for b in &case.buses {
        let v = state.v[b.id - 1];
        rows.push(JacRow {
            id: ConstraintId::VoltageLower { bus: b.id },
            value: v - b.v_min,
            entries: vec![(VarRef::V(b.id), 1.0)],
        });
        rows.push(JacRow {
            id: ConstraintId::VoltageUpper { bus: b.id },
            value: b.v_max - v,
            entries: vec![(VarRef::V(b.id), -1.0)],
        });
    }

    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Bus, Generator, Line, LoadProfile, NetworkCase};
    use approx::assert_relative_eq;

    fn two_bus_case() -> NetworkCase {
        NetworkCase {
            buses: vec![
                Bus { id: 1, v_min: 0.95, v_max: 1.05, has_aggregator: false },
                Bus { id: 2, v_min: 0.9, v_max: 1.05, has_aggregator: true },
            ],
            lines: vec![Line {
                id: 1,
                from_bus: 1,
                to_bus: 2,
                conductance: 2.0,
                susceptance: 5.0,
                s_max: 1.0,
            }],
            generators: vec![Generator { id: 1, bus: 1, s_max: 2.0 }],
            loads: vec![LoadProfile { load_id: 1, bus: 2, p: vec![0.3], q: vec![0.1] }],
            pv_profiles: vec![],
            base_mva: 10.0,
            base_kv: 12.66,
            periods: 1,
            delta_h: 0.25,
            prices: vec![40.0],
        }
    }

    #[test]
    fn flat_start_flows_are_zero() {
        assert_eq!(line_flow_p(1.0, 1.0, 0.3, 0.3, 2.0, -5.0), 0.0);
        assert_eq!(line_flow_q(1.0, 1.0, 0.3, 0.3, 2.0, -5.0), 0.0);
    }

    #[test]
    fn lossless_line_reduction() {
        let (v_s, v_r, th_s, th_r, b) = (1.02, 0.97, 0.04, -0.01, 4.0);
        let d: f64 = th_s - th_r;
        assert_relative_eq!(
            line_flow_p(v_s, v_r, th_s, th_r, 0.0, b),
            b * v_s * v_r * d.sin(),
            epsilon = 1e-15
        );
        assert_relative_eq!(
            line_flow_q(v_s, v_r, th_s, th_r, 3.0, 0.0),
            -3.0 * v_s * v_r * d.sin(),
            epsilon = 1e-15
        );
    }

    /// Cross-check Eq-style polar expressions against complex power
    /// arithmetic S = V_s * conj(y (V_s - V_r)) with y = g - j*b.
    #[test]
    fn flow_matches_complex_arithmetic() {
        let (v_s, v_r, th_s, th_r, g, b): (f64, f64, f64, f64, f64, f64) =
            (1.0, 0.95, 0.05, 0.0, 2.0, -5.0);
        let (re_s, im_s) = (v_s * th_s.cos(), v_s * th_s.sin());
        let (re_r, im_r) = (v_r * th_r.cos(), v_r * th_r.sin());
        // i = y * (V_s - V_r), y = g - j b
        let (dre, dim) = (re_s - re_r, im_s - im_r);
        let (i_re, i_im) = (g * dre + b * dim, g * dim - b * dre);
        // s = V_s * conj(i)
        let p = re_s * i_re + im_s * i_im;
        let q = im_s * i_re - re_s * i_im;
        assert_relative_eq!(line_flow_p(v_s, v_r, th_s, th_r, g, b), p, epsilon = 1e-14);
        assert_relative_eq!(line_flow_q(v_s, v_r, th_s, th_r, g, b), q, epsilon = 1e-14);
    }

    #[test]
    fn resistive_loss_is_nonnegative() {
        // Forward plus reverse sending-end active flow equals the line loss.
        let cases = [
            (1.0, 0.92, 0.1, -0.05),
            (1.05, 1.0, -0.2, 0.1),
            (0.9, 1.1, 0.0, 0.3),
        ];
        for (v_s, v_r, th_s, th_r) in cases {
            let fwd = line_flow_p(v_s, v_r, th_s, th_r, 1.7, 3.9);
            let rev = line_flow_p(v_r, v_s, th_r, th_s, 1.7, 3.9);
            assert!(fwd + rev >= 0.0, "loss must be nonnegative, got {}", fwd + rev);
        }
    }

    #[test]
    fn isolated_balance_is_zero() {
        // Bus 1 with its generator matching zero net demand and no flex: the
        // residual reduces to dispatch minus line flow at flat start.
        let case = two_bus_case();
        let state = PeriodState::flat(2);
        let dispatch = vec![GeneratorDispatch { p: 0.0, q: 0.0 }];
        // Flat start: no flows, bus 1 has no load.
        assert_eq!(balance_residual_p(&case, 1, 0, &state, &dispatch, 0.0), 0.0);
    }

    #[test]
    fn balance_is_linear_in_flex() {
        let case = two_bus_case();
        let state = PeriodState { v: vec![1.0, 0.98], theta: vec![0.0, -0.02] };
        let dispatch = vec![GeneratorDispatch { p: 0.4, q: 0.2 }];
        let base = balance_residual_p(&case, 2, 0, &state, &dispatch, 0.0);
        let shifted = balance_residual_p(&case, 2, 0, &state, &dispatch, 0.125);
        assert_relative_eq!(base - shifted, 0.125, epsilon = 1e-15);
    }

    #[test]
    fn limit_residual_boundaries() {
        let case = two_bus_case();
        let state = PeriodState { v: vec![1.0, 0.9], theta: vec![0.0, 0.0] };
        let dispatch = vec![vec![GeneratorDispatch { p: 2.0, q: 0.0 }]];
        let flows = vec![vec![LineFlow { p: 1.0, q: 0.0 }]];
        let states = vec![state];
        let res = limit_residuals(&case, &states, &dispatch, &flows);
        let gen = res.iter().find(|r| matches!(r.id, ConstraintId::GenCapacity { .. })).unwrap();
        assert_eq!(gen.value, 0.0);
        assert!(gen.feasible);
        let line = res.iter().find(|r| matches!(r.id, ConstraintId::LineCapacity { .. })).unwrap();
        assert_eq!(line.value, 0.0);
        let vlo = res
            .iter()
            .find(|r| matches!(r.id, ConstraintId::VoltageLower { bus: 2 }))
            .unwrap();
        assert_eq!(vlo.value, 0.0);
    }

    #[test]
    fn jacobian_flex_entry_is_minus_one() {
        let case = two_bus_case();
        let state = PeriodState::flat(2);
        let dispatch = vec![GeneratorDispatch::default()];
        let flows = vec![LineFlow::default()];
        let mut flex = FlexMap::new();
        flex.insert(2, (0.0, 0.0));
        let rows = jacobian(&case, 0, &state, &dispatch, &flows, &flex);
        let bal = rows
            .iter()
            .find(|r| r.id == ConstraintId::BalanceP { bus: 2 })
            .unwrap();
        let coeff = bal
            .entries
            .iter()
            .find(|(v, _)| *v == VarRef::FlexP(2))
            .map(|(_, c)| *c)
            .unwrap();
        assert_eq!(coeff, -1.0);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        // Dense finite-difference check on a random-ish state; the full
        // 100-state sweep lives in the acceptance suite.
        let case = two_bus_case();
        let state = PeriodState { v: vec![1.01, 0.97], theta: vec![0.0, -0.03] };
        let dispatch = vec![GeneratorDispatch { p: 0.35, q: 0.15 }];
        let flows = vec![LineFlow { p: 0.3, q: 0.1 }];
        let mut flex = FlexMap::new();
        flex.insert(2, (0.05, -0.01));

        let eval = |st: &PeriodState, dp: &[GeneratorDispatch], fl: &[LineFlow], fx: &FlexMap| {
            jacobian(&case, 0, st, dp, fl, fx)
                .into_iter()
                .map(|r| r.value)
                .collect::<Vec<f64>>()
        };

        let rows = jacobian(&case, 0, &state, &dispatch, &flows, &flex);
        let h = 1e-6;
        for (ri, row) in rows.iter().enumerate() {
            for (var, analytic) in &row.entries {
                let mut stp = state.clone();
                let mut stm = state.clone();
                let mut dpp = dispatch.clone();
                let mut dpm = dispatch.clone();
                let mut flp = flows.clone();
                let mut flm = flows.clone();
                let mut fxp = flex.clone();
                let mut fxm = flex.clone();
                match var {
                    VarRef::V(b) => {
                        stp.v[b - 1] += h;
                        stm.v[b - 1] -= h;
                    }
                    VarRef::Theta(b) => {
                        stp.theta[b - 1] += h;
                        stm.theta[b - 1] -= h;
                    }
                    VarRef::GenP(g) => {
                        dpp[*g].p += h;
                        dpm[*g].p -= h;
                    }
                    VarRef::GenQ(g) => {
                        dpp[*g].q += h;
                        dpm[*g].q -= h;
                    }
                    VarRef::LineP(l) => {
                        flp[*l].p += h;
                        flm[*l].p -= h;
                    }
                    VarRef::LineQ(l) => {
                        flp[*l].q += h;
                        flm[*l].q -= h;
                    }
                    VarRef::FlexP(b) => {
                        fxp.get_mut(b).unwrap().0 += h;
                        fxm.get_mut(b).unwrap().0 -= h;
                    }
                    VarRef::FlexQ(b) => {
                        fxp.get_mut(b).unwrap().1 += h;
                        fxm.get_mut(b).unwrap().1 -= h;
                    }
                }
                let fd = (eval(&stp, &dpp, &flp, &fxp)[ri] - eval(&stm, &dpm, &flm, &fxm)[ri]) / (2.0 * h);
                let scale = analytic.abs().max(1.0);
                assert!(
                    (fd - analytic).abs() / scale < 1e-6,
                    "row {} var {:?}: analytic {} vs fd {}",
                    row.id,
                    var,
                    analytic,
                    fd
                );
            }
        }
    }
}
