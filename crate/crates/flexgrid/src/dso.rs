//! DSO flexibility maximization.
//!
//! Builds the grid problem — maximize the total flexible EV charging load
//! subject to polar power-flow, capacity, and voltage constraints — and
//! solves it. The horizon decouples period by period (the balance rows carry
//! no inter-period state and the objective is a per-period sum), so the
//! multi-period program is solved as independent period blocks, in parallel
//! under the `parallel` feature. The assembled solution is audited against
//! the power-flow kernel independently of the solver.

use crate::acpf::{self, FlexMap, GeneratorDispatch, LineFlow, PeriodState};
use crate::exec;
use crate::grid::NetworkCase;
use crate::solver::{
    solve_nlp, NonlinRow, ProblemSpec, Radius, Sense, SolveReport, SolveStatus, SolverError,
    SolverOptions, INF,
};
use crate::uncertainty::{self, BalanceKind, BalanceSense, UncertaintyError, UncertaintyParams};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, thiserror::Error)]
pub enum DsoError {
    #[error("case has no aggregator buses flagged")]
    NoAggregatorBuses,
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
}

/// Whether the balance rows are the deterministic equalities or their
/// chance-constrained deterministic equivalents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DsoMode {
    Deterministic,
    Uncertain(UncertaintyParams),
}

impl DsoMode {
    pub fn params(&self) -> UncertaintyParams {
        match self {
            DsoMode::Deterministic => UncertaintyParams::zero(),
            DsoMode::Uncertain(p) => *p,
        }
    }
}

/// Whether EVs hold unity power factor (no reactive injection) or may inject
/// reactive power while charging (fourth-quadrant operation).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PfMode {
    Unity,
    NonUnity,
}

/// Per-bus operating limits the printed grid model does not provide: the
/// reactive-injection cap, from the fleet size times the socket rating.
#[derive(Debug, Clone, Default)]
pub struct DsoLimits {
    /// Per aggregator bus: max |Q^gf| in per-unit.
    pub q_gf_cap: BTreeMap<usize, f64>,
}

impl DsoLimits {
    /// Cap from `count` sockets of `socket_kva` each, per bus.
    pub fn from_fleet_counts(
        case: &NetworkCase,
        counts: &BTreeMap<usize, usize>,
        socket_kva: f64,
    ) -> Self {
        let mut q_gf_cap = BTreeMap::new();
        for bus in case.aggregator_buses() {
            let count = counts.get(&bus).copied().unwrap_or(0);
            q_gf_cap.insert(bus, count as f64 * socket_kva / 1000.0 / case.base_mva);
        }
        Self { q_gf_cap }
    }
}

/// Per-bus, per-period flexible envelopes (per-unit). `buses` ascending;
/// `p_gf[i][t]` pairs with `buses[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlexibilitySchedule {
    pub buses: Vec<usize>,
    pub p_gf: Vec<Vec<f64>>,
    pub q_gf: Vec<Vec<f64>>,
}

impl FlexibilitySchedule {
    pub fn row(&self, bus: usize) -> Option<(&[f64], &[f64])> {
        let i = self.buses.iter().position(|b| *b == bus)?;
        Some((&self.p_gf[i], &self.q_gf[i]))
    }

    /// Sum of all active entries, per-unit.
    pub fn total_p_gf_pu(&self) -> f64 {
        self.p_gf.iter().flatten().sum()
    }
}

/// Assembled DSO solution across the horizon. `total_flex` is the objective
/// in MW-periods (per-period MW values summed over the horizon).
#[derive(Debug, Clone)]
pub struct DsoSolution {
    pub schedule: FlexibilitySchedule,
    pub states: Vec<PeriodState>,
    pub dispatch: Vec<Vec<GeneratorDispatch>>,
    pub flows: Vec<Vec<LineFlow>>,
    pub report: SolveReport,
    pub total_flex: f64,
}

/// Variable layout of one period block.
#[derive(Debug, Clone)]
pub struct PeriodLayout {
    pub offset: usize,
    pub n_bus: usize,
    pub n_gen: usize,
    pub n_line: usize,
    pub agg_buses: Vec<usize>,
}

impl PeriodLayout {
    pub fn n_vars(&self) -> usize {
        2 * self.n_bus + 2 * self.n_gen + 2 * self.n_line + 2 * self.agg_buses.len()
    }
    pub fn v(&self, bus: usize) -> usize {
        self.offset + bus - 1
    }
    pub fn theta(&self, bus: usize) -> usize {
        self.offset + self.n_bus + bus - 1
    }
    pub fn gen_p(&self, g: usize) -> usize {
        self.offset + 2 * self.n_bus + g
    }
    pub fn gen_q(&self, g: usize) -> usize {
        self.offset + 2 * self.n_bus + self.n_gen + g
    }
    pub fn line_p(&self, l: usize) -> usize {
        self.offset + 2 * self.n_bus + 2 * self.n_gen + l
    }
    pub fn line_q(&self, l: usize) -> usize {
        self.offset + 2 * self.n_bus + 2 * self.n_gen + self.n_line + l
    }
    fn agg_idx(&self, bus: usize) -> usize {
        self.agg_buses
            .iter()
            .position(|b| *b == bus)
            .expect("aggregator bus")
    }
    pub fn flex_p(&self, bus: usize) -> usize {
        self.offset + 2 * self.n_bus + 2 * self.n_gen + 2 * self.n_line + self.agg_idx(bus)
    }
    pub fn flex_q(&self, bus: usize) -> usize {
        self.offset
            + 2 * self.n_bus
            + 2 * self.n_gen
            + 2 * self.n_line
            + self.agg_buses.len()
            + self.agg_idx(bus)
    }
}

/// Reference (slack) bus: the substation root. Its angle is pinned to zero.
pub const SLACK_BUS: usize = 1;

/// Append the variables and rows of period `t` (0-based) to `spec`.
/// Returns the block layout.
fn append_period(
    spec: &mut ProblemSpec,
    case: &NetworkCase,
    t: usize,
    balance: &[uncertainty::BalanceConstraint],
    pf_mode: PfMode,
    limits: &DsoLimits,
) -> PeriodLayout {
    let layout = PeriodLayout {
        offset: spec.n_vars(),
        n_bus: case.buses.len(),
        n_gen: case.generators.len(),
        n_line: case.lines.len(),
        agg_buses: case.aggregator_buses(),
    };
    let total_gen_cap: f64 = case.generators.iter().map(|g| g.s_max).sum();

    // Variables: V, theta, P_g, Q_g, P_l, Q_l, P^gf, Q^gf. Flat start with
    // dispatch seeded at the system net load.
    for b in &case.buses {
        spec.add_var(format!("v[{},{t}]", b.id), b.v_min, b.v_max, 1.0);
    }
    for b in &case.buses {
        spec.add_var(
            format!("theta[{},{t}]", b.id),
            -std::f64::consts::FRAC_PI_2,
            std::f64::consts::FRAC_PI_2,
            0.0,
        );
    }
    let net_p: f64 = case.buses.iter().map(|b| case.nominal_net_p(b.id, t)).sum();
    let net_q: f64 = case.buses.iter().map(|b| case.nominal_net_q(b.id, t)).sum();
    for (gi, g) in case.generators.iter().enumerate() {
        spec.add_var(
            format!("p_g[{gi},{t}]"),
            -2.0 * g.s_max,
            2.0 * g.s_max,
            net_p.clamp(-g.s_max, g.s_max),
        );
    }
    for (gi, g) in case.generators.iter().enumerate() {
        spec.add_var(
            format!("q_g[{gi},{t}]"),
            -2.0 * g.s_max,
            2.0 * g.s_max,
            net_q.clamp(-g.s_max, g.s_max),
        );
    }
    for (li, l) in case.lines.iter().enumerate() {
        spec.add_var(format!("p_l[{li},{t}]"), -2.0 * l.s_max, 2.0 * l.s_max, 0.0);
    }
    for (li, l) in case.lines.iter().enumerate() {
        spec.add_var(format!("q_l[{li},{t}]"), -2.0 * l.s_max, 2.0 * l.s_max, 0.0);
    }
    for bus in &layout.agg_buses {
        spec.add_var(format!("p_gf[{bus},{t}]"), 0.0, total_gen_cap, 0.0);
    }
    for bus in &layout.agg_buses {
        let cap = limits.q_gf_cap.get(bus).copied().unwrap_or(0.0);
        match pf_mode {
            // Pinned by an equality row below; bounds stay slack so the
            // barrier keeps a strict interior.
            PfMode::Unity => {
                spec.add_var(format!("q_gf[{bus},{t}]"), -cap.max(1.0), cap.max(1.0), 0.0)
            }
            // Injection only (fourth quadrant).
            PfMode::NonUnity => spec.add_var(format!("q_gf[{bus},{t}]"), -cap, 0.0, 0.0),
        };
    }

    // Flow definition rows: flow variable minus polar expression, per line.
    for (li, l) in case.lines.iter().enumerate() {
        let (g, b) = (l.conductance, l.susceptance);
        let (iv_s, iv_r) = (layout.v(l.from_bus), layout.v(l.to_bus));
        let (ith_s, ith_r) = (layout.theta(l.from_bus), layout.theta(l.to_bus));
        let ip = layout.line_p(li);
        let iq = layout.line_q(li);
        spec.nl_rows.push(NonlinRow {
            family: "flow_def_p".into(),
            label: format!("flow_def_p[line {}, t {}]", l.id, t + 1),
            lower: 0.0,
            upper: 0.0,
            sparsity: vec![ip, iv_s, iv_r, ith_s, ith_r],
            eval: Box::new(move |x| {
                x[ip] - acpf::line_flow_p(x[iv_s], x[iv_r], x[ith_s], x[ith_r], g, b)
            }),
            jac: Box::new(move |x, out| {
                let fp = acpf::flow_partials(x[iv_s], x[iv_r], x[ith_s], x[ith_r], g, b);
                out.push((ip, 1.0));
                out.push((iv_s, -fp.dp[0]));
                out.push((iv_r, -fp.dp[1]));
                out.push((ith_s, -fp.dp[2]));
                out.push((ith_r, -fp.dp[3]));
            }),
        });
        spec.nl_rows.push(NonlinRow {
            family: "flow_def_q".into(),
            label: format!("flow_def_q[line {}, t {}]", l.id, t + 1),
            lower: 0.0,
            upper: 0.0,
            sparsity: vec![iq, iv_s, iv_r, ith_s, ith_r],
            eval: Box::new(move |x| {
                x[iq] - acpf::line_flow_q(x[iv_s], x[iv_r], x[ith_s], x[ith_r], g, b)
            }),
            jac: Box::new(move |x, out| {
                let fp = acpf::flow_partials(x[iv_s], x[iv_r], x[ith_s], x[ith_r], g, b);
                out.push((iq, 1.0));
                out.push((iv_s, -fp.dq[0]));
                out.push((iv_r, -fp.dq[1]));
                out.push((ith_s, -fp.dq[2]));
                out.push((ith_r, -fp.dq[3]));
            }),
        });
    }

    // Balance rows from the (possibly transformed) constraint set. Each row
    // reads gen - sum(outgoing flow expressions) - flex (sense) rhs.
    struct LineTerm {
        g: f64,
        b: f64,
        iv_s: usize,
        iv_r: usize,
        ith_s: usize,
        ith_r: usize,
    }
    for bc in balance.iter().filter(|bc| bc.period == t) {
        let bus = bc.bus;
        let mut terms = Vec::new();
        for l in case.lines.iter().filter(|l| l.from_bus == bus || l.to_bus == bus) {
            let (s, r) = if l.from_bus == bus {
                (l.from_bus, l.to_bus)
            } else {
                (l.to_bus, l.from_bus)
            };
            terms.push(LineTerm {
                g: l.conductance,
                b: l.susceptance,
                iv_s: layout.v(s),
                iv_r: layout.v(r),
                ith_s: layout.theta(s),
                ith_r: layout.theta(r),
            });
        }
        let is_active = bc.kind == BalanceKind::Active;
        let gens: Vec<usize> = case
            .generators
            .iter()
            .enumerate()
            .filter(|(_, g)| g.bus == bus)
            .map(|(gi, _)| if is_active { layout.gen_p(gi) } else { layout.gen_q(gi) })
            .collect();
        let flex_var = if layout.agg_buses.contains(&bus) {
            Some(if is_active { layout.flex_p(bus) } else { layout.flex_q(bus) })
        } else {
            None
        };
        let mut sparsity: Vec<usize> = gens.clone();
        for term in &terms {
            sparsity.extend_from_slice(&[term.iv_s, term.iv_r, term.ith_s, term.ith_r]);
        }
        sparsity.sort_unstable();
        sparsity.dedup();
        if let Some(fv) = flex_var {
            sparsity.push(fv);
        }
        let rhs = bc.nominal + bc.margin;
        let (lower, upper) = match bc.sense {
            BalanceSense::Equality => (rhs, rhs),
            BalanceSense::GreaterEqual => (rhs, INF),
        };
        let family = if is_active { "balance_p" } else { "balance_q" };
        let terms = std::sync::Arc::new(terms);
        let gens_eval = gens.clone();
        let terms_eval = terms.clone();
        let eval: Box<dyn Fn(&[f64]) -> f64 + Send + Sync> = if is_active {
            Box::new(move |x| {
                let mut v: f64 = gens_eval.iter().map(|i| x[*i]).sum();
                for tm in terms_eval.iter() {
                    v -= acpf::line_flow_p(x[tm.iv_s], x[tm.iv_r], x[tm.ith_s], x[tm.ith_r], tm.g, tm.b);
                }
                if let Some(fv) = flex_var {
                    v -= x[fv];
                }
                v
            })
        } else {
            Box::new(move |x| {
                let mut v: f64 = gens_eval.iter().map(|i| x[*i]).sum();
                for tm in terms_eval.iter() {
                    v -= acpf::line_flow_q(x[tm.iv_s], x[tm.iv_r], x[tm.ith_s], x[tm.ith_r], tm.g, tm.b);
                }
                if let Some(fv) = flex_var {
                    v -= x[fv];
                }
                v
            })
        };
        let gens_jac = gens;
        let terms_jac = terms;
        spec.nl_rows.push(NonlinRow {
            family: family.into(),
            label: format!("{family}[bus {bus}, t {}]", t + 1),
            lower,
            upper,
            sparsity,
            eval,
            jac: Box::new(move |x, out| {
                for i in &gens_jac {
                    out.push((*i, 1.0));
                }
                for tm in terms_jac.iter() {
                    let fp = acpf::flow_partials(x[tm.iv_s], x[tm.iv_r], x[tm.ith_s], x[tm.ith_r], tm.g, tm.b);
                    let d = if is_active { fp.dp } else { fp.dq };
                    out.push((tm.iv_s, -d[0]));
                    out.push((tm.iv_r, -d[1]));
                    out.push((tm.ith_s, -d[2]));
                    out.push((tm.ith_r, -d[3]));
                }
                if let Some(fv) = flex_var {
                    out.push((fv, -1.0));
                }
            }),
        });
    }

    // Capacity discs, angle reference, and the unity-PF pins.
    for (gi, g) in case.generators.iter().enumerate() {
        spec.add_disc(
            "gen_capacity",
            format!("gen_capacity[gen {}, t {}]", g.id, t + 1),
            layout.gen_p(gi),
            Some(layout.gen_q(gi)),
            Radius::Const(g.s_max),
        );
    }
    for (li, l) in case.lines.iter().enumerate() {
        spec.add_disc(
            "line_capacity",
            format!("line_capacity[line {}, t {}]", l.id, t + 1),
            layout.line_p(li),
            Some(layout.line_q(li)),
            Radius::Const(l.s_max),
        );
    }
    spec.add_lin(
        "angle_ref",
        format!("angle_ref[t {}]", t + 1),
        vec![(layout.theta(SLACK_BUS), 1.0)],
        0.0,
        0.0,
    );
    if pf_mode == PfMode::Unity {
        for bus in layout.agg_buses.clone() {
            spec.add_lin(
                "pf_unity",
                format!("pf_unity[bus {bus}, t {}]", t + 1),
                vec![(layout.flex_q(bus), 1.0)],
                0.0,
                0.0,
            );
        }
    }

    layout
}

/// Build the full-horizon DSO problem: one period block per period, objective
/// maximizing the sum of flexible active loads.
pub fn build_dso_problem(
    case: &NetworkCase,
    mode: DsoMode,
    pf_mode: PfMode,
    limits: &DsoLimits,
) -> Result<(ProblemSpec, Vec<PeriodLayout>), DsoError> {
    if case.aggregator_buses().is_empty() {
        return Err(DsoError::NoAggregatorBuses);
    }
    let moments = uncertainty::case_moments(case);
    let balance = uncertainty::transform_balance(case, &mode.params(), &moments)?;
    let mut spec = ProblemSpec::new();
    let mut layouts = Vec::with_capacity(case.periods);
    for t in 0..case.periods {
        layouts.push(append_period(&mut spec, case, t, &balance, pf_mode, limits));
    }
    let mut objective = Vec::new();
    for layout in &layouts {
        for bus in layout.agg_buses.clone() {
            objective.push((layout.flex_p(bus), 1.0));
        }
    }
    spec.set_objective(Sense::Maximize, objective);
    Ok((spec, layouts))
}

/// Build and solve the single-period block `t`. Public so callers (and the
/// benchmark suite) can drive period solves directly.
pub fn solve_dso_period(
    case: &NetworkCase,
    t: usize,
    mode: DsoMode,
    pf_mode: PfMode,
    limits: &DsoLimits,
    options: &SolverOptions,
) -> Result<(SolveReport, PeriodLayout), DsoError> {
    if case.aggregator_buses().is_empty() {
        return Err(DsoError::NoAggregatorBuses);
    }
    let moments = uncertainty::case_moments(case);
    let balance = uncertainty::transform_balance(case, &mode.params(), &moments)?;
    let mut spec = ProblemSpec::new();
    let layout = append_period(&mut spec, case, t, &balance, pf_mode, limits);
    let mut objective = Vec::new();
    for bus in layout.agg_buses.clone() {
        objective.push((layout.flex_p(bus), 1.0));
    }
    spec.set_objective(Sense::Maximize, objective);
    let report = solve_nlp(&spec, options)?;
    Ok((report, layout))
}

/// Solve the DSO problem over the whole horizon and assemble the solution.
/// Period blocks run in parallel under the `parallel` feature.
pub fn solve_dso(
    case: &NetworkCase,
    mode: DsoMode,
    pf_mode: PfMode,
    limits: &DsoLimits,
    options: &SolverOptions,
) -> Result<DsoSolution, DsoError> {
    if case.aggregator_buses().is_empty() {
        return Err(DsoError::NoAggregatorBuses);
    }
    let results = exec::map_indexed(case.periods, |t| {
        solve_dso_period(case, t, mode, pf_mode, limits, options)
    });
    let mut period_reports = Vec::with_capacity(case.periods);
    for r in results {
        period_reports.push(r?);
    }
    Ok(assemble_solution(case, period_reports))
}

/// Sequential twin of [`solve_dso`]; the benchmark suite compares the two.
pub fn solve_dso_sequential(
    case: &NetworkCase,
    mode: DsoMode,
    pf_mode: PfMode,
    limits: &DsoLimits,
    options: &SolverOptions,
) -> Result<DsoSolution, DsoError> {
    if case.aggregator_buses().is_empty() {
        return Err(DsoError::NoAggregatorBuses);
    }
    let results = exec::map_indexed_seq(case.periods, |t| {
        solve_dso_period(case, t, mode, pf_mode, limits, options)
    });
    let mut period_reports = Vec::with_capacity(case.periods);
    for r in results {
        period_reports.push(r?);
    }
    Ok(assemble_solution(case, period_reports))
}

fn assemble_solution(case: &NetworkCase, results: Vec<(SolveReport, PeriodLayout)>) -> DsoSolution {
    let agg_buses = case.aggregator_buses();
    let n_bus = case.buses.len();
    let mut schedule = FlexibilitySchedule {
        buses: agg_buses.clone(),
        p_gf: vec![vec![0.0; case.periods]; agg_buses.len()],
        q_gf: vec![vec![0.0; case.periods]; agg_buses.len()],
    };
    let mut states = Vec::with_capacity(case.periods);
    let mut dispatch = Vec::with_capacity(case.periods);
    let mut flows = Vec::with_capacity(case.periods);
    let mut status = SolveStatus::Optimal;
    let mut message = String::new();
    let mut objective_pu = 0.0;
    let mut iterations = 0;
    let mut max_violation = 0.0f64;
    let mut kkt = 0.0f64;
    let mut wall = 0.0;

    for (t, (report, layout)) in results.iter().enumerate() {
        let x = &report.solution;
        states.push(PeriodState {
            v: (1..=n_bus).map(|b| x[layout.v(b)]).collect(),
            theta: (1..=n_bus).map(|b| x[layout.theta(b)]).collect(),
        });
        dispatch.push(
            (0..case.generators.len())
                .map(|g| GeneratorDispatch { p: x[layout.gen_p(g)], q: x[layout.gen_q(g)] })
                .collect(),
        );
        flows.push(
            (0..case.lines.len())
                .map(|l| LineFlow { p: x[layout.line_p(l)], q: x[layout.line_q(l)] })
                .collect(),
        );
        for (bi, bus) in agg_buses.iter().enumerate() {
            schedule.p_gf[bi][t] = x[layout.flex_p(*bus)];
            schedule.q_gf[bi][t] = x[layout.flex_q(*bus)];
        }
        if report.status != SolveStatus::Optimal && status == SolveStatus::Optimal {
            status = report.status;
            message = format!("period {} failed: {}", t + 1, report.message);
        }
        objective_pu += report.objective;
        iterations += report.iterations;
        max_violation = max_violation.max(report.max_violation);
        kkt = kkt.max(report.kkt_residual);
        wall += report.wall_time_s;
    }

    let total_flex = objective_pu * case.base_mva;
    DsoSolution {
        schedule,
        states,
        dispatch,
        flows,
        report: SolveReport {
            status,
            objective: objective_pu,
            solution: vec![],
            max_violation,
            kkt_residual: kkt,
            duality_gap: None,
            iterations,
            wall_time_s: wall,
            message,
        },
        total_flex,
    }
}

impl DsoSolution {
    /// Re-evaluate every grid-model row at the solved point, independently of
    /// the solver: flow definitions, balance rows (with mode margins), and
    /// operating limits. Returns the worst violation in per-unit.
    pub fn audit(&self, case: &NetworkCase, mode: DsoMode) -> Result<f64, DsoError> {
        let moments = uncertainty::case_moments(case);
        let balance = uncertainty::transform_balance(case, &mode.params(), &moments)?;
        let mut worst = 0.0f64;
        for t in 0..case.periods {
            let state = &self.states[t];
            for (li, l) in case.lines.iter().enumerate() {
                let s = state.bus(l.from_bus);
                let r = state.bus(l.to_bus);
                let p = acpf::line_flow_p(s.v, r.v, s.theta, r.theta, l.conductance, l.susceptance);
                let q = acpf::line_flow_q(s.v, r.v, s.theta, r.theta, l.conductance, l.susceptance);
                worst = worst.max((self.flows[t][li].p - p).abs());
                worst = worst.max((self.flows[t][li].q - q).abs());
            }
            let mut flex = FlexMap::new();
            for (bi, bus) in self.schedule.buses.iter().enumerate() {
                flex.insert(*bus, (self.schedule.p_gf[bi][t], self.schedule.q_gf[bi][t]));
            }
            for bc in balance.iter().filter(|bc| bc.period == t) {
                let (fp, fq) = flex.get(&bc.bus).copied().unwrap_or((0.0, 0.0));
                let lhs = match bc.kind {
                    BalanceKind::Active => {
                        acpf::balance_residual_p(case, bc.bus, t, state, &self.dispatch[t], fp)
                            + case.nominal_net_p(bc.bus, t)
                    }
                    BalanceKind::Reactive => {
                        acpf::balance_residual_q(case, bc.bus, t, state, &self.dispatch[t], fq)
                            + case.nominal_net_q(bc.bus, t)
                    }
                };
                let resid = lhs - (bc.nominal + bc.margin);
                match bc.sense {
                    BalanceSense::Equality => worst = worst.max(resid.abs()),
                    BalanceSense::GreaterEqual => worst = worst.max((-resid).max(0.0)),
                }
            }
        }
        for r in acpf::limit_residuals(case, &self.states, &self.dispatch, &self.flows) {
            worst = worst.max((-r.value).max(0.0));
        }
        Ok(worst)
    }

    /// Minimum voltage seen at `bus` over the horizon (per-unit).
    pub fn min_voltage(&self, bus: usize) -> f64 {
        self.states
            .iter()
            .map(|s| s.v[bus - 1])
            .fold(f64::INFINITY, f64::min)
    }
}

/// Solve the uncertain DSO problem once per epsilon value, holding delta and
/// lambda fixed. Returns `(epsilon, total_flex)` pairs in input order.
pub fn epsilon_sweep(
    case: &NetworkCase,
    eps_values: &[f64],
    delta: f64,
    lambda: f64,
    pf_mode: PfMode,
    limits: &DsoLimits,
    options: &SolverOptions,
) -> Result<Vec<(f64, f64)>, DsoError> {
    let mut out = Vec::with_capacity(eps_values.len());
    for &epsilon in eps_values {
        let mode = DsoMode::Uncertain(UncertaintyParams { delta, epsilon, lambda });
        let solution = solve_dso(case, mode, pf_mode, limits, options)?;
        out.push((epsilon, solution.total_flex));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Bus, Generator, Line, LoadProfile};

    pub(crate) fn three_bus_case() -> NetworkCase {
        // Substation at bus 1, aggregator at bus 3, single period.
        NetworkCase {
            buses: vec![
                Bus { id: 1, v_min: 0.95, v_max: 1.05, has_aggregator: false },
                Bus { id: 2, v_min: 0.9, v_max: 1.05, has_aggregator: false },
                Bus { id: 3, v_min: 0.9, v_max: 1.05, has_aggregator: true },
            ],
            lines: vec![
                Line { id: 1, from_bus: 1, to_bus: 2, conductance: 4.0, susceptance: 8.0, s_max: 1.2 },
                Line { id: 2, from_bus: 2, to_bus: 3, conductance: 3.0, susceptance: 6.0, s_max: 1.0 },
            ],
            generators: vec![Generator { id: 1, bus: 1, s_max: 1.5 }],
            loads: vec![
                LoadProfile { load_id: 1, bus: 2, p: vec![0.2], q: vec![0.08] },
                LoadProfile { load_id: 2, bus: 3, p: vec![0.15], q: vec![0.05] },
            ],
            pv_profiles: vec![],
            base_mva: 10.0,
            base_kv: 12.66,
            periods: 1,
            delta_h: 0.25,
            prices: vec![50.0],
        }
    }

    fn limits(case: &NetworkCase) -> DsoLimits {
        let mut counts = BTreeMap::new();
        for b in case.aggregator_buses() {
            counts.insert(b, 50);
        }
        DsoLimits::from_fleet_counts(case, &counts, 11.0)
    }

    #[test]
    fn variable_count_matches_structure() {
        let case = three_bus_case();
        let (spec, layouts) =
            build_dso_problem(&case, DsoMode::Deterministic, PfMode::Unity, &limits(&case)).unwrap();
        let expected = case.periods * (2 * 3 + 2 * 1 + 2 * 2 + 2 * 1);
        assert_eq!(spec.n_vars(), expected);
        assert_eq!(layouts.len(), case.periods);
        assert_eq!(spec.family_count("flow_def_p"), 2);
        assert_eq!(spec.family_count("balance_p"), 3);
        assert_eq!(spec.family_count("gen_capacity"), 1);
        assert_eq!(spec.family_count("line_capacity"), 2);
    }

    #[test]
    fn unity_mode_has_flex_q_pins() {
        let case = three_bus_case();
        let lim = limits(&case);
        let (spec, _) = build_dso_problem(&case, DsoMode::Deterministic, PfMode::Unity, &lim).unwrap();
        assert_eq!(spec.family_count("pf_unity"), 1);
        let (spec, _) = build_dso_problem(&case, DsoMode::Deterministic, PfMode::NonUnity, &lim).unwrap();
        assert_eq!(spec.family_count("pf_unity"), 0);
    }

    #[test]
    fn zero_margin_uncertain_matches_deterministic_row_bounds() {
        // epsilon = 0, delta = 0 with lambda set: same rhs, inequality sense.
        let case = three_bus_case();
        let lim = limits(&case);
        let params = UncertaintyParams { delta: 0.0, epsilon: 0.0, lambda: 6.0 };
        let (det, _) = build_dso_problem(&case, DsoMode::Deterministic, PfMode::Unity, &lim).unwrap();
        let (unc, _) = build_dso_problem(&case, DsoMode::Uncertain(params), PfMode::Unity, &lim).unwrap();
        let det_rows: Vec<_> = det.nl_rows.iter().filter(|r| r.family.starts_with("balance")).collect();
        let unc_rows: Vec<_> = unc.nl_rows.iter().filter(|r| r.family.starts_with("balance")).collect();
        assert_eq!(det_rows.len(), unc_rows.len());
        for (d, u) in det_rows.iter().zip(unc_rows.iter()) {
            assert_eq!(d.lower, u.lower, "{}", d.label);
            assert_eq!(d.upper, d.lower, "deterministic rows are equalities");
            assert_eq!(u.upper, INF, "uncertain rows are one-sided");
        }
    }

    #[test]
    fn solves_three_bus_and_audits_clean() {
        let case = three_bus_case();
        let lim = limits(&case);
        let sol = solve_dso(&case, DsoMode::Deterministic, PfMode::Unity, &lim, &SolverOptions::default())
            .unwrap();
        assert_eq!(sol.report.status, SolveStatus::Optimal, "{}", sol.report.message);
        assert!(sol.total_flex > 0.0);
        let worst = sol.audit(&case, DsoMode::Deterministic).unwrap();
        assert!(worst <= 1e-6, "audit violation {worst}");
        let sum_pu = sol.schedule.total_p_gf_pu();
        assert!((sol.total_flex - sum_pu * case.base_mva).abs() <= 1e-9);
    }

    #[test]
    fn non_unity_dominates_unity() {
        let case = three_bus_case();
        let lim = limits(&case);
        let opts = SolverOptions::default();
        let unity = solve_dso(&case, DsoMode::Deterministic, PfMode::Unity, &lim, &opts).unwrap();
        let non_unity = solve_dso(&case, DsoMode::Deterministic, PfMode::NonUnity, &lim, &opts).unwrap();
        assert_eq!(unity.report.status, SolveStatus::Optimal);
        assert_eq!(non_unity.report.status, SolveStatus::Optimal);
        assert!(
            non_unity.total_flex >= unity.total_flex - 1e-6,
            "non-unity {} < unity {}",
            non_unity.total_flex,
            unity.total_flex
        );
    }
}
