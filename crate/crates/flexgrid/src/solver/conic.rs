//! Convex conic engine: linear objective, ranged linear rows, and disc
//! (second-order cone) rows.
//!
//! A presolve pass shrinks the aggregator problems before they reach the
//! interior-point backend: variables pinned by equal bounds become constants,
//! two-variable rows of the form `x_i - x_j = 0` merge variables (the idle
//! stretches of every SOC chain collapse), and singleton rows tighten bounds.
//! The backend is Clarabel; its primal-dual gap is surfaced in the report and
//! the returned point is re-checked against the original rows independently.

use super::{ProblemSpec, Radius, Sense, SolveReport, SolveStatus, SolverError, SolverOptions};
use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use std::time::Instant;

/// Union-find over variable indices with constant binding.
struct VarMerge {
    parent: Vec<usize>,
    /// Fixed value for a representative, if pinned.
    constant: Vec<Option<f64>>,
}

impl VarMerge {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            constant: vec![None; n],
        }
    }

    fn find(&mut self, i: usize) -> usize {
        if self.parent[i] != i {
            let root = self.find(self.parent[i]);
            self.parent[i] = root;
        }
        self.parent[i]
    }

    fn union(&mut self, a: usize, b: usize) -> Result<(), String> {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return Ok(());
        }
        match (self.constant[ra], self.constant[rb]) {
            (Some(ca), Some(cb)) if (ca - cb).abs() > 1e-9 => {
                return Err(format!("conflicting fixings {ca} vs {cb}"));
            }
            (Some(ca), _) => {
                self.parent[rb] = ra;
                self.constant[ra] = Some(ca);
            }
            (_, cb) => {
                self.parent[ra] = rb;
                if self.constant[rb].is_none() {
                    self.constant[rb] = cb;
                }
            }
        }
        Ok(())
    }

    fn fix(&mut self, i: usize, value: f64) -> Result<(), String> {
        let r = self.find(i);
        match self.constant[r] {
            Some(c) if (c - value).abs() > 1e-9 => Err(format!("conflicting fixings {c} vs {value}")),
            _ => {
                self.constant[r] = Some(value);
                Ok(())
            }
        }
    }

    fn value_of(&mut self, i: usize) -> Option<f64> {
        let r = self.find(i);
        self.constant[r]
    }
}

struct ReducedRow {
    entries: Vec<(usize, f64)>,
    shift: f64,
    lower: f64,
    upper: f64,
}

/// Solve a convex conic program to global optimality. Errors when the spec
/// carries nonlinear rows (those belong to [`super::solve_nlp`]).
pub fn solve_conic(spec: &ProblemSpec, options: &SolverOptions) -> Result<SolveReport, SolverError> {
    let start = Instant::now();
    spec.check()?;
    if !spec.nl_rows.is_empty() {
        return Err(SolverError::NotConic(format!(
            "{} smooth nonlinear rows present",
            spec.nl_rows.len()
        )));
    }
    let n = spec.n_vars();
    let sense = spec.sense.unwrap_or(Sense::Minimize);
    let flip = if sense == Sense::Minimize { 1.0 } else { -1.0 };

    if n == 0 {
        return Ok(SolveReport {
            status: SolveStatus::Optimal,
            objective: 0.0,
            solution: vec![],
            max_violation: 0.0,
            kkt_residual: 0.0,
            duality_gap: Some(0.0),
            iterations: 0,
            wall_time_s: start.elapsed().as_secs_f64(),
            message: "empty problem".into(),
        });
    }

    // ----- presolve -----
    let mut merge = VarMerge::new(n);
    let mut lower: Vec<f64> = spec.vars.iter().map(|v| v.lower).collect();
    let mut upper: Vec<f64> = spec.vars.iter().map(|v| v.upper).collect();
    for i in 0..n {
        if lower[i] == upper[i] {
            merge
                .fix(i, lower[i])
                .map_err(|e| SolverError::Malformed(e))?;
        }
    }
    // Alias sweep: equality rows `x_i - x_j = 0` and singleton equalities.
    let mut changed = true;
    let mut infeasible_row: Option<String> = None;
    while changed && infeasible_row.is_none() {
        changed = false;
        for row in &spec.lin_rows {
            if row.lower != row.upper {
                continue;
            }
            let mut live: Vec<(usize, f64)> = Vec::new();
            let mut shift = 0.0;
            for (i, c) in &row.entries {
                match merge.value_of(*i) {
                    Some(v) => shift += c * v,
                    None => live.push((merge.find(*i), *c)),
                }
            }
            // Combine duplicate representatives.
            live.sort_unstable_by_key(|(i, _)| *i);
            live.dedup_by(|b, a| {
                if a.0 == b.0 {
                    a.1 += b.1;
                    true
                } else {
                    false
                }
            });
            live.retain(|(_, c)| *c != 0.0);
            let rhs = row.lower - shift;
            match live.len() {
                0 => {
                    if rhs.abs() > 1e-9 {
                        infeasible_row = Some(row.label.clone());
                    }
                }
                1 => {
                    let (i, c) = live[0];
                    if merge.fix(i, rhs / c).is_err() {
                        infeasible_row = Some(row.label.clone());
                    } else {
                        changed = true;
                    }
                }
                2 => {
                    let ((i, ci), (j, cj)) = (live[0], live[1]);
                    if rhs == 0.0 && (ci + cj).abs() < 1e-15 && (ci.abs() - 1.0).abs() < 1e-15 {
                        if merge.union(i, j).is_err() {
                            infeasible_row = Some(row.label.clone());
                        } else {
                            changed = true;
                        }
                    }
                }
                _ => {}
            }
        }
    }
    if let Some(label) = infeasible_row {
        return Ok(infeasible_report(spec, start, &format!("presolve: row {label} is unsatisfiable")));
    }

    // Tightest bounds per representative.
    for i in 0..n {
        let r = merge.find(i);
        if r != i {
            lower[r] = lower[r].max(lower[i]);
            upper[r] = upper[r].min(upper[i]);
        }
    }

    // Map representatives to compact columns.
    let mut col_of = vec![usize::MAX; n];
    let mut cols = Vec::new();
    for i in 0..n {
        let r = merge.find(i);
        if merge.constant[r].is_none() && col_of[r] == usize::MAX {
            col_of[r] = cols.len();
            cols.push(r);
        }
    }
    let n_red = cols.len();

    let mut reduced_rows: Vec<ReducedRow> = Vec::new();
    for row in &spec.lin_rows {
        let mut live: Vec<(usize, f64)> = Vec::new();
        let mut shift = 0.0;
        for (i, c) in &row.entries {
            match merge.value_of(*i) {
                Some(v) => shift += c * v,
                None => live.push((col_of[merge.find(*i)], *c)),
            }
        }
        live.sort_unstable_by_key(|(i, _)| *i);
        live.dedup_by(|b, a| {
            if a.0 == b.0 {
                a.1 += b.1;
                true
            } else {
                false
            }
        });
        live.retain(|(_, c)| *c != 0.0);
        if live.is_empty() {
            if shift < row.lower - 1e-9 || shift > row.upper + 1e-9 {
                return Ok(infeasible_report(
                    spec,
                    start,
                    &format!("presolve: row {} is unsatisfiable", row.label),
                ));
            }
            continue;
        }
        reduced_rows.push(ReducedRow {
            entries: live,
            shift,
            lower: row.lower,
            upper: row.upper,
        });
    }

    // ----- assemble the Clarabel problem -----
    // Cones are emitted as: zero cone (equalities), nonnegative cone
    // (inequalities and live variable bounds), then one SOC per live disc.
    let mut a_rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut b_vec: Vec<f64> = Vec::new();
    let mut n_eq_rows = 0usize;

    for row in &reduced_rows {
        if row.lower == row.upper {
            a_rows.push(row.entries.clone());
            b_vec.push(row.lower - row.shift);
            n_eq_rows += 1;
        }
    }
    let mut n_ineq_rows = 0usize;
    {
        let mut push_ineq = |entries: Vec<(usize, f64)>, rhs: f64| {
            a_rows.push(entries);
            b_vec.push(rhs);
            n_ineq_rows += 1;
        };
        for row in &reduced_rows {
            if row.lower == row.upper {
                continue;
            }
            if row.upper.is_finite() {
                push_ineq(row.entries.clone(), row.upper - row.shift);
            }
            if row.lower.is_finite() {
                push_ineq(
                    row.entries.iter().map(|(i, c)| (*i, -c)).collect(),
                    row.shift - row.lower,
                );
            }
        }
        for (col, &var) in cols.iter().enumerate() {
            if upper[var].is_finite() {
                push_ineq(vec![(col, 1.0)], upper[var]);
            }
            if lower[var].is_finite() {
                push_ineq(vec![(col, -1.0)], -lower[var]);
            }
        }
    }

    let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
    if n_eq_rows > 0 {
        cones.push(SupportedConeT::ZeroConeT(n_eq_rows));
    }
    if n_ineq_rows > 0 {
        cones.push(SupportedConeT::NonnegativeConeT(n_ineq_rows));
    }

    for d in &spec.discs {
        // SOC triple (radius, p, q); constant members fold into b.
        let mut triple: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
        let (r_entries, r_const) = match d.radius {
            Radius::Const(c) => (Vec::new(), c),
            Radius::Var(i) => match merge.value_of(i) {
                Some(v) => (Vec::new(), v),
                None => (vec![(col_of[merge.find(i)], -1.0)], 0.0),
            },
        };
        triple.push((r_entries, r_const));
        let mut live_members = 0usize;
        for member in [Some(d.p), d.q].into_iter().flatten() {
            match merge.value_of(member) {
                Some(v) => triple.push((Vec::new(), v)),
                None => {
                    live_members += 1;
                    triple.push((vec![(col_of[merge.find(member)], -1.0)], 0.0));
                }
            }
        }
        let radius_live = !triple[0].0.is_empty();
        if live_members == 0 && !radius_live {
            // Fully pinned: verify directly.
            let norm2: f64 = triple[1..].iter().map(|(_, c)| c * c).sum();
            if norm2 > triple[0].1 * triple[0].1 + 1e-9 {
                return Ok(infeasible_report(
                    spec,
                    start,
                    &format!("presolve: disc {} is violated by fixed variables", d.label),
                ));
            }
            continue;
        }
        cones.push(SupportedConeT::SecondOrderConeT(triple.len()));
        for (entries, cst) in triple {
            a_rows.push(entries);
            b_vec.push(cst);
        }
    }

    // Objective over reduced columns plus the constant part.
    let mut q = vec![0.0; n_red];
    let mut obj_const = 0.0;
    for (i, c) in &spec.objective {
        match merge.value_of(*i) {
            Some(v) => obj_const += flip * c * v,
            None => q[col_of[merge.find(*i)]] += flip * c,
        }
    }

    // Everything may have been eliminated (e.g. a fully pinned fleet).
    if n_red == 0 {
        let x_full = assemble_full(spec, &mut merge, &[], &col_of);
        let (max_violation, worst) = spec.max_violation(&x_full);
        let feasible = max_violation <= options.feas_tol;
        return Ok(SolveReport {
            status: if feasible { SolveStatus::Optimal } else { SolveStatus::Infeasible },
            objective: flip * obj_const,
            solution: x_full,
            max_violation,
            kkt_residual: 0.0,
            duality_gap: Some(0.0),
            iterations: 0,
            wall_time_s: start.elapsed().as_secs_f64(),
            message: if feasible {
                "fully presolved".into()
            } else {
                format!("presolved point infeasible at {worst}")
            },
        });
    }

    let m = a_rows.len();
    let a_csc = rows_to_csc(m, n_red, &a_rows);
    let p_csc = CscMatrix::<f64>::zeros((n_red, n_red));
    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .max_iter(options.max_iter.max(50) as u32)
        .tol_feas(1e-10)
        .tol_gap_abs(1e-10)
        .tol_gap_rel(1e-10)
        .build()
        .map_err(|e| SolverError::Malformed(format!("solver settings: {e:?}")))?;
    let mut solver = DefaultSolver::new(&p_csc, &q, &a_csc, &b_vec, &cones, settings);
    solver.solve();
    let sol = &solver.solution;

    let status = match sol.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => SolveStatus::Optimal,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => SolveStatus::Infeasible,
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => SolveStatus::Unbounded,
        SolverStatus::MaxIterations => SolveStatus::IterationLimit,
        _ => SolveStatus::NumericalFailure,
    };

    let x_full = assemble_full(spec, &mut merge, &sol.x, &col_of);
    let (max_violation, worst_label) = spec.max_violation(&x_full);
    let objective = spec.objective_value(&x_full);
    let gap_scale = sol.obj_val.abs().max(sol.obj_val_dual.abs()).max(1.0);
    let duality_gap = (sol.obj_val - sol.obj_val_dual).abs() / gap_scale;

    let mut status = status;
    let mut message = format!("backend status {:?}", sol.status);
    if status == SolveStatus::Optimal && max_violation > options.feas_tol {
        status = SolveStatus::NumericalFailure;
        message = format!("re-check failed: violation {max_violation:.3e} at {worst_label}");
    }

    Ok(SolveReport {
        status,
        objective,
        solution: x_full,
        max_violation,
        kkt_residual: sol.r_prim.max(sol.r_dual),
        duality_gap: Some(duality_gap),
        iterations: sol.iterations as usize,
        wall_time_s: start.elapsed().as_secs_f64(),
        message,
    })
}

fn infeasible_report(spec: &ProblemSpec, start: Instant, message: &str) -> SolveReport {
    SolveReport {
        status: SolveStatus::Infeasible,
        objective: f64::NAN,
        solution: vec![f64::NAN; spec.n_vars()],
        max_violation: f64::INFINITY,
        kkt_residual: f64::INFINITY,
        duality_gap: None,
        iterations: 0,
        wall_time_s: start.elapsed().as_secs_f64(),
        message: message.to_string(),
    }
}

fn assemble_full(
    spec: &ProblemSpec,
    merge: &mut VarMerge,
    x_red: &[f64],
    col_of: &[usize],
) -> Vec<f64> {
    (0..spec.n_vars())
        .map(|i| match merge.value_of(i) {
            Some(v) => v,
            None => x_red[col_of[merge.find(i)]],
        })
        .collect()
}

fn rows_to_csc(m: usize, n: usize, rows: &[Vec<(usize, f64)>]) -> CscMatrix<f64> {
    let mut by_col: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (r, row) in rows.iter().enumerate() {
        for (c, v) in row {
            by_col[*c].push((r, *v));
        }
    }
    let mut colptr = Vec::with_capacity(n + 1);
    let mut rowval = Vec::new();
    let mut nzval = Vec::new();
    colptr.push(0);
    for col in &mut by_col {
        col.sort_unstable_by_key(|(r, _)| *r);
        for (r, v) in col.iter() {
            rowval.push(*r);
            nzval.push(*v);
        }
        colptr.push(rowval.len());
    }
    CscMatrix::new(m, n, colptr, rowval, nzval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::INF;
    use approx::assert_relative_eq;

    /// minimize p s.t. p >= 0.5, p^2 + q^2 <= 1.
    #[test]
    fn cone_interior_minimum() {
        let mut spec = ProblemSpec::new();
        let p = spec.add_var("p", 0.5, INF, 0.6);
        let q = spec.add_var("q", -INF, INF, 0.0);
        spec.add_disc("socket", "socket[0]", p, Some(q), Radius::Const(1.0));
        spec.set_objective(Sense::Minimize, vec![(p, 1.0)]);
        let rep = solve_conic(&spec, &SolverOptions::default()).unwrap();
        assert_eq!(rep.status, SolveStatus::Optimal, "{}", rep.message);
        assert_relative_eq!(rep.objective, 0.5, epsilon = 1e-6);
        assert!(rep.duality_gap.unwrap() <= 1e-6);
    }

    #[test]
    fn empty_problem_is_trivially_optimal() {
        let mut spec = ProblemSpec::new();
        spec.set_objective(Sense::Minimize, vec![]);
        let rep = solve_conic(&spec, &SolverOptions::default()).unwrap();
        assert_eq!(rep.status, SolveStatus::Optimal);
        assert_eq!(rep.objective, 0.0);
    }

    #[test]
    fn alias_chains_collapse() {
        // x0 = x1 = x2 by pairwise equalities; minimize x2 with x0 >= 3.
        let mut spec = ProblemSpec::new();
        let x0 = spec.add_var("x0", 3.0, INF, 3.0);
        let x1 = spec.add_var("x1", -INF, INF, 0.0);
        let x2 = spec.add_var("x2", -INF, INF, 0.0);
        spec.add_lin("chain", "c01", vec![(x0, 1.0), (x1, -1.0)], 0.0, 0.0);
        spec.add_lin("chain", "c12", vec![(x1, 1.0), (x2, -1.0)], 0.0, 0.0);
        spec.set_objective(Sense::Minimize, vec![(x2, 1.0)]);
        let rep = solve_conic(&spec, &SolverOptions::default()).unwrap();
        assert_eq!(rep.status, SolveStatus::Optimal, "{}", rep.message);
        assert_relative_eq!(rep.objective, 3.0, epsilon = 1e-7);
        assert_relative_eq!(rep.solution[x1], 3.0, epsilon = 1e-7);
    }

    #[test]
    fn pinned_variables_fold_into_constants() {
        let mut spec = ProblemSpec::new();
        let x = spec.add_var("x", 2.0, 2.0, 2.0); // pinned
        let y = spec.add_var("y", 0.0, INF, 0.0);
        spec.add_lin("tie", "tie[0]", vec![(x, 1.0), (y, 1.0)], 5.0, INF);
        spec.set_objective(Sense::Minimize, vec![(y, 1.0)]);
        let rep = solve_conic(&spec, &SolverOptions::default()).unwrap();
        assert_eq!(rep.status, SolveStatus::Optimal, "{}", rep.message);
        assert_relative_eq!(rep.solution[x], 2.0, epsilon = 1e-12);
        assert_relative_eq!(rep.objective, 3.0, epsilon = 1e-7);
    }

    #[test]
    fn infeasible_pinning_is_reported() {
        let mut spec = ProblemSpec::new();
        let x = spec.add_var("x", 0.0, 0.0, 0.0);
        spec.add_lin("need", "x_ge_1", vec![(x, 1.0)], 1.0, 1.0);
        spec.set_objective(Sense::Minimize, vec![]);
        let rep = solve_conic(&spec, &SolverOptions::default()).unwrap();
        assert_eq!(rep.status, SolveStatus::Infeasible);
        assert!(rep.message.contains("x_ge_1"), "{}", rep.message);
    }

    #[test]
    fn unbounded_is_detected() {
        let mut spec = ProblemSpec::new();
        let x = spec.add_var("x", -INF, INF, 0.0);
        spec.set_objective(Sense::Minimize, vec![(x, 1.0)]);
        let rep = solve_conic(&spec, &SolverOptions::default()).unwrap();
        assert_eq!(rep.status, SolveStatus::Unbounded, "{}", rep.message);
    }
}
