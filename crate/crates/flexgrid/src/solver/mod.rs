//! Constrained-optimization engines.
//!
//! [`ProblemSpec`] is the shared problem container: bounded variables, a
//! linear objective, ranged linear rows, smooth nonlinear rows with analytic
//! Jacobian callbacks, and disc (second-order cone) rows. [`nlp::solve_nlp`]
//! handles the nonconvex grid problem with a primal-dual interior-point
//! method; [`conic::solve_conic`] handles the convex aggregator problem.
//!
//! Every row belongs to a named family (`"balance_p"`, `"dynamics"`, ...)
//! used for structural queries and infeasibility diagnostics.

pub mod conic;
pub mod nlp;

pub use conic::solve_conic;
pub use nlp::solve_nlp;

use serde::{Deserialize, Serialize};

pub const INF: f64 = f64::INFINITY;

#[derive(Debug, thiserror::Error)]
pub enum SolverError {
    #[error("problem references undeclared variable {0}")]
    UnknownVariable(usize),
    #[error("conic solve requires a conic problem: {0}")]
    NotConic(String),
    #[error("malformed problem: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone)]
pub struct Variable {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    /// Initial value for the nonlinear engine; ignored by the conic engine.
    pub init: f64,
}

/// A ranged linear row: `lower <= a'x <= upper` (equality when the bounds
/// coincide).
#[derive(Debug, Clone)]
pub struct LinRow {
    pub family: String,
    pub label: String,
    pub entries: Vec<(usize, f64)>,
    pub lower: f64,
    pub upper: f64,
}

/// A smooth row `lower <= g(x) <= upper` with an analytic sparse Jacobian.
pub struct NonlinRow {
    pub family: String,
    pub label: String,
    pub lower: f64,
    pub upper: f64,
    /// Fixed sparsity pattern (variable indices touched by the row).
    pub sparsity: Vec<usize>,
    pub eval: Box<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    /// Writes `(var, coeff)` pairs for the current point; the set of vars
    /// must stay within `sparsity`.
    pub jac: Box<dyn Fn(&[f64], &mut Vec<(usize, f64)>) + Send + Sync>,
}

impl std::fmt::Debug for NonlinRow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NonlinRow")
            .field("family", &self.family)
            .field("label", &self.label)
            .field("lower", &self.lower)
            .field("upper", &self.upper)
            .field("sparsity", &self.sparsity)
            .finish()
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Radius {
    Const(f64),
    Var(usize),
}

/// Disc row `p^2 + q^2 <= radius^2` (`q` optional).
#[derive(Debug, Clone)]
pub struct DiscRow {
    pub family: String,
    pub label: String,
    pub p: usize,
    pub q: Option<usize>,
    pub radius: Radius,
}

/// Generic constrained problem with a linear objective.
#[derive(Debug, Default)]
pub struct ProblemSpec {
    pub sense: Option<Sense>,
    /// Sparse linear objective `(var, coeff)`.
    pub objective: Vec<(usize, f64)>,
    pub vars: Vec<Variable>,
    pub lin_rows: Vec<LinRow>,
    pub nl_rows: Vec<NonlinRow>,
    pub discs: Vec<DiscRow>,
}

impl ProblemSpec {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_var(&mut self, name: impl Into<String>, lower: f64, upper: f64, init: f64) -> usize {
        self.vars.push(Variable {
            name: name.into(),
            lower,
            upper,
            init: init.clamp(lower, upper),
        });
        self.vars.len() - 1
    }

    pub fn add_lin(
        &mut self,
        family: &str,
        label: impl Into<String>,
        entries: Vec<(usize, f64)>,
        lower: f64,
        upper: f64,
    ) {
        self.lin_rows.push(LinRow {
            family: family.to_string(),
            label: label.into(),
            entries,
            lower,
            upper,
        });
    }

    pub fn add_disc(
        &mut self,
        family: &str,
        label: impl Into<String>,
        p: usize,
        q: Option<usize>,
        radius: Radius,
    ) {
        self.discs.push(DiscRow {
            family: family.to_string(),
            label: label.into(),
            p,
            q,
            radius,
        });
    }

    pub fn set_objective(&mut self, sense: Sense, entries: Vec<(usize, f64)>) {
        self.sense = Some(sense);
        self.objective = entries;
    }

    pub fn n_vars(&self) -> usize {
        self.vars.len()
    }

    pub fn n_rows(&self) -> usize {
        self.lin_rows.len() + self.nl_rows.len() + self.discs.len()
    }

    /// Number of rows in a named family, across row kinds.
    pub fn family_count(&self, family: &str) -> usize {
        self.lin_rows.iter().filter(|r| r.family == family).count()
            + self.nl_rows.iter().filter(|r| r.family == family).count()
            + self.discs.iter().filter(|r| r.family == family).count()
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.objective.iter().map(|(i, c)| c * x[*i]).sum()
    }

    /// Validate variable references and bound sanity.
    pub fn check(&self) -> Result<(), SolverError> {
        let n = self.vars.len();
        let check_var = |i: usize| if i < n { Ok(()) } else { Err(SolverError::UnknownVariable(i)) };
        for (i, _) in &self.objective {
            check_var(*i)?;
        }
        for row in &self.lin_rows {
            for (i, _) in &row.entries {
                check_var(*i)?;
            }
            if row.lower > row.upper {
                return Err(SolverError::Malformed(format!(
                    "row {} has lower > upper",
                    row.label
                )));
            }
        }
        for row in &self.nl_rows {
            for i in &row.sparsity {
                check_var(*i)?;
            }
        }
        for d in &self.discs {
            check_var(d.p)?;
            if let Some(q) = d.q {
                check_var(q)?;
            }
            if let Radius::Var(r) = d.radius {
                check_var(r)?;
            }
        }
        for v in &self.vars {
            if v.lower > v.upper {
                return Err(SolverError::Malformed(format!(
                    "variable {} has lower > upper",
                    v.name
                )));
            }
        }
        Ok(())
    }

    /// Max scaled violation of every row and bound at `x`; rows are scaled by
    /// `max(1, ||row||_inf)` of their Jacobian. Returns the worst violation
    /// and the label of the worst row.
    pub fn max_violation(&self, x: &[f64]) -> (f64, String) {
        let mut worst = 0.0;
        let mut label = String::new();
        let mut consider = |v: f64, l: &str| {
            if v > worst {
                worst = v;
                label = l.to_string();
            }
        };
        for row in &self.lin_rows {
            let val: f64 = row.entries.iter().map(|(i, c)| c * x[*i]).sum();
            let scale = row
                .entries
                .iter()
                .map(|(_, c)| c.abs())
                .fold(1.0f64, f64::max);
            let viol = ((row.lower - val).max(0.0)).max((val - row.upper).max(0.0)) / scale;
            consider(viol, &row.label);
        }
        let mut jac_buf = Vec::new();
        for row in &self.nl_rows {
            let val = (row.eval)(x);
            jac_buf.clear();
            (row.jac)(x, &mut jac_buf);
            let scale = jac_buf.iter().map(|(_, c)| c.abs()).fold(1.0f64, f64::max);
            let viol = ((row.lower - val).max(0.0)).max((val - row.upper).max(0.0)) / scale;
            consider(viol, &row.label);
        }
        for d in &self.discs {
            let p = x[d.p];
            let q = d.q.map_or(0.0, |q| x[q]);
            let r = match d.radius {
                Radius::Const(c) => c,
                Radius::Var(i) => x[i],
            };
            let scale = (2.0 * p.abs()).max(2.0 * q.abs()).max(2.0 * r.abs()).max(1.0);
            let viol = (p * p + q * q - r * r).max(0.0) / scale;
            consider(viol, &d.label);
        }
        for (i, v) in self.vars.iter().enumerate() {
            let viol = (v.lower - x[i]).max(0.0).max((x[i] - v.upper).max(0.0));
            consider(viol, &v.name);
        }
        (worst, label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    IterationLimit,
    NumericalFailure,
}

/// Outcome of one optimization run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub status: SolveStatus,
    /// Objective in the caller's sense (a maximized value for `Maximize`).
    pub objective: f64,
    pub solution: Vec<f64>,
    pub max_violation: f64,
    pub kkt_residual: f64,
    /// Scaled primal-dual gap; reported by the conic engine.
    pub duality_gap: Option<f64>,
    pub iterations: usize,
    pub wall_time_s: f64,
    pub message: String,
}

/// Engine options; `seed` is recorded for manifest reproducibility (both
/// engines are deterministic and draw no randomness).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SolverOptions {
    pub max_iter: usize,
    pub feas_tol: f64,
    pub opt_tol: f64,
    pub seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 300,
            feas_tol: 1e-6,
            opt_tol: 1e-6,
            seed: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn family_counts_span_row_kinds() {
        let mut spec = ProblemSpec::new();
        let x = spec.add_var("x", 0.0, 10.0, 1.0);
        let y = spec.add_var("y", 0.0, 10.0, 1.0);
        spec.add_lin("cap", "cap[0]", vec![(x, 1.0), (y, 1.0)], -INF, 5.0);
        spec.add_lin("cap", "cap[1]", vec![(x, 1.0)], -INF, 3.0);
        spec.add_disc("disc", "disc[0]", x, Some(y), Radius::Const(2.0));
        assert_eq!(spec.family_count("cap"), 2);
        assert_eq!(spec.family_count("disc"), 1);
        assert_eq!(spec.family_count("absent"), 0);
        spec.check().unwrap();
    }

    #[test]
    fn violation_is_scaled_and_named() {
        let mut spec = ProblemSpec::new();
        let x = spec.add_var("x", 0.0, 1.0, 0.5);
        spec.add_lin("cap", "the_row", vec![(x, 100.0)], -INF, 10.0);
        let (v, label) = spec.max_violation(&[1.0]);
        assert_eq!(label, "the_row");
        // raw violation 90, scale 100
        assert!((v - 0.9).abs() < 1e-12);
    }
}
