//! Primal-dual interior-point method for smooth nonlinear programs.
//!
//! Handles the nonconvex grid problem: linear objective, nonlinear equality
//! and inequality rows, disc rows, and variable bounds. Inequalities get
//! slacks with a log barrier; bounds get the barrier directly. Curvature is
//! approximated with damped BFGS (no second derivatives anywhere), steps are
//! accepted by a filter line search, and a Gauss-Newton restoration phase
//! recovers from stalled steps. A returned `Optimal` status always passes an
//! independent feasibility re-check performed outside the iteration loop.

use super::{ProblemSpec, Radius, Sense, SolveReport, SolveStatus, SolverError, SolverOptions};
use nalgebra::{DMatrix, DVector};
use std::time::Instant;

const MU_INIT: f64 = 0.1;
const KAPPA_EPS: f64 = 10.0;
const KAPPA_MU: f64 = 0.2;
const THETA_MU: f64 = 1.5;
const TAU_MIN: f64 = 0.99;
const GAMMA_THETA: f64 = 1e-5;
const GAMMA_PHI: f64 = 1e-5;
const ETA_PHI: f64 = 1e-4;
const S_MAX: f64 = 100.0;
const ALPHA_MIN: f64 = 1e-12;

#[derive(Clone, Copy)]
enum RowSrc {
    Lin(usize),
    Nl(usize),
    Disc(usize),
}

/// One normalized row; its value is `sign * (raw(x) - shift)`, constrained
/// to `= 0` (equality rows) or `>= 0` (inequality rows).
#[derive(Clone, Copy)]
struct NormRow {
    src: RowSrc,
    sign: f64,
    shift: f64,
}

struct Normalized<'a> {
    spec: &'a ProblemSpec,
    n: usize,
    /// Objective coefficients in minimize sense.
    c: Vec<f64>,
    flip: f64,
    lower: Vec<f64>,
    upper: Vec<f64>,
    eq: Vec<NormRow>,
    ineq: Vec<NormRow>,
}

impl<'a> Normalized<'a> {
    fn build(spec: &'a ProblemSpec) -> Result<Self, SolverError> {
        spec.check()?;
        let sense = spec.sense.unwrap_or(Sense::Minimize);
        let flip = match sense {
            Sense::Minimize => 1.0,
            Sense::Maximize => -1.0,
        };
        let n = spec.n_vars();
        let mut c = vec![0.0; n];
        for (i, coeff) in &spec.objective {
            c[*i] += flip * coeff;
        }
        let mut eq = Vec::new();
        let mut ineq = Vec::new();
        let mut push_ranged = |src: RowSrc, lower: f64, upper: f64| {
            if lower == upper {
                eq.push(NormRow { src, sign: 1.0, shift: lower });
            } else {
                if lower.is_finite() {
                    ineq.push(NormRow { src, sign: 1.0, shift: lower });
                }
                if upper.is_finite() {
                    ineq.push(NormRow { src, sign: -1.0, shift: upper });
                }
            }
        };
        for (i, row) in spec.lin_rows.iter().enumerate() {
            push_ranged(RowSrc::Lin(i), row.lower, row.upper);
        }
        for (i, row) in spec.nl_rows.iter().enumerate() {
            push_ranged(RowSrc::Nl(i), row.lower, row.upper);
        }
        for i in 0..spec.discs.len() {
            // Disc rows are always `radius^2 - p^2 - q^2 >= 0`.
            ineq.push(NormRow { src: RowSrc::Disc(i), sign: 1.0, shift: 0.0 });
        }
        let mut lower: Vec<f64> = spec.vars.iter().map(|v| v.lower).collect();
        let mut upper: Vec<f64> = spec.vars.iter().map(|v| v.upper).collect();
        // The barrier needs strict interiors; relax degenerate boxes a hair.
        for i in 0..n {
            if upper[i] - lower[i] < 1e-10 {
                let h = 1e-8 * lower[i].abs().max(1.0);
                lower[i] -= h;
                upper[i] += h;
            }
        }
        Ok(Self { spec, n, c, flip, lower, upper, eq, ineq })
    }

    fn raw(&self, src: RowSrc, x: &[f64]) -> f64 {
        match src {
            RowSrc::Lin(i) => self.spec.lin_rows[i]
                .entries
                .iter()
                .map(|(j, c)| c * x[*j])
                .sum(),
            RowSrc::Nl(i) => (self.spec.nl_rows[i].eval)(x),
            RowSrc::Disc(i) => {
                let d = &self.spec.discs[i];
                let r = match d.radius {
                    Radius::Const(c) => c,
                    Radius::Var(j) => x[j],
                };
                let q = d.q.map_or(0.0, |j| x[j]);
                r * r - x[d.p] * x[d.p] - q * q
            }
        }
    }

    fn raw_jac(&self, src: RowSrc, x: &[f64], out: &mut Vec<(usize, f64)>) {
        out.clear();
        match src {
            RowSrc::Lin(i) => out.extend(self.spec.lin_rows[i].entries.iter().copied()),
            RowSrc::Nl(i) => (self.spec.nl_rows[i].jac)(x, out),
            RowSrc::Disc(i) => {
                let d = &self.spec.discs[i];
                out.push((d.p, -2.0 * x[d.p]));
                if let Some(j) = d.q {
                    out.push((j, -2.0 * x[j]));
                }
                if let Radius::Var(j) = d.radius {
                    out.push((j, 2.0 * x[j]));
                }
            }
        }
    }

    fn value(&self, row: &NormRow, x: &[f64]) -> f64 {
        row.sign * (self.raw(row.src, x) - row.shift)
    }

    /// Dense Jacobian matrix of a row set (rows x n).
    fn jac_matrix(&self, rows: &[NormRow], x: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(rows.len(), self.n);
        let mut buf = Vec::new();
        for (r, row) in rows.iter().enumerate() {
            self.raw_jac(row.src, x, &mut buf);
            for (j, c) in &buf {
                m[(r, *j)] += row.sign * c;
            }
        }
        m
    }

    fn label(&self, src: RowSrc) -> &str {
        match src {
            RowSrc::Lin(i) => &self.spec.lin_rows[i].label,
            RowSrc::Nl(i) => &self.spec.nl_rows[i].label,
            RowSrc::Disc(i) => &self.spec.discs[i].label,
        }
    }
}

/// Solve a smooth constrained program. `spec.vars[i].init` seeds the primal
/// point (pushed strictly inside bounds). Deterministic for identical inputs.
pub fn solve_nlp(spec: &ProblemSpec, options: &SolverOptions) -> Result<SolveReport, SolverError> {
    let start = Instant::now();
    let norm = Normalized::build(spec)?;
    let n = norm.n;
    if n == 0 {
        return Ok(SolveReport {
            status: SolveStatus::Optimal,
            objective: 0.0,
            solution: vec![],
            max_violation: 0.0,
            kkt_residual: 0.0,
            duality_gap: None,
            iterations: 0,
            wall_time_s: start.elapsed().as_secs_f64(),
            message: "empty problem".into(),
        });
    }
    let m_eq = norm.eq.len();
    let m_in = norm.ineq.len();

    // Initial point pushed inside bounds.
    let mut x = DVector::from_iterator(n, spec.vars.iter().map(|v| v.init));
    for i in 0..n {
        let (l, u) = (norm.lower[i], norm.upper[i]);
        if l.is_finite() && u.is_finite() {
            let pad = (0.01 * (u - l)).min(1e-2);
            x[i] = x[i].clamp(l + pad, u - pad);
        } else if l.is_finite() {
            x[i] = x[i].max(l + 1e-2 * l.abs().max(1.0) * 1e-2).max(l + 1e-4);
        } else if u.is_finite() {
            x[i] = x[i].min(u - 1e-4);
        }
    }

    let eval_eq = |x: &DVector<f64>| {
        DVector::from_iterator(m_eq, norm.eq.iter().map(|r| norm.value(r, x.as_slice())))
    };
    let eval_in = |x: &DVector<f64>| {
        DVector::from_iterator(m_in, norm.ineq.iter().map(|r| norm.value(r, x.as_slice())))
    };

    let mut c_eq = eval_eq(&x);
    let mut c_in = eval_in(&x);
    let mut s = DVector::from_iterator(m_in, c_in.iter().map(|v| v.max(1e-3)));
    let mut y = DVector::zeros(m_eq);
    let mut z = DVector::from_iterator(m_in, s.iter().map(|si| MU_INIT / si));
    let has_l: Vec<bool> = norm.lower.iter().map(|l| l.is_finite()).collect();
    let has_u: Vec<bool> = norm.upper.iter().map(|u| u.is_finite()).collect();
    let mut z_l = DVector::from_iterator(
        n,
        (0..n).map(|i| if has_l[i] { MU_INIT / (x[i] - norm.lower[i]) } else { 0.0 }),
    );
    let mut z_u = DVector::from_iterator(
        n,
        (0..n).map(|i| if has_u[i] { MU_INIT / (norm.upper[i] - x[i]) } else { 0.0 }),
    );

    let mut b_mat = DMatrix::<f64>::identity(n, n);
    let mut mu = MU_INIT;
    let mut tau = TAU_MIN.max(1.0 - mu);
    let mut filter: Vec<(f64, f64)> = Vec::new();
    let mut restorations = 0usize;
    let mut status = SolveStatus::IterationLimit;
    let mut iterations = 0usize;
    let mut message = String::new();

    let grad = DVector::from_column_slice(&norm.c);

    let theta_of = |ce: &DVector<f64>, ci: &DVector<f64>, s: &DVector<f64>| -> f64 {
        ce.iter().map(|v| v.abs()).sum::<f64>()
            + ci.iter().zip(s.iter()).map(|(v, si)| (v - si).abs()).sum::<f64>()
    };
    let phi_of = |x: &DVector<f64>, s: &DVector<f64>, mu: f64| -> f64 {
        let mut val: f64 = (0..n).map(|i| norm.c[i] * x[i]).sum();
        for si in s.iter() {
            val -= mu * si.ln();
        }
        for i in 0..n {
            if has_l[i] {
                val -= mu * (x[i] - norm.lower[i]).ln();
            }
            if has_u[i] {
                val -= mu * (norm.upper[i] - x[i]).ln();
            }
        }
        val
    };

    'outer: for iter in 0..options.max_iter {
        iterations = iter + 1;
        let j_eq = norm.jac_matrix(&norm.eq, x.as_slice());
        let j_in = norm.jac_matrix(&norm.ineq, x.as_slice());

        // Dual residual and optimality error.
        let mut r_d = grad.clone();
        if m_eq > 0 {
            r_d -= j_eq.transpose() * &y;
        }
        if m_in > 0 {
            r_d -= j_in.transpose() * &z;
        }
        r_d -= &z_l;
        r_d += &z_u;

        let dual_scale = {
            let mult_sum: f64 = y.iter().map(|v| v.abs()).sum::<f64>()
                + z.iter().map(|v| v.abs()).sum::<f64>()
                + z_l.iter().map(|v| v.abs()).sum::<f64>()
                + z_u.iter().map(|v| v.abs()).sum::<f64>();
            let count = (m_eq + m_in + 2 * n).max(1);
            (mult_sum / count as f64).max(S_MAX) / S_MAX
        };
        let err_dual = r_d.amax() / dual_scale;
        let err_primal = c_eq.amax().max(
            c_in.iter()
                .zip(s.iter())
                .map(|(v, si)| (v - si).abs())
                .fold(0.0f64, f64::max),
        );
        let comp_err = |mu: f64| -> f64 {
            let mut e = 0.0f64;
            for i in 0..m_in {
                e = e.max((s[i] * z[i] - mu).abs());
            }
            for i in 0..n {
                if has_l[i] {
                    e = e.max(((x[i] - norm.lower[i]) * z_l[i] - mu).abs());
                }
                if has_u[i] {
                    e = e.max(((norm.upper[i] - x[i]) * z_u[i] - mu).abs());
                }
            }
            e / dual_scale
        };

        let err_0 = err_dual.max(err_primal).max(comp_err(0.0));
        if err_0 <= options.opt_tol && err_primal <= options.feas_tol {
            status = SolveStatus::Optimal;
            break;
        }
        let err_mu = err_dual.max(err_primal).max(comp_err(mu));
        if err_mu <= KAPPA_EPS * mu && mu > options.opt_tol / 20.0 {
            mu = (options.opt_tol / 20.0).max(KAPPA_MU.min(mu.powf(THETA_MU - 1.0)) * mu);
            tau = TAU_MIN.max(1.0 - mu);
            filter.clear();
        }

        // KKT system.
        let dim = n + m_eq + m_in;
        let mut rhs = DVector::zeros(dim);
        for i in 0..n {
            let mut v = -norm.c[i];
            if has_l[i] {
                v += mu / (x[i] - norm.lower[i]);
            }
            if has_u[i] {
                v -= mu / (norm.upper[i] - x[i]);
            }
            rhs[i] = v;
        }
        if m_eq > 0 {
            let jty = j_eq.transpose() * &y;
            for i in 0..n {
                rhs[i] += jty[i];
            }
        }
        if m_in > 0 {
            let jtz = j_in.transpose() * &z;
            for i in 0..n {
                rhs[i] += jtz[i];
            }
        }
        for r in 0..m_eq {
            rhs[n + r] = -c_eq[r];
        }
        for r in 0..m_in {
            rhs[n + m_eq + r] = -c_in[r] + mu / z[r];
        }

        let mut delta_w = 0.0f64;
        let sol = loop {
            let mut k = DMatrix::zeros(dim, dim);
            for i in 0..n {
                for j in 0..n {
                    k[(i, j)] = b_mat[(i, j)];
                }
                let mut d = delta_w;
                if has_l[i] {
                    d += z_l[i] / (x[i] - norm.lower[i]);
                }
                if has_u[i] {
                    d += z_u[i] / (norm.upper[i] - x[i]);
                }
                k[(i, i)] += d;
            }
            for r in 0..m_eq {
                for cidx in 0..n {
                    let v = j_eq[(r, cidx)];
                    k[(n + r, cidx)] = v;
                    k[(cidx, n + r)] = v;
                }
                k[(n + r, n + r)] = -1e-9;
            }
            for r in 0..m_in {
                for cidx in 0..n {
                    let v = j_in[(r, cidx)];
                    k[(n + m_eq + r, cidx)] = v;
                    k[(cidx, n + m_eq + r)] = v;
                }
                k[(n + m_eq + r, n + m_eq + r)] = -s[r] / z[r];
            }
            match k.lu().solve(&rhs) {
                Some(sol)
                    if sol.iter().all(|v| v.is_finite())
                        && sol.rows(0, n).amax() < 1e10 =>
                {
                    break sol;
                }
                _ => {
                    delta_w = if delta_w == 0.0 { 1e-8 } else { delta_w * 100.0 };
                    if delta_w > 1e12 {
                        status = SolveStatus::NumericalFailure;
                        message = "KKT system could not be regularized".into();
                        break 'outer;
                    }
                }
            }
        };

        let dx = DVector::from_iterator(n, (0..n).map(|i| sol[i]));
        let dy = DVector::from_iterator(m_eq, (0..m_eq).map(|r| -sol[n + r]));
        let dz = DVector::from_iterator(m_in, (0..m_in).map(|r| -sol[n + m_eq + r]));
        let ds = DVector::from_iterator(m_in, (0..m_in).map(|r| mu / z[r] - s[r] - s[r] / z[r] * dz[r]));
        let dz_l = DVector::from_iterator(
            n,
            (0..n).map(|i| {
                if has_l[i] {
                    mu / (x[i] - norm.lower[i]) - z_l[i] - z_l[i] / (x[i] - norm.lower[i]) * dx[i]
                } else {
                    0.0
                }
            }),
        );
        let dz_u = DVector::from_iterator(
            n,
            (0..n).map(|i| {
                if has_u[i] {
                    mu / (norm.upper[i] - x[i]) - z_u[i] + z_u[i] / (norm.upper[i] - x[i]) * dx[i]
                } else {
                    0.0
                }
            }),
        );

        // Fraction-to-boundary step caps.
        let mut alpha_pr_max = 1.0f64;
        for i in 0..m_in {
            if ds[i] < 0.0 {
                alpha_pr_max = alpha_pr_max.min(-tau * s[i] / ds[i]);
            }
        }
        for i in 0..n {
            if has_l[i] && dx[i] < 0.0 {
                alpha_pr_max = alpha_pr_max.min(-tau * (x[i] - norm.lower[i]) / dx[i]);
            }
            if has_u[i] && dx[i] > 0.0 {
                alpha_pr_max = alpha_pr_max.min(tau * (norm.upper[i] - x[i]) / dx[i]);
            }
        }
        let mut alpha_du = 1.0f64;
        for i in 0..m_in {
            if dz[i] < 0.0 {
                alpha_du = alpha_du.min(-tau * z[i] / dz[i]);
            }
        }
        for i in 0..n {
            if has_l[i] && dz_l[i] < 0.0 {
                alpha_du = alpha_du.min(-tau * z_l[i] / dz_l[i]);
            }
            if has_u[i] && dz_u[i] < 0.0 {
                alpha_du = alpha_du.min(-tau * z_u[i] / dz_u[i]);
            }
        }

        // Filter line search on the primal pair (x, s).
        let theta0 = theta_of(&c_eq, &c_in, &s);
        let phi0 = phi_of(&x, &s, mu);
        let mut dphi: f64 = (0..n).map(|i| {
            let mut g = norm.c[i];
            if has_l[i] {
                g -= mu / (x[i] - norm.lower[i]);
            }
            if has_u[i] {
                g += mu / (norm.upper[i] - x[i]);
            }
            g * dx[i]
        }).sum();
        for i in 0..m_in {
            dphi -= mu / s[i] * ds[i];
        }

        let mut alpha = alpha_pr_max;
        let mut accepted = false;
        let mut x_new = x.clone();
        let mut s_new = s.clone();
        let mut armijo_like = false;
        while alpha >= ALPHA_MIN {
            x_new = &x + alpha * &dx;
            s_new = &s + alpha * &ds;
            let ce_new = eval_eq(&x_new);
            let ci_new = eval_in(&x_new);
            let theta_new = theta_of(&ce_new, &ci_new, &s_new);
            let phi_new = phi_of(&x_new, &s_new, mu);
            if !theta_new.is_finite() || !phi_new.is_finite() {
                alpha *= 0.5;
                continue;
            }
            let filter_ok = filter
                .iter()
                .chain(std::iter::once(&(theta0, phi0)))
                .all(|(tf, pf)| theta_new <= (1.0 - GAMMA_THETA) * tf || phi_new <= pf - GAMMA_PHI * tf);
            if filter_ok {
                let switching = dphi < 0.0
                    && alpha * (-dphi).powf(2.3) > 1.0 * theta0.powf(1.1);
                if switching && theta0 <= 1e-4 {
                    if phi_new <= phi0 + ETA_PHI * alpha * dphi {
                        accepted = true;
                        armijo_like = true;
                        break;
                    }
                } else {
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }

        if !accepted {
            // Restoration: Gauss-Newton on the raw constraint violation.
            restorations += 1;
            if restorations > 12 {
                let (viol, worst) = spec.max_violation(x.as_slice());
                status = if viol > options.feas_tol {
                    message = format!("restoration stalled; worst violation at {worst}");
                    SolveStatus::Infeasible
                } else {
                    SolveStatus::NumericalFailure
                };
                break;
            }
            let restored = restore_feasibility(&norm, &mut x, options);
            c_eq = eval_eq(&x);
            c_in = eval_in(&x);
            for i in 0..m_in {
                s[i] = c_in[i].max(1e-4);
            }
            z = DVector::from_iterator(m_in, s.iter().map(|si| (mu / si).clamp(1e-8, 1e8)));
            for i in 0..n {
                if has_l[i] {
                    z_l[i] = (mu / (x[i] - norm.lower[i])).clamp(1e-8, 1e8);
                }
                if has_u[i] {
                    z_u[i] = (mu / (norm.upper[i] - x[i])).clamp(1e-8, 1e8);
                }
            }
            b_mat = DMatrix::identity(n, n);
            filter.clear();
            if !restored {
                let theta_now = theta_of(&c_eq, &c_in, &s);
                if theta_now > 1e3 * options.feas_tol {
                    let labels = violated_labels(&norm, x.as_slice(), options.feas_tol);
                    message = format!("locally infeasible; violated rows: {}", labels.join(", "));
                    status = SolveStatus::Infeasible;
                    break;
                }
            }
            continue;
        }

        if !armijo_like {
            // Keep the filter from cycling back to rejected territory.
            filter.push((
                (1.0 - GAMMA_THETA) * theta0,
                phi0 - GAMMA_PHI * theta0,
            ));
            if filter.len() > 200 {
                filter.remove(0);
            }
        }

        // Dual updates and BFGS curvature refresh.
        let y_new = &y + alpha_du * &dy;
        let z_new = DVector::from_iterator(m_in, (0..m_in).map(|i| (z[i] + alpha_du * dz[i]).max(1e-14)));
        let grad_l_old = {
            let mut g = grad.clone();
            if m_eq > 0 {
                g -= j_eq.transpose() * &y_new;
            }
            if m_in > 0 {
                g -= j_in.transpose() * &z_new;
            }
            g
        };
        let j_eq_new = norm.jac_matrix(&norm.eq, x_new.as_slice());
        let j_in_new = norm.jac_matrix(&norm.ineq, x_new.as_slice());
        let grad_l_new = {
            let mut g = grad.clone();
            if m_eq > 0 {
                g -= j_eq_new.transpose() * &y_new;
            }
            if m_in > 0 {
                g -= j_in_new.transpose() * &z_new;
            }
            g
        };
        let step = &x_new - &x;
        let mut gamma = &grad_l_new - &grad_l_old;
        let sts = step.dot(&step);
        if sts > 1e-24 {
            let bs = &b_mat * &step;
            let sbs = step.dot(&bs).max(1e-16);
            let sy = step.dot(&gamma);
            if sy < 0.2 * sbs {
                let theta_d = 0.8 * sbs / (sbs - sy);
                gamma = theta_d * gamma + (1.0 - theta_d) * &bs;
            }
            let sy_d = step.dot(&gamma).max(1e-16);
            b_mat = b_mat - (&bs * bs.transpose()) / sbs + (&gamma * gamma.transpose()) / sy_d;
            let trace: f64 = (0..n).map(|i| b_mat[(i, i)]).sum();
            if !trace.is_finite() || trace / n as f64 > 1e10 {
                b_mat = DMatrix::identity(n, n);
            }
        }

        x = x_new;
        s = s_new;
        y = y_new;
        z = z_new;
        for i in 0..n {
            if has_l[i] {
                let gap = x[i] - norm.lower[i];
                z_l[i] = (z_l[i] + alpha_du * dz_l[i]).clamp(mu / (1e10 * gap), mu * 1e10 / gap);
            }
            if has_u[i] {
                let gap = norm.upper[i] - x[i];
                z_u[i] = (z_u[i] + alpha_du * dz_u[i]).clamp(mu / (1e10 * gap), mu * 1e10 / gap);
            }
        }
        c_eq = eval_eq(&x);
        c_in = eval_in(&x);
    }

    // Independent feasibility re-check, outside the solver loop.
    let (max_violation, worst_label) = spec.max_violation(x.as_slice());
    let kkt_residual = final_kkt_residual(&norm, x.as_slice(), &y, &z, &z_l, &z_u, &s);
    if status == SolveStatus::Optimal && max_violation > options.feas_tol {
        status = SolveStatus::NumericalFailure;
        message = format!("re-check failed: violation {max_violation:.3e} at {worst_label}");
    }
    if status == SolveStatus::IterationLimit && message.is_empty() {
        message = format!("stopped after {iterations} iterations");
    }

    let objective = norm.flip * (0..n).map(|i| norm.c[i] * x[i]).sum::<f64>();
    Ok(SolveReport {
        status,
        objective,
        solution: x.as_slice().to_vec(),
        max_violation,
        kkt_residual,
        duality_gap: None,
        iterations,
        wall_time_s: start.elapsed().as_secs_f64(),
        message,
    })
}

/// Gauss-Newton descent on the squared constraint violation, projected onto
/// the variable box. Returns true when the violation dropped meaningfully.
fn restore_feasibility(norm: &Normalized, x: &mut DVector<f64>, options: &SolverOptions) -> bool {
    let n = norm.n;
    let viol_vec = |x: &DVector<f64>| -> DVector<f64> {
        let mut v = Vec::with_capacity(norm.eq.len() + norm.ineq.len());
        for row in &norm.eq {
            v.push(norm.value(row, x.as_slice()));
        }
        for row in &norm.ineq {
            v.push(norm.value(row, x.as_slice()).min(0.0));
        }
        DVector::from_vec(v)
    };
    let merit = |x: &DVector<f64>| -> f64 { 0.5 * viol_vec(x).norm_squared() };

    let m0 = merit(x);
    if m0 < 1e-24 {
        return true;
    }
    let mut nu = 1e-6;
    let mut current = m0;
    for _ in 0..60 {
        let r = viol_vec(x);
        if r.amax() <= 0.1 * options.feas_tol {
            break;
        }
        // Jacobian of the violation vector (inactive inequality rows go flat).
        let mut j = DMatrix::zeros(r.len(), n);
        let mut buf = Vec::new();
        let mut rr = 0;
        for row in &norm.eq {
            norm.raw_jac(row.src, x.as_slice(), &mut buf);
            for (cidx, c) in &buf {
                j[(rr, *cidx)] += row.sign * c;
            }
            rr += 1;
        }
        for row in &norm.ineq {
            if norm.value(row, x.as_slice()) < 0.0 {
                norm.raw_jac(row.src, x.as_slice(), &mut buf);
                for (cidx, c) in &buf {
                    j[(rr, *cidx)] += row.sign * c;
                }
            }
            rr += 1;
        }
        let jt = j.transpose();
        let mut h = &jt * &j;
        for i in 0..n {
            h[(i, i)] += nu;
        }
        let g = &jt * &r;
        let Some(p) = h.lu().solve(&(-&g)) else {
            nu *= 10.0;
            continue;
        };
        // Backtracking with projection onto bounds.
        let mut alpha = 1.0;
        let mut improved = false;
        while alpha > 1e-10 {
            let mut xt = x.clone() + alpha * &p;
            for i in 0..n {
                xt[i] = xt[i].clamp(norm.lower[i], norm.upper[i]);
            }
            let mt = merit(&xt);
            if mt < current * (1.0 - 1e-4 * alpha) {
                *x = xt;
                current = mt;
                improved = true;
                break;
            }
            alpha *= 0.5;
        }
        if improved {
            nu = (nu * 0.3).max(1e-10);
        } else {
            nu *= 10.0;
            if nu > 1e10 {
                break;
            }
        }
    }
    current < 0.01 * m0 || current.sqrt() < options.feas_tol
}

fn violated_labels(norm: &Normalized, x: &[f64], tol: f64) -> Vec<String> {
    let mut labels = Vec::new();
    for row in norm.eq.iter().chain(norm.ineq.iter()) {
        let v = norm.value(row, x);
        let bad = match row.sign {
            _ if norm.eq.iter().any(|r| std::ptr::eq(r, row)) => v.abs() > tol,
            _ => v < -tol,
        };
        if bad {
            labels.push(norm.label(row.src).to_string());
        }
    }
    labels.truncate(8);
    if labels.is_empty() {
        labels.push("unknown".into());
    }
    labels
}

fn final_kkt_residual(
    norm: &Normalized,
    x: &[f64],
    y: &DVector<f64>,
    z: &DVector<f64>,
    z_l: &DVector<f64>,
    z_u: &DVector<f64>,
    s: &DVector<f64>,
) -> f64 {
    let n = norm.n;
    let xv = DVector::from_column_slice(x);
    let j_eq = norm.jac_matrix(&norm.eq, x);
    let j_in = norm.jac_matrix(&norm.ineq, x);
    let mut r_d = DVector::from_column_slice(&norm.c);
    if !norm.eq.is_empty() {
        r_d -= j_eq.transpose() * y;
    }
    if !norm.ineq.is_empty() {
        r_d -= j_in.transpose() * z;
    }
    r_d -= z_l;
    r_d += z_u;
    let mult_sum: f64 = y.iter().map(|v| v.abs()).sum::<f64>()
        + z.iter().map(|v| v.abs()).sum::<f64>()
        + z_l.iter().map(|v| v.abs()).sum::<f64>()
        + z_u.iter().map(|v| v.abs()).sum::<f64>();
    let count = (norm.eq.len() + norm.ineq.len() + 2 * n).max(1);
    let sd = (mult_sum / count as f64).max(S_MAX) / S_MAX;
    let mut err: f64 = r_d.amax() / sd;
    for i in 0..s.len() {
        err = err.max((s[i] * z[i]).abs() / sd);
    }
    for i in 0..n {
        if norm.lower[i].is_finite() {
            err = err.max(((xv[i] - norm.lower[i]) * z_l[i]).abs() / sd);
        }
        if norm.upper[i].is_finite() {
            err = err.max(((norm.upper[i] - xv[i]) * z_u[i]).abs() / sd);
        }
    }
    err
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{Radius, INF};
    use approx::assert_relative_eq;

    /// minimize x^2 s.t. x >= 1, via the norm epigraph t >= |x|.
    #[test]
    fn quadratic_over_halfline() {
        let mut spec = ProblemSpec::new();
        let x = spec.add_var("x", 1.0, INF, 2.0);
        let t = spec.add_var("t", 0.0, INF, 2.0);
        spec.add_disc("epi", "epi[0]", x, None, Radius::Var(t));
        spec.set_objective(Sense::Minimize, vec![(t, 1.0)]);
        let rep = solve_nlp(&spec, &SolverOptions::default()).unwrap();
        assert_eq!(rep.status, SolveStatus::Optimal, "{}", rep.message);
        assert_relative_eq!(rep.solution[x], 1.0, epsilon = 1e-5);
        // objective t = |x| = 1, so x^2 = 1
        assert_relative_eq!(rep.objective, 1.0, epsilon = 1e-5);
    }

    /// maximize x + y s.t. x^2 + y^2 <= 2 has the symmetric optimum (1, 1).
    #[test]
    fn disc_constrained_maximum() {
        let mut spec = ProblemSpec::new();
        let x = spec.add_var("x", -INF, INF, 0.1);
        let y = spec.add_var("y", -INF, INF, -0.3);
        spec.add_disc("cap", "cap[0]", x, Some(y), Radius::Const(2.0f64.sqrt()));
        spec.set_objective(Sense::Maximize, vec![(x, 1.0), (y, 1.0)]);
        let rep = solve_nlp(&spec, &SolverOptions::default()).unwrap();
        assert_eq!(rep.status, SolveStatus::Optimal, "{}", rep.message);
        assert_relative_eq!(rep.solution[x], 1.0, epsilon = 1e-5);
        assert_relative_eq!(rep.solution[y], 1.0, epsilon = 1e-5);
        assert_relative_eq!(rep.objective, 2.0, epsilon = 1e-5);
    }

    /// Nonlinear equality: minimize x + y s.t. x*y = 1, x >= 0.1.
    #[test]
    fn nonlinear_equality() {
        let mut spec = ProblemSpec::new();
        let x = spec.add_var("x", 0.1, INF, 2.0);
        let y = spec.add_var("y", -INF, INF, 2.0);
        spec.nl_rows.push(crate::solver::NonlinRow {
            family: "prod".into(),
            label: "prod[0]".into(),
            lower: 1.0,
            upper: 1.0,
            sparsity: vec![x, y],
            eval: Box::new(move |v: &[f64]| v[0] * v[1]),
            jac: Box::new(move |v: &[f64], out: &mut Vec<(usize, f64)>| {
                out.push((0, v[1]));
                out.push((1, v[0]));
            }),
        });
        spec.set_objective(Sense::Minimize, vec![(x, 1.0), (y, 1.0)]);
        let rep = solve_nlp(&spec, &SolverOptions::default()).unwrap();
        assert_eq!(rep.status, SolveStatus::Optimal, "{}", rep.message);
        assert_relative_eq!(rep.solution[x], 1.0, epsilon = 1e-4);
        assert_relative_eq!(rep.solution[y], 1.0, epsilon = 1e-4);
    }

    #[test]
    fn infeasible_box_is_diagnosed() {
        let mut spec = ProblemSpec::new();
        let x = spec.add_var("x", 0.0, 1.0, 0.5);
        spec.add_lin("lo", "x_ge_2", vec![(x, 1.0)], 2.0, INF);
        spec.set_objective(Sense::Minimize, vec![(x, 1.0)]);
        let rep = solve_nlp(&spec, &SolverOptions::default()).unwrap();
        assert_eq!(rep.status, SolveStatus::Infeasible, "{}", rep.message);
        assert!(rep.message.contains("x_ge_2") || rep.message.contains("violation"), "{}", rep.message);
    }

    #[test]
    fn deterministic_reruns() {
        let build = || {
            let mut spec = ProblemSpec::new();
            let x = spec.add_var("x", -INF, INF, 0.3);
            let y = spec.add_var("y", -INF, INF, 0.1);
            spec.add_disc("cap", "cap[0]", x, Some(y), Radius::Const(1.3));
            spec.add_lin("tie", "tie[0]", vec![(x, 1.0), (y, -0.5)], -INF, 0.7);
            spec.set_objective(Sense::Maximize, vec![(x, 1.0), (y, 0.2)]);
            spec
        };
        let a = solve_nlp(&build(), &SolverOptions::default()).unwrap();
        let b = solve_nlp(&build(), &SolverOptions::default()).unwrap();
        assert_eq!(a.status, b.status);
        assert!((a.objective - b.objective).abs() <= 1e-12);
    }
}
