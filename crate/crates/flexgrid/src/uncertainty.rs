//! Hybrid robust/stochastic machinery.
//!
//! PV generation is beta-distributed; [`beta_to_normal`] matches its first
//! two moments onto a normal so the chance-constrained balance rows admit a
//! deterministic equivalent. [`transform_balance`] emits that equivalent: the
//! balance equalities become one-sided inequalities whose right side carries
//! a relaxation `-delta * max(1, |nominal|)` and a tightening
//! `epsilon * lambda * nominal`.

use crate::grid::NetworkCase;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum UncertaintyError {
    #[error("beta shape parameters must be positive, got a={a}, b={b}")]
    NonPositiveShape { a: f64, b: f64 },
    #[error("missing net-load moments for bus {bus}, period {period}")]
    MissingMoments { bus: usize, period: usize },
}

/// Infeasibility tolerance, uncertainty level, and reliability multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyParams {
    pub delta: f64,
    pub epsilon: f64,
    pub lambda: f64,
}

impl UncertaintyParams {
    pub fn zero() -> Self {
        Self { delta: 0.0, epsilon: 0.0, lambda: 0.0 }
    }

    pub fn is_zero(&self) -> bool {
        self.delta == 0.0 && self.epsilon == 0.0 && self.lambda == 0.0
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.delta < 0.0 || self.epsilon < 0.0 || self.lambda < 0.0 {
            return Err(format!(
                "uncertainty parameters must be nonnegative: delta={}, epsilon={}, lambda={}",
                self.delta, self.epsilon, self.lambda
            ));
        }
        Ok(())
    }
}

/// First moments of the net load entering the balance rows at one
/// (bus, period); `period` is 0-based.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetLoadMoments {
    pub bus: usize,
    pub period: usize,
    pub mean_p: f64,
    pub mean_q: f64,
}

/// Match the first two moments of `capacity * Beta(a, b)` onto a normal:
/// returns `(mean, std)`.
pub fn beta_to_normal(a: f64, b: f64, capacity: f64) -> Result<(f64, f64), UncertaintyError> {
    if a <= 0.0 || b <= 0.0 {
        return Err(UncertaintyError::NonPositiveShape { a, b });
    }
    if capacity == 0.0 {
        return Ok((0.0, 0.0));
    }
    let mean = capacity * a / (a + b);
    let var = a * b / ((a + b) * (a + b) * (a + b + 1.0));
    Ok((mean, capacity * var.sqrt()))
}

/// The two extra right-side terms of the transformed balance row:
/// `-delta * max(1, |nominal|) + epsilon * lambda * nominal` (per-unit).
pub fn robust_margin(nominal: f64, params: &UncertaintyParams) -> f64 {
    -params.delta * nominal.abs().max(1.0) + params.epsilon * params.lambda * nominal
}

/// Whether a balance row is the active- or reactive-power half.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BalanceKind {
    Active,
    Reactive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BalanceSense {
    /// Generation minus outgoing flows equals flex plus nominal.
    Equality,
    /// Generation minus outgoing flows is at least flex plus nominal plus margin.
    GreaterEqual,
}

/// One emitted balance row: the constraint reads
/// `sum(gen) - sum(flows) (sense) flex + nominal + margin`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BalanceConstraint {
    pub bus: usize,
    pub period: usize,
    pub kind: BalanceKind,
    pub sense: BalanceSense,
    pub nominal: f64,
    pub margin: f64,
}

/// Net-load moments for every (bus, period) of a case, from the shipped
/// expected load and PV series.
pub fn case_moments(case: &NetworkCase) -> Vec<NetLoadMoments> {
    let mut out = Vec::with_capacity(case.buses.len() * case.periods);
    for b in &case.buses {
        for t in 0..case.periods {
            out.push(NetLoadMoments {
                bus: b.id,
                period: t,
                mean_p: case.nominal_net_p(b.id, t),
                mean_q: case.nominal_net_q(b.id, t),
            });
        }
    }
    out
}

/// Build the balance constraint set for every (bus, period). With all-zero
/// `params` this is the deterministic equality set; otherwise each row is the
/// one-sided deterministic equivalent of the chance constraint.
pub fn transform_balance(
    case: &NetworkCase,
    params: &UncertaintyParams,
    moments: &[NetLoadMoments],
) -> Result<Vec<BalanceConstraint>, UncertaintyError> {
    let deterministic = params.is_zero();
    let mut out = Vec::with_capacity(2 * case.buses.len() * case.periods);
    for b in &case.buses {
        for t in 0..case.periods {
            let m = moments
                .iter()
                .find(|m| m.bus == b.id && m.period == t)
                .ok_or(UncertaintyError::MissingMoments { bus: b.id, period: t })?;
            let (sense, margin_p, margin_q) = if deterministic {
                (BalanceSense::Equality, 0.0, 0.0)
            } else {
                (
                    BalanceSense::GreaterEqual,
                    robust_margin(m.mean_p, params),
                    robust_margin(m.mean_q, params),
                )
            };
            out.push(BalanceConstraint {
                bus: b.id,
                period: t,
                kind: BalanceKind::Active,
                sense,
                nominal: m.mean_p,
                margin: margin_p,
            });
            out.push(BalanceConstraint {
                bus: b.id,
                period: t,
                kind: BalanceKind::Reactive,
                sense,
                nominal: m.mean_q,
                margin: margin_q,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn beta_moments_closed_form() {
        let (mean, std) = beta_to_normal(2.0, 2.0, 1.0).unwrap();
        assert_relative_eq!(mean, 0.5, epsilon = 1e-15);
        assert_relative_eq!(std, (4.0f64 / 80.0).sqrt(), epsilon = 1e-15);

        // Uniform special case: Beta(1,1) scaled by C.
        let c = 3.7;
        let (mean, std) = beta_to_normal(1.0, 1.0, c).unwrap();
        assert_relative_eq!(mean, c / 2.0, epsilon = 1e-15);
        assert_relative_eq!(std, c / 12.0f64.sqrt(), epsilon = 1e-15);

        assert_eq!(beta_to_normal(2.0, 5.0, 0.0).unwrap(), (0.0, 0.0));
        assert!(beta_to_normal(0.0, 1.0, 1.0).is_err());
        assert!(beta_to_normal(1.0, -0.5, 1.0).is_err());
    }

    #[test]
    fn margin_examples() {
        let zero = UncertaintyParams::zero();
        assert_eq!(robust_margin(12.3, &zero), 0.0);

        let p = UncertaintyParams { delta: 0.0, epsilon: 0.05, lambda: 6.0 };
        assert_relative_eq!(robust_margin(1.0, &p), 0.30, epsilon = 1e-15);

        let p = UncertaintyParams { delta: 0.1, epsilon: 0.0, lambda: 0.0 };
        assert_relative_eq!(robust_margin(0.5, &p), -0.1, epsilon = 1e-15);
        // Above 1 pu the relaxation scales with the nominal itself.
        assert_relative_eq!(robust_margin(2.0, &p), -0.2, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn margin_monotone_in_epsilon_for_nonnegative_nominal(
            nominal in 0.0..10.0f64,
            eps_lo in 0.0..0.5f64,
            eps_gap in 0.0..0.5f64,
            delta in 0.0..0.5f64,
            lambda in 0.0..10.0f64,
        ) {
            let lo = UncertaintyParams { delta, epsilon: eps_lo, lambda };
            let hi = UncertaintyParams { delta, epsilon: eps_lo + eps_gap, lambda };
            prop_assert!(robust_margin(nominal, &hi) >= robust_margin(nominal, &lo) - 1e-12);
        }

        #[test]
        fn margin_nonincreasing_in_delta(
            nominal in -10.0..10.0f64,
            delta_lo in 0.0..0.5f64,
            delta_gap in 0.0..0.5f64,
            epsilon in 0.0..0.5f64,
            lambda in 0.0..10.0f64,
        ) {
            let lo = UncertaintyParams { delta: delta_lo, epsilon, lambda };
            let hi = UncertaintyParams { delta: delta_lo + delta_gap, epsilon, lambda };
            prop_assert!(robust_margin(nominal, &hi) <= robust_margin(nominal, &lo) + 1e-12);
        }
    }
}
