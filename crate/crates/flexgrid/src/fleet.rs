//! Seeded stochastic EV population generation.
//!
//! Arrival and departure times are truncated-Gaussian day fractions mapped to
//! period indices; initial and desired state of charge are truncated
//! Gaussians in percentage points. Draws are rejected (and redrawn) until the
//! spec is coherent: the EV departs after it arrives, wants at least its
//! initial charge, and can physically reach the desired level through its
//! socket within the parking window. Sampling is deterministic given
//! `(seed, bus)`: each bus derives its own stream, so fleets are reproducible
//! regardless of scheduling order.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum FleetError {
    #[error("unsatisfiable truncation bounds while drawing {what} (gave up after {attempts} attempts)")]
    UnsatisfiableBounds { what: String, attempts: usize },
    #[error("fleet csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("fleet csv io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid EV record {id} at bus {bus}: {reason}")]
    InvalidRecord { bus: usize, id: usize, reason: String },
}

/// Static parameters of one EV. Periods are 1-based with
/// `1 <= t_arr < t_dep <= T`; the EV may charge in `t_arr..=t_dep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvSpec {
    pub bus: usize,
    pub id: usize,
    pub capacity_kwh: f64,
    pub socket_kva: f64,
    pub eta: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    pub soc_init: f64,
    pub soc_desired: f64,
    pub t_arr: usize,
    pub t_dep: usize,
}

impl EvSpec {
    pub fn validate(&self, horizon: usize) -> Result<(), FleetError> {
        let err = |reason: String| FleetError::InvalidRecord {
            bus: self.bus,
            id: self.id,
            reason,
        };
        if !(self.t_arr >= 1 && self.t_arr < self.t_dep && self.t_dep <= horizon) {
            return Err(err(format!(
                "window [{}, {}] must satisfy 1 <= t_arr < t_dep <= {horizon}",
                self.t_arr, self.t_dep
            )));
        }
        if !(self.soc_min <= self.soc_init && self.soc_init <= self.soc_max) {
            return Err(err(format!(
                "soc_init {} outside [{}, {}]",
                self.soc_init, self.soc_min, self.soc_max
            )));
        }
        if !(self.soc_min <= self.soc_desired && self.soc_desired <= self.soc_max) {
            return Err(err(format!(
                "soc_desired {} outside [{}, {}]",
                self.soc_desired, self.soc_min, self.soc_max
            )));
        }
        if self.soc_desired < self.soc_init {
            return Err(err("soc_desired below soc_init".into()));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(err(format!("eta {} outside (0, 1]", self.eta)));
        }
        if self.capacity_kwh <= 0.0 || self.socket_kva <= 0.0 {
            return Err(err("capacity and socket must be positive".into()));
        }
        Ok(())
    }

    /// Periods the EV is plugged in (1-based, inclusive).
    pub fn window(&self) -> std::ops::RangeInclusive<usize> {
        self.t_arr..=self.t_dep
    }

    pub fn window_len(&self) -> usize {
        self.t_dep - self.t_arr + 1
    }

    /// Grid-side energy needed to lift the battery to the desired level (kWh).
    pub fn energy_needed_kwh(&self) -> f64 {
        (self.soc_desired - self.soc_init) * self.capacity_kwh / self.eta
    }
}

/// The four travel/SOC distributions plus the shared hardware parameters.
/// `(mean, std)` pairs; arrival/departure are day fractions, SOC in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistParams {
    pub arrival_frac: (f64, f64),
    pub departure_frac: (f64, f64),
    pub soc_init_pct: (f64, f64),
    pub soc_desired_pct: (f64, f64),
    pub socket_kva: f64,
    pub eta: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    pub capacity_kwh: f64,
}

impl Default for DistParams {
    fn default() -> Self {
        Self {
            arrival_frac: (0.66, 0.1),
            departure_frac: (0.82, 0.1),
            soc_init_pct: (48.0, 26.0),
            soc_desired_pct: (68.0, 20.0),
            socket_kva: 11.0,
            eta: 0.90,
            soc_min: 0.20,
            soc_max: 0.80,
            capacity_kwh: 30.0,
        }
    }
}

const MAX_ATTEMPTS: usize = 10_000;

fn trunc_normal(
    rng: &mut ChaCha8Rng,
    mean: f64,
    std: f64,
    lo: f64,
    hi: f64,
    what: &str,
) -> Result<f64, FleetError> {
    let dist = Normal::new(mean, std).map_err(|_| FleetError::UnsatisfiableBounds {
        what: what.to_string(),
        attempts: 0,
    })?;
    for _ in 0..MAX_ATTEMPTS {
        let x = dist.sample(rng);
        if x >= lo && x <= hi {
            return Ok(x);
        }
    }
    Err(FleetError::UnsatisfiableBounds {
        what: what.to_string(),
        attempts: MAX_ATTEMPTS,
    })
}

/// Stream seed for one bus: splitmix64 over the run seed and bus id.
fn bus_seed(seed: u64, bus: usize) -> u64 {
    let mut z = seed ^ (bus as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draw `count` EVs for `bus`. `horizon` is the number of periods `T` and
/// `delta_h` the period length in hours.
pub fn sample_fleet(
    bus: usize,
    count: usize,
    seed: u64,
    params: &DistParams,
    horizon: usize,
    delta_h: f64,
) -> Result<Vec<EvSpec>, FleetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(bus_seed(seed, bus));
    let mut fleet = Vec::with_capacity(count);
    for id in 1..=count {
        // Window draw. The arrival comes straight from its distribution; the
        // departure is resampled until it falls after the arrival (redrawing
        // the pair would bias the arrival mean low). Arrivals in the last
        // period admit no departure, so those fall back to a fresh pair.
        let (t_arr, t_dep) = {
            let mut window = None;
            'pair: for _ in 0..MAX_ATTEMPTS {
                let arr = trunc_normal(
                    &mut rng,
                    params.arrival_frac.0,
                    params.arrival_frac.1,
                    0.0,
                    1.0,
                    "arrival fraction",
                )?;
                let t_arr = ((arr * horizon as f64).round() as usize).clamp(1, horizon);
                if t_arr == horizon {
                    continue 'pair;
                }
                for _ in 0..MAX_ATTEMPTS {
                    let dep = trunc_normal(
                        &mut rng,
                        params.departure_frac.0,
                        params.departure_frac.1,
                        0.0,
                        1.0,
                        "departure fraction",
                    )?;
                    let t_dep = ((dep * horizon as f64).round() as usize).clamp(1, horizon);
                    if t_arr < t_dep {
                        window = Some((t_arr, t_dep));
                        break 'pair;
                    }
                }
            }
            window.ok_or_else(|| FleetError::UnsatisfiableBounds {
                what: format!("parking window for bus {bus}"),
                attempts: MAX_ATTEMPTS,
            })?
        };
        // SOC draw, conditioned on the window: the desired level must be at
        // least the initial one and reachable through the socket before
        // departure, or the charging problem would be built infeasible.
        let window_periods = (t_dep - t_arr + 1) as f64;
        let max_gain =
            params.eta * params.socket_kva * delta_h * window_periods / params.capacity_kwh;
        let lo = params.soc_min * 100.0;
        let hi = params.soc_max * 100.0;
        let soc_init = trunc_normal(
            &mut rng,
            params.soc_init_pct.0,
            params.soc_init_pct.1,
            lo,
            hi,
            "initial SOC",
        )? / 100.0;
        let mut soc_desired = None;
        for _ in 0..MAX_ATTEMPTS {
            let cand = trunc_normal(
                &mut rng,
                params.soc_desired_pct.0,
                params.soc_desired_pct.1,
                lo,
                hi,
                "desired SOC",
            )? / 100.0;
            if cand >= soc_init && cand <= soc_init + max_gain {
                soc_desired = Some(cand);
                break;
            }
        }
        // An initial SOC at the very top of the band leaves (near) zero mass
        // for a larger desired level; such an EV already meets its target.
        let soc_desired = soc_desired.unwrap_or(soc_init);
        fleet.push(EvSpec {
            bus,
            id,
            capacity_kwh: params.capacity_kwh,
            socket_kva: params.socket_kva,
            eta: params.eta,
            soc_min: params.soc_min,
            soc_max: params.soc_max,
            soc_init,
            soc_desired,
            t_arr,
            t_dep,
        });
    }
    Ok(fleet)
}

/// Write one row per EV so runs replay without resampling.
pub fn write_fleet_csv<P: AsRef<Path>>(path: P, fleet: &[EvSpec]) -> Result<(), FleetError> {
    let mut w = csv::Writer::from_path(path)?;
    for ev in fleet {
        w.serialize(ev)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_fleet_csv<P: AsRef<Path>>(path: P, horizon: usize) -> Result<Vec<EvSpec>, FleetError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut fleet = Vec::new();
    for rec in r.deserialize::<EvSpec>() {
        let ev = rec?;
        ev.validate(horizon)?;
        fleet.push(ev);
    }
    Ok(fleet)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_fleet() {
        let fleet = sample_fleet(25, 0, 7, &DistParams::default(), 96, 0.25).unwrap();
        assert!(fleet.is_empty());
    }

    #[test]
    fn seeded_sampling_is_deterministic() {
        let a = sample_fleet(25, 40, 123, &DistParams::default(), 96, 0.25).unwrap();
        let b = sample_fleet(25, 40, 123, &DistParams::default(), 96, 0.25).unwrap();
        assert_eq!(a, b);
        let c = sample_fleet(25, 40, 124, &DistParams::default(), 96, 0.25).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn buses_draw_independent_streams() {
        let a = sample_fleet(25, 10, 123, &DistParams::default(), 96, 0.25).unwrap();
        let b = sample_fleet(33, 10, 123, &DistParams::default(), 96, 0.25).unwrap();
        assert_ne!(
            a.iter().map(|e| e.t_arr).collect::<Vec<_>>(),
            b.iter().map(|e| e.t_arr).collect::<Vec<_>>()
        );
    }

    #[test]
    fn sampled_specs_satisfy_invariants() {
        let params = DistParams::default();
        for seed in 0..200 {
            let fleet = sample_fleet(25, 8, seed, &params, 96, 0.25).unwrap();
            for ev in &fleet {
                ev.validate(96).unwrap();
                // Reachability through the socket.
                let max_gain =
                    ev.eta * ev.socket_kva * 0.25 * ev.window_len() as f64 / ev.capacity_kwh;
                assert!(ev.soc_init + max_gain >= ev.soc_desired - 1e-12);
            }
        }
    }

    #[test]
    fn default_hardware_parameters() {
        let p = DistParams::default();
        assert_eq!(p.socket_kva, 11.0);
        assert_eq!(p.eta, 0.90);
        assert_eq!(p.soc_min, 0.20);
        assert_eq!(p.soc_max, 0.80);
        assert_eq!(p.capacity_kwh, 30.0);
    }

    #[test]
    fn arrival_mean_matches_population() {
        // 596 EVs: sample mean of the arrival fraction within three standard
        // errors of the 0.66 population mean.
        let fleet = sample_fleet(25, 596, 42, &DistParams::default(), 96, 0.25).unwrap();
        let mean: f64 =
            fleet.iter().map(|e| e.t_arr as f64 / 96.0).sum::<f64>() / fleet.len() as f64;
        let tol = 3.0 * 0.1 / (596.0f64).sqrt();
        assert!(
            (mean - 0.66).abs() <= tol,
            "sample mean {mean} departs from 0.66 by more than {tol}"
        );
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fleet.csv");
        let fleet = sample_fleet(33, 25, 9, &DistParams::default(), 96, 0.25).unwrap();
        write_fleet_csv(&path, &fleet).unwrap();
        let back = read_fleet_csv(&path, 96).unwrap();
        assert_eq!(fleet, back);
    }

    #[test]
    fn impossible_bounds_error() {
        let params = DistParams {
            soc_init_pct: (500.0, 0.1), // mass far outside [20, 80]
            ..DistParams::default()
        };
        let err = sample_fleet(25, 1, 3, &params, 96, 0.25).unwrap_err();
        assert!(matches!(err, FleetError::UnsatisfiableBounds { .. }), "{err}");
    }
}
