use flexgrid::dso::{solve_dso, DsoLimits, DsoMode, PfMode};
use flexgrid::fleet::{sample_fleet, DistParams};
use flexgrid::grid;
use flexgrid::solver::SolverOptions;
use flexgrid::uncertainty::UncertaintyParams;
use std::collections::BTreeMap;
use std::time::Instant;

fn main() {
    let case = grid::parse_case("crates/flexgrid/data/case33.json").unwrap();
    let mut counts = BTreeMap::new();
    counts.insert(25usize, 596usize);
    counts.insert(33usize, 596usize);
    let limits = DsoLimits::from_fleet_counts(&case, &counts, 11.0);
    let opts = SolverOptions::default();
    let unc = DsoMode::Uncertain(UncertaintyParams { delta: 0.0, epsilon: 0.05, lambda: 6.0 });

    let t0 = Instant::now();
    let sol = solve_dso(&case, unc, PfMode::Unity, &limits, &opts).unwrap();
    println!("WUWOQ full solve: {:?} in {:.1}s wall, total_flex {:.2} MW-periods",
        sol.report.status, t0.elapsed().as_secs_f64(), sol.total_flex);
    let (p33, _) = sol.schedule.row(33).unwrap();
    let env33_kw: Vec<f64> = p33.iter().map(|v| v * 10.0 * 1000.0).collect();

    // Fleet demand at bus 33.
    let fleet = sample_fleet(33, 596, 42, &DistParams::default(), 96, 0.25).unwrap();
    // Which EVs see almost no envelope capacity over their whole window?
    let mut tight = 0;
    let mut worst: f64 = f64::INFINITY;
    for ev in &fleet {
        let cap_kwh: f64 = ev.window().map(|t1| ev.socket_kva.min(env33_kw[t1-1].max(0.0)) * 0.25).sum();
        let margin = cap_kwh - ev.energy_needed_kwh();
        worst = worst.min(margin);
        if margin < 0.5 { tight += 1; }
    }
    println!("bus33 fleet: {} EVs, {} tight, worst per-EV margin {:.3} kWh", fleet.len(), tight, worst);
    // Aggregate: total need vs envelope energy over union of windows
    let need: f64 = fleet.iter().map(|e| e.energy_needed_kwh()).sum();
    let lo = fleet.iter().map(|e| e.t_arr).min().unwrap();
    let hi = fleet.iter().map(|e| e.t_dep).max().unwrap();
    let avail: f64 = (lo..=hi).map(|t1| env33_kw[t1-1].max(0.0) * 0.25).sum();
    println!("aggregate: need {:.0} kWh, envelope energy in [{},{}] = {:.0} kWh", need, lo, hi, avail);
    for t in 60..96 {
        if env33_kw[t] < 600.0 { print!("t{}={:.0} ", t+1, env33_kw[t]); }
    }
    println!();
}
