//! Two-level distribution-grid optimization toolkit.
//!
//! Level one: the distribution system operator (DSO) maximizes the flexible
//! EV charging load the grid can host per bus and period, subject to polar AC
//! power-flow constraints and, optionally, hybrid robust/stochastic margins
//! that hedge load and solar uncertainty. Level two: each EV aggregator
//! schedules its fleet at minimum charging cost inside the flexibility
//! envelope the DSO hands down.
//!
//! Module map:
//! - [`grid`]: network case model, ingestion, per-unit conversion.
//! - [`acpf`]: polar power-flow kernel (line flows, balances, limits,
//!   analytic Jacobian).
//! - [`uncertainty`]: beta-to-normal moment matching and the deterministic
//!   equivalents of the chance-constrained balance rows.
//! - [`solver`]: interior-point NLP engine and conic (SOCP) engine.
//! - [`dso`]: flexibility-maximization problem builder and solver.
//! - [`fleet`]: seeded truncated-Gaussian EV population sampling.
//! - [`scheduler`]: per-aggregator minimum-cost charging schedules.
//! - [`pipeline`]: scenario runner that wires the stages together and emits
//!   the CSV artifacts.

pub mod acpf;
pub mod dso;
pub mod exec;
pub mod fleet;
pub mod grid;
pub mod pipeline;
pub mod scheduler;
pub mod solver;
pub mod uncertainty;
