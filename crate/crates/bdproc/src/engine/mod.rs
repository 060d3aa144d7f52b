//! Exact event-driven simulation: the global-driver sampler, the per-parent
//! thinning sampler, and the shared-driver coupling that realizes pathwise
//! domination by the constant-rate process.

mod ensemble;
mod observe;
mod rng;
mod sim;

pub use ensemble::run_replicates;
pub use observe::{path_integral, region_box, sample_statistic, uniform_times, Replayer};
pub use rng::{derive_seed, DriverStreams};
pub use sim::{
    run, run_coupled, run_driver, run_per_parent, sample_poisson_field, Algorithm, CoupledLog,
    EngineError, EventKind, EventLog, EventRecord, InitialState, SimParams,
};
