//! Parallel replicate runs with per-replicate derived seeds.

use rayon::prelude::*;

use crate::rates::BirthModel;

use super::rng::derive_seed;
use super::sim::{run, Algorithm, EngineError, EventLog, SimParams};

/// Runs `n` independent replicates in parallel and maps each log through
/// `f`. Replicate `i` uses seed `derive_seed(master_seed, "replicate", i)`,
/// and results come back in replicate order regardless of scheduling, so
/// ensembles are reproducible from the master seed alone.
pub fn run_replicates<R, F>(
    model: &BirthModel,
    base: &SimParams,
    algorithm: Algorithm,
    n: usize,
    master_seed: u64,
    f: F,
) -> Result<Vec<R>, EngineError>
where
    R: Send,
    F: Fn(u64, &EventLog) -> Result<R, EngineError> + Sync,
{
    (0..n)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(master_seed, "replicate", i as u64);
            let params = SimParams { seed, ..base.clone() };
            let log = run(model, &params, algorithm)?;
            f(seed, &log)
        })
        .collect()
}
