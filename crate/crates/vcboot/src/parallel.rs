//! Worker pools for bootstrap resamples and simulation replicates.
//!
//! Every unit of work derives its random stream from its index alone and
//! results are collected in index order, so output does not depend on the
//! number of workers.

use rayon::prelude::*;
use vcboot_core::{BootstrapConfig, BootstrapPlan, BootstrapResult, Dataset, Model, TestSpec};

use crate::error::{Error, Result};

/// A pool of `workers` threads; 0 uses one per available core.
pub fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Pool(e.to_string()))
}

/// Runs the resamples of `plan` on `pool`.
pub fn run_plan(plan: BootstrapPlan<'_>, pool: &rayon::ThreadPool) -> Result<BootstrapResult> {
    let b = plan.config().b;
    let outcomes = pool.install(|| (0..b).into_par_iter().map(|k| plan.replicate(k)).collect());
    Ok(plan.finish(outcomes)?)
}

/// Shrinked parametric bootstrap test with resamples spread over `workers`
/// threads. Results are bit-identical to the serial
/// [`vcboot_core::bootstrap_test`].
pub fn bootstrap_test_parallel(
    model: &Model,
    data: &Dataset,
    spec: &TestSpec,
    config: &BootstrapConfig,
    workers: usize,
) -> Result<BootstrapResult> {
    let plan = BootstrapPlan::prepare(model, data, spec, config)?;
    run_plan(plan, &pool(workers)?)
}
