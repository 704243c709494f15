//! Sequential testing of two variances: `T1` tests both jointly, then `T2`
//! tests the second and `T3` the first, each with and without shrinkage of
//! the other one.

use vcboot_core::{
    fit_nested, BootstrapConfig, BootstrapPlan, BootstrapResult, Dataset, Model, ShrinkPolicy, TestSpec,
};

use crate::error::{Error, Result};
use crate::parallel::{pool, run_plan};

#[derive(Clone, Debug)]
pub struct SequentialRow {
    pub test: &'static str,
    /// Zero-based tested rows.
    pub rows: Vec<usize>,
    pub shrink: bool,
    pub result: BootstrapResult,
}

/// `rows` are the two zero-based rows of `Lambda`. `T1` uses no shrinkage;
/// the shrinking arms of `T2` and `T3` use `config.policy` and the others
/// `c_N = 0`. Fits are shared between the two arms of a test.
pub fn sequential_tests(
    model: &Model,
    data: &Dataset,
    rows: [usize; 2],
    config: &BootstrapConfig,
    workers: usize,
) -> Result<Vec<SequentialRow>> {
    if rows[0] == rows[1] {
        return Err(Error::Usage("sequential testing needs two distinct rows".to_string()));
    }
    let pool = pool(workers)?;
    let no_shrink = ShrinkPolicy {
        c_n: Some(0.0),
        ..config.policy
    };
    let plans: [(&'static str, Vec<usize>, &[bool]); 3] = [
        ("T1", rows.to_vec(), &[false]),
        ("T2", vec![rows[1]], &[true, false]),
        ("T3", vec![rows[0]], &[true, false]),
    ];
    let mut out = Vec::new();
    for (test, tested, arms) in plans {
        let spec = TestSpec::new(tested.clone(), model.p())?;
        config.validate()?;
        let (null, full) = fit_nested(model, data, &spec, &config.quad, &config.fit)?;
        for &shrink in arms {
            let cfg = BootstrapConfig {
                policy: if shrink { config.policy } else { no_shrink },
                ..config.clone()
            };
            let plan = BootstrapPlan::from_fits(model, data, &spec, &cfg, null.clone(), full.clone())?;
            out.push(SequentialRow {
                test,
                rows: tested.clone(),
                shrink,
                result: run_plan(plan, &pool)?,
            });
        }
    }
    Ok(out)
}
