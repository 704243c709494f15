//! Likelihood ratio test that some rows of `Lambda` vanish, calibrated by the
//! shrinked parametric bootstrap.
//!
//! Resamples are drawn at `theta*`: the null estimate with every untested
//! entry of `Lambda` at or below the threshold `c_N` set to zero. Without the
//! threshold, a null variance estimated slightly above zero would be treated
//! as positive in the resampling world, which biases the bootstrap
//! distribution of the statistic.
//!
//! Replicate `b` draws from its own ChaCha8 stream (`seed`, stream `b`), so
//! [`BootstrapPlan::replicate`] can run in any order or in parallel and give
//! the same result as the serial [`bootstrap_test`].

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::estimate::{fit_nested, FitOptions, FitResult};
use crate::likelihood::{simulate_dataset, QuadratureConfig};
use crate::model::{project_to_null, Dataset, Model, TestSpec, Theta};

/// Which off-diagonal entries of `Lambda` the threshold applies to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ShrinkScope {
    /// Every untested entry: diagonal entries are compared with `c_N`,
    /// off-diagonal ones by absolute value.
    #[default]
    AllEntries,
    /// Only the diagonal; off-diagonal entries are kept as estimated.
    DiagonalOnly,
}

/// Estimate that `theta*` is built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SeedEstimate {
    /// The fit under the null hypothesis.
    #[default]
    Restricted,
    /// The unrestricted fit, projected onto the null.
    Unrestricted,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShrinkPolicy {
    /// Threshold; `None` means [`default_shrink`] of the number of individuals.
    pub c_n: Option<f64>,
    pub scope: ShrinkScope,
    pub seed_from: SeedEstimate,
    /// Also zero fixed effects with `|beta_k| <= c_N`.
    pub shrink_psi: bool,
}

impl Default for ShrinkPolicy {
    fn default() -> Self {
        ShrinkPolicy {
            c_n: None,
            scope: ShrinkScope::default(),
            seed_from: SeedEstimate::default(),
            shrink_psi: false,
        }
    }
}

impl ShrinkPolicy {
    pub fn with_threshold(c_n: f64) -> Self {
        ShrinkPolicy {
            c_n: Some(c_n),
            ..ShrinkPolicy::default()
        }
    }

    /// The plain parametric bootstrap at the null estimate.
    pub fn no_shrink() -> Self {
        ShrinkPolicy::with_threshold(0.0)
    }

    /// The threshold used for a sample of `n` individuals.
    pub fn threshold(&self, n: usize) -> f64 {
        self.c_n.unwrap_or_else(|| default_shrink(n))
    }
}

/// `c_N = 0.5 N^(-1/5)`: tends to zero, slower than the `N^(-1/2)` rate of
/// the estimates.
pub fn default_shrink(n: usize) -> f64 {
    0.5 * libm::pow(n as f64, -0.2)
}

/// `max(0, 2 (ll_full - ll_null))`.
pub fn lrt_statistic(ll_full: f64, ll_null: f64) -> f64 {
    let v = 2.0 * (ll_full - ll_null);
    if v.is_nan() {
        v
    } else {
        v.max(0.0)
    }
}

/// `theta*`: tested rows of `Lambda` set to zero, untested entries at or
/// below `c_n` set to zero. `sigma2` is never changed.
pub fn shrink_parameter(theta: &Theta, spec: &TestSpec, c_n: f64, policy: &ShrinkPolicy) -> Result<Theta> {
    if !(c_n.is_finite() && c_n >= 0.0) {
        return Err(Error::Config(format!(
            "shrinkage threshold must be finite and >= 0, got {c_n}"
        )));
    }
    let mut out = project_to_null(theta, spec)?;
    let p = out.p();
    let lambda = out.lambda_mut();
    for i in 0..p {
        for j in 0..=i {
            let v = lambda[(i, j)];
            let drop = if i == j {
                v <= c_n
            } else {
                policy.scope == ShrinkScope::AllEntries && v.abs() <= c_n
            };
            if drop {
                lambda[(i, j)] = 0.0;
            }
        }
    }
    if policy.shrink_psi {
        for b in out.beta_mut().iter_mut() {
            if b.abs() <= c_n {
                *b = 0.0;
            }
        }
    }
    Ok(out)
}

/// Fraction of bootstrap statistics strictly above the observed one.
pub fn bootstrap_pvalue(lrt_obs: f64, lrt_star: &[f64]) -> f64 {
    if lrt_star.is_empty() {
        return f64::NAN;
    }
    lrt_star.iter().filter(|&&t| t > lrt_obs).count() as f64 / lrt_star.len() as f64
}

/// `P(T > x)` for `T ~ 0.5 chi2_0 + 0.5 chi2_1`, the limit for one tested
/// variance with the remaining variances away from zero.
pub fn asymptotic_pvalue_single(x: f64, r: usize) -> Result<f64> {
    if r != 1 {
        return Err(Error::AsymptoticUnsupported(r));
    }
    if x.is_nan() {
        return Ok(f64::NAN);
    }
    if x <= 0.0 {
        return Ok(1.0);
    }
    Ok(0.5 * libm::erfc(libm::sqrt(0.5 * x)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BootstrapConfig {
    /// Number of resamples `B`.
    pub b: usize,
    pub alpha: f64,
    pub policy: ShrinkPolicy,
    pub seed: u64,
    pub quad: QuadratureConfig,
    /// Options for the fits on the observed data.
    pub fit: FitOptions,
    /// Options for the fits on resampled data; they start at `theta*`.
    pub refit: FitOptions,
    /// Results are flagged unreliable when more than this fraction of the
    /// resamples fail to fit.
    pub max_failure_frac: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            b: 500,
            alpha: 0.05,
            policy: ShrinkPolicy::default(),
            seed: 1,
            quad: QuadratureConfig::default(),
            fit: FitOptions::default(),
            refit: FitOptions {
                n_starts: 1,
                interior_start: false,
                ..FitOptions::default()
            },
            max_failure_frac: 0.05,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.b == 0 {
            return Err(Error::Config("B must be at least 1".to_string()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.max_failure_frac) {
            return Err(Error::Config("max_failure_frac must lie in [0, 1]".to_string()));
        }
        if let Some(c) = self.policy.c_n {
            if !(c.is_finite() && c >= 0.0) {
                return Err(Error::Config(format!("c_N must be finite and >= 0, got {c}")));
            }
        }
        self.quad.validate()?;
        self.fit.validate()?;
        self.refit.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BootstrapResult {
    pub lrt_obs: f64,
    /// Statistics of the resamples that fitted, in replicate order.
    pub lrt_star: Vec<f64>,
    pub p_boot: f64,
    /// 50:50 chi-bar-square p-value, when one row is tested.
    pub p_asymptotic: Option<f64>,
    pub alpha: f64,
    pub reject: bool,
    pub theta_star: Theta,
    pub c_n: f64,
    pub b_requested: usize,
    pub b_failed: usize,
    pub unreliable: bool,
    pub null_fit: FitResult,
    pub full_fit: FitResult,
}

/// Observed fits and `theta*`; resamples are generated and fitted one at a
/// time by [`replicate`](Self::replicate) and collected by
/// [`finish`](Self::finish).
#[derive(Clone, Debug)]
pub struct BootstrapPlan<'a> {
    model: &'a Model,
    spec: TestSpec,
    config: BootstrapConfig,
    design: Vec<Vec<Vec<f64>>>,
    null_fit: FitResult,
    full_fit: FitResult,
    lrt_obs: f64,
    theta_star: Theta,
    c_n: f64,
}

impl<'a> BootstrapPlan<'a> {
    pub fn prepare(model: &'a Model, data: &Dataset, spec: &TestSpec, config: &BootstrapConfig) -> Result<Self> {
        config.validate()?;
        let (null_fit, full_fit) = fit_nested(model, data, spec, &config.quad, &config.fit)?;
        Self::from_fits(model, data, spec, config, null_fit, full_fit)
    }

    /// Plan from fits already computed on `data`, e.g. shared between several
    /// shrinkage policies.
    pub fn from_fits(
        model: &'a Model,
        data: &Dataset,
        spec: &TestSpec,
        config: &BootstrapConfig,
        null_fit: FitResult,
        full_fit: FitResult,
    ) -> Result<Self> {
        config.validate()?;
        if !null_fit.theta_hat.is_in_null(spec) {
            return Err(Error::Config(
                "null fit does not lie in the null space of the test".to_string(),
            ));
        }
        let lrt_obs = lrt_statistic(full_fit.loglik, null_fit.loglik);
        let c_n = config.policy.threshold(data.n());
        let seed = match config.policy.seed_from {
            SeedEstimate::Restricted => &null_fit.theta_hat,
            SeedEstimate::Unrestricted => &full_fit.theta_hat,
        };
        let theta_star = shrink_parameter(seed, spec, c_n, &config.policy)?;
        Ok(BootstrapPlan {
            model,
            spec: spec.clone(),
            config: config.clone(),
            design: data.design(),
            null_fit,
            full_fit,
            lrt_obs,
            theta_star,
            c_n,
        })
    }

    pub fn lrt_obs(&self) -> f64 {
        self.lrt_obs
    }

    pub fn theta_star(&self) -> &Theta {
        &self.theta_star
    }

    pub fn c_n(&self) -> f64 {
        self.c_n
    }

    pub fn config(&self) -> &BootstrapConfig {
        &self.config
    }

    /// Likelihood ratio statistic of resample `b`.
    pub fn replicate(&self, b: usize) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(b as u64);
        let data = simulate_dataset(self.model, &self.theta_star, &self.design, &mut rng)?;
        let opts = FitOptions {
            start: Some(self.theta_star.clone()),
            seed: self.config.refit.seed.wrapping_add(b as u64),
            ..self.config.refit.clone()
        };
        let (null, full) = fit_nested(self.model, &data, &self.spec, &self.config.quad, &opts)?;
        Ok(lrt_statistic(full.loglik, null.loglik))
    }

    /// Collects replicate outcomes in replicate order. Numerical failures are
    /// counted and dropped; any other error is returned.
    pub fn finish(self, outcomes: Vec<Result<f64>>) -> Result<BootstrapResult> {
        let b_requested = outcomes.len();
        let mut lrt_star = Vec::with_capacity(b_requested);
        let mut b_failed = 0;
        for o in outcomes {
            match o {
                Ok(t) if t.is_finite() => lrt_star.push(t),
                Ok(_) => b_failed += 1,
                Err(e) if e.is_numerical() => b_failed += 1,
                Err(e) => return Err(e),
            }
        }
        if lrt_star.is_empty() {
            return Err(Error::Estimation(format!("all {b_requested} bootstrap fits failed")));
        }
        let p_boot = bootstrap_pvalue(self.lrt_obs, &lrt_star);
        let p_asymptotic = asymptotic_pvalue_single(self.lrt_obs, self.spec.r()).ok();
        Ok(BootstrapResult {
            lrt_obs: self.lrt_obs,
            lrt_star,
            p_boot,
            p_asymptotic,
            alpha: self.config.alpha,
            reject: p_boot < self.config.alpha,
            theta_star: self.theta_star,
            c_n: self.c_n,
            b_requested,
            b_failed,
            unreliable: b_failed as f64 > self.config.max_failure_frac * b_requested as f64,
            null_fit: self.null_fit,
            full_fit: self.full_fit,
        })
    }
}

/// Serial shrinked parametric bootstrap test.
pub fn bootstrap_test(
    model: &Model,
    data: &Dataset,
    spec: &TestSpec,
    config: &BootstrapConfig,
) -> Result<BootstrapResult> {
    let plan = BootstrapPlan::prepare(model, data, spec, config)?;
    let outcomes = (0..config.b).map(|b| plan.replicate(b)).collect();
    plan.finish(outcomes)
}
