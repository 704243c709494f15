//! Monte Carlo studies of the test: empirical level and power, sweeps over
//! the number of zero nuisance variances, and a numeric probe of the
//! growth condition on the mean function.
//!
//! Replicate `k` of a scenario draws everything from a ChaCha8 stream
//! seeded by `(seed, k)`: first the seed of its bootstrap, then the design
//! (if random), then the data. All procedure arms of a replicate share the
//! observed fits and the bootstrap seed.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use vcboot_core::{
    asymptotic_pvalue_single, fit_nested, lrt_statistic, simulate_dataset, BootstrapConfig, BootstrapPlan,
    CovarianceStructure, FitOptions, LinearPredictor, Logistic, Model, QuadratureConfig, ShrinkPolicy, TestSpec, Theta,
};

use crate::error::{Error, Result};
use crate::parallel::pool;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScenarioId {
    M1,
    M2,
    M3,
    M4,
    Custom,
}

impl ScenarioId {
    pub const KNOWN: [&'static str; 5] = ["m1", "m2", "m3", "m4", "custom"];
}

impl FromStr for ScenarioId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "m1" => Ok(ScenarioId::M1),
            "m2" => Ok(ScenarioId::M2),
            "m3" => Ok(ScenarioId::M3),
            "m4" => Ok(ScenarioId::M4),
            "custom" => Ok(ScenarioId::Custom),
            _ => Err(Error::Usage(format!(
                "unknown scenario {s:?}; known scenarios: {}",
                Self::KNOWN.join(", ")
            ))),
        }
    }
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = *self as usize;
        f.write_str(Self::KNOWN[i])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Procedure {
    /// Shrinked parametric bootstrap.
    Bootstrap,
    /// 50:50 mixture of a point mass at zero and chi-square(1).
    Asymptotic,
}

impl FromStr for Procedure {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "bootstrap" => Ok(Procedure::Bootstrap),
            "asymptotic" => Ok(Procedure::Asymptotic),
            _ => Err(format!("expected `bootstrap` or `asymptotic`, got {s:?}")),
        }
    }
}

impl fmt::Display for Procedure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Procedure::Bootstrap => "bootstrap",
            Procedure::Asymptotic => "asymptotic",
        })
    }
}

/// Covariates of the simulated individuals.
#[derive(Clone, Debug, PartialEq)]
pub enum Design {
    /// Every individual is observed at these covariate rows.
    Shared(Vec<Vec<f64>>),
    /// `j` rows of `dims` independent `N(mean, sd^2)` covariates per
    /// individual, redrawn for every replicate.
    Gaussian { j: usize, dims: usize, mean: f64, sd: f64 },
}

impl Design {
    pub fn draw<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec<Vec<f64>>> {
        match self {
            Design::Shared(rows) => vec![rows.clone(); n],
            &Design::Gaussian { j, dims, mean, sd } => {
                let normal = Normal::new(mean, sd).expect("validated sd");
                (0..n)
                    .map(|_| {
                        (0..j)
                            .map(|_| (0..dims).map(|_| normal.sample(rng)).collect())
                            .collect()
                    })
                    .collect()
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Design::Shared(rows) if rows.is_empty() => Err(config_err("design has no observations")),
            &Design::Gaussian { j, sd, .. } if j == 0 || !(sd.is_finite() && sd >= 0.0) => {
                Err(config_err("Gaussian design needs j >= 1 and a finite sd >= 0"))
            }
            _ => Ok(()),
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Core(vcboot_core::Error::Config(msg.into()))
}

#[derive(Clone, Debug)]
pub struct ScenarioConfig {
    pub model_id: ScenarioId,
    pub model: Model,
    pub design: Design,
    pub n: usize,
    /// Monte Carlo replicates.
    pub k: usize,
    /// Bootstrap resamples per replicate.
    pub b: usize,
    pub alpha_levels: Vec<f64>,
    pub theta0: Theta,
    pub spec: TestSpec,
    /// One bootstrap arm per policy.
    pub policies: Vec<ShrinkPolicy>,
    pub seed: u64,
    pub procedures: Vec<Procedure>,
    pub quad: QuadratureConfig,
    /// Options for the fits on each simulated dataset.
    pub fit: FitOptions,
    /// Options for the bootstrap refits.
    pub refit: FitOptions,
    /// Worker budget shared by replicates and resamples; 0 uses every core.
    pub workers: usize,
}

/// Values replacing the defaults of a built-in scenario.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub n: Option<usize>,
    pub k: Option<usize>,
    pub b: Option<usize>,
    pub alpha_levels: Option<Vec<f64>>,
    pub seed: Option<u64>,
    /// Thresholds of the bootstrap arms; `None` entries mean `0.5 N^(-1/5)`.
    pub thresholds: Option<Vec<Option<f64>>>,
    /// Shrink fixed effects too.
    pub shrink_psi: Option<bool>,
    /// Number of zero nuisance variances.
    pub nuisance: Option<usize>,
    pub model: Option<Model>,
    pub design: Option<Design>,
    pub theta0: Option<Theta>,
    pub spec: Option<TestSpec>,
    pub procedures: Option<Vec<Procedure>>,
    pub nodes: Option<usize>,
    pub workers: Option<usize>,
}

/// The design points of m4.
pub const M4_DESIGN: [f64; 10] = [
    50.0, 287.5, 525.0, 762.0, 1000.0, 1100.0, 1200.0, 1300.0, 1400.0, 1500.0,
];

fn one_column(xs: impl IntoIterator<Item = f64>) -> Design {
    Design::Shared(xs.into_iter().map(|x| vec![x]).collect())
}

/// Built-in scenario with `overrides` applied last.
///
/// * m1: `(b1 + s1) + (b2 + s2) j`, `j = 1..5`, `beta = (0, 7)`,
///   `Lambda = diag(sqrt 1.3, 0)`, `sigma = 1.5`; tests row 2.
/// * m2: m1 plus `(b3 + s3) j^2` with `b3 = 3`; tests row 3, row 2 is a
///   zero nuisance variance.
/// * m3: random slopes on 8 covariates drawn from `N(2, 0.5^2)`, 9
///   observations, `sigma2 = 2`; tests row 1, the untested variances are 1
///   except the last `s`, which are zero.
/// * m4: logistic growth at [`M4_DESIGN`], `beta = (200, 500, 150)`,
///   `Lambda = diag(10, 10, 0)`, `sigma2 = 25`; tests row 3.
pub fn build_scenario(id: ScenarioId, overrides: &Overrides) -> Result<ScenarioConfig> {
    let linear_defaults = |model: Model, design: Design, n: usize, theta0: Theta, row: usize, c: f64| {
        let p = model.p();
        (
            model,
            design,
            n,
            500,
            200,
            vec![0.01, 0.05, 0.10],
            theta0,
            TestSpec::new(vec![row], p),
            vec![Some(c)],
        )
    };
    let (model, design, n, k, b, alpha_levels, theta0, spec, thresholds) = match id {
        ScenarioId::M1 => linear_defaults(
            Model::new(LinearPredictor::polynomial(1)),
            one_column((1..=5).map(f64::from)),
            20,
            Theta::diagonal(vec![0.0, 7.0], &[1.3f64.sqrt(), 0.0], 2.25)?,
            1,
            0.28,
        ),
        ScenarioId::M2 => linear_defaults(
            Model::new(LinearPredictor::polynomial(2)),
            one_column((1..=5).map(f64::from)),
            40,
            Theta::diagonal(vec![0.0, 7.0, 3.0], &[1.3f64.sqrt(), 0.0, 0.0], 2.25)?,
            2,
            0.28,
        ),
        ScenarioId::M3 => {
            let mut diag = vec![1.0; 8];
            diag[0] = 0.0;
            let theta0 = Theta::diagonal(Vec::new(), &diag, 2.0)?;
            (
                Model::new(LinearPredictor::random_slopes(8)),
                Design::Gaussian {
                    j: 9,
                    dims: 8,
                    mean: 2.0,
                    sd: 0.5,
                },
                30,
                500,
                200,
                vec![0.05],
                theta0,
                TestSpec::new(vec![0], 8),
                vec![Some(0.0), Some(0.24), Some(0.9)],
            )
        }
        ScenarioId::M4 => (
            Model::new(Logistic::new(0)),
            one_column(M4_DESIGN),
            40,
            200,
            200,
            vec![0.01, 0.05, 0.10],
            Theta::diagonal(vec![200.0, 500.0, 150.0], &[10.0, 10.0, 0.0], 25.0)?,
            TestSpec::new(vec![2], 3),
            vec![None],
        ),
        ScenarioId::Custom => {
            let model = overrides
                .model
                .clone()
                .ok_or_else(|| config_err("a custom scenario needs a model"))?;
            let theta0 = overrides
                .theta0
                .clone()
                .ok_or_else(|| config_err("a custom scenario needs theta0"))?;
            let design = overrides
                .design
                .clone()
                .ok_or_else(|| config_err("a custom scenario needs a design"))?;
            let spec = overrides
                .spec
                .clone()
                .ok_or_else(|| config_err("a custom scenario needs tested rows"))?;
            (model, design, 40, 500, 200, vec![0.05], theta0, Ok(spec), vec![None])
        }
    };
    let mut quad = QuadratureConfig::default();
    if id == ScenarioId::M4 {
        quad.n_nodes = 5;
    }
    if let Some(nodes) = overrides.nodes {
        quad.n_nodes = nodes;
    }
    let spec = overrides.spec.clone().map_or(spec, Ok)?;
    let mut theta0 = overrides.theta0.clone().unwrap_or(theta0);
    if let Some(s) = overrides.nuisance {
        theta0 = zero_nuisance(&theta0, &spec, s)?;
    }
    let shrink_psi = overrides.shrink_psi.unwrap_or(false);
    let policies = overrides
        .thresholds
        .clone()
        .unwrap_or(thresholds)
        .into_iter()
        .map(|c_n| ShrinkPolicy {
            c_n,
            shrink_psi,
            ..ShrinkPolicy::default()
        })
        .collect();
    let procedures = overrides.procedures.clone().unwrap_or_else(|| {
        if spec.r() == 1 && id != ScenarioId::M3 {
            vec![Procedure::Bootstrap, Procedure::Asymptotic]
        } else {
            vec![Procedure::Bootstrap]
        }
    });
    let cfg = ScenarioConfig {
        model_id: id,
        model: overrides.model.clone().unwrap_or(model),
        design: overrides.design.clone().unwrap_or(design),
        n: overrides.n.unwrap_or(n),
        k: overrides.k.unwrap_or(k),
        b: overrides.b.unwrap_or(b),
        alpha_levels: overrides.alpha_levels.clone().unwrap_or(alpha_levels),
        theta0,
        spec,
        policies,
        seed: overrides.seed.unwrap_or(1),
        procedures,
        quad,
        fit: FitOptions {
            n_starts: 1,
            ..FitOptions::default()
        },
        refit: BootstrapConfig::default().refit,
        workers: overrides.workers.unwrap_or(0),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// `theta` with the last `s` untested rows of `Lambda` set to zero.
pub fn zero_nuisance(theta: &Theta, spec: &TestSpec, s: usize) -> Result<Theta> {
    let p = theta.p();
    let untested: Vec<usize> = (0..p).filter(|r| !spec.contains(*r)).collect();
    if s > untested.len() {
        return Err(config_err(format!(
            "cannot zero {s} nuisance variances, only {} rows are untested",
            untested.len()
        )));
    }
    let mut lambda = theta.lambda().clone();
    for &r in &untested[untested.len() - s..] {
        lambda.row_mut(r).fill(0.0);
    }
    Ok(Theta::new(theta.beta().to_vec(), lambda, theta.sigma2())?)
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.b == 0 || self.n == 0 {
            return Err(config_err("N, K and B must be at least 1"));
        }
        if let Some(a) = self.alpha_levels.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(config_err(format!("alpha must lie in (0, 1), got {a}")));
        }
        if self.alpha_levels.is_empty() || self.procedures.is_empty() {
            return Err(config_err("need at least one alpha level and one procedure"));
        }
        if self.procedures.contains(&Procedure::Bootstrap) && self.policies.is_empty() {
            return Err(config_err("the bootstrap procedure needs at least one threshold"));
        }
        if self.procedures.contains(&Procedure::Asymptotic) && self.spec.r() != 1 {
            return Err(Error::Core(vcboot_core::Error::AsymptoticUnsupported(self.spec.r())));
        }
        if self.theta0.p() != self.model.p() || self.theta0.beta().len() != self.model.b() {
            return Err(config_err(format!(
                "theta0 has p = {}, b = {} but the model has p = {}, b = {}",
                self.theta0.p(),
                self.theta0.beta().len(),
                self.model.p(),
                self.model.b()
            )));
        }
        if self.spec.rows().iter().any(|&r| r >= self.model.p()) {
            return Err(config_err("tested row out of range"));
        }
        self.model.check_theta(&self.theta0)?;
        self.design.validate()?;
        self.quad.validate()?;
        Ok(())
    }

    /// Zero untested diagonal entries of `theta0`.
    pub fn n_nuisance(&self) -> usize {
        n_nuisance(&self.theta0, &self.spec)
    }

    fn bootstrap_config(&self, policy: ShrinkPolicy, seed: u64) -> BootstrapConfig {
        BootstrapConfig {
            b: self.b,
            policy,
            seed,
            quad: self.quad.clone(),
            fit: self.fit.clone(),
            refit: self.refit.clone(),
            ..BootstrapConfig::default()
        }
    }
}

fn n_nuisance(theta: &Theta, spec: &TestSpec) -> usize {
    (0..theta.p())
        .filter(|&r| !spec.contains(r) && theta.lambda()[(r, r)] == 0.0)
        .count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioRow {
    pub procedure: Procedure,
    pub alpha: f64,
    /// Threshold of a bootstrap arm.
    pub c_n: Option<f64>,
    pub n_nuisance: usize,
    pub rate: f64,
    /// `sqrt(rate (1 - rate) / K_effective)`
    pub stderr: f64,
    pub k_effective: usize,
    /// Power grid point.
    pub tested_variance: Option<f64>,
    pub rho: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScenarioResult {
    pub rows: Vec<ScenarioRow>,
    /// Replicates whose observed fits failed.
    pub fit_failures: usize,
    /// Bootstrap runs with more than 5% failed refits.
    pub unreliable_bootstraps: usize,
}

impl ScenarioResult {
    pub fn find(&self, procedure: Procedure, alpha: f64, c_n: Option<f64>) -> Option<&ScenarioRow> {
        self.rows
            .iter()
            .find(|r| r.procedure == procedure && r.alpha == alpha && r.c_n == c_n)
    }

    /// `procedure,alpha,c_n,s,rate,stderr,k_effective`, plus
    /// `tested_variance,rho` for power studies.
    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let power = self.rows.iter().any(|r| r.tested_variance.is_some());
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["procedure", "alpha", "c_n", "s", "rate", "stderr", "k_effective"];
        if power {
            header.extend(["tested_variance", "rho"]);
        }
        w.write_record(&header)?;
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        for r in &self.rows {
            let mut rec = vec![
                r.procedure.to_string(),
                r.alpha.to_string(),
                opt(r.c_n),
                r.n_nuisance.to_string(),
                r.rate.to_string(),
                r.stderr.to_string(),
                r.k_effective.to_string(),
            ];
            if power {
                rec.push(opt(r.tested_variance));
                rec.push(opt(r.rho));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

impl fmt::Display for ScenarioResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<11} {:>6} {:>7} {:>3} {:>8} {:>7} {:>6} {:>8} {:>6}",
            "procedure", "alpha", "c_N", "s", "rate(%)", "se(%)", "K_eff", "var", "rho"
        )?;
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        for r in &self.rows {
            writeln!(
                f,
                "{:<11} {:>6} {:>7} {:>3} {:>8.2} {:>7.2} {:>6} {:>8} {:>6}",
                r.procedure.to_string(),
                r.alpha,
                opt(r.c_n),
                r.n_nuisance,
                100.0 * r.rate,
                100.0 * r.stderr,
                r.k_effective,
                opt(r.tested_variance),
                opt(r.rho),
            )?;
        }
        if self.fit_failures > 0 || self.unreliable_bootstraps > 0 {
            writeln!(
                f,
                "failed replicates: {}, unreliable bootstraps: {}",
                self.fit_failures, self.unreliable_bootstraps
            )?;
        }
        Ok(())
    }
}

/// p-values of one replicate: the asymptotic one and one per policy.
#[derive(Debug, Default)]
struct Outcome {
    fitted: bool,
    p_asymptotic: Option<f64>,
    p_boot: Vec<Option<f64>>,
    unreliable: usize,
}

fn replicate(cfg: &ScenarioConfig, model: &Model, theta0: &Theta, k: usize) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(k as u64);
    let boot_seed = rng.next_u64();
    let design = cfg.design.draw(cfg.n, &mut rng);
    let data = simulate_dataset(model, theta0, &design, &mut rng)?;
    let fit = FitOptions {
        seed: cfg.fit.seed.wrapping_add(k as u64),
        ..cfg.fit.clone()
    };
    let (null, full) = match fit_nested(model, &data, &cfg.spec, &cfg.quad, &fit) {
        Ok(f) => f,
        Err(e) if e.is_numerical() => return Ok(Outcome::default()),
        Err(e) => return Err(e.into()),
    };
    let mut out = Outcome {
        fitted: true,
        ..Outcome::default()
    };
    if cfg.procedures.contains(&Procedure::Asymptotic) {
        out.p_asymptotic = Some(asymptotic_pvalue_single(lrt_statistic(full.loglik, null.loglik), 1)?);
    }
    if cfg.procedures.contains(&Procedure::Bootstrap) {
        for policy in &cfg.policies {
            let bc = cfg.bootstrap_config(*policy, boot_seed);
            let plan = BootstrapPlan::from_fits(model, &data, &cfg.spec, &bc, null.clone(), full.clone())?;
            let outcomes = (0..bc.b).into_par_iter().map(|b| plan.replicate(b)).collect();
            match plan.finish(outcomes) {
                Ok(r) => {
                    out.unreliable += usize::from(r.unreliable);
                    out.p_boot.push(Some(r.p_boot));
                }
                Err(e) if e.is_numerical() => out.p_boot.push(None),
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok(out)
}

fn rate_row(
    procedure: Procedure,
    alpha: f64,
    c_n: Option<f64>,
    s: usize,
    ps: impl Iterator<Item = Option<f64>>,
) -> ScenarioRow {
    let (mut hits, mut k_eff) = (0usize, 0usize);
    for p in ps.flatten() {
        k_eff += 1;
        hits += usize::from(p < alpha);
    }
    let rate = if k_eff == 0 {
        f64::NAN
    } else {
        hits as f64 / k_eff as f64
    };
    ScenarioRow {
        procedure,
        alpha,
        c_n,
        n_nuisance: s,
        rate,
        stderr: (rate * (1.0 - rate) / k_eff as f64).sqrt(),
        k_effective: k_eff,
        tested_variance: None,
        rho: None,
    }
}

/// Rejection rates of every arm for data simulated at `theta0`.
fn run(cfg: &ScenarioConfig, model: &Model, theta0: &Theta, pool: &rayon::ThreadPool) -> Result<ScenarioResult> {
    let outcomes: Vec<Outcome> = pool.install(|| {
        (0..cfg.k)
            .into_par_iter()
            .map(|k| replicate(cfg, model, theta0, k))
            .collect::<Result<_>>()
    })?;
    let s = n_nuisance(theta0, &cfg.spec);
    let mut rows = Vec::new();
    for &procedure in &cfg.procedures {
        for &alpha in &cfg.alpha_levels {
            match procedure {
                Procedure::Asymptotic => {
                    rows.push(rate_row(
                        procedure,
                        alpha,
                        None,
                        s,
                        outcomes.iter().map(|o| o.p_asymptotic),
                    ));
                }
                Procedure::Bootstrap => {
                    for (i, policy) in cfg.policies.iter().enumerate() {
                        let ps = outcomes.iter().map(|o| o.p_boot.get(i).copied().flatten());
                        rows.push(rate_row(procedure, alpha, Some(policy.threshold(cfg.n)), s, ps));
                    }
                }
            }
        }
    }
    Ok(ScenarioResult {
        rows,
        fit_failures: outcomes.iter().filter(|o| !o.fitted).count(),
        unreliable_bootstraps: outcomes.iter().map(|o| o.unreliable).sum(),
    })
}

/// Rejection rates under the null hypothesis.
pub fn empirical_level(config: &ScenarioConfig) -> Result<ScenarioResult> {
    config.validate()?;
    if !config.theta0.is_in_null(&config.spec) {
        return Err(config_err(
            "theta0 is not in the null hypothesis; the level is only defined under it",
        ));
    }
    run(config, &config.model, &config.theta0, &pool(config.workers)?)
}

/// `theta0` with the variance of the (single) tested effect set to
/// `variance` and its correlation with the first untested effect set to
/// `rho`.
pub fn alternative_theta(theta0: &Theta, spec: &TestSpec, variance: f64, rho: f64) -> Result<Theta> {
    let bad = |why: &str| config_err(format!("grid point (variance {variance}, rho {rho}): {why}"));
    if spec.r() != 1 {
        return Err(bad("power grids need exactly one tested row"));
    }
    if !(variance.is_finite() && variance >= 0.0 && rho.is_finite()) {
        return Err(bad("variance must be >= 0 and rho finite"));
    }
    let t = spec.rows()[0];
    let mut gamma: DMatrix<f64> = theta0.gamma();
    gamma.row_mut(t).fill(0.0);
    gamma.column_mut(t).fill(0.0);
    gamma[(t, t)] = variance;
    if rho != 0.0 {
        let u = (0..theta0.p())
            .find(|&u| u != t)
            .ok_or_else(|| bad("no untested effect to correlate with"))?;
        let cov = rho * (variance * gamma[(u, u)]).sqrt();
        gamma[(t, u)] = cov;
        gamma[(u, t)] = cov;
    }
    if rho.abs() > 1.0 {
        return Err(bad("covariance is indefinite"));
    }
    Theta::from_gamma(theta0.beta().to_vec(), &gamma, theta0.sigma2()).map_err(|_| bad("covariance is indefinite"))
}

/// Rejection rates at each `(tested variance, rho)` grid point. Any nonzero
/// `rho` switches the fitted model to a full `Lambda`.
pub fn empirical_power(config: &ScenarioConfig, grid: &[(f64, f64)]) -> Result<ScenarioResult> {
    config.validate()?;
    let thetas = grid
        .iter()
        .map(|&(v, rho)| alternative_theta(&config.theta0, &config.spec, v, rho))
        .collect::<Result<Vec<_>>>()?;
    let model = if grid.iter().any(|g| g.1 != 0.0) {
        config.model.clone().with_structure(CovarianceStructure::Full)
    } else {
        config.model.clone()
    };
    let pool = pool(config.workers)?;
    let mut out = ScenarioResult::default();
    for (&(v, rho), theta) in grid.iter().zip(&thetas) {
        let mut r = run(config, &model, theta, &pool)?;
        for row in &mut r.rows {
            row.tested_variance = Some(v);
            row.rho = Some(rho);
        }
        out.rows.extend(r.rows);
        out.fit_failures += r.fit_failures;
        out.unreliable_bootstraps += r.unreliable_bootstraps;
    }
    Ok(out)
}

/// Empirical level for each number `s` of zero nuisance variances (the last
/// `s` untested rows of `theta0`) and each threshold in `c_values`
/// (`None` is `0.5 N^(-1/5)`).
pub fn nuisance_sweep(config: &ScenarioConfig, s_values: &[usize], c_values: &[Option<f64>]) -> Result<ScenarioResult> {
    let mut cfg = config.clone();
    cfg.policies = c_values
        .iter()
        .map(|&c_n| ShrinkPolicy {
            c_n,
            ..config.policies.first().copied().unwrap_or_default()
        })
        .collect();
    let mut out = ScenarioResult::default();
    for &s in s_values {
        cfg.theta0 = zero_nuisance(&config.theta0, &config.spec, s)?;
        let r = empirical_level(&cfg)?;
        out.rows.extend(r.rows);
        out.fit_failures += r.fit_failures;
        out.unreliable_bootstraps += r.unreliable_bootstraps;
    }
    Ok(out)
}

/// Parameter box and covariate points for [`ratio_criterion_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct ThetaBox {
    pub beta: Vec<(f64, f64)>,
    /// Bounds on the diagonal of `Lambda`.
    pub lambda_diag: Vec<(f64, f64)>,
    /// Covariate rows at which `g` is evaluated.
    pub design: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RatioReport {
    pub epsilon: f64,
    /// Smallest radius of the grid beyond which every sampled ratio is at
    /// most `epsilon`.
    pub radius: Option<f64>,
    /// Largest sampled `max_j |g| / |xi|` outside each radius of the grid.
    pub sup_by_radius: Vec<(f64, f64)>,
}

impl fmt::Display for RatioReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.radius {
            Some(r) => write!(f, "ratio <= {} for |xi| >= {r} at every sampled point", self.epsilon)?,
            None => write!(f, "criterion not numerically supported for epsilon = {}", self.epsilon)?,
        }
        for (r, s) in &self.sup_by_radius {
            write!(f, "\n  radius {r}: sup ratio {s:.6}")?;
        }
        Ok(())
    }
}

/// Numeric probe of `sup |g(x, beta, Lambda xi)| / |xi| <= epsilon` outside a
/// ball. For each radius `R` of the grid it samples `n_directions` unit
/// directions `u`, each with a parameter drawn uniformly from the box (plus
/// the upper corner of the box), and evaluates the ratio at
/// `xi = R 2^m u` for `m = 0..16`. Sampling can only refute the condition;
/// a reported radius is evidence, not proof.
pub fn ratio_criterion_check<R: Rng + ?Sized>(
    model: &Model,
    theta_box: &ThetaBox,
    epsilon: f64,
    radius_grid: &[f64],
    n_directions: usize,
    rng: &mut R,
) -> Result<RatioReport> {
    if !(epsilon > 0.0) {
        return Err(config_err("epsilon must be positive"));
    }
    let (p, b) = (model.p(), model.b());
    if theta_box.lambda_diag.len() != p || theta_box.beta.len() != b {
        return Err(config_err(format!("the box must have {b} beta and {p} Lambda bounds")));
    }
    let mut grid = radius_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let uniform = |(lo, hi): (f64, f64), rng: &mut R| lo + (hi - lo) * rng.random::<f64>();
    let mut sups = Vec::with_capacity(grid.len());
    for &radius in &grid {
        let base = radius.max(1e-3);
        let mut sup = 0.0f64;
        for d in 0..n_directions.max(1) {
            let mut u: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            u.iter_mut().for_each(|v| *v /= norm);
            let (beta, lambda): (Vec<f64>, Vec<f64>) = if d == 0 {
                (
                    theta_box.beta.iter().map(|b| b.1).collect(),
                    theta_box.lambda_diag.iter().map(|l| l.1).collect(),
                )
            } else {
                (
                    theta_box.beta.iter().map(|&bd| uniform(bd, rng)).collect(),
                    theta_box.lambda_diag.iter().map(|&bd| uniform(bd, rng)).collect(),
                )
            };
            for m in 0..=16 {
                let t = base * f64::powi(2.0, m);
                let s: Vec<f64> = lambda.iter().zip(&u).map(|(l, u)| l * t * u).collect();
                for x in &theta_box.design {
                    let g = model.mean().eval(x, &beta, &s);
                    if g.is_finite() {
                        sup = sup.max(g.abs() / t);
                    }
                }
            }
        }
        sups.push((radius, sup));
    }
    let mut radius = None;
    for (r, s) in sups.iter().rev() {
        if *s <= epsilon {
            radius = Some(*r);
        } else {
            break;
        }
    }
    Ok(RatioReport {
        epsilon,
        radius,
        sup_by_radius: sups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use vcboot_core::MeanFunction;

    #[test]
    fn built_in_parameters() {
        let m1 = build_scenario(ScenarioId::M1, &Overrides::default()).unwrap();
        assert_eq!(m1.theta0.beta(), &[0.0, 7.0]);
        assert!((m1.theta0.gamma()[(0, 0)] - 1.3).abs() < 1e-12);
        assert_eq!(m1.spec.rows(), &[1]);
        let m4 = build_scenario(ScenarioId::M4, &Overrides::default()).unwrap();
        let Design::Shared(rows) = &m4.design else { panic!() };
        let xs: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        assert_eq!(xs, M4_DESIGN);
        assert_eq!((m4.k, m4.b, m4.n), (200, 200, 40));
        let m3 = build_scenario(
            ScenarioId::M3,
            &Overrides {
                nuisance: Some(4),
                ..Overrides::default()
            },
        )
        .unwrap();
        let diag: Vec<f64> = m3.theta0.lambda().diagonal().iter().copied().collect();
        assert_eq!(diag, vec![0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(m3.n_nuisance(), 4);
        assert_eq!(m3.n, 30);
    }

    #[test]
    fn unknown_scenario_lists_known_ids() {
        let err = "m9".parse::<ScenarioId>().unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("m1, m2, m3, m4, custom"), "{err}");
    }

    #[test]
    fn level_requires_null_parameter() {
        let mut cfg = build_scenario(ScenarioId::M1, &Overrides::default()).unwrap();
        cfg.theta0 = Theta::diagonal(vec![0.0, 7.0], &[1.0, 0.5], 2.25).unwrap();
        assert!(empirical_level(&cfg).is_err());
    }

    #[test]
    fn indefinite_grid_point_is_named() {
        let cfg = build_scenario(ScenarioId::M1, &Overrides::default()).unwrap();
        let err = empirical_power(&cfg, &[(0.1, 0.0), (0.1, 1.5)]).unwrap_err();
        assert!(err.to_string().contains("variance 0.1, rho 1.5"), "{err}");
        let t = alternative_theta(&cfg.theta0, &cfg.spec, 0.1, 0.5).unwrap();
        let g = t.gamma();
        assert!((g[(1, 1)] - 0.1).abs() < 1e-12);
        assert!((g[(0, 1)] - 0.5 * (0.1f64 * 1.3).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn single_replicate_rates_are_zero_or_one() {
        let cfg = build_scenario(
            ScenarioId::M1,
            &Overrides {
                k: Some(1),
                b: Some(9),
                workers: Some(1),
                ..Overrides::default()
            },
        )
        .unwrap();
        let r = empirical_level(&cfg).unwrap();
        assert_eq!(r.rows.len(), 6);
        for row in &r.rows {
            assert!(row.rate == 0.0 || row.rate == 1.0);
            assert_eq!(row.k_effective, 1);
        }
    }

    #[test]
    fn csv_schema() {
        let r = ScenarioResult {
            rows: vec![rate_row(
                Procedure::Bootstrap,
                0.05,
                Some(0.28),
                0,
                [Some(0.01), Some(0.5)].into_iter(),
            )],
            ..ScenarioResult::default()
        };
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "procedure,alpha,c_n,s,rate,stderr,k_effective\nbootstrap,0.05,0.28,0,0.5,0.3535533905932738,2\n"
        );
    }

    #[derive(Debug)]
    struct Scaled(f64);

    impl MeanFunction for Scaled {
        fn n_random(&self) -> usize {
            2
        }
        fn n_fixed(&self) -> usize {
            0
        }
        fn n_covariates(&self) -> usize {
            0
        }
        fn eval(&self, _x: &[f64], _beta: &[f64], s: &[f64]) -> f64 {
            self.0 * (s[0] * s[0] + s[1] * s[1]).sqrt()
        }
        fn describe(&self) -> String {
            format!("{} |s|", self.0)
        }
    }

    fn probe(model: &Model, b: usize, lambda: (f64, f64), eps: f64, design: Vec<Vec<f64>>) -> RatioReport {
        let bx = ThetaBox {
            beta: vec![(200.0, 200.0); b],
            lambda_diag: vec![lambda; model.p()],
            design,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        ratio_criterion_check(model, &bx, eps, &[0.0, 1.0, 10.0, 100.0, 1e3, 1e4, 1e5], 200, &mut rng).unwrap()
    }

    #[test]
    fn ratio_probe_on_homogeneous_and_zero_means() {
        // |g| / |xi| = 2 everywhere when Lambda = I.
        let lin = Model::new(Scaled(2.0));
        assert_eq!(probe(&lin, 0, (1.0, 1.0), 1.9, vec![vec![]]).radius, None);
        assert_eq!(probe(&lin, 0, (1.0, 1.0), 2.1, vec![vec![]]).radius, Some(0.0));
        let zero = Model::new(Scaled(0.0));
        assert_eq!(probe(&zero, 0, (1.0, 1.0), 1e-12, vec![vec![]]).radius, Some(0.0));
    }

    #[test]
    fn ratio_probe_on_logistic() {
        let model = Model::new(Logistic::new(0));
        let design: Vec<Vec<f64>> = M4_DESIGN.iter().map(|&x| vec![x]).collect();
        // Fixed asymptote: |g| <= 200, so the ratio is below eps beyond 200 / eps.
        let fixed = probe(&model, 3, (0.0, 0.0), 0.5, design.clone());
        assert_eq!(fixed.radius, Some(1e3));
        assert!(fixed.sup_by_radius[3].1 > 0.5);
        // A random asymptote keeps the ratio near lambda_1 along xi_1.
        let random = probe(&model, 3, (0.0, 10.0), 1.0, design.clone());
        assert_eq!(random.radius, None);
        assert!(random.sup_by_radius.last().unwrap().1 > 5.0);
        assert!(probe(&model, 3, (0.0, 10.0), 10.5, design).radius.is_some());
    }
}
