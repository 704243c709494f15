//! The `vcboot` command line: `fit`, `test` and `simulate`.
//!
//! Exit codes: 0 on success, 1 for usage, configuration and input errors,
//! 2 for numerical or estimation failures.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use vcboot_core::{fit_nested, mle_full, BootstrapConfig, Dataset, TestSpec, Theta};

use crate::config::{KeyValues, ModelConfig, Threshold};
use crate::error::{Error, Result};
use crate::io::read_dataset;
use crate::manifest::RunManifest;
use crate::parallel::bootstrap_test_parallel;
use crate::report::{fit_report, test_report, write_lrt_star};
use crate::sequential::sequential_tests;
use crate::simstudy::{
    build_scenario, empirical_level, empirical_power, nuisance_sweep, Design, Overrides, Procedure, ScenarioId,
    ScenarioResult,
};

#[derive(Debug, Parser)]
#[command(
    name = "vcboot",
    version,
    about = "Shrinked parametric bootstrap tests for variance components"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Maximum likelihood fit of a model to a dataset.
    Fit(FitArgs),
    /// Bootstrap test that rows of the random-effects scale matrix vanish.
    Test(TestArgs),
    /// Run a simulation scenario (m1, m2, m3, m4 or a scenario file).
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Long-format CSV with columns id, y and covariates.
    #[arg(long)]
    data: PathBuf,
    /// Model configuration file.
    #[arg(long)]
    model: PathBuf,
    /// Report file; a manifest is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    io: DataArgs,
    /// Also fit the model with these rows of Lambda (1-based) set to zero.
    #[arg(long = "tested-rows", value_delimiter = ',')]
    tested_rows: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Plan {
    Single,
    /// T1 on both tested rows, then T2 on the second and T3 on the first,
    /// each with and without shrinkage.
    Sequential,
}

#[derive(Debug, Args)]
struct TestArgs {
    #[command(flatten)]
    io: DataArgs,
    /// Rows of Lambda to test (1-based).
    #[arg(long = "tested-rows", value_delimiter = ',', required = true)]
    tested_rows: Vec<usize>,
    #[arg(long = "B", default_value_t = 500)]
    b: usize,
    /// Shrinkage threshold, or `auto` for 0.5 N^(-1/5).
    #[arg(long = "c-n", default_value = "auto")]
    c_n: Threshold,
    /// Also shrink fixed effects whose magnitude is at most c_N.
    #[arg(long = "shrink-psi")]
    shrink_psi: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, value_enum, default_value_t = Plan::Single)]
    plan: Plan,
    /// Write the bootstrap statistics to this CSV.
    #[arg(long = "lrt-star")]
    lrt_star: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Scenario id; may be omitted when a scenario file names one.
    scenario: Option<String>,
    /// Scenario file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "N")]
    n: Option<usize>,
    #[arg(long = "K")]
    k: Option<usize>,
    #[arg(long = "B")]
    b: Option<usize>,
    /// Numbers of zero nuisance variances to sweep.
    #[arg(long, value_delimiter = ',')]
    s: Option<Vec<usize>>,
    /// Shrinkage thresholds, one bootstrap arm each (`auto` allowed).
    #[arg(long, value_delimiter = ',')]
    c: Option<Vec<Threshold>>,
    #[arg(long, value_delimiter = ',')]
    alpha: Option<Vec<f64>>,
    /// Power grid of `variance:rho` points for the tested effect.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<String>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Results CSV; defaults to `simulate-<scenario>.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `args` (including the program name), runs the command and
/// returns the exit code. Errors are printed to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let command = args
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join(" ");
    let outcome = match cli.command {
        Command::Fit(a) => cmd_fit(&a, &command),
        Command::Test(a) => cmd_test(&a, &command),
        Command::Simulate(a) => cmd_simulate(&a, &command),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load(io: &DataArgs) -> Result<(ModelConfig, Dataset)> {
    let cfg = ModelConfig::read(&io.model)?;
    let data = read_dataset(&io.data, &cfg.columns())?;
    cfg.model().check_dataset(&data)?;
    Ok((cfg, data))
}

fn spec_from(rows: &[usize], p: usize) -> Result<TestSpec> {
    TestSpec::from_one_based(rows, p).map_err(|e| Error::Usage(format!("--tested-rows: {e}")))
}

/// Writes `text` to `out` with a manifest, or prints both.
fn emit(text: &str, out: Option<&Path>, manifest: &RunManifest) -> Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
            manifest.write_for(path)?;
            print!("{text}");
        }
        None => {
            print!("{text}");
            for line in manifest.to_text().lines() {
                println!("manifest.{line}");
            }
        }
    }
    Ok(())
}

fn cmd_fit(a: &FitArgs, command: &str) -> Result<()> {
    let (cfg, data) = load(&a.io)?;
    let model = cfg.model();
    let mut text = format!(
        "model = {}\nN = {}\nn_obs = {}\n",
        model.mean().describe(),
        data.n(),
        data.n_obs()
    );
    if a.tested_rows.is_empty() {
        let fit = mle_full(&model, &data, &cfg.quad, &cfg.fit)?;
        text.push_str(&fit_report("full", &fit));
    } else {
        let spec = spec_from(&a.tested_rows, model.p())?;
        let (null, full) = fit_nested(&model, &data, &spec, &cfg.quad, &cfg.fit)?;
        text.push_str(&fit_report("null", &null));
        text.push_str(&fit_report("full", &full));
    }
    let manifest = RunManifest::new(
        command.to_string(),
        Some(&a.io.model),
        Some(cfg.fit.seed),
        &[&a.io.data, &a.io.model],
    )?;
    emit(&text, a.io.out.as_deref(), &manifest)
}

fn cmd_test(a: &TestArgs, command: &str) -> Result<()> {
    let (cfg, data) = load(&a.io)?;
    let model = cfg.model();
    let spec = spec_from(&a.tested_rows, model.p())?;
    let config = BootstrapConfig {
        b: a.b,
        alpha: a.alpha,
        policy: cfg.policy(a.c_n, a.shrink_psi),
        seed: a.seed,
        quad: cfg.quad.clone(),
        fit: cfg.fit.clone(),
        ..BootstrapConfig::default()
    };
    let mut text = format!("model = {}\nN = {}\n", model.mean().describe(), data.n());
    let mut lrt_star = Vec::new();
    match a.plan {
        Plan::Single => {
            text.push_str(&format!("tested_rows = {}\n", join(&a.tested_rows)));
            let r = bootstrap_test_parallel(&model, &data, &spec, &config, a.workers)?;
            text.push_str(&test_report(&r));
            lrt_star = r.lrt_star;
        }
        Plan::Sequential => {
            let rows = spec.rows();
            if rows.len() != 2 {
                return Err(Error::Usage(
                    "--plan sequential needs exactly two tested rows".to_string(),
                ));
            }
            let results = sequential_tests(&model, &data, [rows[0], rows[1]], &config, a.workers)?;
            text.push_str("# test, tested rows, procedure, lrt_obs, p_boot\n");
            for r in &results {
                let one_based: Vec<usize> = r.rows.iter().map(|x| x + 1).collect();
                text.push_str(&format!(
                    "{} = {}, {}, {}, {}\n",
                    r.test,
                    join(&one_based),
                    if r.shrink { "shrink" } else { "no shrink" },
                    r.result.lrt_obs,
                    r.result.p_boot
                ));
            }
            for r in &results {
                let tag = format!("{}.{}", r.test, if r.shrink { "shrink" } else { "no_shrink" });
                for line in test_report(&r.result).lines() {
                    text.push_str(&format!("{tag}.{line}\n"));
                }
            }
        }
    }
    let manifest = RunManifest::new(
        command.to_string(),
        Some(&a.io.model),
        Some(a.seed),
        &[&a.io.data, &a.io.model],
    )?;
    if let Some(path) = &a.lrt_star {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        write_lrt_star(file, &lrt_star).map_err(|source| Error::Csv {
            path: path.clone(),
            source,
        })?;
        manifest.write_for(path)?;
    }
    emit(&text, a.io.out.as_deref(), &manifest)
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// What a scenario run should compute.
#[derive(Clone, Debug, Default)]
pub struct ScenarioRequest {
    pub id: Option<String>,
    pub overrides: Overrides,
    pub s_values: Option<Vec<usize>>,
    pub grid: Option<Vec<(f64, f64)>>,
}

fn parse_grid(items: &[String]) -> Result<Vec<(f64, f64)>> {
    items
        .iter()
        .map(|g| {
            let (v, r) = g.split_once(':').unwrap_or((g.as_str(), "0"));
            match (v.trim().parse(), r.trim().parse()) {
                (Ok(v), Ok(r)) => Ok((v, r)),
                _ => Err(Error::Usage(format!("grid point {g:?} must look like `variance:rho`"))),
            }
        })
        .collect()
}

/// Reads a scenario file: `scenario`, `N`, `K`, `B`, `alpha`, `seed`, `c`,
/// `s`, `grid`, `procedures`, `nodes`, `workers`, `shrink_psi`, and for any
/// scenario the parameter keys `tested_rows`, `beta`, `lambda_diag`,
/// `sigma2`, `design` (one covariate value per observation). A `custom`
/// scenario also takes the model keys of a model configuration.
pub fn read_scenario_file(path: &Path) -> Result<ScenarioRequest> {
    let mut kv = KeyValues::read(path)?;
    let id = kv.take_str("scenario");
    let mut o = Overrides {
        n: kv.take("N")?,
        k: kv.take("K")?,
        b: kv.take("B")?,
        alpha_levels: kv.take_list("alpha")?,
        seed: kv.take("seed")?,
        thresholds: kv
            .take_list::<Threshold>("c")?
            .map(|v| v.into_iter().map(|t| t.0).collect()),
        shrink_psi: kv.take("shrink_psi")?,
        procedures: kv.take_list::<Procedure>("procedures")?,
        nodes: kv.take("nodes")?,
        workers: kv.take("workers")?,
        ..Overrides::default()
    };
    let s_values = kv.take_list("s")?;
    let grid = kv.take_list::<String>("grid")?.map(|g| parse_grid(&g)).transpose()?;
    let tested: Option<Vec<usize>> = kv.take_list("tested_rows")?;
    let beta: Option<Vec<f64>> = kv.take_list("beta")?;
    let lambda: Option<Vec<f64>> = kv.take_list("lambda_diag")?;
    let sigma2: Option<f64> = kv.take("sigma2")?;
    if let Some(d) = kv.take_list::<f64>("design")? {
        o.design = Some(Design::Shared(d.into_iter().map(|x| vec![x]).collect()));
    }
    if id.as_deref() == Some("custom") {
        o.model = Some(ModelConfig::from_keys(&mut kv)?.model());
    }
    kv.finish()?;
    let base = match &id {
        Some(s) if s != "custom" => Some(build_scenario(s.parse()?, &Overrides::default())?),
        _ => None,
    };
    let p = o.model.as_ref().map(|m| m.p()).or(base.as_ref().map(|b| b.model.p()));
    if let Some(rows) = tested {
        let p = p.ok_or_else(|| Error::Usage("tested_rows needs a model".to_string()))?;
        o.spec = Some(spec_from(&rows, p)?);
    }
    if beta.is_some() || lambda.is_some() || sigma2.is_some() {
        let t0 = base.as_ref().map(|b| &b.theta0);
        let beta = beta.or_else(|| t0.map(|t| t.beta().to_vec()));
        let lambda = lambda
            .map(|l| DMatrix::from_diagonal(&l.into()))
            .or_else(|| t0.map(|t| t.lambda().clone()));
        let sigma2 = sigma2.or_else(|| t0.map(Theta::sigma2));
        match (beta, lambda, sigma2) {
            (Some(b), Some(l), Some(s)) => o.theta0 = Some(Theta::new(b, l, s)?),
            _ => {
                return Err(Error::Usage(
                    "custom parameters need beta, lambda_diag and sigma2".to_string(),
                ))
            }
        }
    }
    Ok(ScenarioRequest {
        id,
        overrides: o,
        s_values,
        grid,
    })
}

/// Builds the scenario and runs the study it asks for: a power grid, a
/// nuisance sweep (m3, or whenever `s` values are given) or the level.
pub fn run_scenario(req: &ScenarioRequest) -> Result<(ScenarioId, ScenarioResult)> {
    let id: ScenarioId = req
        .id
        .as_deref()
        .ok_or_else(|| {
            Error::Usage(format!(
                "no scenario given; known scenarios: {}",
                ScenarioId::KNOWN.join(", ")
            ))
        })?
        .parse()?;
    let cfg = build_scenario(id, &req.overrides)?;
    let result = if let Some(grid) = &req.grid {
        empirical_power(&cfg, grid)?
    } else if req.s_values.is_some() || id == ScenarioId::M3 {
        let s = req.s_values.clone().unwrap_or_else(|| vec![0, 4, 7]);
        let c: Vec<Option<f64>> = cfg.policies.iter().map(|p| p.c_n).collect();
        nuisance_sweep(&cfg, &s, &c)?
    } else {
        empirical_level(&cfg)?
    };
    Ok((id, result))
}

fn cmd_simulate(a: &SimulateArgs, command: &str) -> Result<()> {
    let mut req = match &a.config {
        Some(path) => read_scenario_file(path)?,
        None => ScenarioRequest::default(),
    };
    if a.scenario.is_some() {
        req.id.clone_from(&a.scenario);
    }
    let o = &mut req.overrides;
    o.n = a.n.or(o.n);
    o.k = a.k.or(o.k);
    o.b = a.b.or(o.b);
    o.seed = a.seed.or(o.seed);
    o.workers = a.workers.or(o.workers);
    if let Some(alpha) = &a.alpha {
        o.alpha_levels = Some(alpha.clone());
    }
    if let Some(c) = &a.c {
        o.thresholds = Some(c.iter().map(|t| t.0).collect());
    }
    if let Some(s) = &a.s {
        req.s_values = Some(s.clone());
    }
    if let Some(g) = &a.grid {
        req.grid = Some(parse_grid(g)?);
    }
    let (id, result) = run_scenario(&req)?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("simulate-{id}.csv")));
    let file = std::fs::File::create(&out).map_err(|e| Error::io(&out, e))?;
    result.write_csv(file).map_err(|source| Error::Csv {
        path: out.clone(),
        source,
    })?;
    let inputs: Vec<&Path> = a.config.as_deref().into_iter().collect();
    let seed = req.overrides.seed.unwrap_or(1);
    RunManifest::new(command.to_string(), a.config.as_deref(), Some(seed), &inputs)?.write_for(&out)?;
    print!("{result}");
    println!("results written to {}", out.display());
    Ok(())
}
