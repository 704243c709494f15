//! Flat `key = value` configuration files and the model configuration
//! they describe.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Lists are comma separated.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use vcboot_core::likelihood::MonteCarlo;
use vcboot_core::{
    CovarianceStructure, Covariate, FitMethod, FitOptions, LinearPredictor, Logistic, MeanFunction, Model, ParamBounds,
    QuadratureConfig, SeedEstimate, ShrinkPolicy, ShrinkScope, Term,
};

use crate::error::{Error, Result};
use crate::io::ColumnMap;

/// Parsed `key = value` pairs. Keys are consumed with the `take` methods;
/// [`finish`](Self::finish) rejects any key that was never consumed.
#[derive(Clone, Debug)]
pub struct KeyValues {
    path: PathBuf,
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Schema {
                path: path.to_path_buf(),
                message: format!("line {}: expected `key = value`, got {line:?}", n + 1),
            })?;
            let key = key.trim().to_string();
            if let Some((first, _)) = entries.insert(key.clone(), (n + 1, value.trim().to_string())) {
                return Err(Error::Schema {
                    path: path.to_path_buf(),
                    message: format!("line {}: `{key}` already set on line {first}", n + 1),
                });
            }
        }
        Ok(KeyValues {
            path: path.to_path_buf(),
            entries,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn error(&self, key: &str, line: usize, message: impl std::fmt::Display) -> Error {
        Error::Schema {
            path: self.path.clone(),
            message: format!("line {line}: `{key}`: {message}"),
        }
    }

    pub fn take_str(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|(_, v)| v)
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|e| self.error(key, line, e)),
        }
    }

    pub fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => parse_list(&v).map(Some).map_err(|e| self.error(key, line, e)),
        }
    }

    /// Errors on keys left unconsumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.iter().next() {
            None => Ok(()),
            Some((key, (line, _))) => Err(self.error(key, *line, "unknown key")),
        }
    }
}

pub fn parse_list<T: FromStr>(text: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| format!("{s:?}: {e}")))
        .collect()
}

/// A shrinkage threshold: a number or `auto` for `0.5 N^(-1/5)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Threshold(pub Option<f64>);

impl FromStr for Threshold {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Threshold(None));
        }
        match s.parse::<f64>() {
            Ok(c) if c.is_finite() && c >= 0.0 => Ok(Threshold(Some(c))),
            _ => Err(format!("expected a nonnegative number or `auto`, got {s:?}")),
        }
    }
}

/// Built-in mean functions, with covariates named by CSV column.
#[derive(Clone, Debug, PartialEq)]
pub enum MeanSpec {
    /// Logistic growth curve in one covariate.
    Logistic { covariate: String },
    /// Polynomial in one covariate, every coefficient fixed plus random.
    Polynomial { covariate: String, degree: usize },
    /// Random slopes without fixed effects.
    RandomSlopes { covariates: Vec<String> },
    /// General linear predictor.
    Linear { terms: Vec<TermSpec> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TermSpec {
    /// `None` for the intercept.
    pub covariate: Option<String>,
    pub power: i32,
    pub fixed: bool,
    pub random: bool,
}

impl FromStr for TermSpec {
    type Err = String;

    /// `name[^power]:flags` where flags is a nonempty subset of `f` (fixed)
    /// and `r` (random); `1` names the intercept.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (cov, flags) = s
            .split_once(':')
            .ok_or_else(|| format!("term {s:?} must look like `x1:fr`"))?;
        let fixed = flags.contains('f');
        let random = flags.contains('r');
        if flags.chars().any(|c| c != 'f' && c != 'r') || !(fixed || random) {
            return Err(format!("term {s:?}: flags must be `f`, `r` or `fr`"));
        }
        let cov = cov.trim();
        let (name, power) = match cov.split_once('^') {
            Some((n, e)) => (
                n.trim(),
                e.trim().parse::<i32>().map_err(|e| format!("term {s:?}: {e}"))?,
            ),
            None => (cov, 1),
        };
        if name.is_empty() {
            return Err(format!("term {s:?} has no covariate"));
        }
        let covariate = if name == "1" { None } else { Some(name.to_string()) };
        Ok(TermSpec {
            covariate,
            power,
            fixed,
            random,
        })
    }
}

impl MeanSpec {
    /// CSV covariate columns in the order the mean function indexes them.
    pub fn covariate_columns(&self) -> Vec<String> {
        match self {
            MeanSpec::Logistic { covariate } | MeanSpec::Polynomial { covariate, .. } => {
                vec![covariate.clone()]
            }
            MeanSpec::RandomSlopes { covariates } => covariates.clone(),
            MeanSpec::Linear { terms } => {
                let mut out: Vec<String> = Vec::new();
                for name in terms.iter().filter_map(|t| t.covariate.as_ref()) {
                    if !out.contains(name) {
                        out.push(name.clone());
                    }
                }
                out
            }
        }
    }

    pub fn build(&self) -> Arc<dyn MeanFunction> {
        match self {
            MeanSpec::Logistic { .. } => Arc::new(Logistic::new(0)),
            MeanSpec::Polynomial { degree, .. } => Arc::new(LinearPredictor::polynomial(*degree)),
            MeanSpec::RandomSlopes { covariates } => Arc::new(LinearPredictor::random_slopes(covariates.len())),
            MeanSpec::Linear { terms } => {
                let cols = self.covariate_columns();
                let (mut nf, mut nr) = (0, 0);
                let built = terms
                    .iter()
                    .map(|t| {
                        let covariate = match &t.covariate {
                            None => Covariate::One,
                            Some(name) => {
                                let c = cols.iter().position(|n| n == name).expect("collected");
                                if t.power == 1 {
                                    Covariate::Column(c)
                                } else {
                                    Covariate::Power(c, t.power)
                                }
                            }
                        };
                        let fixed = t.fixed.then(|| {
                            nf += 1;
                            nf - 1
                        });
                        let random = t.random.then(|| {
                            nr += 1;
                            nr - 1
                        });
                        Term {
                            covariate,
                            fixed,
                            random,
                        }
                    })
                    .collect();
                Arc::new(LinearPredictor::new(built))
            }
        }
    }
}

/// Everything read from a model configuration file.
#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub mean: MeanSpec,
    pub structure: CovarianceStructure,
    pub bounds: ParamBounds,
    pub id_column: String,
    pub y_column: String,
    pub quad: QuadratureConfig,
    pub fit: FitOptions,
    pub shrink_scope: ShrinkScope,
    pub seed_estimate: SeedEstimate,
}

/// Wrapper giving the keyword spellings used in config files.
pub struct Choice<T>(pub T);

macro_rules! choice {
    ($ty:ty, $($name:literal => $val:expr),+ $(,)?) => {
        impl FromStr for Choice<$ty> {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($name => Ok(Choice($val)),)+
                    _ => Err(format!("expected one of {}, got {s:?}", [$($name),+].join(", "))),
                }
            }
        }
    };
}

choice!(CovarianceStructure, "diagonal" => CovarianceStructure::Diagonal, "full" => CovarianceStructure::Full);
choice!(ShrinkScope, "all" => ShrinkScope::AllEntries, "diagonal" => ShrinkScope::DiagonalOnly);
choice!(SeedEstimate, "restricted" => SeedEstimate::Restricted, "unrestricted" => SeedEstimate::Unrestricted);
choice!(FitMethod, "auto" => FitMethod::Auto, "nelder-mead" => FitMethod::NelderMead, "quasi-newton" => FitMethod::QuasiNewton);

impl ModelConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let mut kv = KeyValues::read(path)?;
        let out = Self::from_keys(&mut kv)?;
        kv.finish()?;
        Ok(out)
    }

    /// Consumes the model keys of `kv`, leaving any others.
    pub fn from_keys(kv: &mut KeyValues) -> Result<Self> {
        let kind = kv.take_str("mean").ok_or_else(|| Error::Schema {
            path: kv.path().to_path_buf(),
            message: "missing key `mean` (logistic, polynomial, random_slopes or linear)".to_string(),
        })?;
        let mean = match kind.as_str() {
            "logistic" => MeanSpec::Logistic {
                covariate: kv.take_str("covariate").unwrap_or_else(|| "x1".to_string()),
            },
            "polynomial" => MeanSpec::Polynomial {
                covariate: kv.take_str("covariate").unwrap_or_else(|| "x1".to_string()),
                degree: kv.take("degree")?.unwrap_or(1),
            },
            "random_slopes" => {
                let covariates = match kv.take_list::<String>("covariates")? {
                    Some(c) => c,
                    None => {
                        let p: usize = kv.take("p")?.ok_or_else(|| Error::Schema {
                            path: kv.path().to_path_buf(),
                            message: "random_slopes needs `covariates` or `p`".to_string(),
                        })?;
                        (1..=p).map(|k| format!("x{k}")).collect()
                    }
                };
                MeanSpec::RandomSlopes { covariates }
            }
            "linear" => MeanSpec::Linear {
                terms: kv.take_list::<TermSpec>("terms")?.ok_or_else(|| Error::Schema {
                    path: kv.path().to_path_buf(),
                    message: "linear mean needs `terms`, e.g. `terms = 1:fr, x1:fr`".to_string(),
                })?,
            },
            other => {
                return Err(Error::Schema {
                    path: kv.path().to_path_buf(),
                    message: format!(
                        "unknown mean {other:?}; built-in means are logistic, polynomial, random_slopes, linear"
                    ),
                })
            }
        };
        let default_bounds = ParamBounds::default();
        let bounds = ParamBounds {
            beta_abs: kv.take("beta_abs")?.unwrap_or(default_bounds.beta_abs),
            lambda_abs: kv.take("lambda_abs")?.unwrap_or(default_bounds.lambda_abs),
            sigma2_floor: kv.take("sigma2_floor")?.unwrap_or(default_bounds.sigma2_floor),
            sigma2_max: kv.take("sigma2_max")?.unwrap_or(default_bounds.sigma2_max),
        };
        let mut quad = QuadratureConfig::default();
        if let Some(v) = kv.take("nodes")? {
            quad.n_nodes = v;
        }
        if let Some(v) = kv.take("adaptive")? {
            quad.adaptive = v;
        }
        if let Some(v) = kv.take("mode_tol")? {
            quad.mode_tol = v;
        }
        if let Some(v) = kv.take("max_tensor_dims")? {
            quad.max_tensor_dims = v;
        }
        if let Some(v) = kv.take("force_tensor")? {
            quad.force_tensor = v;
        }
        if let Some(v) = kv.take("closed_form")? {
            quad.closed_form = v;
        }
        if let Some(draws) = kv.take("monte_carlo_draws")? {
            quad.monte_carlo = Some(MonteCarlo {
                draws,
                seed: kv.take("monte_carlo_seed")?.unwrap_or(0),
            });
        }
        let mut fit = FitOptions::default();
        if let Some(v) = kv.take("n_starts")? {
            fit.n_starts = v;
        }
        if let Some(v) = kv.take("max_evals")? {
            fit.max_evals = v;
        }
        if let Some(v) = kv.take("fit_seed")? {
            fit.seed = v;
        }
        if let Some(Choice(m)) = kv.take::<Choice<FitMethod>>("method")? {
            fit.method = m;
        }
        let out = ModelConfig {
            mean,
            structure: kv
                .take::<Choice<CovarianceStructure>>("structure")?
                .map_or_else(Default::default, |c| c.0),
            bounds,
            id_column: kv.take_str("id_column").unwrap_or_else(|| "id".to_string()),
            y_column: kv.take_str("y_column").unwrap_or_else(|| "y".to_string()),
            quad,
            fit,
            shrink_scope: kv
                .take::<Choice<ShrinkScope>>("shrink_scope")?
                .map_or_else(Default::default, |c| c.0),
            seed_estimate: kv
                .take::<Choice<SeedEstimate>>("seed_estimate")?
                .map_or_else(Default::default, |c| c.0),
        };
        out.quad.validate()?;
        out.fit.validate()?;
        Ok(out)
    }

    pub fn model(&self) -> Model {
        Model::from_arc(self.mean.build())
            .with_structure(self.structure)
            .with_bounds(self.bounds)
    }

    pub fn columns(&self) -> ColumnMap {
        ColumnMap {
            id: self.id_column.clone(),
            y: self.y_column.clone(),
            covariates: self.mean.covariate_columns(),
        }
    }

    pub fn policy(&self, threshold: Threshold, shrink_psi: bool) -> ShrinkPolicy {
        ShrinkPolicy {
            c_n: threshold.0,
            scope: self.shrink_scope,
            seed_from: self.seed_estimate,
            shrink_psi,
        }
    }
}
