//! Parameters, model and data representations.
//!
//! `Lambda` is stored as a dense `p x p` matrix that is kept lower triangular
//! with a nonnegative diagonal; `Gamma = Lambda Lambda^T` is the covariance of
//! the scaled random effect `s = Lambda xi`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;

/// The known mean function `g(x, beta, s)` of the model, where `s = Lambda xi`.
///
/// Implementations must be pure: the same inputs always give the same output,
/// and concurrent calls from several threads are allowed.
pub trait MeanFunction: Send + Sync + fmt::Debug {
    /// Number of random effects `p`.
    fn n_random(&self) -> usize;
    /// Number of fixed effects `b`.
    fn n_fixed(&self) -> usize;
    /// Minimum length of each covariate vector.
    fn n_covariates(&self) -> usize;

    fn eval(&self, x: &[f64], beta: &[f64], s: &[f64]) -> f64;

    /// True when `g` is affine in `(beta, s)`; enables the closed-form likelihood.
    fn is_affine(&self) -> bool {
        false
    }

    /// Writes `dg/dbeta` and `dg/ds` at `(x, beta, s)` and returns `g` there,
    /// or returns `None` to fall back on finite differences.
    fn gradient(&self, _x: &[f64], _beta: &[f64], _s: &[f64], _d_beta: &mut [f64], _d_s: &mut [f64]) -> Option<f64> {
        None
    }

    /// Data-driven starting value for `beta`, if the function knows one.
    fn initial_beta(&self, _data: &Dataset) -> Option<Vec<f64>> {
        None
    }

    fn describe(&self) -> String;
}

/// Which entries of `Lambda` are free parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CovarianceStructure {
    /// Independent random effects: only the diagonal of `Lambda` is estimated.
    #[default]
    Diagonal,
    /// Full lower-triangular `Lambda`.
    Full,
}

/// Box bounds standing in for the compact parameter space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamBounds {
    pub beta_abs: f64,
    pub lambda_abs: f64,
    pub sigma2_floor: f64,
    pub sigma2_max: f64,
}

impl Default for ParamBounds {
    fn default() -> Self {
        ParamBounds {
            beta_abs: 1e6,
            lambda_abs: 1e6,
            sigma2_floor: 1e-6,
            sigma2_max: 1e12,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    mean: Arc<dyn MeanFunction>,
    structure: CovarianceStructure,
    bounds: ParamBounds,
}

impl Model {
    pub fn new<M: MeanFunction + 'static>(mean: M) -> Self {
        Model::from_arc(Arc::new(mean))
    }

    pub fn from_arc(mean: Arc<dyn MeanFunction>) -> Self {
        Model {
            mean,
            structure: CovarianceStructure::default(),
            bounds: ParamBounds::default(),
        }
    }

    pub fn with_structure(mut self, structure: CovarianceStructure) -> Self {
        self.structure = structure;
        self
    }

    pub fn with_bounds(mut self, bounds: ParamBounds) -> Self {
        self.bounds = bounds;
        self
    }

    pub fn p(&self) -> usize {
        self.mean.n_random()
    }

    pub fn b(&self) -> usize {
        self.mean.n_fixed()
    }

    pub fn is_linear(&self) -> bool {
        self.mean.is_affine()
    }

    pub fn structure(&self) -> CovarianceStructure {
        self.structure
    }

    pub fn bounds(&self) -> &ParamBounds {
        &self.bounds
    }

    pub fn mean(&self) -> &Arc<dyn MeanFunction> {
        &self.mean
    }

    /// Free `(row, col)` entries of `Lambda`, excluding the rows fixed at zero
    /// by `null` when given.
    pub fn free_lambda_entries(&self, null: Option<&TestSpec>) -> Vec<(usize, usize)> {
        let p = self.p();
        let mut out = Vec::new();
        for i in 0..p {
            if null.is_some_and(|s| s.contains(i)) {
                continue;
            }
            match self.structure {
                CovarianceStructure::Diagonal => out.push((i, i)),
                CovarianceStructure::Full => {
                    for j in 0..=i {
                        if null.is_some_and(|s| s.contains(j)) {
                            continue;
                        }
                        out.push((i, j));
                    }
                }
            }
        }
        out
    }

    /// Checks dimensions of `theta` and that it lies in the model's box.
    pub fn check_theta(&self, theta: &Theta) -> Result<()> {
        if theta.beta.len() != self.b() || theta.p() != self.p() {
            return Err(Error::Dimension(format!(
                "theta has b = {}, p = {}; model has b = {}, p = {}",
                theta.beta.len(),
                theta.p(),
                self.b(),
                self.p()
            )));
        }
        if theta.sigma2 < self.bounds.sigma2_floor {
            return Err(Error::InvalidParameter(format!(
                "sigma2 = {} is below the floor {}",
                theta.sigma2, self.bounds.sigma2_floor
            )));
        }
        Ok(())
    }

    pub fn check_dataset(&self, data: &Dataset) -> Result<()> {
        let k = self.mean.n_covariates();
        for ind in &data.individuals {
            if let Some(x) = ind.x.iter().find(|x| x.len() < k) {
                return Err(Error::Dimension(format!(
                    "individual {}: covariate vector of length {} but the model needs {}",
                    ind.id,
                    x.len(),
                    k
                )));
            }
        }
        Ok(())
    }
}

/// Evaluates `g(x, beta, s)`, turning non-finite output into an error.
pub fn mean_eval(model: &Model, x: &[f64], beta: &[f64], s: &[f64]) -> Result<f64> {
    if beta.len() != model.b() || s.len() != model.p() {
        return Err(Error::Dimension(format!(
            "beta has length {} (want {}), s has length {} (want {})",
            beta.len(),
            model.b(),
            s.len(),
            model.p()
        )));
    }
    let v = model.mean.eval(x, beta, s);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Evaluation {
            x: x.to_vec(),
            beta: beta.to_vec(),
            s: s.to_vec(),
            value: v,
        })
    }
}

/// Full parameter `(beta, Lambda, sigma2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Theta {
    beta: Vec<f64>,
    lambda: DMatrix<f64>,
    sigma2: f64,
}

impl Theta {
    pub fn new(beta: Vec<f64>, lambda: DMatrix<f64>, sigma2: f64) -> Result<Self> {
        if !lambda.is_square() {
            return Err(Error::InvalidParameter("Lambda must be square".to_string()));
        }
        let p = lambda.nrows();
        for i in 0..p {
            for j in 0..p {
                let v = lambda[(i, j)];
                if !v.is_finite() {
                    return Err(Error::InvalidParameter(format!("Lambda[{i},{j}] = {v}")));
                }
                if j > i && v != 0.0 {
                    return Err(Error::InvalidParameter(format!(
                        "Lambda must be lower triangular, found Lambda[{i},{j}] = {v}"
                    )));
                }
            }
            if lambda[(i, i)] < 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "diagonal entry Lambda[{i},{i}] = {} is negative",
                    lambda[(i, i)]
                )));
            }
        }
        if let Some(b) = beta.iter().find(|b| !b.is_finite()) {
            return Err(Error::InvalidParameter(format!("beta entry {b} is not finite")));
        }
        if !(sigma2.is_finite() && sigma2 > 0.0) {
            return Err(Error::InvalidParameter(format!("sigma2 = {sigma2} must be positive")));
        }
        Ok(Theta { beta, lambda, sigma2 })
    }

    /// Diagonal `Lambda = diag(lambda_diag)`.
    pub fn diagonal(beta: Vec<f64>, lambda_diag: &[f64], sigma2: f64) -> Result<Self> {
        let lambda = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(lambda_diag));
        Theta::new(beta, lambda, sigma2)
    }

    /// Builds `Lambda` as the Cholesky factor of a PSD covariance `gamma`.
    pub fn from_gamma(beta: Vec<f64>, gamma: &DMatrix<f64>, sigma2: f64) -> Result<Self> {
        if !gamma.is_square() {
            return Err(Error::InvalidParameter("Gamma must be square".to_string()));
        }
        let sym = (gamma - gamma.transpose()).abs().max();
        if sym > 1e-12 * gamma.abs().max().max(1.0) {
            return Err(Error::InvalidParameter("Gamma must be symmetric".to_string()));
        }
        let lambda = linalg::psd_cholesky(gamma, 1e-12)
            .ok_or_else(|| Error::InvalidParameter("Gamma is not positive semi-definite".to_string()))?;
        Theta::new(beta, lambda, sigma2)
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn lambda(&self) -> &DMatrix<f64> {
        &self.lambda
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn p(&self) -> usize {
        self.lambda.nrows()
    }

    pub fn gamma(&self) -> DMatrix<f64> {
        gamma_of(self)
    }

    /// True when every tested row of `Lambda` is exactly zero.
    pub fn is_in_null(&self, spec: &TestSpec) -> bool {
        spec.rows()
            .iter()
            .all(|&r| r < self.p() && self.lambda.row(r).iter().all(|v| *v == 0.0))
    }

    pub(crate) fn from_parts_unchecked(beta: Vec<f64>, lambda: DMatrix<f64>, sigma2: f64) -> Self {
        debug_assert!(Theta::new(beta.clone(), lambda.clone(), sigma2).is_ok());
        Theta { beta, lambda, sigma2 }
    }

    pub(crate) fn lambda_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.lambda
    }

    pub(crate) fn beta_mut(&mut self) -> &mut Vec<f64> {
        &mut self.beta
    }

    pub(crate) fn set_sigma2(&mut self, sigma2: f64) {
        self.sigma2 = sigma2;
    }
}

impl fmt::Display for Theta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "beta = {:?}, Lambda = [", self.beta)?;
        for i in 0..self.p() {
            if i > 0 {
                write!(f, "; ")?;
            }
            for j in 0..=i {
                if j > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{}", self.lambda[(i, j)])?;
            }
        }
        write!(f, "], sigma2 = {}", self.sigma2)
    }
}

/// `Gamma = Lambda Lambda^T`.
pub fn gamma_of(theta: &Theta) -> DMatrix<f64> {
    let g = &theta.lambda * theta.lambda.transpose();
    // exact symmetry
    (&g + g.transpose()) * 0.5
}

/// Zeroes every tested row of `Lambda`.
pub fn project_to_null(theta: &Theta, spec: &TestSpec) -> Result<Theta> {
    let p = theta.p();
    if let Some(&r) = spec.rows().iter().find(|&&r| r >= p) {
        return Err(Error::Config(format!("tested row {} outside 1..={p}", r + 1)));
    }
    let mut out = theta.clone();
    for &r in spec.rows() {
        out.lambda.row_mut(r).fill(0.0);
    }
    Ok(out)
}

/// Rows of `Lambda` (0-based) whose variance components are tested.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TestSpec {
    rows: Vec<usize>,
}

impl TestSpec {
    /// `rows` are 0-based and must be distinct and `< p`.
    pub fn new(rows: Vec<usize>, p: usize) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Config("at least one row must be tested".to_string()));
        }
        for (k, &r) in rows.iter().enumerate() {
            if r >= p {
                return Err(Error::Config(format!("tested row {} outside 1..={p}", r + 1)));
            }
            if rows[..k].contains(&r) {
                return Err(Error::Config(format!("tested row {} listed twice", r + 1)));
            }
        }
        Ok(TestSpec { rows })
    }

    /// Builds a spec from 1-based row numbers, as written on the command line.
    pub fn from_one_based(rows: &[usize], p: usize) -> Result<Self> {
        if rows.contains(&0) {
            return Err(Error::Config("tested rows are numbered from 1".to_string()));
        }
        TestSpec::new(rows.iter().map(|r| r - 1).collect(), p)
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn r(&self) -> usize {
        self.rows.len()
    }

    pub fn contains(&self, row: usize) -> bool {
        self.rows.contains(&row)
    }

    /// True when the tested rows are exactly the last `r` rows.
    pub fn is_trailing(&self, p: usize) -> bool {
        let r = self.r();
        (p - r..p).all(|k| self.contains(k))
    }

    /// Untested rows in increasing order followed by tested rows in increasing order.
    pub fn canonical_order(&self, p: usize) -> Vec<usize> {
        let mut tested = self.rows.clone();
        tested.sort_unstable();
        let mut order: Vec<usize> = (0..p).filter(|k| !self.contains(*k)).collect();
        order.extend(tested);
        order
    }

    /// This test after relabelling by [`TestSpec::canonical_order`]: the last `r` rows.
    pub fn canonical(&self, p: usize) -> TestSpec {
        TestSpec {
            rows: (p - self.r()..p).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Individual {
    pub id: String,
    pub y: Vec<f64>,
    pub x: Vec<Vec<f64>>,
}

impl Individual {
    pub fn new(id: impl Into<String>, y: Vec<f64>, x: Vec<Vec<f64>>) -> Result<Self> {
        let id = id.into();
        if y.is_empty() {
            return Err(Error::InvalidParameter(format!("individual {id} has no observations")));
        }
        if x.len() != y.len() {
            return Err(Error::Dimension(format!(
                "individual {id}: {} responses but {} covariate vectors",
                y.len(),
                x.len()
            )));
        }
        if let Some(v) = y.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("individual {id}: response {v}")));
        }
        Ok(Individual { id, y, x })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    individuals: Vec<Individual>,
}

impl Dataset {
    pub fn new(individuals: Vec<Individual>) -> Result<Self> {
        if individuals.is_empty() {
            return Err(Error::InvalidParameter("dataset has no individuals".to_string()));
        }
        Ok(Dataset { individuals })
    }

    pub fn individuals(&self) -> &[Individual] {
        &self.individuals
    }

    /// Number of individuals `N`.
    pub fn n(&self) -> usize {
        self.individuals.len()
    }

    pub fn n_obs(&self) -> usize {
        self.individuals.iter().map(Individual::len).sum()
    }

    /// Covariate lists, one per individual, as accepted by `simulate_dataset`.
    pub fn design(&self) -> Vec<Vec<Vec<f64>>> {
        self.individuals.iter().map(|i| i.x.clone()).collect()
    }
}

/// Zero vector helper used across modules.
pub(crate) fn zeros(n: usize) -> Vec<f64> {
    vec![0.0; n]
}
