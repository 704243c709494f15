//! Marginal log-likelihood `sum_i log int f(y_i | xi) phi(xi) dxi` and data
//! simulation.
//!
//! Affine mean functions use the exact Gaussian marginal. Otherwise the
//! integral runs over the *active* random-effect dimensions only (columns of
//! `Lambda` with a nonzero entry) with adaptive Gauss–Hermite quadrature
//! centred at the conditional mode, or plain Monte Carlo when requested.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::OnceCell;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{self, ln_2pi};
use crate::model::{mean_eval, zeros, Dataset, Individual, Model, Theta};
use crate::quadrature::{GaussHermite, TensorRule};

/// Plain Monte Carlo integration with a fixed set of draws (common random
/// numbers across parameter values).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MonteCarlo {
    pub draws: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureConfig {
    /// Nodes per active dimension.
    pub n_nodes: usize,
    /// Centre and scale the nodes at the conditional mode of each individual.
    pub adaptive: bool,
    /// Step tolerance of the inner mode search.
    pub mode_tol: f64,
    /// Largest number of active dimensions integrated by tensor quadrature.
    pub max_tensor_dims: usize,
    pub force_tensor: bool,
    /// Use the exact Gaussian marginal when the mean function is affine.
    pub closed_form: bool,
    pub monte_carlo: Option<MonteCarlo>,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        QuadratureConfig {
            n_nodes: 9,
            adaptive: true,
            mode_tol: 1e-6,
            max_tensor_dims: 5,
            force_tensor: false,
            closed_form: true,
            monte_carlo: None,
        }
    }
}

impl QuadratureConfig {
    pub fn with_nodes(n_nodes: usize) -> Self {
        QuadratureConfig {
            n_nodes,
            ..QuadratureConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_nodes == 0 {
            return Err(Error::Config("n_nodes must be at least 1".to_string()));
        }
        if !(self.mode_tol > 0.0) {
            return Err(Error::Config("mode_tol must be positive".to_string()));
        }
        if let Some(mc) = self.monte_carlo {
            if mc.draws == 0 {
                return Err(Error::Config("Monte Carlo integration needs draws".to_string()));
            }
        }
        Ok(())
    }
}

/// Log-likelihood of one individual.
pub fn individual_loglik(
    model: &Model,
    individual: &Individual,
    theta: &Theta,
    quad: &QuadratureConfig,
) -> Result<f64> {
    let integ = Integrator::new(model, quad)?;
    model.check_theta(theta)?;
    let prep = integ.prepare(theta);
    integ.individual(individual, theta, &prep, None, &mut Scratch::default(), None)
}

/// Log-likelihood of a dataset, summed over individuals in index order.
pub fn loglik(model: &Model, data: &Dataset, theta: &Theta, quad: &QuadratureConfig) -> Result<f64> {
    Integrator::new(model, quad)?.loglik(data, theta, None)
}

/// Draws `y_ij = g(x_ij, beta, Lambda xi_i) + eps_ij` for every covariate list
/// in `design`; per individual the `p` draws of `xi_i` come first, then the
/// `J_i` noise draws.
pub fn simulate_dataset<R: Rng + ?Sized>(
    model: &Model,
    theta: &Theta,
    design: &[Vec<Vec<f64>>],
    rng: &mut R,
) -> Result<Dataset> {
    model.check_theta(theta)?;
    let p = model.p();
    let sigma = libm::sqrt(theta.sigma2());
    let mut xi = DVector::<f64>::zeros(p);
    let mut individuals = Vec::with_capacity(design.len());
    for (i, xs) in design.iter().enumerate() {
        for k in 0..p {
            xi[k] = rng.sample(StandardNormal);
        }
        let s = theta.lambda() * &xi;
        let mut y = Vec::with_capacity(xs.len());
        for x in xs {
            let eps: f64 = rng.sample(StandardNormal);
            y.push(mean_eval(model, x, theta.beta(), s.as_slice())? + sigma * eps);
        }
        individuals.push(Individual::new((i + 1).to_string(), y, xs.clone())?);
    }
    Dataset::new(individuals)
}

/// Per-parameter quantities shared by all individuals.
pub(crate) struct Prepared {
    /// Indices of the columns of `Lambda` with a nonzero entry.
    active: Vec<usize>,
    /// `Lambda` restricted to the active columns, `p x d`.
    lambda_active: DMatrix<f64>,
    gamma: DMatrix<f64>,
}

/// Gradient of the log-likelihood in `(beta, Lambda, sigma2)`.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Gradient {
    pub beta: Vec<f64>,
    /// `dl / dLambda_ij`, filled for the active columns only.
    pub lambda: DMatrix<f64>,
    pub sigma2: f64,
    /// `d2l / dLambda_kk^2` at zero for each requested column `k` that is
    /// entirely zero (the first derivative vanishes there by symmetry).
    pub curvature: Vec<f64>,
}

impl Gradient {
    fn zeros(b: usize, p: usize) -> Self {
        Gradient {
            beta: vec![0.0; b],
            lambda: DMatrix::zeros(p, p),
            sigma2: 0.0,
            curvature: vec![0.0; p],
        }
    }
}

/// Likelihood evaluator holding the quadrature rules for one model.
pub(crate) struct Integrator<'a> {
    model: &'a Model,
    quad: &'a QuadratureConfig,
    gh: GaussHermite,
    rules: Vec<OnceCell<TensorRule>>,
    mc_draws: Vec<OnceCell<Vec<f64>>>,
}

/// Work buffers for one individual.
#[derive(Default)]
struct Scratch {
    s: Vec<f64>,
    s_tmp: Vec<f64>,
    b_tmp: Vec<f64>,
    gb: Vec<f64>,
    gs: Vec<f64>,
    g: Vec<f64>,
    /// `n x d` Jacobian of the mean in `eta`, row-major.
    jac: Vec<f64>,
    eta: Vec<f64>,
    trial: Vec<f64>,
    node: Vec<f64>,
    a_b: Vec<f64>,
    a_s: Vec<f64>,
    curv: Vec<f64>,
    terms: Vec<f64>,
    /// Per-node gradient contributions, `terms.len() x width`.
    contrib: Vec<f64>,
}

/// Columns whose curvature is requested, and where each contribution lives.
struct Layout<'c> {
    b: usize,
    p: usize,
    d: usize,
    curvature: &'c [usize],
}

impl Layout<'_> {
    fn width(&self) -> usize {
        self.b + self.p * self.d + 1 + self.curvature.len()
    }
}

/// How the nodes of one individual's integral are laid out.
enum Nodes<'r> {
    /// No active dimension: the integrand is the conditional density at `eta = ()`.
    Single,
    Tensor {
        rule: &'r TensorRule,
        /// `sqrt(2) L^{-T}`, `d x d` column-major.
        scale: DMatrix<f64>,
        log_jac: f64,
    },
    Draws(&'r [f64], usize),
}

impl<'a> Integrator<'a> {
    pub(crate) fn new(model: &'a Model, quad: &'a QuadratureConfig) -> Result<Self> {
        quad.validate()?;
        let p = model.p();
        Ok(Integrator {
            model,
            quad,
            gh: GaussHermite::new(quad.n_nodes),
            rules: (0..=p).map(|_| OnceCell::new()).collect(),
            mc_draws: (0..=p).map(|_| OnceCell::new()).collect(),
        })
    }

    pub(crate) fn uses_closed_form(&self) -> bool {
        self.model.is_linear() && self.quad.closed_form
    }

    pub(crate) fn prepare(&self, theta: &Theta) -> Prepared {
        let lambda = theta.lambda();
        let p = lambda.nrows();
        let active: Vec<usize> = (0..p).filter(|&j| lambda.column(j).iter().any(|v| *v != 0.0)).collect();
        let lambda_active = DMatrix::from_fn(p, active.len(), |i, k| lambda[(i, active[k])]);
        Prepared {
            active,
            lambda_active,
            gamma: theta.gamma(),
        }
    }

    /// Sum of individual log-likelihoods. `modes`, when given, holds one warm
    /// start per individual for the inner mode search and is updated in place.
    pub(crate) fn loglik(&self, data: &Dataset, theta: &Theta, modes: Option<&mut Vec<Vec<f64>>>) -> Result<f64> {
        self.run(data, theta, modes, None)
    }

    /// Log-likelihood and its gradient by quadrature, with the curvature in
    /// `Lambda_kk` at zero for the listed columns.
    pub(crate) fn loglik_gradient(
        &self,
        data: &Dataset,
        theta: &Theta,
        modes: Option<&mut Vec<Vec<f64>>>,
        curvature: &[usize],
    ) -> Result<(f64, Gradient)> {
        if self.uses_closed_form() {
            return Err(Error::Config(
                "quadrature gradient requested for a closed-form likelihood".to_string(),
            ));
        }
        let mut grad = Gradient::zeros(self.model.b(), self.model.p());
        let ll = self.run(data, theta, modes, Some((&mut grad, curvature)))?;
        Ok((ll, grad))
    }

    fn run(
        &self,
        data: &Dataset,
        theta: &Theta,
        mut modes: Option<&mut Vec<Vec<f64>>>,
        mut grad: Option<(&mut Gradient, &[usize])>,
    ) -> Result<f64> {
        self.model.check_theta(theta)?;
        let prep = self.prepare(theta);
        if let Some(m) = modes.as_deref_mut() {
            m.resize(data.n(), Vec::new());
        }
        let mut sc = Scratch::default();
        let mut total = 0.0;
        for (i, ind) in data.individuals().iter().enumerate() {
            let warm = modes.as_deref_mut().map(|m| &mut m[i]);
            let g = grad.as_mut().map(|(g, c)| (&mut **g, *c));
            let v = self
                .individual(ind, theta, &prep, warm, &mut sc, g)
                .map_err(|e| Error::Individual {
                    id: ind.id.clone(),
                    source: alloc::boxed::Box::new(e),
                })?;
            total += v;
        }
        Ok(total)
    }

    fn individual(
        &self,
        ind: &Individual,
        theta: &Theta,
        prep: &Prepared,
        warm: Option<&mut Vec<f64>>,
        sc: &mut Scratch,
        grad: Option<(&mut Gradient, &[usize])>,
    ) -> Result<f64> {
        let k = self.model.mean().n_covariates();
        if let Some(x) = ind.x.iter().find(|x| x.len() < k) {
            return Err(Error::Dimension(format!(
                "covariate vector of length {} but the model needs {}",
                x.len(),
                k
            )));
        }
        if self.uses_closed_form() {
            return self.closed_form(ind, theta, prep);
        }
        let d = prep.active.len();
        let (p, b, n) = (self.model.p(), self.model.b(), ind.len());
        sc.s.resize(p, 0.0);
        sc.s_tmp.resize(p, 0.0);
        sc.b_tmp.resize(b, 0.0);
        sc.gb.resize(b, 0.0);
        sc.gs.resize(p, 0.0);
        sc.g.resize(n, 0.0);
        sc.jac.resize(n * d, 0.0);
        sc.eta.resize(d, 0.0);
        sc.trial.resize(d, 0.0);
        sc.node.resize(d, 0.0);
        sc.a_b.resize(b, 0.0);
        sc.a_s.resize(p, 0.0);

        let nodes = if d == 0 {
            Nodes::Single
        } else if let Some(mc) = self.quad.monte_carlo {
            let draws = self.mc_draws[d].get_or_init(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(mc.seed);
                (0..mc.draws * d)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect()
            });
            Nodes::Draws(draws, mc.draws)
        } else {
            if d > self.quad.max_tensor_dims && !self.quad.force_tensor {
                return Err(Error::TooManyDimensions {
                    dims: d,
                    limit: self.quad.max_tensor_dims,
                });
            }
            let rule = self.rules[d].get_or_init(|| TensorRule::new(&self.gh, d));
            let sqrt2 = core::f64::consts::SQRT_2;
            if self.quad.adaptive {
                match warm.as_deref() {
                    Some(w) if w.len() == d => sc.eta.copy_from_slice(w),
                    _ => sc.eta.fill(0.0),
                }
                let chol_l = self.mode(ind, theta, prep, sc)?;
                if let Some(w) = warm {
                    w.clear();
                    w.extend_from_slice(&sc.eta);
                }
                // nodes eta = mode + sqrt(2) L^{-T} z
                let scale = chol_l
                    .transpose()
                    .solve_upper_triangular(&(DMatrix::identity(d, d) * sqrt2))
                    .ok_or_else(|| Error::Estimation("singular mode Hessian".to_string()))?;
                let logdet_l: f64 = chol_l.diagonal().iter().map(|v| libm::log(*v)).sum();
                Nodes::Tensor {
                    rule,
                    scale,
                    log_jac: 0.5 * d as f64 * core::f64::consts::LN_2 - logdet_l,
                }
            } else {
                sc.eta.fill(0.0);
                Nodes::Tensor {
                    rule,
                    scale: DMatrix::identity(d, d) * sqrt2,
                    log_jac: 0.5 * d as f64 * core::f64::consts::LN_2,
                }
            }
        };

        let curvature: Vec<usize> = match &grad {
            Some((_, cols)) => cols.iter().copied().filter(|k| !prep.active.contains(k)).collect(),
            None => Vec::new(),
        };
        let layout = Layout {
            b,
            p,
            d,
            curvature: &curvature,
        };
        let want_grad = grad.is_some();
        let width = layout.width();
        let log_phi_const = -0.5 * d as f64 * ln_2pi();
        sc.terms.clear();
        sc.contrib.clear();
        let n_nodes = match &nodes {
            Nodes::Single => 1,
            Nodes::Tensor { rule, .. } => rule.len(),
            Nodes::Draws(_, m) => *m,
        };
        for k in 0..n_nodes {
            let log_w = match &nodes {
                Nodes::Single => 0.0,
                Nodes::Tensor { rule, scale, log_jac } => {
                    let z = rule.point(k);
                    for r in 0..d {
                        let mut v = sc.eta[r];
                        for c in 0..d {
                            v += scale[(r, c)] * z[c];
                        }
                        sc.node[r] = v;
                    }
                    let sq: f64 = sc.node.iter().map(|v| v * v).sum();
                    rule.log_weight(k) + log_jac + log_phi_const - 0.5 * sq
                }
                Nodes::Draws(draws, m) => {
                    sc.node.copy_from_slice(&draws[k * d..(k + 1) * d]);
                    -libm::log(*m as f64)
                }
            };
            let start = sc.contrib.len();
            if want_grad {
                sc.contrib.resize(start + width, 0.0);
            }
            let node = core::mem::take(&mut sc.node);
            let logf = self.node_eval(ind, theta, prep, &node, sc, want_grad.then_some((&layout, start)));
            sc.node = node;
            sc.terms.push(log_w + logf?);
        }
        let lse = linalg::log_sum_exp(&sc.terms);
        if !lse.is_finite() {
            return Err(Error::QuadratureUnderflow);
        }
        if let Some((g, _)) = grad {
            for (k, term) in sc.terms.iter().enumerate() {
                let w = libm::exp(term - lse);
                if w == 0.0 {
                    continue;
                }
                let row = &sc.contrib[k * width..(k + 1) * width];
                for f in 0..b {
                    g.beta[f] += w * row[f];
                }
                for i in 0..p {
                    for c in 0..d {
                        g.lambda[(i, prep.active[c])] += w * row[b + i * d + c];
                    }
                }
                g.sigma2 += w * row[b + p * d];
                for (q, &col) in curvature.iter().enumerate() {
                    g.curvature[col] += w * row[b + p * d + 1 + q];
                }
            }
        }
        Ok(lse)
    }

    fn closed_form(&self, ind: &Individual, theta: &Theta, prep: &Prepared) -> Result<f64> {
        let p = self.model.p();
        let n = ind.len();
        let beta = theta.beta();
        let zero = zeros(p);
        let mut unit = zeros(p);
        let mut mean = DVector::zeros(n);
        let mut z = DMatrix::zeros(n, p);
        for (j, x) in ind.x.iter().enumerate() {
            let m = mean_eval(self.model, x, beta, &zero)?;
            mean[j] = m;
            for k in 0..p {
                unit[k] = 1.0;
                z[(j, k)] = mean_eval(self.model, x, beta, &unit)? - m;
                unit[k] = 0.0;
            }
        }
        let mut cov = &z * &prep.gamma * z.transpose();
        for j in 0..n {
            cov[(j, j)] += theta.sigma2();
        }
        let y = DVector::from_column_slice(&ind.y);
        linalg::mvn_logpdf(&y, &mean, cov)
            .ok_or_else(|| Error::Estimation("marginal covariance is not positive definite".to_string()))
    }

    /// Residual sum of squares at `s`; dimensions are checked by the caller.
    fn ssr(&self, ind: &Individual, beta: &[f64], s: &[f64]) -> Result<f64> {
        let mean = self.model.mean();
        let mut ssr = 0.0;
        for (x, y) in ind.x.iter().zip(&ind.y) {
            let r = y - mean.eval(x, beta, s);
            ssr += r * r;
        }
        if ssr.is_finite() {
            return Ok(ssr);
        }
        for x in &ind.x {
            mean_eval(self.model, x, beta, s)?;
        }
        Err(Error::Estimation("residual sum of squares overflows".to_string()))
    }

    /// `s = Lambda_active eta`.
    fn set_s(prep: &Prepared, eta: &[f64], s: &mut [f64]) {
        let lam = &prep.lambda_active;
        for (i, si) in s.iter_mut().enumerate() {
            let mut v = 0.0;
            for (c, e) in eta.iter().enumerate() {
                v += lam[(i, c)] * e;
            }
            *si = v;
        }
    }

    /// Mean and its derivatives in `s` (and in `beta` when `gb` is given),
    /// analytic when the mean function provides them, central differences otherwise.
    fn mean_grad(
        &self,
        x: &[f64],
        beta: &[f64],
        s: &[f64],
        mut gb: Option<&mut [f64]>,
        gs: &mut [f64],
        s_tmp: &mut [f64],
        b_tmp: &mut [f64],
    ) -> Result<f64> {
        let mean = self.model.mean();
        // the analytic path also writes d/dbeta, into a scratch buffer if unwanted
        let analytic = match gb.as_deref_mut() {
            Some(gb) => mean.gradient(x, beta, s, gb, gs),
            None => mean.gradient(x, beta, s, b_tmp, gs),
        };
        let v = match analytic {
            Some(v) => v,
            None => {
                let v = mean_eval(self.model, x, beta, s)?;
                if let Some(gb) = gb {
                    b_tmp.copy_from_slice(beta);
                    for k in 0..beta.len() {
                        let h = 1e-6 * (1.0 + beta[k].abs());
                        b_tmp[k] = beta[k] + h;
                        let up = mean_eval(self.model, x, b_tmp, s)?;
                        b_tmp[k] = beta[k] - h;
                        let dn = mean_eval(self.model, x, b_tmp, s)?;
                        b_tmp[k] = beta[k];
                        gb[k] = (up - dn) / (2.0 * h);
                    }
                }
                s_tmp.copy_from_slice(s);
                for k in 0..s.len() {
                    let h = 1e-6 * (1.0 + s[k].abs());
                    s_tmp[k] = s[k] + h;
                    let up = mean_eval(self.model, x, beta, s_tmp)?;
                    s_tmp[k] = s[k] - h;
                    let dn = mean_eval(self.model, x, beta, s_tmp)?;
                    s_tmp[k] = s[k];
                    gs[k] = (up - dn) / (2.0 * h);
                }
                v
            }
        };
        if !v.is_finite() || gs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Evaluation {
                x: x.to_vec(),
                beta: beta.to_vec(),
                s: s.to_vec(),
                value: v,
            });
        }
        Ok(v)
    }

    /// `log f(y_i | eta)`; with a layout, also writes this node's gradient
    /// contributions to `sc.contrib[start..]`.
    fn node_eval(
        &self,
        ind: &Individual,
        theta: &Theta,
        prep: &Prepared,
        eta: &[f64],
        sc: &mut Scratch,
        layout: Option<(&Layout, usize)>,
    ) -> Result<f64> {
        let beta = theta.beta();
        let s2 = theta.sigma2();
        let n = ind.len() as f64;
        Self::set_s(prep, eta, &mut sc.s);
        let mut ssr = 0.0;
        match layout {
            None => ssr = self.ssr(ind, beta, &sc.s)?,
            Some((lay, start)) => {
                sc.a_b.fill(0.0);
                sc.a_s.fill(0.0);
                sc.curv.clear();
                sc.curv.resize(lay.curvature.len(), 0.0);
                for (x, y) in ind.x.iter().zip(&ind.y) {
                    let g = self.mean_grad(
                        x,
                        beta,
                        &sc.s,
                        Some(&mut sc.gb),
                        &mut sc.gs,
                        &mut sc.s_tmp,
                        &mut sc.b_tmp,
                    )?;
                    let r = y - g;
                    ssr += r * r;
                    for (a, gb) in sc.a_b.iter_mut().zip(&sc.gb) {
                        *a += r * gb;
                    }
                    for (a, gs) in sc.a_s.iter_mut().zip(&sc.gs) {
                        *a += r * gs;
                    }
                    for (q, &k) in lay.curvature.iter().enumerate() {
                        let h = 1e-4 * (1.0 + sc.s[k].abs());
                        sc.s_tmp.copy_from_slice(&sc.s);
                        sc.s_tmp[k] = sc.s[k] + h;
                        let up = mean_eval(self.model, x, beta, &sc.s_tmp)?;
                        sc.s_tmp[k] = sc.s[k] - h;
                        let dn = mean_eval(self.model, x, beta, &sc.s_tmp)?;
                        let gss = (up - 2.0 * g + dn) / (h * h);
                        sc.curv[q] += -sc.gs[k] * sc.gs[k] + r * gss;
                    }
                }
                let row = &mut sc.contrib[start..start + lay.width()];
                for f in 0..lay.b {
                    row[f] = sc.a_b[f] / s2;
                }
                for i in 0..lay.p {
                    for c in 0..lay.d {
                        row[lay.b + i * lay.d + c] = sc.a_s[i] * eta[c] / s2;
                    }
                }
                row[lay.b + lay.p * lay.d] = -0.5 * n / s2 + 0.5 * ssr / (s2 * s2);
                for (q, &k) in lay.curvature.iter().enumerate() {
                    let score = sc.a_s[k] / s2;
                    row[lay.b + lay.p * lay.d + 1 + q] = score * score + sc.curv[q] / s2;
                }
            }
        }
        Ok(-0.5 * n * (ln_2pi() + libm::log(s2)) - 0.5 * ssr / s2)
    }

    /// Objective of the mode search, `0.5 |y - g|^2 / sigma2 + 0.5 |eta|^2`.
    fn mode_objective(
        &self,
        ind: &Individual,
        theta: &Theta,
        prep: &Prepared,
        eta: &[f64],
        s: &mut [f64],
    ) -> Result<f64> {
        Self::set_s(prep, eta, s);
        let ssr = self.ssr(ind, theta.beta(), s)?;
        Ok(0.5 * ssr / theta.sigma2() + 0.5 * eta.iter().map(|v| v * v).sum::<f64>())
    }

    /// Gauss–Newton search for the mode of `log f(y | eta) + log phi(eta)`,
    /// starting from `sc.eta` and leaving the mode there. Returns the
    /// Cholesky factor of the Gauss–Newton Hessian at the mode.
    fn mode(&self, ind: &Individual, theta: &Theta, prep: &Prepared, sc: &mut Scratch) -> Result<DMatrix<f64>> {
        let d = sc.eta.len();
        let n = ind.len();
        let s2 = theta.sigma2();
        let beta = theta.beta();
        let mut hess = DMatrix::<f64>::zeros(d, d);
        let mut grad = DVector::<f64>::zeros(d);
        for _ in 0..50 {
            // Jacobian and residuals at eta
            Self::set_s(prep, &sc.eta, &mut sc.s);
            let mut ssr = 0.0;
            for (j, (x, y)) in ind.x.iter().zip(&ind.y).enumerate() {
                let g = self.mean_grad(x, beta, &sc.s, None, &mut sc.gs, &mut sc.s_tmp, &mut sc.b_tmp)?;
                let r = y - g;
                sc.g[j] = r;
                ssr += r * r;
                for c in 0..d {
                    let mut v = 0.0;
                    for i in 0..sc.gs.len() {
                        v += sc.gs[i] * prep.lambda_active[(i, c)];
                    }
                    sc.jac[j * d + c] = v;
                }
            }
            let f = 0.5 * ssr / s2 + 0.5 * sc.eta.iter().map(|v| v * v).sum::<f64>();
            for a in 0..d {
                let mut ga = sc.eta[a];
                for j in 0..n {
                    ga -= sc.jac[j * d + a] * sc.g[j] / s2;
                }
                grad[a] = ga;
                for c in 0..=a {
                    let mut h = if a == c { 1.0 } else { 0.0 };
                    for j in 0..n {
                        h += sc.jac[j * d + a] * sc.jac[j * d + c] / s2;
                    }
                    hess[(a, c)] = h;
                    hess[(c, a)] = h;
                }
            }
            let chol = hess
                .clone()
                .cholesky()
                .ok_or_else(|| Error::Estimation("singular mode Hessian".to_string()))?;
            let step = -chol.solve(&grad);
            let eta_max = sc.eta.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if step.amax() <= self.quad.mode_tol * (1.0 + eta_max) {
                return Ok(chol.l());
            }
            let slope = grad.dot(&step);
            let mut t = 1.0;
            loop {
                for c in 0..d {
                    sc.trial[c] = sc.eta[c] + t * step[c];
                }
                let ft = self.mode_objective(ind, theta, prep, &sc.trial, &mut sc.s)?;
                if ft <= f + 1e-4 * t * slope {
                    break;
                }
                t *= 0.5;
                if t < 1e-8 {
                    // no further decrease within rounding: eta is the mode
                    return Ok(chol.l());
                }
            }
            core::mem::swap(&mut sc.eta, &mut sc.trial);
        }
        // not converged to tolerance: use the Hessian at the last iterate
        hess.cholesky()
            .map(|c| c.l())
            .ok_or_else(|| Error::Estimation("singular mode Hessian".to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::means::{LinearPredictor, Logistic};
    use crate::model::TestSpec;
    use rand::SeedableRng;

    fn m1() -> Model {
        Model::new(LinearPredictor::polynomial(1))
    }

    fn one_individual(y: Vec<f64>, x: &[f64]) -> Individual {
        Individual::new("1", y, x.iter().map(|v| vec![*v]).collect()).unwrap()
    }

    #[test]
    fn zero_lambda_factorizes() {
        let model = Model::new(Logistic::new(0));
        let theta = Theta::diagonal(vec![200.0, 500.0, 150.0], &[0.0; 3], 25.0).unwrap();
        let ind = one_individual(vec![20.0, 100.0, 190.0], &[100.0, 500.0, 1000.0]);
        let got = individual_loglik(&model, &ind, &theta, &QuadratureConfig::default()).unwrap();
        let want: f64 = ind
            .x
            .iter()
            .zip(&ind.y)
            .map(|(x, y)| {
                let m = model.mean().eval(x, theta.beta(), &[0.0; 3]);
                -0.5 * (ln_2pi() + libm::log(25.0)) - 0.5 * (y - m) * (y - m) / 25.0
            })
            .sum();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn m1_two_observations_match_bivariate_normal() {
        // Gamma = diag(1.3, 0), sigma2 = 2.25, x = (1, 2): cov = 1.3 11^T + 2.25 I
        let theta = Theta::diagonal(vec![0.0, 7.0], &[libm::sqrt(1.3), 0.0], 2.25).unwrap();
        let ind = one_individual(vec![6.1, 15.2], &[1.0, 2.0]);
        let got = individual_loglik(&m1(), &ind, &theta, &QuadratureConfig::default()).unwrap();
        let (a, c) = (1.3 + 2.25, 1.3);
        let det = a * a - c * c;
        let (r1, r2) = (6.1 - 7.0, 15.2 - 14.0);
        let quad = (a * r1 * r1 - 2.0 * c * r1 * r2 + a * r2 * r2) / det;
        let want = -ln_2pi() - 0.5 * libm::log(det) - 0.5 * quad;
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn loglik_sums_over_individuals() {
        let theta = Theta::diagonal(vec![0.0, 7.0], &[1.1, 0.3], 2.25).unwrap();
        let ind = one_individual(vec![6.1, 15.2, 20.0], &[1.0, 2.0, 3.0]);
        let q = QuadratureConfig::default();
        let single = Dataset::new(vec![ind.clone()]).unwrap();
        let one = loglik(&m1(), &single, &theta, &q).unwrap();
        assert_eq!(one, individual_loglik(&m1(), &ind, &theta, &q).unwrap());
        let twice = Dataset::new(vec![ind.clone(), ind]).unwrap();
        assert_eq!(loglik(&m1(), &twice, &theta, &q).unwrap(), 2.0 * one);
    }

    #[test]
    fn quadrature_matches_closed_form_for_linear_model() {
        let theta = Theta::diagonal(vec![0.0, 7.0], &[1.1, 0.3], 2.25).unwrap();
        let ind = one_individual(vec![6.1, 15.2, 20.0, 29.0, 36.5], &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let exact = individual_loglik(&m1(), &ind, &theta, &QuadratureConfig::default()).unwrap();
        for adaptive in [true, false] {
            let q = QuadratureConfig {
                closed_form: false,
                adaptive,
                n_nodes: 15,
                ..QuadratureConfig::default()
            };
            let approx = individual_loglik(&m1(), &ind, &theta, &q).unwrap();
            // the fixed grid is centred at zero, far from the posterior mass
            let tol = if adaptive { 1e-10 } else { 1e-4 };
            assert!(
                ((approx - exact) / exact).abs() < tol,
                "adaptive={adaptive}: {approx} vs {exact}"
            );
        }
        // Gaussian integrand: adaptive quadrature is exact with a single node
        let laplace = QuadratureConfig {
            closed_form: false,
            n_nodes: 1,
            ..QuadratureConfig::default()
        };
        let v = individual_loglik(&m1(), &ind, &theta, &laplace).unwrap();
        assert!((v - exact).abs() < 1e-8);
    }

    #[test]
    fn zero_row_collapses_to_smaller_model() {
        let model = Model::new(Logistic::new(0));
        let x = [50.0, 287.5, 525.0, 762.0, 1000.0];
        let ind = one_individual(vec![30.0, 70.0, 110.0, 150.0, 175.0], &x);
        let theta = Theta::diagonal(vec![200.0, 500.0, 150.0], &[10.0, 10.0, 0.0], 25.0).unwrap();
        let q = QuadratureConfig::default();
        let got = individual_loglik(&model, &ind, &theta, &q).unwrap();
        // same integral written with only two random effects
        #[derive(Debug)]
        struct TwoEffects(Logistic);
        impl crate::MeanFunction for TwoEffects {
            fn n_random(&self) -> usize {
                2
            }
            fn n_fixed(&self) -> usize {
                3
            }
            fn n_covariates(&self) -> usize {
                1
            }
            fn eval(&self, x: &[f64], beta: &[f64], s: &[f64]) -> f64 {
                self.0.eval(x, beta, &[s[0], s[1], 0.0])
            }
            fn describe(&self) -> alloc::string::String {
                "two".into()
            }
        }
        let reduced = Model::new(TwoEffects(Logistic::new(0)));
        let theta2 = Theta::diagonal(vec![200.0, 500.0, 150.0], &[10.0, 10.0], 25.0).unwrap();
        let want = individual_loglik(&reduced, &ind, &theta2, &q).unwrap();
        assert!((got - want).abs() < 1e-10);
        assert!(theta.is_in_null(&TestSpec::new(vec![2], 3).unwrap()));
    }

    #[test]
    fn too_many_dimensions_is_refused() {
        let model = Model::new(LinearPredictor::random_slopes(6));
        let theta = Theta::diagonal(vec![], &[1.0; 6], 1.0).unwrap();
        let ind = Individual::new("a", vec![1.0], vec![vec![1.0; 6]]).unwrap();
        let q = QuadratureConfig {
            closed_form: false,
            ..QuadratureConfig::default()
        };
        assert!(matches!(
            individual_loglik(&model, &ind, &theta, &q),
            Err(Error::TooManyDimensions { dims: 6, limit: 5 })
        ));
        let mc = QuadratureConfig {
            closed_form: false,
            monte_carlo: Some(MonteCarlo { draws: 20_000, seed: 3 }),
            ..QuadratureConfig::default()
        };
        let approx = individual_loglik(&model, &ind, &theta, &mc).unwrap();
        let exact = individual_loglik(&model, &ind, &theta, &QuadratureConfig::default()).unwrap();
        assert!((approx - exact).abs() < 0.05);
    }

    #[test]
    fn simulation_is_deterministic_and_degenerate_case_is_exact() {
        let model = m1();
        let design: Vec<Vec<Vec<f64>>> = (0..3).map(|_| (1..=5).map(|j| vec![j as f64]).collect()).collect();
        let theta = Theta::diagonal(vec![0.0, 7.0], &[libm::sqrt(1.3), 0.0], 2.25).unwrap();
        let a = simulate_dataset(&model, &theta, &design, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = simulate_dataset(&model, &theta, &design, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);

        let bounds = crate::ParamBounds {
            sigma2_floor: 1e-300,
            ..Default::default()
        };
        let model = model.with_bounds(bounds);
        let flat = Theta::diagonal(vec![1.0, 2.0], &[0.0, 0.0], 1e-300).unwrap();
        let d = simulate_dataset(&model, &flat, &design, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for ind in d.individuals() {
            for (x, y) in ind.x.iter().zip(&ind.y) {
                assert!((y - (1.0 + 2.0 * x[0])).abs() < 1e-100);
            }
        }
    }

    fn logistic_data() -> (Model, Dataset) {
        let model = Model::new(Logistic::new(0));
        let ages = [118.0, 484.0, 664.0, 1004.0, 1231.0, 1372.0, 1582.0];
        let ys = [
            [30.0, 58.0, 87.0, 115.0, 120.0, 142.0, 145.0],
            [33.0, 69.0, 111.0, 156.0, 172.0, 203.0, 203.0],
            [30.0, 51.0, 75.0, 108.0, 115.0, 139.0, 140.0],
        ];
        let inds = ys
            .iter()
            .enumerate()
            .map(|(i, y)| {
                Individual::new(
                    alloc::format!("{i}"),
                    y.to_vec(),
                    ages.iter().map(|a| vec![*a]).collect(),
                )
                .unwrap()
            })
            .collect();
        (model, Dataset::new(inds).unwrap())
    }

    #[test]
    fn quadrature_gradient_matches_finite_differences() {
        let (model, data) = logistic_data();
        let q = QuadratureConfig {
            n_nodes: 7,
            ..QuadratureConfig::default()
        };
        let theta = Theta::diagonal(vec![190.0, 720.0, 350.0], &[25.0, 0.0, 0.0], 60.0).unwrap();
        let integ = Integrator::new(&model, &q).unwrap();
        let (ll, g) = integ.loglik_gradient(&data, &theta, None, &[1, 2]).unwrap();
        assert!((ll - loglik(&model, &data, &theta, &q).unwrap()).abs() < 1e-10);
        let f = |t: &Theta| loglik(&model, &data, t, &q).unwrap();
        for k in 0..3 {
            let h = 1e-4 * theta.beta()[k].abs();
            let (mut up, mut dn) = (theta.clone(), theta.clone());
            up.beta_mut()[k] += h;
            dn.beta_mut()[k] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            assert!(
                (fd - g.beta[k]).abs() < 1e-4 * (1.0 + fd.abs()),
                "beta{k}: {fd} vs {}",
                g.beta[k]
            );
        }
        let h = 1e-3;
        let (mut up, mut dn) = (theta.clone(), theta.clone());
        up.lambda_mut()[(0, 0)] += h;
        dn.lambda_mut()[(0, 0)] -= h;
        let fd = (f(&up) - f(&dn)) / (2.0 * h);
        assert!(
            (fd - g.lambda[(0, 0)]).abs() < 1e-4 * (1.0 + fd.abs()),
            "{fd} vs {}",
            g.lambda[(0, 0)]
        );
        let (mut up, mut dn) = (theta.clone(), theta.clone());
        up.set_sigma2(60.0 + h);
        dn.set_sigma2(60.0 - h);
        let fd = (f(&up) - f(&dn)) / (2.0 * h);
        assert!((fd - g.sigma2).abs() < 1e-4 * (1.0 + fd.abs()), "{fd} vs {}", g.sigma2);
        // second derivative at zero in a switched-off column
        for k in [1, 2] {
            // Richardson extrapolation removes the quartic term
            let second = |h: f64| {
                let mut up = theta.clone();
                up.lambda_mut()[(k, k)] = h;
                2.0 * (f(&up) - ll) / (h * h)
            };
            let fd = (4.0 * second(1.0) - second(2.0)) / 3.0;
            // the perturbed likelihood integrates over one more dimension
            assert!(
                (fd - g.curvature[k]).abs() < 5e-2 * fd.abs(),
                "curvature {k}: {fd} vs {}",
                g.curvature[k]
            );
        }
    }

    #[test]
    fn quadrature_gradient_for_full_lambda_and_monte_carlo() {
        let model = m1();
        let theta = Theta::new(
            vec![0.5, 7.0],
            DMatrix::from_row_slice(2, 2, &[1.1, 0.0, 0.4, 0.3]),
            2.25,
        )
        .unwrap();
        let ind = one_individual(vec![6.1, 15.2, 20.0, 29.0, 36.5], &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let data = Dataset::new(vec![ind]).unwrap();
        for mc in [None, Some(MonteCarlo { draws: 4000, seed: 3 })] {
            let q = QuadratureConfig {
                closed_form: false,
                n_nodes: 11,
                monte_carlo: mc,
                ..QuadratureConfig::default()
            };
            let integ = Integrator::new(&model, &q).unwrap();
            let (_, g) = integ.loglik_gradient(&data, &theta, None, &[]).unwrap();
            for (i, j) in [(0, 0), (1, 0), (1, 1)] {
                let h = 1e-5;
                let (mut up, mut dn) = (theta.clone(), theta.clone());
                up.lambda_mut()[(i, j)] += h;
                dn.lambda_mut()[(i, j)] -= h;
                let fd =
                    (loglik(&model, &data, &up, &q).unwrap() - loglik(&model, &data, &dn, &q).unwrap()) / (2.0 * h);
                assert!(
                    (fd - g.lambda[(i, j)]).abs() < 1e-4 * (1.0 + fd.abs()),
                    "mc={}: ({i},{j}) {fd} vs {}",
                    mc.is_some(),
                    g.lambda[(i, j)]
                );
            }
        }
    }
}
