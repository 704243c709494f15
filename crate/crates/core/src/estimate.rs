//! Maximum likelihood under the full model and under the null hypothesis.
//!
//! Affine mean functions use the profiled likelihood: `beta` and `sigma2` are
//! solved exactly and a projected quasi-Newton search with analytic gradient
//! runs over `L = Lambda / sigma`. With a diagonal structure it works in the
//! variances `(Lambda_kk / sigma)^2`, so that zero is reached exactly. Other
//! mean functions use the quadrature gradient: quasi-Newton in
//! `(beta, Lambda_kk^2, log sigma2)` for a diagonal structure, Nelder–Mead in
//! `(beta, free Lambda entries, log sigma2)` for a full one.

mod profiled;

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::likelihood::{Integrator, QuadratureConfig};
use crate::model::{mean_eval, zeros, CovarianceStructure, Dataset, Model, TestSpec, Theta};
use crate::optim::{nelder_mead, projected_quasi_newton, Bounds, OptimOptions};
use profiled::Profiled;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FitMethod {
    /// Quasi-Newton for affine means and diagonal structures, Nelder–Mead otherwise.
    #[default]
    Auto,
    NelderMead,
    QuasiNewton,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOptions {
    /// Objective evaluations per start.
    pub max_evals: usize,
    pub x_tol: f64,
    pub f_tol: f64,
    /// Number of starting points; the first is `start` or a data-driven guess,
    /// the rest are random perturbations of it.
    pub n_starts: usize,
    /// Log-scale spread of the perturbed starts.
    pub start_jitter: f64,
    pub seed: u64,
    pub method: FitMethod,
    pub start: Option<Theta>,
    /// Reuse each individual's conditional mode between likelihood calls.
    pub warm_modes: bool,
    /// Entries of `Lambda` below this magnitude are set to zero after fitting.
    pub zero_tol: f64,
    /// In nested fits, also start the full fit from the null estimate with
    /// the tested variances moved off zero.
    pub interior_start: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_evals: 4000,
            x_tol: 1e-7,
            f_tol: 1e-10,
            n_starts: 3,
            start_jitter: 0.3,
            seed: 0,
            method: FitMethod::Auto,
            start: None,
            warm_modes: true,
            zero_tol: 1e-8,
            interior_start: true,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.n_starts == 0 {
            return Err(Error::Config("n_starts must be at least 1".to_string()));
        }
        if self.max_evals == 0 {
            return Err(Error::Config("max_evals must be at least 1".to_string()));
        }
        if !(self.x_tol > 0.0 && self.f_tol > 0.0) {
            return Err(Error::Config("tolerances must be positive".to_string()));
        }
        if !(self.start_jitter >= 0.0 && self.zero_tol >= 0.0) {
            return Err(Error::Config(
                "start_jitter and zero_tol must be nonnegative".to_string(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub theta_hat: Theta,
    pub loglik: f64,
    /// The best start met the optimizer's convergence test.
    pub converged: bool,
    /// Likelihood evaluations over all starts.
    pub n_evals: usize,
    pub starts_used: usize,
}

/// Unrestricted maximum likelihood estimate.
pub fn mle_full(model: &Model, data: &Dataset, quad: &QuadratureConfig, opts: &FitOptions) -> Result<FitResult> {
    let fitter = Fitter::new(model, data, quad, opts)?;
    let starts = fitter.candidates(opts.n_starts)?;
    fitter.fit(None, &starts)
}

/// Maximum likelihood estimate with the rows of `Lambda` in `spec` fixed at zero.
pub fn mle_null(
    model: &Model,
    data: &Dataset,
    spec: &TestSpec,
    quad: &QuadratureConfig,
    opts: &FitOptions,
) -> Result<FitResult> {
    check_spec(model, spec)?;
    let fitter = Fitter::new(model, data, quad, opts)?;
    let starts = fitter.candidates(opts.n_starts)?;
    fitter.fit(Some(spec), &starts)
}

/// Null and full fits with `full.loglik >= null.loglik` guaranteed: the
/// full search also starts from the null solution, and whichever fit is
/// better is shared when it is feasible for both.
pub fn fit_nested(
    model: &Model,
    data: &Dataset,
    spec: &TestSpec,
    quad: &QuadratureConfig,
    opts: &FitOptions,
) -> Result<(FitResult, FitResult)> {
    check_spec(model, spec)?;
    let fitter = Fitter::new(model, data, quad, opts)?;
    let candidates = fitter.candidates(opts.n_starts)?;
    let mut null = fitter.fit(Some(spec), &candidates)?;

    let mut starts = vec![null.theta_hat.clone()];
    if opts.interior_start {
        starts.push(fitter.bumped(&null.theta_hat, spec)?);
    }
    starts.extend(candidates.into_iter().take(opts.n_starts - 1));
    let mut full = match fitter.fit(None, &starts) {
        Ok(f) => f,
        Err(e) if e.is_numerical() => FitResult {
            converged: false,
            n_evals: 0,
            ..null.clone()
        },
        Err(e) => return Err(e),
    };
    if full.loglik < null.loglik {
        full.theta_hat = null.theta_hat.clone();
        full.loglik = null.loglik;
        full.converged = null.converged;
    } else if full.theta_hat.is_in_null(spec) && full.loglik > null.loglik {
        null.theta_hat = full.theta_hat.clone();
        null.loglik = full.loglik;
        null.converged = full.converged;
    }
    Ok((null, full))
}

fn check_spec(model: &Model, spec: &TestSpec) -> Result<()> {
    if let Some(r) = spec.rows().iter().find(|&&r| r >= model.p()) {
        return Err(Error::Config(format!(
            "tested row {} is out of range for p = {}",
            r + 1,
            model.p()
        )));
    }
    Ok(())
}

/// Copy of `theta` with every entry of `Lambda` outside `free` set to zero.
fn restrict(theta: &Theta, free: &[(usize, usize)]) -> Theta {
    let p = theta.p();
    let lambda = DMatrix::from_fn(p, p, |i, j| {
        if free.contains(&(i, j)) {
            theta.lambda()[(i, j)]
        } else {
            0.0
        }
    });
    Theta::from_parts_unchecked(theta.beta().to_vec(), lambda, theta.sigma2())
}

struct Local {
    theta: Theta,
    loglik: f64,
    converged: bool,
    n_evals: usize,
}

struct Fitter<'a> {
    model: &'a Model,
    data: &'a Dataset,
    opts: &'a FitOptions,
    integ: Integrator<'a>,
    profiled: Option<Profiled>,
}

impl<'a> Fitter<'a> {
    fn new(model: &'a Model, data: &'a Dataset, quad: &'a QuadratureConfig, opts: &'a FitOptions) -> Result<Self> {
        opts.validate()?;
        model.check_dataset(data)?;
        if let Some(start) = &opts.start {
            model.check_theta(start)?;
        }
        let integ = Integrator::new(model, quad)?;
        let profiled = if model.is_linear() && quad.closed_form && quad.monte_carlo.is_none() {
            Some(Profiled::new(model, data)?)
        } else {
            None
        };
        Ok(Fitter {
            model,
            data,
            opts,
            integ,
            profiled,
        })
    }

    fn use_qn(&self) -> bool {
        match self.opts.method {
            FitMethod::Auto => self.profiled.is_some() || self.model.structure() == CovarianceStructure::Diagonal,
            FitMethod::QuasiNewton => true,
            FitMethod::NelderMead => false,
        }
    }

    /// The given start or a data-driven one, followed by perturbed copies.
    fn candidates(&self, n: usize) -> Result<Vec<Theta>> {
        let base = match &self.opts.start {
            Some(t) => t.clone(),
            None => self.heuristic()?,
        };
        let mut out = Vec::with_capacity(n);
        out.push(base.clone());
        for k in 1..n {
            out.push(self.jitter(&base, k as u64)?);
        }
        Ok(out)
    }

    /// Fixed effects from pooled least squares with `Lambda = 0`, half of the
    /// residual variance given to the random effects, spread evenly.
    fn heuristic(&self) -> Result<Theta> {
        let (p, b) = (self.model.p(), self.model.b());
        let n_obs = self.data.n_obs() as f64;
        let (beta, rv) = if let Some(prof) = &self.profiled {
            let ev = prof
                .evaluate(&DMatrix::zeros(p, p), false)
                .ok_or_else(|| Error::Estimation("least squares start failed".to_string()))?;
            (ev.beta.as_slice().to_vec(), ev.sigma2)
        } else {
            let beta0 = self.model.mean().initial_beta(self.data).unwrap_or_else(|| zeros(b));
            if beta0.len() != b {
                return Err(Error::Dimension(format!(
                    "initial_beta returned {} values for b = {}",
                    beta0.len(),
                    b
                )));
            }
            let zero_s = zeros(p);
            let ssr = |beta: &[f64]| -> f64 {
                let mut acc = 0.0;
                for ind in self.data.individuals() {
                    for (x, y) in ind.x.iter().zip(&ind.y) {
                        match mean_eval(self.model, x, beta, &zero_s) {
                            Ok(g) => acc += (y - g) * (y - g),
                            Err(_) => return f64::INFINITY,
                        }
                    }
                }
                acc
            };
            let step: Vec<f64> = beta0.iter().map(|v| 0.1 * v.abs().max(1e-2)).collect();
            let lim = self.model.bounds().beta_abs;
            let r = nelder_mead(
                ssr,
                &beta0,
                &step,
                &Bounds::new(vec![-lim; b], vec![lim; b]),
                &OptimOptions {
                    max_evals: 200 * (b + 1),
                    x_tol: 1e-6,
                    f_tol: 1e-10,
                },
            );
            if !r.fx.is_finite() {
                return Err(Error::Estimation(
                    "mean function is not finite at the starting fixed effects".to_string(),
                ));
            }
            (r.x, r.fx / n_obs)
        };
        let floor = self.model.bounds().sigma2_floor;
        let rv = rv.max(2.0 * floor);
        let sens = self.sensitivity(&beta)?;
        let share = libm::sqrt(0.5 * rv / p.max(1) as f64);
        let diag: Vec<f64> = sens
            .iter()
            .map(|d| if *d > 1e-12 { share / d } else { share })
            .collect();
        Theta::diagonal(beta, &diag, 0.5 * rv)
    }

    /// Mean absolute derivative of `g` in each random effect at `s = 0`.
    fn sensitivity(&self, beta: &[f64]) -> Result<Vec<f64>> {
        let p = self.model.p();
        let mut s = zeros(p);
        let mut out = vec![0.0; p];
        let h = 1e-4;
        for (k, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for ind in self.data.individuals() {
                for x in &ind.x {
                    s[k] = h;
                    let up = mean_eval(self.model, x, beta, &s)?;
                    s[k] = -h;
                    let dn = mean_eval(self.model, x, beta, &s)?;
                    s[k] = 0.0;
                    acc += ((up - dn) / (2.0 * h)).abs();
                }
            }
            *o = acc / self.data.n_obs() as f64;
        }
        Ok(out)
    }

    fn jitter(&self, base: &Theta, stream: u64) -> Result<Theta> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.opts.seed);
        rng.set_stream(stream);
        let mut draw = || -> f64 {
            let z: f64 = StandardNormal.sample(&mut rng);
            self.opts.start_jitter * z
        };
        let mut t = base.clone();
        for v in t.beta_mut().iter_mut() {
            *v += 0.1 * draw() * v.abs().max(1e-3);
        }
        let p = t.p();
        let bumps = self.bump_sizes(base)?;
        for k in 0..p {
            let e = libm::exp(draw());
            let l = t.lambda_mut();
            l[(k, k)] = if l[(k, k)] > 0.0 { l[(k, k)] * e } else { bumps[k] * e };
        }
        let s2 = t.sigma2() * libm::exp(draw());
        t.set_sigma2(s2.max(self.model.bounds().sigma2_floor));
        Ok(t)
    }

    /// Size of `Lambda_kk` that gives individual-level spread of about
    /// `sigma / 2` along random effect `k`.
    fn bump_sizes(&self, theta: &Theta) -> Result<Vec<f64>> {
        let half_sigma = 0.5 * libm::sqrt(theta.sigma2());
        Ok(self
            .sensitivity(theta.beta())?
            .into_iter()
            .map(|d| if d > 1e-12 { half_sigma / d } else { half_sigma })
            .collect())
    }

    /// `theta` with zero diagonal entries of the tested rows moved inside.
    fn bumped(&self, theta: &Theta, spec: &TestSpec) -> Result<Theta> {
        let bumps = self.bump_sizes(theta)?;
        let mut t = theta.clone();
        for &r in spec.rows() {
            let l = t.lambda_mut();
            if l[(r, r)] == 0.0 {
                l[(r, r)] = bumps[r];
            }
        }
        Ok(t)
    }

    fn fit(&self, null: Option<&TestSpec>, starts: &[Theta]) -> Result<FitResult> {
        let free = self.model.free_lambda_entries(null);
        let mut best: Option<Local> = None;
        let mut n_evals = 0;
        let mut last_err = None;
        for start in starts {
            let start = restrict(start, &free);
            let local = if self.profiled.is_some() {
                self.local_profiled(&start, &free)
            } else {
                self.local_raw(&start, &free)
            };
            match local {
                Ok(l) => {
                    n_evals += l.n_evals;
                    if best.as_ref().map_or(true, |b| l.loglik > b.loglik) {
                        best = Some(l);
                    }
                }
                Err(e) if e.is_numerical() => last_err = Some(e),
                Err(e) => return Err(e),
            }
        }
        match best {
            Some(b) => Ok(FitResult {
                theta_hat: b.theta,
                loglik: b.loglik,
                converged: b.converged,
                n_evals,
                starts_used: starts.len(),
            }),
            None => Err(last_err.unwrap_or_else(|| Error::Estimation("no usable starting point".to_string()))),
        }
    }

    fn options(&self) -> OptimOptions {
        OptimOptions {
            max_evals: self.opts.max_evals,
            x_tol: self.opts.x_tol,
            f_tol: self.opts.f_tol,
        }
    }

    fn local_profiled(&self, start: &Theta, free: &[(usize, usize)]) -> Result<Local> {
        let prof = self.profiled.as_ref().expect("profiled likelihood");
        let p = prof.p();
        let sigma0 = libm::sqrt(start.sigma2());
        let diagonal = self.model.structure() == CovarianceStructure::Diagonal;
        let rel_max = self.model.bounds().lambda_abs / libm::sqrt(self.model.bounds().sigma2_floor);
        // diagonal: x_k = L_kk^2; full: x = free entries of L
        let to_l = |x: &[f64]| -> DMatrix<f64> {
            let mut l = DMatrix::zeros(p, p);
            for (v, &(i, j)) in x.iter().zip(free) {
                l[(i, j)] = if diagonal { libm::sqrt(v.max(0.0)) } else { *v };
            }
            l
        };
        let x0: Vec<f64> = free
            .iter()
            .map(|&(i, j)| {
                let v = start.lambda()[(i, j)] / sigma0;
                if diagonal {
                    v * v
                } else {
                    v
                }
            })
            .collect();
        let bounds = if diagonal {
            Bounds::new(vec![0.0; free.len()], vec![rel_max * rel_max; free.len()])
        } else {
            Bounds::new(
                free.iter().map(|&(i, j)| if i == j { 0.0 } else { -rel_max }).collect(),
                vec![rel_max; free.len()],
            )
        };
        let res = if self.use_qn() {
            let fg = |x: &[f64], g: &mut [f64]| -> f64 {
                let l = to_l(x);
                match prof.evaluate(&l, true) {
                    Some(ev) => {
                        let s = ev.s.expect("gradient requested");
                        let sl = if diagonal { DMatrix::zeros(0, 0) } else { &s * &l * 2.0 };
                        for (gk, &(i, j)) in g.iter_mut().zip(free) {
                            *gk = if diagonal { s[(i, i)] } else { sl[(i, j)] };
                        }
                        ev.deviance
                    }
                    None => {
                        g.iter_mut().for_each(|v| *v = 0.0);
                        f64::INFINITY
                    }
                }
            };
            projected_quasi_newton(fg, &x0, &bounds, &self.options())
        } else {
            let f = |x: &[f64]| prof.evaluate(&to_l(x), false).map_or(f64::INFINITY, |ev| ev.deviance);
            let step: Vec<f64> = x0.iter().map(|v| 0.2 * v.abs().max(0.05)).collect();
            nelder_mead(f, &x0, &step, &bounds, &self.options())
        };
        if !res.fx.is_finite() {
            return Err(Error::Estimation(
                "profiled deviance is not finite at the start".to_string(),
            ));
        }
        let mut l = to_l(&res.x);
        let ev0 = prof
            .evaluate(&l, false)
            .ok_or_else(|| Error::Estimation("profiled deviance failed at the optimum".to_string()))?;
        let tol = self.opts.zero_tol / libm::sqrt(ev0.sigma2);
        l.iter_mut().filter(|v| v.abs() < tol).for_each(|v| *v = 0.0);
        let ev = prof
            .evaluate(&l, false)
            .ok_or_else(|| Error::Estimation("profiled deviance failed at the optimum".to_string()))?;
        let sigma = libm::sqrt(ev.sigma2);
        let theta = Theta::new(ev.beta.as_slice().to_vec(), l * sigma, ev.sigma2)?;
        Ok(Local {
            theta,
            loglik: -0.5 * ev.deviance,
            converged: res.converged,
            n_evals: res.n_evals + 2,
        })
    }

    fn local_raw(&self, start: &Theta, free: &[(usize, usize)]) -> Result<Local> {
        if self.use_qn() {
            return self.local_gradient(start, free);
        }
        let (p, b) = (self.model.p(), self.model.b());
        let bnd = *self.model.bounds();
        let to_theta = |x: &[f64]| -> Theta {
            let mut lambda = DMatrix::zeros(p, p);
            for (v, &(i, j)) in x[b..b + free.len()].iter().zip(free) {
                lambda[(i, j)] = *v;
            }
            Theta::from_parts_unchecked(x[..b].to_vec(), lambda, libm::exp(x[b + free.len()]))
        };
        let mut x0: Vec<f64> = start.beta().to_vec();
        x0.extend(free.iter().map(|&ij| start.lambda()[ij]));
        x0.push(libm::log(start.sigma2()));

        let mut lower = vec![-bnd.beta_abs; b];
        let mut upper = vec![bnd.beta_abs; b];
        for &(i, j) in free {
            lower.push(if i == j { 0.0 } else { -bnd.lambda_abs });
            upper.push(bnd.lambda_abs);
        }
        lower.push(libm::log(bnd.sigma2_floor));
        upper.push(libm::log(bnd.sigma2_max));
        let bounds = Bounds::new(lower, upper);

        let mut modes: Vec<Vec<f64>> = Vec::new();
        let mut hard_error: Option<Error> = None;
        let warm = self.opts.warm_modes;
        let mut f = |x: &[f64]| -> f64 {
            if hard_error.is_some() {
                return f64::INFINITY;
            }
            let theta = to_theta(x);
            match self
                .integ
                .loglik(self.data, &theta, if warm { Some(&mut modes) } else { None })
            {
                Ok(ll) => -ll,
                Err(e) if e.is_numerical() => f64::INFINITY,
                Err(e) => {
                    hard_error = Some(e);
                    f64::INFINITY
                }
            }
        };

        let bumps = self.bump_sizes(start)?;
        let step: Vec<f64> = (0..x0.len())
            .map(|k| {
                if k < b {
                    0.1 * x0[k].abs().max(1e-2)
                } else if k < b + free.len() {
                    let (i, _) = free[k - b];
                    0.2 * x0[k].abs().max(bumps[i])
                } else {
                    0.2
                }
            })
            .collect();
        let res = nelder_mead(&mut f, &x0, &step, &bounds, &self.options());
        if let Some(e) = hard_error {
            return Err(e);
        }
        if !res.fx.is_finite() {
            return Err(Error::Estimation(
                "log-likelihood is not finite at the start".to_string(),
            ));
        }
        let mut x = res.x;
        for v in &mut x[b..b + free.len()] {
            if v.abs() < self.opts.zero_tol {
                *v = 0.0;
            }
        }
        let theta = to_theta(&x);
        let theta = Theta::new(theta.beta().to_vec(), theta.lambda().clone(), theta.sigma2())?;
        let loglik = self.integ.loglik(self.data, &theta, None)?;
        Ok(Local {
            theta,
            loglik,
            converged: res.converged,
            n_evals: res.n_evals + 1,
        })
    }

    /// Quasi-Newton with the quadrature gradient, in coordinates centred at
    /// the start and scaled by rough standard errors. A diagonal structure
    /// works in the variances `Lambda_kk^2`, whose derivative at zero is half
    /// the curvature in `Lambda_kk`.
    fn local_gradient(&self, start: &Theta, free: &[(usize, usize)]) -> Result<Local> {
        let (p, b) = (self.model.p(), self.model.b());
        let nf = free.len();
        let bnd = *self.model.bounds();
        let diagonal = self.model.structure() == CovarianceStructure::Diagonal;
        let n_ind = self.data.n() as f64;
        let n_obs = self.data.n_obs() as f64;
        let per_ind = n_obs / n_ind;
        let bumps = self.bump_sizes(start)?;

        // natural coordinates: beta, free Lambda entries (or their squares), log sigma2
        let mut nat0: Vec<f64> = start.beta().to_vec();
        for &(i, j) in free {
            let v = start.lambda()[(i, j)];
            nat0.push(if diagonal { v * v } else { v });
        }
        nat0.push(libm::log(start.sigma2()));
        let mut scale = self.beta_scales(start)?;
        for &(i, j) in free {
            let spread = 2.0 * bumps[i] / libm::sqrt(per_ind);
            let v = start.lambda()[(i, j)].abs();
            scale.push(if diagonal {
                libm::sqrt(2.0 / n_ind) * (v * v + spread * spread)
            } else {
                (v + spread) / libm::sqrt(2.0 * n_ind)
            });
        }
        scale.push(libm::sqrt(2.0 / n_obs));

        let mut lower = vec![-bnd.beta_abs; b];
        let mut upper = vec![bnd.beta_abs; b];
        for &(i, j) in free {
            if diagonal {
                lower.push(0.0);
                upper.push(bnd.lambda_abs * bnd.lambda_abs);
            } else {
                lower.push(if i == j { 0.0 } else { -bnd.lambda_abs });
                upper.push(bnd.lambda_abs);
            }
        }
        lower.push(libm::log(bnd.sigma2_floor));
        upper.push(libm::log(bnd.sigma2_max));
        let to_x = |v: f64, k: usize| (v - nat0[k]) / scale[k];
        let bounds = Bounds::new(
            lower.iter().enumerate().map(|(k, v)| to_x(*v, k)).collect(),
            upper.iter().enumerate().map(|(k, v)| to_x(*v, k)).collect(),
        );
        let to_theta = |x: &[f64]| -> Theta {
            let nat: Vec<f64> = x.iter().enumerate().map(|(k, v)| nat0[k] + scale[k] * v).collect();
            let mut lambda = DMatrix::zeros(p, p);
            for (v, &(i, j)) in nat[b..b + nf].iter().zip(free) {
                lambda[(i, j)] = if diagonal { libm::sqrt(v.max(0.0)) } else { *v };
            }
            Theta::from_parts_unchecked(nat[..b].to_vec(), lambda, libm::exp(nat[b + nf]))
        };

        let curvature: Vec<usize> = if diagonal {
            free.iter().map(|&(i, _)| i).collect()
        } else {
            Vec::new()
        };
        let mut modes: Vec<Vec<f64>> = Vec::new();
        let mut hard_error: Option<Error> = None;
        let warm = self.opts.warm_modes;
        let fg = |x: &[f64], g: &mut [f64]| -> f64 {
            g.iter_mut().for_each(|v| *v = 0.0);
            if hard_error.is_some() {
                return f64::INFINITY;
            }
            let theta = to_theta(x);
            let res = self.integ.loglik_gradient(
                self.data,
                &theta,
                if warm { Some(&mut modes) } else { None },
                &curvature,
            );
            let (ll, grad) = match res {
                Ok(v) => v,
                Err(e) if e.is_numerical() => return f64::INFINITY,
                Err(e) => {
                    hard_error = Some(e);
                    return f64::INFINITY;
                }
            };
            for k in 0..b {
                g[k] = -grad.beta[k] * scale[k];
            }
            for (q, &(i, j)) in free.iter().enumerate() {
                let d = if diagonal {
                    let lam = theta.lambda()[(i, i)];
                    if lam > 0.0 {
                        grad.lambda[(i, i)] / (2.0 * lam)
                    } else {
                        0.5 * grad.curvature[i]
                    }
                } else {
                    grad.lambda[(i, j)]
                };
                g[b + q] = -d * scale[b + q];
            }
            g[b + nf] = -grad.sigma2 * theta.sigma2() * scale[b + nf];
            -ll
        };
        let x0 = vec![0.0; b + nf + 1];
        let res = projected_quasi_newton(fg, &x0, &bounds, &self.options());
        if let Some(e) = hard_error {
            return Err(e);
        }
        if !res.fx.is_finite() {
            return Err(Error::Estimation(
                "log-likelihood is not finite at the start".to_string(),
            ));
        }
        let mut theta = to_theta(&res.x);
        theta
            .lambda_mut()
            .iter_mut()
            .filter(|v| v.abs() < self.opts.zero_tol)
            .for_each(|v| *v = 0.0);
        let theta = Theta::new(theta.beta().to_vec(), theta.lambda().clone(), theta.sigma2())?;
        let loglik = self.integ.loglik(self.data, &theta, None)?;
        Ok(Local {
            theta,
            loglik,
            converged: res.converged,
            n_evals: res.n_evals + 1,
        })
    }

    /// `1 / sqrt(sum (dg/dbeta_k)^2 / sigma2)` at `s = 0`, the standard error
    /// of `beta_k` when the other parameters are known.
    fn beta_scales(&self, theta: &Theta) -> Result<Vec<f64>> {
        let b = self.model.b();
        let zero_s = zeros(self.model.p());
        let mut beta = theta.beta().to_vec();
        let mut info = vec![0.0; b];
        for ind in self.data.individuals() {
            for x in &ind.x {
                for k in 0..b {
                    let h = 1e-6 * (1.0 + beta[k].abs());
                    let b0 = beta[k];
                    beta[k] = b0 + h;
                    let up = mean_eval(self.model, x, &beta, &zero_s)?;
                    beta[k] = b0 - h;
                    let dn = mean_eval(self.model, x, &beta, &zero_s)?;
                    beta[k] = b0;
                    let d = (up - dn) / (2.0 * h);
                    info[k] += d * d / theta.sigma2();
                }
            }
        }
        Ok(info
            .iter()
            .zip(&beta)
            .map(|(i, bk)| {
                if *i > 0.0 {
                    1.0 / libm::sqrt(*i)
                } else {
                    0.1 * bk.abs().max(1e-2)
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::simulate_dataset;
    use crate::means::{Covariate, LinearPredictor, Term};
    use crate::model::Individual;
    use alloc::vec::Vec;

    fn anova() -> Model {
        Model::new(LinearPredictor::new(vec![Term {
            covariate: Covariate::One,
            fixed: Some(0),
            random: Some(0),
        }]))
    }

    fn groups(ys: &[Vec<f64>]) -> Dataset {
        let inds = ys
            .iter()
            .enumerate()
            .map(|(i, y)| Individual::new(format!("{i}"), y.clone(), vec![vec![]; y.len()]).unwrap())
            .collect();
        Dataset::new(inds).unwrap()
    }

    /// Balanced one-way ANOVA ML estimates: (mu, lambda^2, sigma2).
    fn anova_mle(ys: &[Vec<f64>]) -> (f64, f64, f64) {
        let n = ys.len() as f64;
        let j = ys[0].len() as f64;
        let means: Vec<f64> = ys.iter().map(|y| y.iter().sum::<f64>() / j).collect();
        let grand = means.iter().sum::<f64>() / n;
        let ssw: f64 = ys
            .iter()
            .zip(&means)
            .map(|(y, m)| y.iter().map(|v| (v - m) * (v - m)).sum::<f64>())
            .sum();
        let ssb: f64 = j * means.iter().map(|m| (m - grand) * (m - grand)).sum::<f64>();
        let s2 = ssw / (n * (j - 1.0));
        let l2 = (ssb / n - s2) / j;
        if l2 > 0.0 {
            (grand, l2, s2)
        } else {
            (grand, 0.0, (ssw + ssb) / (n * j))
        }
    }

    fn sample(between: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..12)
            .map(|_| {
                let u: f64 = StandardNormal.sample(&mut rng);
                (0..4)
                    .map(|_| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        3.0 + between * u + e
                    })
                    .collect()
            })
            .collect()
    }

    fn check_anova(fit: &FitResult, ys: &[Vec<f64>], tol: f64) {
        let (mu, l2, s2) = anova_mle(ys);
        let t = &fit.theta_hat;
        let lam = t.lambda()[(0, 0)];
        assert!((t.beta()[0] - mu).abs() < tol, "mu {} vs {mu}", t.beta()[0]);
        assert!((lam * lam - l2).abs() < tol, "lambda^2 {} vs {l2}", lam * lam);
        assert!((t.sigma2() - s2).abs() < tol, "sigma2 {} vs {s2}", t.sigma2());
    }

    #[test]
    fn profiled_fit_matches_anova_estimates() {
        let ys = sample(1.5, 1);
        let fit = mle_full(
            &anova(),
            &groups(&ys),
            &QuadratureConfig::default(),
            &FitOptions::default(),
        )
        .unwrap();
        check_anova(&fit, &ys, 1e-6);
        assert!(fit.converged);
    }

    #[test]
    fn negative_anova_estimate_lands_exactly_on_zero() {
        let ys = sample(0.0, 7);
        assert_eq!(anova_mle(&ys).1, 0.0, "seed should give a boundary estimate");
        let fit = mle_full(
            &anova(),
            &groups(&ys),
            &QuadratureConfig::default(),
            &FitOptions::default(),
        )
        .unwrap();
        assert_eq!(fit.theta_hat.lambda()[(0, 0)], 0.0);
        check_anova(&fit, &ys, 1e-6);
    }

    #[test]
    fn quadrature_path_matches_anova_estimates() {
        let ys = sample(1.5, 2);
        let quad = QuadratureConfig {
            closed_form: false,
            n_nodes: 5,
            ..QuadratureConfig::default()
        };
        for method in [FitMethod::NelderMead, FitMethod::QuasiNewton] {
            let opts = FitOptions {
                method,
                n_starts: 1,
                ..FitOptions::default()
            };
            let fit = mle_full(&anova(), &groups(&ys), &quad, &opts).unwrap();
            check_anova(&fit, &ys, 1e-4);
        }
    }

    #[test]
    fn null_fit_is_ordinary_least_squares() {
        let ys = sample(1.5, 3);
        let data = groups(&ys);
        let spec = TestSpec::new(vec![0], 1).unwrap();
        let fit = mle_null(
            &anova(),
            &data,
            &spec,
            &QuadratureConfig::default(),
            &FitOptions::default(),
        )
        .unwrap();
        let all: Vec<f64> = ys.iter().flatten().copied().collect();
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let s2 = all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!((fit.theta_hat.beta()[0] - mean).abs() < 1e-10);
        assert!((fit.theta_hat.sigma2() - s2).abs() < 1e-10);
        let ll = -0.5 * n * (libm::log(2.0 * core::f64::consts::PI * s2) + 1.0);
        assert!((fit.loglik - ll).abs() < 1e-9);
    }

    fn m1_data(seed: u64, lambda2: f64) -> (Model, Dataset) {
        let model = Model::new(LinearPredictor::polynomial(1));
        let theta = Theta::diagonal(vec![0.0, 7.0], &[libm::sqrt(1.3), lambda2], 2.25).unwrap();
        let design: Vec<Vec<Vec<f64>>> = (0..20).map(|_| (1..=5).map(|j| vec![j as f64]).collect()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = simulate_dataset(&model, &theta, &design, &mut rng).unwrap();
        (model, data)
    }

    #[test]
    fn nested_fits_are_ordered_and_reproducible() {
        let spec = TestSpec::new(vec![1], 2).unwrap();
        for seed in 0..6 {
            let (model, data) = m1_data(seed, 0.3 * seed as f64);
            let quad = QuadratureConfig::default();
            let opts = FitOptions::default();
            let (null, full) = fit_nested(&model, &data, &spec, &quad, &opts).unwrap();
            assert!(full.loglik >= null.loglik);
            assert!(null.theta_hat.is_in_null(&spec));
            let again = fit_nested(&model, &data, &spec, &quad, &opts).unwrap();
            assert_eq!(again.0, null);
            assert_eq!(again.1, full);
            // the profiled optimum agrees with the direct likelihood
            let direct = crate::likelihood::loglik(&model, &data, &full.theta_hat, &quad).unwrap();
            assert!((direct - full.loglik).abs() < 1e-8);
        }
    }

    #[test]
    fn full_structure_fit_is_at_least_as_good_as_diagonal() {
        let (model, data) = m1_data(11, 0.5);
        let quad = QuadratureConfig::default();
        let diag = mle_full(&model, &data, &quad, &FitOptions::default()).unwrap();
        let full_model = model.clone().with_structure(CovarianceStructure::Full);
        let full = mle_full(&full_model, &data, &quad, &FitOptions::default()).unwrap();
        assert!(full.loglik >= diag.loglik - 1e-9);
    }

    #[test]
    fn rejects_bad_options_and_specs() {
        let (model, data) = m1_data(0, 0.0);
        let quad = QuadratureConfig::default();
        let opts = FitOptions {
            n_starts: 0,
            ..FitOptions::default()
        };
        assert!(matches!(mle_full(&model, &data, &quad, &opts), Err(Error::Config(_))));
        let spec = TestSpec::new(vec![4], 5).unwrap();
        assert!(matches!(
            mle_null(&model, &data, &spec, &quad, &FitOptions::default()),
            Err(Error::Config(_))
        ));
    }
}
