//! Bound-constrained local minimizers.
//!
//! Both methods keep every iterate inside the box, so a parameter can sit
//! exactly on a bound at the solution.

use alloc::vec;
use alloc::vec::Vec;

#[derive(Clone, Debug, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), upper.len());
        debug_assert!(lower.iter().zip(&upper).all(|(l, u)| l <= u));
        Bounds { lower, upper }
    }

    pub fn unbounded(n: usize) -> Self {
        Bounds::new(vec![f64::NEG_INFINITY; n], vec![f64::INFINITY; n])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn project(&self, x: &mut [f64]) {
        for (i, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lower[i], self.upper[i]);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimOptions {
    pub max_evals: usize,
    /// Step / simplex-size tolerance, relative to `1 + |x|`.
    pub x_tol: f64,
    /// Objective tolerance, relative to `1 + |f|`.
    pub f_tol: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        OptimOptions {
            max_evals: 5000,
            x_tol: 1e-8,
            f_tol: 1e-10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub fx: f64,
    pub n_evals: usize,
    pub converged: bool,
}

fn finite_or_inf(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

/// Nelder–Mead with adaptive coefficients; trial points are projected onto
/// the box. `step[i]` sets the initial simplex edge along coordinate `i`. On
/// convergence the simplex is rebuilt around the best vertex until a restart
/// no longer improves the objective.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    step: &[f64],
    bounds: &Bounds,
    opts: &OptimOptions,
) -> OptimResult {
    let n = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        finite_or_inf(f(x))
    };
    let mut best = x0.to_vec();
    bounds.project(&mut best);
    if n == 0 {
        let fx = eval(&best, &mut evals);
        return OptimResult {
            x: best,
            fx,
            n_evals: evals,
            converged: true,
        };
    }
    let nf = n as f64;
    let (alpha, gamma, rho, shrink) = (1.0, 1.0 + 2.0 / nf, 0.75 - 0.5 / nf, 1.0 - 1.0 / nf);
    let mut best_f = eval(&best, &mut evals);
    let mut converged = false;
    let mut scale: Vec<f64> = step.to_vec();

    for _restart in 0..10 {
        // initial simplex, stepping away from any bound the point sits on
        let mut simplex: Vec<Vec<f64>> = vec![best.clone()];
        let mut values = vec![best_f];
        for i in 0..n {
            let mut v = best.clone();
            let h = if scale[i] != 0.0 { scale[i] } else { 1e-3 };
            v[i] += h;
            if v[i] > bounds.upper[i] {
                v[i] = best[i] - h;
            }
            bounds.project(&mut v);
            if v[i] == best[i] {
                v[i] = if bounds.upper[i] > best[i] {
                    best[i] + 0.5 * (bounds.upper[i] - best[i]).min(h.abs())
                } else {
                    best[i] - 0.5 * (best[i] - bounds.lower[i]).min(h.abs())
                };
            }
            values.push(eval(&v, &mut evals));
            simplex.push(v);
        }
        let start_best = best_f;
        let mut local_converged = false;
        while evals < opts.max_evals {
            let mut idx: Vec<usize> = (0..=n).collect();
            idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
            simplex = idx.iter().map(|&i| simplex[i].clone()).collect();
            values = idx.iter().map(|&i| values[i]).collect();

            let f_spread = values[n] - values[0];
            let x_spread = (1..=n)
                .map(|k| {
                    simplex[k]
                        .iter()
                        .zip(&simplex[0])
                        .map(|(a, b)| (a - b).abs() / (1.0 + b.abs()))
                        .fold(0.0, f64::max)
                })
                .fold(0.0, f64::max);
            let flat = f_spread <= opts.f_tol * (1.0 + values[0].abs());
            if (flat && x_spread <= opts.x_tol) || x_spread <= 1e-3 * opts.x_tol {
                local_converged = true;
                break;
            }

            let mut centroid = vec![0.0; n];
            for v in &simplex[..n] {
                for (c, x) in centroid.iter_mut().zip(v) {
                    *c += x / nf;
                }
            }
            let point = |t: f64| -> Vec<f64> {
                let mut p: Vec<f64> = centroid.iter().zip(&simplex[n]).map(|(c, w)| c + t * (c - w)).collect();
                bounds.project(&mut p);
                p
            };
            let xr = point(alpha);
            let fr = eval(&xr, &mut evals);
            if fr < values[0] {
                let xe = point(alpha * gamma);
                let fe = eval(&xe, &mut evals);
                if fe < fr {
                    simplex[n] = xe;
                    values[n] = fe;
                } else {
                    simplex[n] = xr;
                    values[n] = fr;
                }
            } else if fr < values[n - 1] {
                simplex[n] = xr;
                values[n] = fr;
            } else {
                let (xc, fc) = if fr < values[n] {
                    let xc = point(alpha * rho);
                    let fc = eval(&xc, &mut evals);
                    (xc, fc)
                } else {
                    let xc = point(-rho);
                    let fc = eval(&xc, &mut evals);
                    (xc, fc)
                };
                if fc < values[n].min(fr) {
                    simplex[n] = xc;
                    values[n] = fc;
                } else {
                    for k in 1..=n {
                        let mut v: Vec<f64> = simplex[0]
                            .iter()
                            .zip(&simplex[k])
                            .map(|(b, x)| b + shrink * (x - b))
                            .collect();
                        bounds.project(&mut v);
                        values[k] = eval(&v, &mut evals);
                        simplex[k] = v;
                    }
                }
            }
        }
        let k = (0..=n).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap_or(0);
        if values[k] <= best_f {
            best_f = values[k];
            best = simplex[k].clone();
        }
        if !local_converged {
            break;
        }
        if start_best - best_f <= opts.f_tol * (1.0 + best_f.abs()) {
            converged = true;
            break;
        }
        // smaller simplex for the restart
        for s in scale.iter_mut() {
            *s *= 0.5;
        }
    }
    OptimResult {
        x: best,
        fx: best_f,
        n_evals: evals,
        converged,
    }
}

/// Projected quasi-Newton (BFGS Hessian approximation, Newton step on the
/// free variables, projected backtracking line search). `fg(x, grad)` returns `f(x)` and writes the
/// gradient. Variables on a bound whose gradient pushes outward are held
/// fixed for the step.
pub fn projected_quasi_newton<F: FnMut(&[f64], &mut [f64]) -> f64>(
    mut fg: F,
    x0: &[f64],
    bounds: &Bounds,
    opts: &OptimOptions,
) -> OptimResult {
    let n = x0.len();
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let mut g = vec![0.0; n];
    let mut evals = 1usize;
    let mut f = finite_or_inf(fg(&x, &mut g));
    if n == 0 || !f.is_finite() {
        return OptimResult {
            x,
            fx: f,
            n_evals: evals,
            converged: n == 0 && f.is_finite(),
        };
    }
    // Hessian approximation, row-major
    let mut h = identity(n);
    let mut fresh = true;
    let mut converged = false;
    let mut small_steps = 0;
    let mut g_new = vec![0.0; n];

    while evals < opts.max_evals {
        let at_lower = |i: usize, x: &[f64]| x[i] <= bounds.lower[i];
        let at_upper = |i: usize, x: &[f64]| x[i] >= bounds.upper[i];
        let active: Vec<bool> = (0..n)
            .map(|i| (at_lower(i, &x) && g[i] > 0.0) || (at_upper(i, &x) && g[i] < 0.0))
            .collect();
        let pg_norm = (0..n)
            .filter(|&i| !active[i])
            .map(|i| g[i].abs() * (1.0 + x[i].abs()))
            .fold(0.0, f64::max);
        if pg_norm <= opts.f_tol * (1.0 + f.abs()) {
            converged = true;
            break;
        }
        let mut d = vec![0.0; n];
        let free: Vec<usize> = (0..n).filter(|&i| !active[i]).collect();
        if let Some(step) = reduced_newton_step(&h, &g, &free) {
            for (k, &i) in free.iter().enumerate() {
                d[i] = step[k];
            }
        }
        let mut slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        if !(slope < 0.0) {
            h = identity(n);
            fresh = true;
            for i in 0..n {
                d[i] = if active[i] { 0.0 } else { -g[i] };
            }
            slope = d.iter().zip(&g).map(|(a, b)| a * b).sum();
            if !(slope < 0.0) {
                converged = true;
                break;
            }
        }
        let mut t = if fresh {
            let dn = d.iter().map(|v| v.abs()).fold(0.0, f64::max);
            (1.0 / dn).min(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        let mut xt = vec![0.0; n];
        for _ in 0..60 {
            for i in 0..n {
                xt[i] = x[i] + t * d[i];
            }
            bounds.project(&mut xt);
            let ft = finite_or_inf(fg(&xt, &mut g_new));
            evals += 1;
            let decrease: f64 = g.iter().zip(xt.iter().zip(&x)).map(|(gi, (a, b))| gi * (a - b)).sum();
            if ft.is_finite() && ft <= f + 1e-4 * decrease.min(0.0) {
                accepted = Some(ft);
                break;
            }
            t *= 0.5;
            if evals >= opts.max_evals {
                break;
            }
        }
        let Some(ft) = accepted else {
            if fresh {
                // no descent even along the projected gradient
                converged = pg_norm <= 1e-6 * (1.0 + f.abs());
                break;
            }
            h = identity(n);
            fresh = true;
            continue;
        };
        let s: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let step_rel = s
            .iter()
            .zip(&x)
            .map(|(si, xi)| si.abs() / (1.0 + xi.abs()))
            .fold(0.0, f64::max);
        let f_change = f - ft;
        x.copy_from_slice(&xt);
        g.copy_from_slice(&g_new);
        f = ft;
        if step_rel <= opts.x_tol && f_change <= opts.f_tol * (1.0 + f.abs()) {
            small_steps += 1;
            if small_steps >= 2 {
                converged = true;
                break;
            }
        } else {
            small_steps = 0;
        }
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let yy: f64 = y.iter().map(|v| v * v).sum();
        if sy > 1e-12 * libm::sqrt(yy * s.iter().map(|v| v * v).sum::<f64>()) {
            if fresh {
                // scale the identity before the first update
                let gamma = yy / sy;
                for v in h.iter_mut() {
                    *v *= gamma;
                }
            }
            bfgs_update(&mut h, &s, &y, sy);
            fresh = false;
        }
    }
    OptimResult {
        x,
        fx: f,
        n_evals: evals,
        converged,
    }
}

fn identity(n: usize) -> Vec<f64> {
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = 1.0;
    }
    h
}

/// `B <- B - B s s^T B / (s^T B s) + y y^T / (s^T y)`.
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let hs: Vec<f64> = (0..n).map(|i| (0..n).map(|j| h[i * n + j] * s[j]).sum()).collect();
    let shs: f64 = s.iter().zip(&hs).map(|(a, b)| a * b).sum();
    if !(shs > 0.0) {
        return;
    }
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += y[i] * y[j] / sy - hs[i] * hs[j] / shs;
        }
    }
}

/// Solves `B_FF d = -g_F` on the free variables `F` by Cholesky.
fn reduced_newton_step(h: &[f64], g: &[f64], free: &[usize]) -> Option<Vec<f64>> {
    let n = g.len();
    let m = free.len();
    let mut l = vec![0.0; m * m];
    for a in 0..m {
        for b in 0..=a {
            let mut v = h[free[a] * n + free[b]];
            for k in 0..b {
                v -= l[a * m + k] * l[b * m + k];
            }
            if a == b {
                if !(v > 0.0) {
                    return None;
                }
                l[a * m + a] = libm::sqrt(v);
            } else {
                l[a * m + b] = v / l[b * m + b];
            }
        }
    }
    let mut z = vec![0.0; m];
    for a in 0..m {
        let mut v = -g[free[a]];
        for k in 0..a {
            v -= l[a * m + k] * z[k];
        }
        z[a] = v / l[a * m + a];
    }
    for a in (0..m).rev() {
        let mut v = z[a];
        for k in a + 1..m {
            v -= l[k * m + a] * z[k];
        }
        z[a] = v / l[a * m + a];
    }
    Some(z)
}

/// Central-difference gradient of `f` at `x`, stepping inward at bounds.
pub fn numeric_gradient<F: FnMut(&[f64]) -> f64>(f: &mut F, x: &[f64], bounds: &Bounds, grad: &mut [f64]) -> usize {
    let mut xt = x.to_vec();
    let mut evals = 0;
    for i in 0..x.len() {
        let h = 1e-5 * (1.0 + x[i].abs());
        let up = (x[i] + h).min(bounds.upper[i]);
        let lo = (x[i] - h).max(bounds.lower[i]);
        xt[i] = up;
        let fu = f(&xt);
        xt[i] = lo;
        let fl = f(&xt);
        xt[i] = x[i];
        evals += 2;
        grad[i] = if up > lo { (fu - fl) / (up - lo) } else { 0.0 };
    }
    evals
}
