//! Flat `key = value` reports of fits and tests.

use std::fmt::Write as _;
use std::io::Write;

use vcboot_core::{BootstrapResult, FitResult, Theta};

fn list(xs: impl IntoIterator<Item = f64>) -> String {
    xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

/// Lower triangle of `Lambda`, rows separated by `;`.
pub fn lambda_text(theta: &Theta) -> String {
    let l = theta.lambda();
    (0..theta.p())
        .map(|i| list((0..=i).map(|j| l[(i, j)])))
        .collect::<Vec<_>>()
        .join("; ")
}

pub fn theta_lines(out: &mut String, prefix: &str, theta: &Theta) {
    let _ = writeln!(out, "{prefix}.beta = {}", list(theta.beta().iter().copied()));
    let _ = writeln!(out, "{prefix}.lambda = {}", lambda_text(theta));
    let _ = writeln!(
        out,
        "{prefix}.lambda_diag = {}",
        list(theta.lambda().diagonal().iter().copied())
    );
    let _ = writeln!(out, "{prefix}.sigma2 = {}", theta.sigma2());
}

pub fn fit_report(prefix: &str, fit: &FitResult) -> String {
    let mut out = String::new();
    theta_lines(&mut out, &format!("{prefix}.theta"), &fit.theta_hat);
    let _ = writeln!(out, "{prefix}.loglik = {}", fit.loglik);
    let _ = writeln!(out, "{prefix}.converged = {}", fit.converged);
    let _ = writeln!(out, "{prefix}.n_evals = {}", fit.n_evals);
    out
}

/// `lrt_obs`, `B`, `p_boot`, `c_N`, `theta_star`, `b_failed` and the two fits.
pub fn test_report(result: &BootstrapResult) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "lrt_obs = {}", result.lrt_obs);
    let _ = writeln!(out, "B = {}", result.b_requested);
    let _ = writeln!(out, "b_failed = {}", result.b_failed);
    let _ = writeln!(out, "unreliable = {}", result.unreliable);
    let _ = writeln!(out, "p_boot = {}", result.p_boot);
    if let Some(p) = result.p_asymptotic {
        let _ = writeln!(out, "p_asymptotic = {p}");
    }
    let _ = writeln!(out, "alpha = {}", result.alpha);
    let _ = writeln!(out, "reject = {}", result.reject);
    let _ = writeln!(out, "c_N = {}", result.c_n);
    theta_lines(&mut out, "theta_star", &result.theta_star);
    out.push_str(&fit_report("null", &result.null_fit));
    out.push_str(&fit_report("full", &result.full_fit));
    out
}

/// One column `lrt_star`, in replicate order.
pub fn write_lrt_star<W: Write>(writer: W, lrt_star: &[f64]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["lrt_star"])?;
    for v in lrt_star {
        w.write_record([v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
