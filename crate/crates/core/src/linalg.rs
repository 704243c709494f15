use nalgebra::{DMatrix, DVector};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Lower-triangular factor `L` with `L L^T = a` for a symmetric positive
/// semi-definite `a`. Pivots below `tol` (relative to the largest diagonal)
/// produce a zero column; `None` if `a` is not PSD within that tolerance.
pub(crate) fn psd_cholesky(a: &DMatrix<f64>, tol: f64) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let scale = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max).max(1.0);
    let eps = tol * scale;
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d < -eps {
            return None;
        }
        if d <= eps {
            for i in (j + 1)..n {
                let mut v = a[(i, j)];
                for k in 0..j {
                    v -= l[(i, k)] * l[(j, k)];
                }
                if v.abs() > libm::sqrt(eps) * libm::sqrt(scale) {
                    return None;
                }
            }
            continue;
        }
        let djj = libm::sqrt(d);
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut v = a[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / djj;
        }
    }
    Some(l)
}

/// Log-density of `N(mean, cov)` at `y`; `None` when `cov` is not positive definite.
pub(crate) fn mvn_logpdf(y: &DVector<f64>, mean: &DVector<f64>, cov: DMatrix<f64>) -> Option<f64> {
    let n = y.len() as f64;
    let chol = cov.cholesky()?;
    let r = y - mean;
    let z = chol.l().solve_lower_triangular(&r)?;
    let logdet: f64 = chol.l().diagonal().iter().map(|d| libm::log(*d)).sum::<f64>() * 2.0;
    Some(-0.5 * (n * LN_2PI + logdet + z.dot(&z)))
}

/// `log(sum(exp(v)))`, `-inf` for an empty or all `-inf` input.
pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = v.iter().map(|x| libm::exp(x - m)).sum();
    m + libm::log(s)
}

pub(crate) fn ln_2pi() -> f64 {
    LN_2PI
}
