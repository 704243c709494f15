//! Built-in mean functions: linear predictors and the three-parameter
//! logistic growth curve.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::model::{Dataset, MeanFunction};

/// A covariate multiplying one term of a linear predictor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Covariate {
    One,
    Column(usize),
    /// `x[column]^exponent`
    Power(usize, i32),
}

impl Covariate {
    fn value(&self, x: &[f64]) -> f64 {
        match *self {
            Covariate::One => 1.0,
            Covariate::Column(c) => x[c],
            Covariate::Power(c, e) => libm::pow(x[c], e as f64),
        }
    }

    fn min_len(&self) -> usize {
        match *self {
            Covariate::One => 0,
            Covariate::Column(c) | Covariate::Power(c, _) => c + 1,
        }
    }
}

/// One term `covariate * (beta[fixed] + s[random])`; either index may be absent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Term {
    pub covariate: Covariate,
    pub fixed: Option<usize>,
    pub random: Option<usize>,
}

/// `g(x, beta, s) = sum_t cov_t(x) * (beta[f_t] + s[r_t])`, affine in `(beta, s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearPredictor {
    terms: Vec<Term>,
    p: usize,
    b: usize,
    n_cov: usize,
}

impl LinearPredictor {
    pub fn new(terms: Vec<Term>) -> Self {
        let p = terms.iter().filter_map(|t| t.random).map(|r| r + 1).max().unwrap_or(0);
        let b = terms.iter().filter_map(|t| t.fixed).map(|f| f + 1).max().unwrap_or(0);
        let n_cov = terms.iter().map(|t| t.covariate.min_len()).max().unwrap_or(0);
        LinearPredictor { terms, p, b, n_cov }
    }

    /// `sum_{k=0}^{degree} (beta_k + s_k) x^k` on covariate column 0; degree 1
    /// is a random intercept and slope, degree 2 adds a random quadratic term.
    pub fn polynomial(degree: usize) -> Self {
        let terms = (0..=degree)
            .map(|k| Term {
                covariate: match k {
                    0 => Covariate::One,
                    1 => Covariate::Column(0),
                    _ => Covariate::Power(0, k as i32),
                },
                fixed: Some(k),
                random: Some(k),
            })
            .collect();
        LinearPredictor::new(terms)
    }

    /// `sum_{k<p} x_k s_k`: random slopes on `p` covariates, no fixed effects.
    pub fn random_slopes(p: usize) -> Self {
        let terms = (0..p)
            .map(|k| Term {
                covariate: Covariate::Column(k),
                fixed: None,
                random: Some(k),
            })
            .collect();
        LinearPredictor::new(terms)
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }
}

impl MeanFunction for LinearPredictor {
    fn n_random(&self) -> usize {
        self.p
    }

    fn n_fixed(&self) -> usize {
        self.b
    }

    fn n_covariates(&self) -> usize {
        self.n_cov
    }

    fn eval(&self, x: &[f64], beta: &[f64], s: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let coef = t.fixed.map_or(0.0, |f| beta[f]) + t.random.map_or(0.0, |r| s[r]);
                t.covariate.value(x) * coef
            })
            .sum()
    }

    fn is_affine(&self) -> bool {
        true
    }

    fn gradient(&self, x: &[f64], beta: &[f64], s: &[f64], d_beta: &mut [f64], d_s: &mut [f64]) -> Option<f64> {
        d_beta.iter_mut().for_each(|v| *v = 0.0);
        d_s.iter_mut().for_each(|v| *v = 0.0);
        let mut value = 0.0;
        for t in &self.terms {
            let c = t.covariate.value(x);
            if let Some(f) = t.fixed {
                d_beta[f] += c;
                value += c * beta[f];
            }
            if let Some(r) = t.random {
                d_s[r] += c;
                value += c * s[r];
            }
        }
        Some(value)
    }

    fn describe(&self) -> String {
        let parts: Vec<String> = self
            .terms
            .iter()
            .map(|t| {
                let cov = match t.covariate {
                    Covariate::One => String::from("1"),
                    Covariate::Column(c) => format!("x{}", c + 1),
                    Covariate::Power(c, e) => format!("x{}^{}", c + 1, e),
                };
                let coef = match (t.fixed, t.random) {
                    (Some(f), Some(r)) => format!("(b{} + s{})", f + 1, r + 1),
                    (Some(f), None) => format!("b{}", f + 1),
                    (None, Some(r)) => format!("s{}", r + 1),
                    (None, None) => String::from("0"),
                };
                format!("{coef}*{cov}")
            })
            .collect();
        format!("linear: {}", parts.join(" + "))
    }
}

/// Logistic growth `(b1 + s1) / (1 + exp(-(x - (b2 + s2)) / (b3 + s3)))`
/// on one covariate column: asymptote, inflexion point and scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Logistic {
    column: usize,
}

impl Logistic {
    pub fn new(column: usize) -> Self {
        Logistic { column }
    }
}

impl MeanFunction for Logistic {
    fn n_random(&self) -> usize {
        3
    }

    fn n_fixed(&self) -> usize {
        3
    }

    fn n_covariates(&self) -> usize {
        self.column + 1
    }

    fn eval(&self, x: &[f64], beta: &[f64], s: &[f64]) -> f64 {
        let asym = beta[0] + s[0];
        let mid = beta[1] + s[1];
        let scale = beta[2] + s[2];
        asym / (1.0 + libm::exp(-(x[self.column] - mid) / scale))
    }

    fn gradient(&self, x: &[f64], beta: &[f64], s: &[f64], d_beta: &mut [f64], d_s: &mut [f64]) -> Option<f64> {
        let asym = beta[0] + s[0];
        let mid = beta[1] + s[1];
        let scale = beta[2] + s[2];
        let u = (x[self.column] - mid) / scale;
        let sig = 1.0 / (1.0 + libm::exp(-u));
        let slope = asym * sig * (1.0 - sig);
        let d = [sig, -slope / scale, -slope * u / scale];
        d_beta.copy_from_slice(&d);
        d_s.copy_from_slice(&d);
        Some(asym * sig)
    }

    /// Asymptote from the largest response, inflexion where the pooled
    /// responses cross half of it, scale from the covariate range.
    fn initial_beta(&self, data: &Dataset) -> Option<Vec<f64>> {
        let mut pts: Vec<(f64, f64)> = data
            .individuals()
            .iter()
            .flat_map(|ind| ind.x.iter().zip(&ind.y).map(|(x, y)| (x[self.column], *y)))
            .collect();
        if pts.is_empty() {
            return None;
        }
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (xmin, xmax) = (pts[0].0, pts[pts.len() - 1].0);
        let top = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let asym = if top > 0.0 { 1.05 * top } else { 1.0 };
        let half = 0.5 * asym;
        let mid = pts.iter().find(|p| p.1 >= half).map_or(0.5 * (xmin + xmax), |p| p.0);
        let scale = ((xmax - xmin) / 8.0).max(1e-3);
        Some(vec![asym, mid, scale])
    }

    fn describe(&self) -> String {
        format!(
            "logistic on x{}: (b1 + s1) / (1 + exp(-(x - (b2 + s2)) / (b3 + s3)))",
            self.column + 1
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_shapes() {
        let m1 = LinearPredictor::polynomial(1);
        assert_eq!((m1.n_random(), m1.n_fixed(), m1.n_covariates()), (2, 2, 1));
        // b1 + s1 + (b2 + s2) x
        assert_eq!(m1.eval(&[2.0], &[1.0, 3.0], &[0.5, -1.0]), 1.5 + 2.0 * 2.0);
        let m2 = LinearPredictor::polynomial(2);
        assert_eq!(m2.eval(&[2.0], &[0.0, 7.0, 3.0], &[0.0; 3]), 14.0 + 12.0);
    }

    #[test]
    fn random_slopes_have_no_fixed_effects() {
        let m3 = LinearPredictor::random_slopes(8);
        assert_eq!((m3.n_random(), m3.n_fixed(), m3.n_covariates()), (8, 0, 8));
        let x: Vec<f64> = (1..=8).map(f64::from).collect();
        let s = [1.0; 8];
        assert_eq!(m3.eval(&x, &[], &s), 36.0);
    }

    fn check_gradient<M: MeanFunction>(g: &M, x: &[f64], beta: &[f64], s: &[f64]) {
        let (b, p) = (beta.len(), s.len());
        let mut db = vec![0.0; b];
        let mut ds = vec![0.0; p];
        let v = g.gradient(x, beta, s, &mut db, &mut ds).unwrap();
        assert!((v - g.eval(x, beta, s)).abs() < 1e-12 * (1.0 + v.abs()));
        for k in 0..b + p {
            let mut bu = beta.to_vec();
            let mut su = s.to_vec();
            let mut bd = beta.to_vec();
            let mut sd = s.to_vec();
            let h = 1e-5 * (1.0 + if k < b { beta[k].abs() } else { s[k - b].abs() });
            if k < b {
                bu[k] += h;
                bd[k] -= h;
            } else {
                su[k - b] += h;
                sd[k - b] -= h;
            }
            let fd = (g.eval(x, &bu, &su) - g.eval(x, &bd, &sd)) / (2.0 * h);
            let an = if k < b { db[k] } else { ds[k - b] };
            assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "component {k}: {fd} vs {an}");
        }
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        check_gradient(&Logistic::new(0), &[762.0], &[200.0, 500.0, 150.0], &[3.0, -20.0, 10.0]);
        check_gradient(&Logistic::new(0), &[50.0], &[200.0, 500.0, 150.0], &[0.0; 3]);
        check_gradient(
            &LinearPredictor::polynomial(2),
            &[1.7],
            &[0.0, 7.0, 3.0],
            &[0.1, 0.2, 0.3],
        );
        let x: Vec<f64> = (0..4).map(|k| 1.0 + k as f64).collect();
        check_gradient(&LinearPredictor::random_slopes(4), &x, &[], &[0.5; 4]);
    }

    #[test]
    fn logistic_is_bounded_by_asymptote() {
        let g = Logistic::new(0);
        for x in [0.0, 500.0, 1e4] {
            let v = g.eval(&[x], &[200.0, 500.0, 150.0], &[0.0; 3]);
            assert!((0.0..=200.0).contains(&v));
        }
    }
}
