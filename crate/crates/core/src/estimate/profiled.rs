//! Profiled Gaussian likelihood for affine mean functions.
//!
//! With `V_i = I + Z_i L L^T Z_i^T` for the relative factor `L = Lambda / sigma`,
//! `beta` and `sigma2` have closed-form maximizers (GLS and `RSS / n`), so the
//! search only runs over `L`. Everything is computed from per-individual
//! cross products through `M_i = I + L^T Z_i^T Z_i L`, never the `J_i x J_i`
//! covariance.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::ln_2pi;
use crate::model::{mean_eval, zeros, Dataset, Model};

struct Cross {
    /// `Z^T Z`
    ztz: DMatrix<f64>,
    /// `Z^T X`
    ztx: DMatrix<f64>,
    /// `Z^T y`
    zty: DVector<f64>,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    yty: f64,
}

pub(crate) struct Profiled {
    cross: Vec<Cross>,
    p: usize,
    b: usize,
    n_obs: f64,
    sigma2_floor: f64,
}

pub(crate) struct Evaluation {
    pub deviance: f64,
    pub beta: DVector<f64>,
    pub sigma2: f64,
    /// `sum_i Z_i^T V_i^{-1} Z_i - a_i a_i^T / sigma2` with `a_i = Z_i^T V_i^{-1} r_i`;
    /// the deviance gradient is `2 S L` in `L` and `diag(S)` in `diag(L)^2`.
    pub s: Option<DMatrix<f64>>,
}

impl Profiled {
    /// Extracts `X`, `Z` and the offset by evaluating `g` at unit vectors.
    pub(crate) fn new(model: &Model, data: &Dataset) -> Result<Self> {
        if !model.is_linear() {
            return Err(Error::Config(format!(
                "profiled likelihood needs an affine mean function, got {}",
                model.mean().describe()
            )));
        }
        let (p, b) = (model.p(), model.b());
        let zero_b = zeros(b);
        let zero_p = zeros(p);
        let mut unit_b = zeros(b);
        let mut unit_p = zeros(p);
        let mut cross = Vec::with_capacity(data.n());
        for ind in data.individuals() {
            let n = ind.len();
            let mut x = DMatrix::zeros(n, b);
            let mut z = DMatrix::zeros(n, p);
            let mut y = DVector::zeros(n);
            for (j, xj) in ind.x.iter().enumerate() {
                let offset = mean_eval(model, xj, &zero_b, &zero_p)?;
                y[j] = ind.y[j] - offset;
                for k in 0..b {
                    unit_b[k] = 1.0;
                    x[(j, k)] = mean_eval(model, xj, &unit_b, &zero_p)? - offset;
                    unit_b[k] = 0.0;
                }
                for k in 0..p {
                    unit_p[k] = 1.0;
                    z[(j, k)] = mean_eval(model, xj, &zero_b, &unit_p)? - offset;
                    unit_p[k] = 0.0;
                }
            }
            cross.push(Cross {
                ztz: z.tr_mul(&z),
                ztx: z.tr_mul(&x),
                zty: z.tr_mul(&y),
                xtx: x.tr_mul(&x),
                xty: x.tr_mul(&y),
                yty: y.dot(&y),
            });
        }
        Ok(Profiled {
            cross,
            p,
            b,
            n_obs: data.n_obs() as f64,
            sigma2_floor: model.bounds().sigma2_floor,
        })
    }

    pub(crate) fn p(&self) -> usize {
        self.p
    }

    /// Profiled deviance `-2 log L` at relative factor `l`.
    pub(crate) fn evaluate(&self, l: &DMatrix<f64>, gradient: bool) -> Option<Evaluation> {
        let (p, b) = (self.p, self.b);
        let mut logdet = 0.0;
        let mut xvx = DMatrix::<f64>::zeros(b, b);
        let mut xvy = DVector::<f64>::zeros(b);
        let mut yvy = 0.0;
        let mut ks: Vec<DMatrix<f64>> = Vec::with_capacity(if gradient { self.cross.len() } else { 0 });
        let identity = DMatrix::<f64>::identity(p, p);
        for c in &self.cross {
            let ltz = l.tr_mul(&c.ztz);
            let m = &identity + &ltz * l;
            let chol = m.cholesky()?;
            logdet += 2.0 * chol.l().diagonal().iter().map(|v| libm::log(*v)).sum::<f64>();
            // K = L M^{-1} L^T, so that V^{-1} = I - Z K Z^T
            let k = l * chol.solve(&l.transpose());
            let kzx = &k * &c.ztx;
            let kzy = &k * &c.zty;
            xvx += &c.xtx - c.ztx.tr_mul(&kzx);
            xvy += &c.xty - c.ztx.tr_mul(&kzy);
            yvy += c.yty - c.zty.dot(&kzy);
            if gradient {
                ks.push(k);
            }
        }
        let beta = if b > 0 {
            let sym = (&xvx + xvx.transpose()) * 0.5;
            sym.cholesky()?.solve(&xvy)
        } else {
            DVector::zeros(0)
        };
        let q = (yvy - beta.dot(&xvy)).max(0.0);
        let sigma2 = (q / self.n_obs).max(self.sigma2_floor);
        let deviance = logdet + self.n_obs * (ln_2pi() + libm::log(sigma2)) + q / sigma2;
        let s = if gradient {
            let mut s = DMatrix::<f64>::zeros(p, p);
            for (c, k) in self.cross.iter().zip(&ks) {
                let ak = &c.ztz * k;
                let ztvz = &c.ztz - &ak * &c.ztz;
                let ztr = &c.zty - &c.ztx * &beta;
                let a = &ztr - &ak * &ztr;
                s += ztvz - (&a * a.transpose()) / sigma2;
            }
            Some(s)
        } else {
            None
        };
        if !deviance.is_finite() {
            return None;
        }
        Some(Evaluation {
            deviance,
            beta,
            sigma2,
            s,
        })
    }
}
