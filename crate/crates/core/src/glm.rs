//! Gaussian and binomial GLMs with optional l1/l2 penalties, Wald inference
//! and bootstrap summaries.
//!
//! Designs are row-major `n x d` feature matrices; the intercept column is
//! added internally and always comes first in coefficient vectors. The
//! intercept is never penalized.
//!
//! Penalty strengths:
//! - `L1(lambda)`: `(1/n) * loss + lambda * ||w||_1`, with `loss` half the RSS
//!   (gaussian) or the negative log-likelihood (binomial), solved by
//!   coordinate descent on standardized features (lambda applies to the
//!   standardized coefficients).
//! - `L2(c)`: `loss + ||w||^2 / (2 c)`; larger `c` means weaker shrinkage.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::sigmoid;
use crate::stats;

#[derive(Debug, Error)]
pub enum GlmError {
    #[error("design is rank deficient (column {column}); use an l1 or l2 penalty")]
    Singular { column: usize },
    #[error("empty design")]
    Empty,
    #[error("design has {rows} rows but {responses} responses")]
    Shape { rows: usize, responses: usize },
    #[error("binomial response must be 0/1")]
    BadResponse,
    #[error("binomial fit needs both classes present")]
    SingleClass,
    #[error("covariance undefined for penalized fits; use bootstrap inference")]
    PenalizedInference,
    #[error("covariance undefined: {0}")]
    NoCovariance(String),
    #[error("bootstrap needs at least 2 replicates")]
    TooFewReplicates,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Binomial,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "strength", rename_all = "lowercase")]
pub enum Penalty {
    None,
    L1(f64),
    L2(f64),
}

impl Penalty {
    pub fn is_none(&self) -> bool {
        matches!(self, Penalty::None)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmFit {
    /// `[b, w_1, ..., w_d]`.
    pub beta_hat: Vec<f64>,
    /// Row-major `(d+1) x (d+1)`; unpenalized fits only.
    pub covariance: Option<Vec<f64>>,
    pub family: Family,
    pub penalty: Penalty,
    pub n_obs: usize,
    pub dof_resid: f64,
    pub sigma2: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Coefficients diverging under (quasi-)separation.
    pub separation_warning: bool,
}

impl GlmFit {
    pub fn dim(&self) -> usize {
        self.beta_hat.len() - 1
    }

    pub fn intercept(&self) -> f64 {
        self.beta_hat[0]
    }

    pub fn slopes(&self) -> &[f64] {
        &self.beta_hat[1..]
    }

    #[inline]
    pub fn eta(&self, x: &[f64]) -> f64 {
        self.beta_hat[0] + self.beta_hat[1..].iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }

    /// Prediction on the response scale.
    pub fn predict(&self, x: &[f64]) -> f64 {
        match self.family {
            Family::Gaussian => self.eta(x),
            Family::Binomial => sigmoid(self.eta(x)),
        }
    }

    pub fn std_errors(&self) -> Option<Vec<f64>> {
        let k = self.beta_hat.len();
        self.covariance
            .as_ref()
            .map(|c| (0..k).map(|j| c[j * k + j].max(0.0).sqrt()).collect())
    }
}

fn check_shape(x: &[f64], d: usize, y: &[f64]) -> Result<usize, GlmError> {
    let n = y.len();
    if n == 0 {
        return Err(GlmError::Empty);
    }
    if x.len() != n * d {
        return Err(GlmError::Shape {
            rows: x.len().checked_div(d).unwrap_or(0),
            responses: n,
        });
    }
    Ok(n)
}

#[inline]
fn row(x: &[f64], d: usize, i: usize) -> &[f64] {
    &x[i * d..(i + 1) * d]
}

/// `X' W X` and `X' W v` with the intercept column prepended.
fn weighted_gram(x: &[f64], d: usize, w: &[f64], v: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
    let k = d + 1;
    let mut g = DMatrix::zeros(k, k);
    let mut r = DVector::zeros(k);
    let mut xi = vec![0.0; k];
    for (i, (&wi, &vi)) in w.iter().zip(v).enumerate() {
        xi[0] = 1.0;
        xi[1..].copy_from_slice(row(x, d, i));
        for a in 0..k {
            let wa = wi * xi[a];
            r[a] += wa * vi;
            for b in a..k {
                g[(a, b)] += wa * xi[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            g[(a, b)] = g[(b, a)];
        }
    }
    (g, r)
}

/// Cholesky inverse with a relative pivot check for rank deficiency.
fn spd_inverse(g: &DMatrix<f64>) -> Result<DMatrix<f64>, GlmError> {
    let k = g.nrows();
    let chol = g.clone().cholesky().ok_or(GlmError::Singular { column: 0 })?;
    let l = chol.l_dirty();
    for j in 0..k {
        let gjj = g[(j, j)];
        if gjj <= 0.0 || l[(j, j)] * l[(j, j)] <= 1e-12 * gjj {
            return Err(GlmError::Singular { column: j });
        }
    }
    let inv = chol.inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

pub fn fit(x: &[f64], d: usize, y: &[f64], family: Family, penalty: Penalty) -> Result<GlmFit, GlmError> {
    match family {
        Family::Gaussian => fit_gaussian(x, d, y, penalty),
        Family::Binomial => fit_binomial(x, d, y, penalty),
    }
}

pub fn fit_gaussian(x: &[f64], d: usize, y: &[f64], penalty: Penalty) -> Result<GlmFit, GlmError> {
    let n = check_shape(x, d, y)?;
    let ones = vec![1.0; n];
    match penalty {
        Penalty::None => {
            let (g, r) = weighted_gram(x, d, &ones, y);
            let inv = spd_inverse(&g)?;
            let beta = &inv * &r;
            let beta_hat: Vec<f64> = beta.iter().copied().collect();
            let rss: f64 = (0..n)
                .map(|i| {
                    let e = y[i] - eta_of(&beta_hat, row(x, d, i));
                    e * e
                })
                .sum();
            let dof = n as f64 - d as f64 - 1.0;
            let (sigma2, covariance) = if dof > 0.0 {
                let s2 = rss / dof;
                (Some(s2), Some((inv * s2).transpose().iter().copied().collect()))
            } else {
                (None, None)
            };
            Ok(GlmFit {
                beta_hat,
                covariance,
                family: Family::Gaussian,
                penalty,
                n_obs: n,
                dof_resid: dof,
                sigma2,
                iterations: 1,
                converged: true,
                separation_warning: false,
            })
        }
        Penalty::L2(c) => {
            let (mut g, r) = weighted_gram(x, d, &ones, y);
            for j in 1..=d {
                g[(j, j)] += 1.0 / c;
            }
            let beta = g
                .clone()
                .cholesky()
                .ok_or(GlmError::Singular { column: 0 })?
                .solve(&r);
            Ok(GlmFit {
                beta_hat: beta.iter().copied().collect(),
                covariance: None,
                family: Family::Gaussian,
                penalty,
                n_obs: n,
                dof_resid: n as f64 - d as f64 - 1.0,
                sigma2: None,
                iterations: 1,
                converged: true,
                separation_warning: false,
            })
        }
        Penalty::L1(lambda) => {
            let (beta_hat, iterations, converged) = lasso_gaussian(x, d, y, lambda);
            Ok(GlmFit {
                beta_hat,
                covariance: None,
                family: Family::Gaussian,
                penalty,
                n_obs: n,
                dof_resid: n as f64 - d as f64 - 1.0,
                sigma2: None,
                iterations,
                converged,
                separation_warning: false,
            })
        }
    }
}

#[inline]
fn eta_of(beta: &[f64], x: &[f64]) -> f64 {
    beta[0] + beta[1..].iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
}

#[inline]
fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

const CD_TOL: f64 = 1e-7;
const CD_MAX_SWEEPS: usize = 10_000;

/// Column-major standardized copy of the design.
struct Standardized {
    cols: Vec<Vec<f64>>,
    means: Vec<f64>,
    sds: Vec<f64>,
}

impl Standardized {
    fn new(x: &[f64], d: usize, n: usize) -> Self {
        let mut cols = Vec::with_capacity(d);
        let mut means = Vec::with_capacity(d);
        let mut sds = Vec::with_capacity(d);
        for j in 0..d {
            let col: Vec<f64> = (0..n).map(|i| x[i * d + j]).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            let z = if sd > 0.0 {
                col.iter().map(|v| (v - mean) / sd).collect()
            } else {
                vec![0.0; n]
            };
            cols.push(z);
            means.push(mean);
            sds.push(sd);
        }
        Self { cols, means, sds }
    }

    /// Raw-scale `[b, w]` from a standardized intercept and slopes.
    fn to_raw(&self, b_std: f64, w_std: &[f64]) -> Vec<f64> {
        let mut beta = Vec::with_capacity(w_std.len() + 1);
        let mut b = b_std;
        let mut w = Vec::with_capacity(w_std.len());
        for j in 0..w_std.len() {
            let wj = if self.sds[j] > 0.0 { w_std[j] / self.sds[j] } else { 0.0 };
            b -= wj * self.means[j];
            w.push(wj);
        }
        beta.push(b);
        beta.extend(w);
        beta
    }
}

fn lasso_gaussian(x: &[f64], d: usize, y: &[f64], lambda: f64) -> (Vec<f64>, usize, bool) {
    let n = y.len();
    let nf = n as f64;
    let s = Standardized::new(x, d, n);
    let y_mean = y.iter().sum::<f64>() / nf;
    let mut resid: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
    let mut w = vec![0.0; d];
    let mut sweeps = 0;
    let mut converged = d == 0;
    while sweeps < CD_MAX_SWEEPS && !converged {
        sweeps += 1;
        let mut max_change: f64 = 0.0;
        for j in 0..d {
            if s.sds[j] == 0.0 {
                continue;
            }
            let col = &s.cols[j];
            let rho = col.iter().zip(&resid).map(|(a, r)| a * r).sum::<f64>() / nf + w[j];
            let new = soft_threshold(rho, lambda);
            let delta = new - w[j];
            if delta != 0.0 {
                for (r, a) in resid.iter_mut().zip(col) {
                    *r -= delta * a;
                }
                w[j] = new;
            }
            max_change = max_change.max(delta.abs());
        }
        converged = max_change < CD_TOL;
    }
    (s.to_raw(y_mean, &w), sweeps, converged)
}

const IRLS_TOL: f64 = 1e-8;
const IRLS_MAX_ITER: usize = 100;

fn check_binary(y: &[f64]) -> Result<(usize, usize), GlmError> {
    let mut pos = 0;
    for &v in y {
        if v == 1.0 {
            pos += 1;
        } else if v != 0.0 {
            return Err(GlmError::BadResponse);
        }
    }
    Ok((pos, y.len() - pos))
}

/// Log-likelihood `sum y eta - log(1 + e^eta)`, computed stably.
fn binomial_loglik(eta: &[f64], y: &[f64]) -> f64 {
    eta.iter()
        .zip(y)
        .map(|(&e, &t)| {
            let log1pexp = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
            t * e - log1pexp
        })
        .sum()
}

pub fn fit_binomial(x: &[f64], d: usize, y: &[f64], penalty: Penalty) -> Result<GlmFit, GlmError> {
    let n = check_shape(x, d, y)?;
    let (pos, neg) = check_binary(y)?;
    if let Penalty::L1(lambda) = penalty {
        let (beta_hat, iterations, converged) = lasso_binomial(x, d, y, lambda);
        return Ok(GlmFit {
            beta_hat,
            covariance: None,
            family: Family::Binomial,
            penalty,
            n_obs: n,
            dof_resid: n as f64 - d as f64 - 1.0,
            sigma2: None,
            iterations,
            converged,
            separation_warning: false,
        });
    }
    if penalty.is_none() && (pos == 0 || neg == 0) {
        return Err(GlmError::SingleClass);
    }
    let ridge = match penalty {
        Penalty::L2(c) => 1.0 / c,
        _ => 0.0,
    };
    let k = d + 1;
    let objective = |beta: &[f64]| -> f64 {
        let eta: Vec<f64> = (0..n).map(|i| eta_of(beta, row(x, d, i))).collect();
        binomial_loglik(&eta, y) - 0.5 * ridge * beta[1..].iter().map(|b| b * b).sum::<f64>()
    };
    let mut beta = vec![0.0; k];
    let mut obj = objective(&beta);
    let mut iterations = 0;
    let mut converged = false;
    let mut separation = false;
    loop {
        let eta: Vec<f64> = (0..n).map(|i| eta_of(&beta, row(x, d, i))).collect();
        let p: Vec<f64> = eta.iter().map(|&e| sigmoid(e)).collect();
        let w: Vec<f64> = p.iter().map(|&pi| pi * (1.0 - pi)).collect();
        let resid: Vec<f64> = y.iter().zip(&p).map(|(t, pi)| t - pi).collect();
        let (mut h, _) = weighted_gram(x, d, &w, &resid);
        let mut grad = gradient(x, d, &resid);
        for j in 1..k {
            h[(j, j)] += ridge;
            grad[j] -= ridge * beta[j];
        }
        if grad.norm() <= IRLS_TOL {
            converged = true;
            break;
        }
        if iterations >= IRLS_MAX_ITER {
            break;
        }
        let step = match h.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => {
                separation = true;
                break;
            }
        };
        iterations += 1;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..50 {
            let cand: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + t * s).collect();
            let cand_obj = objective(&cand);
            if cand_obj >= obj - 1e-12 * obj.abs() {
                beta = cand;
                obj = cand_obj;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let max_eta = (0..n)
        .map(|i| eta_of(&beta, row(x, d, i)).abs())
        .fold(0.0, f64::max);
    if penalty.is_none() && (!converged || max_eta > 30.0) && max_eta > 15.0 {
        separation = true;
    }
    let covariance = if penalty.is_none() {
        let eta: Vec<f64> = (0..n).map(|i| eta_of(&beta, row(x, d, i))).collect();
        let w: Vec<f64> = eta.iter().map(|&e| {
            let p = sigmoid(e);
            p * (1.0 - p)
        }).collect();
        let (h, _) = weighted_gram(x, d, &w, &vec![0.0; n]);
        spd_inverse(&h).ok().map(|inv| inv.transpose().iter().copied().collect())
    } else {
        None
    };
    Ok(GlmFit {
        beta_hat: beta,
        covariance,
        family: Family::Binomial,
        penalty,
        n_obs: n,
        dof_resid: n as f64 - d as f64 - 1.0,
        sigma2: None,
        iterations,
        converged,
        separation_warning: separation,
    })
}

/// `X' r` with the intercept column.
fn gradient(x: &[f64], d: usize, r: &[f64]) -> DVector<f64> {
    let mut g = DVector::zeros(d + 1);
    for (i, &ri) in r.iter().enumerate() {
        g[0] += ri;
        for (j, v) in row(x, d, i).iter().enumerate() {
            g[j + 1] += ri * v;
        }
    }
    g
}

/// Proximal Newton with coordinate descent on standardized features.
fn lasso_binomial(x: &[f64], d: usize, y: &[f64], lambda: f64) -> (Vec<f64>, usize, bool) {
    let n = y.len();
    let nf = n as f64;
    let s = Standardized::new(x, d, n);
    let ybar = (y.iter().sum::<f64>() / nf).clamp(1e-10, 1.0 - 1e-10);
    let mut b = (ybar / (1.0 - ybar)).ln();
    let mut w = vec![0.0; d];
    let mut eta = vec![b; n];
    let mut sweeps = 0;
    let mut converged = false;
    for _outer in 0..IRLS_MAX_ITER {
        let p: Vec<f64> = eta.iter().map(|&e| sigmoid(e)).collect();
        let wt: Vec<f64> = p.iter().map(|&pi| (pi * (1.0 - pi)).max(1e-5)).collect();
        // working residual z - eta
        let mut r: Vec<f64> = y.iter().zip(&p).zip(&wt).map(|((t, pi), wi)| (t - pi) / wi).collect();
        let col_scale: Vec<f64> = s
            .cols
            .iter()
            .map(|c| c.iter().zip(&wt).map(|(a, wi)| wi * a * a).sum::<f64>() / nf)
            .collect();
        let sum_w: f64 = wt.iter().sum();
        let b_old = b;
        let w_old = w.clone();
        let mut inner = 0;
        loop {
            inner += 1;
            sweeps += 1;
            let mut max_change: f64 = 0.0;
            let db = r.iter().zip(&wt).map(|(ri, wi)| ri * wi).sum::<f64>() / sum_w;
            if db != 0.0 {
                b += db;
                for ri in r.iter_mut() {
                    *ri -= db;
                }
                max_change = max_change.max(db.abs());
            }
            for j in 0..d {
                if s.sds[j] == 0.0 || col_scale[j] == 0.0 {
                    continue;
                }
                let col = &s.cols[j];
                let grad = col.iter().zip(&r).zip(&wt).map(|((a, ri), wi)| wi * a * ri).sum::<f64>() / nf;
                let new = soft_threshold(grad + col_scale[j] * w[j], lambda) / col_scale[j];
                let delta = new - w[j];
                if delta != 0.0 {
                    for (ri, a) in r.iter_mut().zip(col) {
                        *ri -= delta * a;
                    }
                    w[j] = new;
                }
                max_change = max_change.max(delta.abs());
            }
            if max_change < CD_TOL || inner >= CD_MAX_SWEEPS {
                break;
            }
        }
        for (i, e) in eta.iter_mut().enumerate() {
            *e = b + (0..d).map(|j| w[j] * s.cols[j][i]).sum::<f64>();
        }
        let change = (b - b_old)
            .abs()
            .max(w.iter().zip(&w_old).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max));
        if change < CD_TOL {
            converged = true;
            break;
        }
    }
    (s.to_raw(b, &w), sweeps, converged)
}

/// One row of a coefficient table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRow {
    pub name: String,
    pub coef: f64,
    pub std_err: f64,
    pub statistic: f64,
    pub p_value: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub rows: Vec<InferenceRow>,
    pub level: f64,
    pub family: Family,
    pub dof: Option<f64>,
}

fn fmt_prob(p: f64) -> String {
    let s = format!("{p:.4}");
    let s = s.trim_end_matches('0');
    s.trim_end_matches('.').to_string()
}

impl InferenceReport {
    /// `t` for gaussian fits, `z` for binomial ones.
    pub fn statistic_name(&self) -> &'static str {
        match self.family {
            Family::Gaussian => "t",
            Family::Binomial => "z",
        }
    }

    /// The statistic columns, e.g. `coef,std_err,z,p-value,[0.025,0.975]`.
    pub fn column_header(&self) -> String {
        let a = (1.0 - self.level) / 2.0;
        format!(
            "coef,std_err,{},p-value,[{},{}]",
            self.statistic_name(),
            fmt_prob(a),
            fmt_prob(1.0 - a)
        )
    }

    /// CSV with a leading `term` column.
    pub fn to_csv(&self) -> String {
        let mut out = format!("term,{}\n", self.column_header());
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:?},{:?},{:?},{:?},{:?},{:?}\n",
                r.name, r.coef, r.std_err, r.statistic, r.p_value, r.ci_lower, r.ci_upper
            ));
        }
        out
    }
}

pub fn coefficient_names(feature_names: &[String]) -> Vec<String> {
    std::iter::once("intercept".to_string())
        .chain(feature_names.iter().cloned())
        .collect()
}

/// Wald tests: `t` against Student-t with the residual degrees of freedom
/// (gaussian), `z` against N(0, 1) (binomial).
pub fn wald_inference(fit: &GlmFit, level: f64, names: &[String]) -> Result<InferenceReport, GlmError> {
    if !fit.penalty.is_none() {
        return Err(GlmError::PenalizedInference);
    }
    let se = fit.std_errors().ok_or_else(|| {
        GlmError::NoCovariance(match fit.family {
            Family::Gaussian => "no residual degrees of freedom".into(),
            Family::Binomial => "singular information matrix".into(),
        })
    })?;
    let alpha = 1.0 - level;
    let (q, dof) = match fit.family {
        Family::Gaussian => (stats::student_t_quantile(1.0 - alpha / 2.0, fit.dof_resid), Some(fit.dof_resid)),
        Family::Binomial => (stats::normal_quantile(1.0 - alpha / 2.0), None),
    };
    let rows = fit
        .beta_hat
        .iter()
        .zip(&se)
        .enumerate()
        .map(|(j, (&coef, &s))| {
            let (statistic, p_value) = if s > 0.0 {
                let st = coef / s;
                let p = match fit.family {
                    Family::Gaussian => stats::student_t_two_sided_p(st, fit.dof_resid),
                    Family::Binomial => stats::normal_two_sided_p(st),
                };
                (st, p)
            } else if coef == 0.0 {
                (0.0, 1.0)
            } else {
                (coef.signum() * f64::INFINITY, 0.0)
            };
            InferenceRow {
                name: names.get(j).cloned().unwrap_or_else(|| format!("b{j}")),
                coef,
                std_err: s,
                statistic,
                p_value,
                ci_lower: coef - q * s,
                ci_upper: coef + q * s,
            }
        })
        .collect();
    Ok(InferenceReport {
        rows,
        level,
        family: fit.family,
        dof,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapRow {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub zero_probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub rows: Vec<BootstrapRow>,
    pub replicates_ok: usize,
    pub replicates_failed: usize,
}

impl BootstrapReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("term,mean,sd,zero_probability\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:?},{:?},{:?}\n", r.name, r.mean, r.sd, r.zero_probability));
        }
        out
    }
}

/// Row-resampling bootstrap. Replicate `r` draws from its own ChaCha stream
/// so the result does not depend on how replicates are scheduled.
#[allow(clippy::too_many_arguments)]
pub fn bootstrap_inference(
    x: &[f64],
    d: usize,
    y: &[f64],
    family: Family,
    penalty: Penalty,
    replicates: usize,
    seed: u64,
    names: &[String],
) -> Result<BootstrapReport, GlmError> {
    let n = check_shape(x, d, y)?;
    if replicates < 2 {
        return Err(GlmError::TooFewReplicates);
    }
    let fits: Vec<Option<Vec<f64>>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64 + 1);
            let mut xb = Vec::with_capacity(n * d);
            let mut yb = Vec::with_capacity(n);
            for _ in 0..n {
                let i = rng.random_range(0..n);
                xb.extend_from_slice(row(x, d, i));
                yb.push(y[i]);
            }
            fit(&xb, d, &yb, family, penalty).ok().map(|f| f.beta_hat)
        })
        .collect();
    let ok: Vec<&Vec<f64>> = fits.iter().flatten().collect();
    let m = ok.len();
    let rows = (0..=d)
        .map(|j| {
            let vals: Vec<f64> = ok.iter().map(|b| b[j]).collect();
            let mean = if m > 0 { vals.iter().sum::<f64>() / m as f64 } else { f64::NAN };
            let sd = if m > 1 {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64).sqrt()
            } else {
                f64::NAN
            };
            let zeros = vals.iter().filter(|&&v| v == 0.0).count();
            BootstrapRow {
                name: names.get(j).cloned().unwrap_or_else(|| format!("b{j}")),
                mean,
                sd,
                zero_probability: if m > 0 { zeros as f64 / m as f64 } else { f64::NAN },
            }
        })
        .collect();
    Ok(BootstrapReport {
        rows,
        replicates_ok: m,
        replicates_failed: replicates - m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn gaussian_design(n: usize, d: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let mut x = Vec::with_capacity(n * d);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let mut t = 1.0;
            for j in 0..d {
                let v: f64 = rng.random_range(-2.0..2.0);
                t += (j as f64 + 1.0) * 0.5 * v;
                x.push(v);
            }
            y.push(t + noise.sample(&mut rng));
        }
        (x, y)
    }

    fn logistic_design(n: usize, beta: &[f64], seed: u64) -> (Vec<f64>, Vec<f64>) {
        let d = beta.len() - 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::with_capacity(n * d);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let xi: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let p = sigmoid(eta_of(beta, &xi));
            y.push(if rng.random::<f64>() < p { 1.0 } else { 0.0 });
            x.extend(xi);
        }
        (x, y)
    }

    /// Gauss-Jordan inverse with partial pivoting on a dense `k x k` matrix.
    fn gauss_jordan_inverse(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let k = a.len();
        let mut m: Vec<Vec<f64>> = a
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mut row = r.clone();
                row.extend((0..k).map(|j| if i == j { 1.0 } else { 0.0 }));
                row
            })
            .collect();
        for c in 0..k {
            let p = (c..k).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
            m.swap(c, p);
            let piv = m[c][c];
            for v in m[c].iter_mut() {
                *v /= piv;
            }
            for r in 0..k {
                if r != c {
                    let f = m[r][c];
                    let src = m[c].clone();
                    for (v, s) in m[r].iter_mut().zip(src) {
                        *v -= f * s;
                    }
                }
            }
        }
        m.into_iter().map(|r| r[k..].to_vec()).collect()
    }

    fn with_intercept(x: &[f64], d: usize) -> Vec<Vec<f64>> {
        x.chunks(d).map(|r| std::iter::once(1.0).chain(r.iter().copied()).collect()).collect()
    }

    fn mat_vec(a: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
        a.iter().map(|r| r.iter().zip(v).map(|(p, q)| p * q).sum()).collect()
    }

    /// `(X'X)^{-1} X'y` and `s^2 (X'X)^{-1}` computed the textbook way.
    fn normal_equations(x: &[f64], d: usize, y: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let xs = with_intercept(x, d);
        let k = d + 1;
        let mut xtx = vec![vec![0.0; k]; k];
        let mut xty = vec![0.0; k];
        for (r, &t) in xs.iter().zip(y) {
            for a in 0..k {
                xty[a] += r[a] * t;
                for b in 0..k {
                    xtx[a][b] += r[a] * r[b];
                }
            }
        }
        let inv = gauss_jordan_inverse(&xtx);
        let beta = mat_vec(&inv, &xty);
        let rss: f64 = xs
            .iter()
            .zip(y)
            .map(|(r, t)| (t - r.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>()).powi(2))
            .sum();
        let s2 = rss / (y.len() - k) as f64;
        let cov = inv.iter().map(|r| r.iter().map(|v| v * s2).collect()).collect();
        (beta, cov)
    }

    /// Undamped Newton on the logistic log-likelihood.
    fn newton_logistic(x: &[f64], d: usize, y: &[f64]) -> Vec<f64> {
        let xs = with_intercept(x, d);
        let k = d + 1;
        let mut beta = vec![0.0; k];
        for _ in 0..50 {
            let mut h = vec![vec![0.0; k]; k];
            let mut g = vec![0.0; k];
            for (r, &t) in xs.iter().zip(y) {
                let e: f64 = r.iter().zip(&beta).map(|(a, b)| a * b).sum();
                let p = 1.0 / (1.0 + (-e).exp());
                for a in 0..k {
                    g[a] += (t - p) * r[a];
                    for b in 0..k {
                        h[a][b] += p * (1.0 - p) * r[a] * r[b];
                    }
                }
            }
            let step = mat_vec(&gauss_jordan_inverse(&h), &g);
            for (b, s) in beta.iter_mut().zip(step) {
                *b += s;
            }
        }
        beta
    }

    /// Two-sided Student-t p-value for integer degrees of freedom via the
    /// closed-form trigonometric series.
    fn t_two_sided_oracle(t: f64, nu: u32) -> f64 {
        let theta = (t.abs() / (nu as f64).sqrt()).atan();
        let (s, c) = (theta.sin(), theta.cos());
        let a = if nu % 2 == 1 {
            let mut sum = 0.0;
            if nu > 1 {
                let mut term = c;
                sum = term;
                let mut k = 3;
                while k < nu {
                    term *= c * c * (k - 1) as f64 / k as f64;
                    sum += term;
                    k += 2;
                }
            }
            2.0 / std::f64::consts::PI * (theta + s * sum)
        } else {
            let mut term = 1.0;
            let mut sum = 1.0;
            let mut k = 2;
            while k < nu {
                term *= c * c * (k - 1) as f64 / k as f64;
                sum += term;
                k += 2;
            }
            s * sum
        };
        1.0 - a
    }

    /// `erfc(x)`: Maclaurin series for small x, continued fraction otherwise.
    fn erfc_oracle(x: f64) -> f64 {
        if x < 2.0 {
            let mut term = x;
            let mut sum = x;
            let mut n = 0.0;
            while term.abs() > 1e-18 {
                n += 1.0;
                term *= -x * x / n;
                sum += term / (2.0 * n + 1.0);
            }
            1.0 - 2.0 / std::f64::consts::PI.sqrt() * sum
        } else {
            let mut f = 0.0;
            for k in (1..300).rev() {
                f = (k as f64 / 2.0) / (x + f);
            }
            (-x * x).exp() / std::f64::consts::PI.sqrt() / (x + f)
        }
    }

    fn rss(x: &[f64], d: usize, y: &[f64], beta: &[f64]) -> f64 {
        (0..y.len()).map(|i| (y[i] - eta_of(beta, row(x, d, i))).powi(2)).sum()
    }

    #[test]
    fn exact_line() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let f = fit_gaussian(&x, 1, &y, Penalty::None).unwrap();
        assert!((f.beta_hat[0] - 1.0).abs() < 1e-12);
        assert!((f.beta_hat[1] - 2.0).abs() < 1e-12);
        assert!(f.sigma2.unwrap() < 1e-24);
        assert_eq!(f.dof_resid, 8.0);
    }

    #[test]
    fn matches_normal_equations() {
        let (x, y) = gaussian_design(50, 3, 1);
        let f = fit_gaussian(&x, 3, &y, Penalty::None).unwrap();
        let (beta, cov) = normal_equations(&x, 3, &y);
        for j in 0..4 {
            assert!((f.beta_hat[j] - beta[j]).abs() < 1e-8);
            for k in 0..4 {
                let c = f.covariance.as_ref().unwrap()[j * 4 + k];
                assert!((c - cov[j][k]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn covariance_is_symmetric() {
        let (x, y) = gaussian_design(40, 3, 9);
        let f = fit_gaussian(&x, 3, &y, Penalty::None).unwrap();
        let c = f.covariance.unwrap();
        for j in 0..4 {
            assert!(c[j * 4 + j] > 0.0);
            for k in 0..4 {
                assert_eq!(c[j * 4 + k], c[k * 4 + j]);
            }
        }
    }

    #[test]
    fn rank_deficient_design_is_singular() {
        let x: Vec<f64> = (0..8).flat_map(|i| [i as f64, 2.0 * i as f64]).collect();
        let y: Vec<f64> = (0..8).map(|i| i as f64).collect();
        assert!(matches!(
            fit_gaussian(&x, 2, &y, Penalty::None),
            Err(GlmError::Singular { .. })
        ));
        assert!(fit_gaussian(&x, 2, &y, Penalty::L2(1.0)).is_ok());
    }

    #[test]
    fn full_lasso_shrinkage() {
        let (x, y) = gaussian_design(60, 3, 2);
        let f = fit_gaussian(&x, 3, &y, Penalty::L1(1e6)).unwrap();
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        assert!(f.slopes().iter().all(|&w| w == 0.0));
        assert!((f.intercept() - mean).abs() < 1e-12);
        assert!(f.covariance.is_none());
    }

    #[test]
    fn penalties_vanish_to_ols() {
        let (x, y) = gaussian_design(80, 3, 3);
        let ols = fit_gaussian(&x, 3, &y, Penalty::None).unwrap();
        let ridge = fit_gaussian(&x, 3, &y, Penalty::L2(1e12)).unwrap();
        let lasso = fit_gaussian(&x, 3, &y, Penalty::L1(1e-12)).unwrap();
        for j in 0..4 {
            assert!((ridge.beta_hat[j] - ols.beta_hat[j]).abs() < 1e-6);
            assert!((lasso.beta_hat[j] - ols.beta_hat[j]).abs() < 1e-6);
        }
        let (xb, yb) = logistic_design(300, &[0.3, 1.0, -0.7], 4);
        let ml = fit_binomial(&xb, 2, &yb, Penalty::None).unwrap();
        let r = fit_binomial(&xb, 2, &yb, Penalty::L2(1e12)).unwrap();
        let l = fit_binomial(&xb, 2, &yb, Penalty::L1(1e-12)).unwrap();
        for j in 0..3 {
            assert!((r.beta_hat[j] - ml.beta_hat[j]).abs() < 1e-6);
            assert!((l.beta_hat[j] - ml.beta_hat[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn least_squares_is_a_minimum() {
        let (x, y) = gaussian_design(50, 3, 5);
        let f = fit_gaussian(&x, 3, &y, Penalty::None).unwrap();
        let base = rss(&x, 3, &y, &f.beta_hat);
        for j in 0..4 {
            for h in [1e-4, -1e-4] {
                let mut b = f.beta_hat.clone();
                b[j] += h;
                assert!(rss(&x, 3, &y, &b) >= base);
            }
        }
    }

    #[test]
    fn intercept_only_balanced() {
        let y: Vec<f64> = (0..20).map(|i| (i % 2) as f64).collect();
        let f = fit_binomial(&[], 0, &y, Penalty::None).unwrap();
        assert!(f.intercept().abs() < 1e-12);
    }

    #[test]
    fn logistic_matches_newton_oracle() {
        let (x, y) = logistic_design(200, &[-0.5, 1.5, 0.8], 6);
        let f = fit_binomial(&x, 2, &y, Penalty::None).unwrap();
        assert!(f.converged);
        assert!(!f.separation_warning);
        let oracle = newton_logistic(&x, 2, &y);
        for j in 0..3 {
            assert!((f.beta_hat[j] - oracle[j]).abs() < 1e-6);
        }
        let resid: Vec<f64> = (0..200).map(|i| y[i] - f.predict(row(&x, 2, i))).collect();
        assert!(gradient(&x, 2, &resid).norm() <= 1e-8);
    }

    #[test]
    fn separation_is_flagged_not_fatal() {
        let x: Vec<f64> = (0..20).map(|i| i as f64 - 9.5).collect();
        let y: Vec<f64> = x.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
        let f = fit_binomial(&x, 1, &y, Penalty::None).unwrap();
        assert!(f.separation_warning);
    }

    #[test]
    fn binomial_input_errors() {
        assert!(matches!(fit_binomial(&[1.0, 2.0], 1, &[0.0, 2.0], Penalty::None), Err(GlmError::BadResponse)));
        assert!(matches!(fit_binomial(&[1.0, 2.0], 1, &[1.0, 1.0], Penalty::None), Err(GlmError::SingleClass)));
        assert!(matches!(fit_gaussian(&[], 1, &[], Penalty::None), Err(GlmError::Empty)));
        assert!(matches!(fit_gaussian(&[1.0], 1, &[1.0, 2.0], Penalty::None), Err(GlmError::Shape { .. })));
    }

    #[test]
    fn t_pvalues_match_series_oracle() {
        let (x, y) = gaussian_design(30, 2, 7);
        let f = fit_gaussian(&x, 2, &y, Penalty::None).unwrap();
        let names = coefficient_names(&["x1".into(), "x2".into()]);
        let rep = wald_inference(&f, 0.95, &names).unwrap();
        assert_eq!(rep.dof, Some(27.0));
        for r in &rep.rows {
            let p = t_two_sided_oracle(r.statistic, 27);
            assert!((r.p_value - p).abs() <= 1e-10, "{} vs {p}", r.p_value);
            assert!(r.ci_lower <= r.coef && r.coef <= r.ci_upper);
        }
        for t in [0.1, 0.7, 1.5, 2.2, 4.0] {
            for nu in [1, 2, 5, 10, 27] {
                let p = stats::student_t_two_sided_p(t, nu as f64);
                assert!((p - t_two_sided_oracle(t, nu)).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn z_pvalues_match_erfc_oracle() {
        for z in [0.0, 0.3, 1.0, 1.96, 2.5, 3.7, 6.0] {
            let p = stats::normal_two_sided_p(z);
            let o = erfc_oracle(z / std::f64::consts::SQRT_2);
            assert!((p - o).abs() <= 1e-10, "{z}: {p} vs {o}");
        }
        let (x, y) = logistic_design(200, &[0.2, 1.0, 0.0], 8);
        let f = fit_binomial(&x, 2, &y, Penalty::None).unwrap();
        let rep = wald_inference(&f, 0.95, &coefficient_names(&["a".into(), "b".into()])).unwrap();
        let se = f.std_errors().unwrap();
        for (j, r) in rep.rows.iter().enumerate() {
            assert_eq!(r.statistic, f.beta_hat[j] / se[j]);
            let o = erfc_oracle(r.statistic.abs() / std::f64::consts::SQRT_2);
            assert!((r.p_value - o).abs() <= 1e-10);
            let half = 1.959963984540054 * se[j];
            assert!((r.ci_upper - r.coef - half).abs() < 1e-9);
        }
    }

    #[test]
    fn null_coefficient_row() {
        let fit = GlmFit {
            beta_hat: vec![0.0, 1.0],
            covariance: Some(vec![0.25, 0.0, 0.0, 0.25]),
            family: Family::Binomial,
            penalty: Penalty::None,
            n_obs: 10,
            dof_resid: 8.0,
            sigma2: None,
            iterations: 0,
            converged: true,
            separation_warning: false,
        };
        let rep = wald_inference(&fit, 0.95, &coefficient_names(&["x".into()])).unwrap();
        let r = &rep.rows[0];
        assert_eq!((r.statistic, r.p_value), (0.0, 1.0));
        assert_eq!(r.ci_lower, -r.ci_upper);
    }

    #[test]
    fn penalized_fit_has_no_wald_table() {
        let (x, y) = gaussian_design(30, 2, 10);
        let f = fit_gaussian(&x, 2, &y, Penalty::L2(0.1)).unwrap();
        assert!(matches!(wald_inference(&f, 0.95, &[]), Err(GlmError::PenalizedInference)));
    }

    #[test]
    fn header_layout() {
        let (x, y) = logistic_design(100, &[0.0, 1.0], 11);
        let f = fit_binomial(&x, 1, &y, Penalty::None).unwrap();
        let rep = wald_inference(&f, 0.95, &coefficient_names(&["x".into()])).unwrap();
        assert_eq!(rep.column_header(), "coef,std_err,z,p-value,[0.025,0.975]");
        let csv = rep.to_csv();
        assert!(csv.starts_with("term,coef,std_err,z,p-value,[0.025,0.975]\nintercept,"));
        let (xg, yg) = gaussian_design(20, 1, 12);
        let g = fit_gaussian(&xg, 1, &yg, Penalty::None).unwrap();
        let rep = wald_inference(&g, 0.9, &[]).unwrap();
        assert_eq!(rep.column_header(), "coef,std_err,t,p-value,[0.05,0.95]");
    }

    #[test]
    fn bootstrap_zeroes_noise_feature() {
        // y depends on x1 only; x2 is pure noise.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..150 {
            let a: f64 = rng.random_range(-1.0..1.0);
            let b: f64 = rng.random_range(-1.0..1.0);
            x.extend([a, b]);
            y.push(2.0 * a + noise.sample(&mut rng));
        }
        let names = coefficient_names(&["signal".into(), "noise".into()]);
        let rep = bootstrap_inference(&x, 2, &y, Family::Gaussian, Penalty::L1(0.1), 100, 5, &names).unwrap();
        assert_eq!(rep.replicates_ok, 100);
        assert!(rep.rows[2].zero_probability >= 0.9);
        assert_eq!(rep.rows[1].zero_probability, 0.0);
        assert!(rep.rows[1].mean > 0.0);
        let again = bootstrap_inference(&x, 2, &y, Family::Gaussian, Penalty::L1(0.1), 100, 5, &names).unwrap();
        assert_eq!(rep.to_csv(), again.to_csv());
        assert!(matches!(
            bootstrap_inference(&x, 2, &y, Family::Gaussian, Penalty::L1(0.1), 1, 5, &names),
            Err(GlmError::TooFewReplicates)
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn statistics_follow_feature_permutation(seed in 0u64..1000, rot in 1usize..3) {
            let d = 3;
            let (x, y) = gaussian_design(40, d, seed);
            let perm: Vec<usize> = (0..d).map(|j| (j + rot) % d).collect();
            let xp: Vec<f64> = x.chunks(d).flat_map(|r| perm.iter().map(|&j| r[j]).collect::<Vec<_>>()).collect();
            let a = wald_inference(&fit_gaussian(&x, d, &y, Penalty::None).unwrap(), 0.95, &[]).unwrap();
            let b = wald_inference(&fit_gaussian(&xp, d, &y, Penalty::None).unwrap(), 0.95, &[]).unwrap();
            prop_assert!((a.rows[0].statistic - b.rows[0].statistic).abs() < 1e-8);
            for (k, &j) in perm.iter().enumerate() {
                prop_assert!((a.rows[j + 1].statistic - b.rows[k + 1].statistic).abs() < 1e-8);
            }
        }
    }
}
