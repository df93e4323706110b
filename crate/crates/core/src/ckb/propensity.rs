use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::CkbError;
use crate::numerics::kernels::sigmoid;

pub const MAX_NEWTON_ITERATIONS: usize = 500;
pub const GRADIENT_TOLERANCE: f64 = 1e-8;
/// Ridge strength used when the unpenalized fit separates.
pub const FALLBACK_RIDGE: f64 = 1e-4;
/// A standardized coefficient this large means the likelihood has no
/// finite maximizer.
const SEPARATION_BOUND: f64 = 25.0;

/// Per-column affine standardization; constant columns are dropped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub kept: Vec<usize>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &[Vec<f64>]) -> Self {
        let width = x.first().map_or(0, Vec::len);
        let n = x.len() as f64;
        let mut kept = Vec::new();
        let mut mean = Vec::new();
        let mut std = Vec::new();
        for c in 0..width {
            let m = x.iter().map(|r| r[c]).sum::<f64>() / n;
            let v = x.iter().map(|r| (r[c] - m).powi(2)).sum::<f64>() / n;
            if v > 1e-12 {
                kept.push(c);
                mean.push(m);
                std.push(v.sqrt());
            }
        }
        Self { kept, mean, std }
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        self.kept
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&c, (m, s))| (row[c] - m) / s)
            .collect()
    }
}

/// Logistic model `P(T = 1 | x) = σ(β₀ + βᵀx)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub iterations: usize,
    pub ridge: f64,
}

impl LogitModel {
    pub fn linear(&self, x: &[f64]) -> f64 {
        self.intercept + self.coefficients.iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }
}

pub fn propensity_score(model: &LogitModel, x: &[f64]) -> Result<f64, CkbError> {
    if x.len() != model.coefficients.len() {
        return Err(CkbError::Schema {
            expected: model.coefficients.len(),
            got: x.len(),
        });
    }
    Ok(sigmoid(model.linear(x)))
}

fn design(x: &[Vec<f64>]) -> DMatrix<f64> {
    let p = x.first().map_or(0, Vec::len);
    DMatrix::from_fn(x.len(), p + 1, |i, j| if j == 0 { 1.0 } else { x[i][j - 1] })
}

/// Mean negative log-likelihood plus the ridge term (intercept unpenalized).
fn objective(xd: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>, ridge: f64) -> f64 {
    let eta = xd * beta;
    let n = y.len() as f64;
    let nll: f64 = eta
        .iter()
        .zip(y.iter())
        .map(|(&e, &t)| {
            // log(1 + exp(e)) - t e, computed without overflow
            let softplus = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
            softplus - t * e
        })
        .sum();
    nll / n + 0.5 * ridge * beta.rows(1, beta.len() - 1).norm_squared()
}

/// Maximum-likelihood fit by damped Newton iterations.
///
/// Rows are expected to be standardized. Returns [`CkbError::Separation`]
/// when the coefficients diverge, which happens when a linear combination
/// of confounders perfectly predicts treatment; [`fit_propensity_or_ridge`]
/// retries with a small ridge penalty in that case.
pub fn fit_propensity(x: &[Vec<f64>], treated: &[bool], ridge: f64) -> Result<LogitModel, CkbError> {
    let n_treated = treated.iter().filter(|&&t| t).count();
    if x.len() < 20 || n_treated == 0 || n_treated == x.len() || x.len() != treated.len() {
        return Err(CkbError::InsufficientRows {
            rows: x.len(),
            treated: n_treated,
        });
    }
    let xd = design(x);
    let y = DVector::from_iterator(treated.len(), treated.iter().map(|&t| f64::from(u8::from(t))));
    let n = x.len() as f64;
    let p = xd.ncols();
    let mut beta = DVector::zeros(p);
    let mut penalty = DVector::from_element(p, ridge);
    penalty[0] = 0.0;
    let mut loss = objective(&xd, &y, &beta, ridge);

    for iter in 0..MAX_NEWTON_ITERATIONS {
        let mu = (&xd * &beta).map(sigmoid);
        let grad = xd.tr_mul(&(&mu - &y)) / n + penalty.component_mul(&beta);
        if grad.amax() <= GRADIENT_TOLERANCE {
            return checked(&xd, treated, &beta, iter, ridge);
        }
        let w = mu.map(|m| m * (1.0 - m));
        let mut hess = xd.tr_mul(&DMatrix::from_fn(xd.nrows(), p, |i, j| xd[(i, j)] * w[i])) / n;
        for j in 0..p {
            hess[(j, j)] += penalty[j];
        }
        let step = solve_spd(hess, &grad);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let candidate = &beta - &step * t;
            let l = objective(&xd, &y, &candidate, ridge);
            if l <= loss {
                beta = candidate;
                loss = l;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if ridge == 0.0 && p > 1 && beta.rows(1, p - 1).amax() > SEPARATION_BOUND {
            return Err(CkbError::Separation {
                coefficient_norm: beta.rows(1, p - 1).norm(),
            });
        }
        if !accepted {
            // No descent direction left at machine precision.
            return checked(&xd, treated, &beta, iter + 1, ridge);
        }
    }
    checked(&xd, treated, &beta, MAX_NEWTON_ITERATIONS, ridge)
}

/// Rejects unpenalized fits whose linear predictor splits the two groups
/// perfectly: the likelihood then has no finite maximizer and the returned
/// coefficients are an artifact of the stopping rule.
fn checked(xd: &DMatrix<f64>, treated: &[bool], beta: &DVector<f64>, iterations: usize, ridge: f64) -> Result<LogitModel, CkbError> {
    if ridge == 0.0 {
        let eta = xd * beta;
        let range = |group: bool| {
            eta.iter()
                .zip(treated)
                .filter(|(_, &t)| t == group)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&e, _)| (lo.min(e), hi.max(e)))
        };
        let (t_lo, t_hi) = range(true);
        let (c_lo, c_hi) = range(false);
        let coefficient_norm = beta.rows(1, beta.len() - 1).norm();
        if (t_lo > c_hi || t_hi < c_lo) && coefficient_norm > 1.0 {
            return Err(CkbError::Separation { coefficient_norm });
        }
    }
    Ok(finish(beta, iterations, ridge))
}

/// Unpenalized fit, falling back to [`FALLBACK_RIDGE`] on separation.
pub fn fit_propensity_or_ridge(x: &[Vec<f64>], treated: &[bool]) -> Result<LogitModel, CkbError> {
    match fit_propensity(x, treated, 0.0) {
        Err(CkbError::Separation { coefficient_norm }) => {
            log::warn!("propensity fit separated (|beta| = {coefficient_norm:.1}); retrying with ridge {FALLBACK_RIDGE}");
            fit_propensity(x, treated, FALLBACK_RIDGE)
        }
        other => other,
    }
}

fn finish(beta: &DVector<f64>, iterations: usize, ridge: f64) -> LogitModel {
    LogitModel {
        intercept: beta[0],
        coefficients: beta.iter().skip(1).copied().collect(),
        iterations,
        ridge,
    }
}

fn solve_spd(mut h: DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    let mut jitter = 1e-12;
    loop {
        if let Some(ch) = h.clone().cholesky() {
            return ch.solve(g);
        }
        for j in 0..h.nrows() {
            h[(j, j)] += jitter;
        }
        jitter *= 10.0;
    }
}

/// Asymptotic standard errors `sqrt(diag((XᵀWX)⁻¹))`, intercept first.
pub fn coefficient_standard_errors(model: &LogitModel, x: &[Vec<f64>]) -> Vec<f64> {
    let xd = design(x);
    let mut beta = vec![model.intercept];
    beta.extend_from_slice(&model.coefficients);
    let beta = DVector::from_vec(beta);
    let w = (&xd * &beta).map(|e| {
        let m = sigmoid(e);
        m * (1.0 - m)
    });
    let p = xd.ncols();
    let info = xd.tr_mul(&DMatrix::from_fn(xd.nrows(), p, |i, j| xd[(i, j)] * w[i]));
    match info.try_inverse() {
        Some(inv) => (0..p).map(|j| inv[(j, j)].sqrt()).collect(),
        None => vec![f64::INFINITY; p],
    }
}
