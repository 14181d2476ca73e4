//! Covariance adequacy test for a fitted base model.
//!
//! The statistic compares `Y_t Y_t'` with the fitted covariance
//! `Sigma_t = sigma^2 Delta_t^{-1} Delta_t^{-T}` through
//! `T_ql = (nT)^{-1} sum_t tr(Y_t Y_t' Sigma_t^{-1} - I)^2`, centred at
//! `n + mu4 - 2`.
//!
//! Because `sigma^2` is profiled, `sum_t Y_t' Sigma_t^{-1} Y_t = nT` exactly and
//! the centred statistic equals `(nT)^{-1} sum_t sum_{i != j} a_ti a_tj` with
//! `a = e^2 - 1` built from the standardized residuals. Its variance is
//! `2 (n - 1) (mu4 - 1)^2 / (nT)`, the default scale. The three-term plug-in
//! variance is available as an alternative and as a diagnostic breakdown.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use libm::erfc;

use crate::error::{MirError, Result};
use crate::estimate::{FitResult, ModelKind};
use crate::model::{factor_delta, MirData, Theta};
use crate::par;
use crate::weights::WeightMatrix;

/// Which parameters enter the variance correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VarianceScope {
    /// `lambda` and `sigma^2`.
    #[default]
    Full,
    /// `lambda` only, using the matching block of `I^{-1}`.
    LambdaOnly,
}

/// How `sigma_ql` is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", content = "scope")]
pub enum VarianceMethod {
    /// Variance of the pairwise-product form, `2 (n - 1) (mu4 - 1)^2 / (nT)`.
    #[default]
    UStatistic,
    /// Three-term plug-in with `I^{-1}` and per-period traces.
    PlugIn(VarianceScope),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GofOptions {
    pub alpha: f64,
    pub variance: VarianceMethod,
    /// Also compute the plug-in terms for reporting.
    pub breakdown: bool,
}

impl Default for GofOptions {
    fn default() -> Self {
        Self { alpha: 0.05, variance: VarianceMethod::UStatistic, breakdown: true }
    }
}

/// The three components of `sigma_ql^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceTerms {
    /// `(4 mu4 - 4) n / T`, the variance with `theta` known.
    pub leading: f64,
    /// Variance induced by the estimation error of `theta`.
    pub estimation: f64,
    /// Covariance between the two, usually negative.
    pub cross: f64,
}

impl VarianceTerms {
    pub fn total(&self) -> f64 {
        self.leading + self.estimation + self.cross
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GofResult {
    pub t_ql: f64,
    pub mu_hat: f64,
    pub sigma_hat: f64,
    pub z: f64,
    pub p_value: f64,
    pub alpha: f64,
    pub reject: bool,
    pub n_over_t: f64,
    /// `n / T` outside `[1/4, 4]`, where the normal approximation is doubtful.
    pub regime_warning: bool,
    pub variance: VarianceMethod,
    pub terms: Option<VarianceTerms>,
}

/// `Phi(x)` through the complementary error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// `tr(y y' M - I)^2` from the scalar `q = y' M y`.
pub fn rank_one_loss(q: f64, n: usize) -> f64 {
    q * q - 2.0 * q + n as f64
}

fn check_fit(data: &MirData, fit: &FitResult) -> Result<()> {
    if fit.model != ModelKind::Base {
        return Err(MirError::InvalidInput("the adequacy test needs a base-model fit".into()));
    }
    if fit.d() != data.d() || fit.periods != data.periods() {
        return Err(MirError::Dimension { what: "fit weights".into(), expected: data.d(), found: fit.d() });
    }
    if !(fit.theta_hat.sigma2 > 0.0) {
        return Err(MirError::DegenerateResponse);
    }
    Ok(())
}

/// `T_ql` at the fitted parameters.
pub fn test_statistic(data: &MirData, fit: &FitResult) -> Result<f64> {
    check_fit(data, fit)?;
    let n = data.n();
    let sigma2 = fit.theta_hat.sigma2;
    let lambda = fit.lambda();
    let per_t = par::map_range(data.periods(), |t| {
        let ops: Vec<&WeightMatrix> = data.weights.period(t).iter().collect();
        let y = data.y_t(t);
        let mut e = y.clone();
        for (w, &l) in ops.iter().zip(lambda.iter()) {
            e -= w.mul_vec(&y) * l;
        }
        rank_one_loss(e.norm_squared() / sigma2, n)
    });
    Ok(per_t.iter().sum::<f64>() / data.nobs() as f64)
}

/// `V_tk = Delta^{-T} (d Sigma^{-1} / d theta_k) Delta^{-1}` for `k` in `0..=d`,
/// with `k = d` the `sigma^2` direction.
pub fn v_matrix(data: &MirData, theta: &Theta, t: usize, k: usize) -> Result<DMatrix<f64>> {
    let d = data.d();
    if k > d {
        return Err(MirError::InvalidInput(format!("parameter index {k} exceeds {d}")));
    }
    let n = data.n();
    let s2 = theta.sigma2;
    if k == d {
        return Ok(DMatrix::identity(n, n) * (-1.0 / (s2 * s2)));
    }
    let ops: Vec<&WeightMatrix> = data.weights.period(t).iter().collect();
    let f = factor_delta(&ops, &theta.lambda, t)?;
    // Delta^{-T}(W'Delta + Delta'W)Delta^{-1} = (W Delta^{-1})' + W Delta^{-1}
    let p = ops[k].mul_mat(&f.inverse());
    Ok((&p + p.transpose()) * (-1.0 / s2))
}

/// Per-period ingredients: `G_t = 2 tr(U_k U_l) + (mu4 - 3) tr(U_k o U_l)`,
/// `u_t = tr U_tk` and `v_t = tr V_tk` over the full `theta`.
struct PeriodTerms {
    g: DMatrix<f64>,
    u: DVector<f64>,
    v: DVector<f64>,
}

fn period_terms(ops: &[&WeightMatrix], lambda: &DVector<f64>, sigma2: f64, mu4: f64, t: usize) -> Result<PeriodTerms> {
    let d = lambda.len();
    let f = factor_delta(ops, lambda, t)?;
    let n = f.dim() as f64;
    let inv = f.inverse();
    let prods: Vec<DMatrix<f64>> = ops.iter().map(|w| w.mul_mat(&inv)).collect();
    let trans: Vec<DMatrix<f64>> = prods.iter().map(|p| p.transpose()).collect();
    let diags: Vec<DVector<f64>> = prods.iter().map(|p| p.diagonal()).collect();
    let hs = 1.0 / (2.0 * sigma2);
    let mut g = DMatrix::zeros(d + 1, d + 1);
    let mut u = DVector::zeros(d + 1);
    let mut v = DVector::zeros(d + 1);
    for k in 0..d {
        for l in 0..=k {
            let tr_uu = 0.5 * (prods[k].dot(&trans[l]) + prods[k].dot(&prods[l]));
            let val = 2.0 * tr_uu + (mu4 - 3.0) * diags[k].dot(&diags[l]);
            g[(k, l)] = val;
            g[(l, k)] = val;
        }
        let tr = diags[k].sum();
        // U_{d+1} = I / (2 sigma^2) is diagonal, so both traces coincide
        let val = (2.0 + mu4 - 3.0) * tr * hs;
        g[(k, d)] = val;
        g[(d, k)] = val;
        u[k] = tr;
        v[k] = -2.0 * tr / sigma2;
    }
    g[(d, d)] = (2.0 + mu4 - 3.0) * n * hs * hs;
    u[d] = n * hs;
    v[d] = -n / (sigma2 * sigma2);
    Ok(PeriodTerms { g, u, v })
}

/// `sum over pairwise distinct (t1, t2, t3)` of `a_t2' G_t1 a_t3`.
pub fn distinct_triple_sum(g: &[DMatrix<f64>], a: &[DVector<f64>]) -> f64 {
    let Some(first) = a.first() else {
        return 0.0;
    };
    let q = first.len();
    let mut total = DVector::zeros(q);
    let mut outer = DMatrix::zeros(q, q);
    for at in a {
        total += at;
        outer += at * at.transpose();
    }
    g.iter()
        .zip(a)
        .map(|(gt, at)| {
            let rest = &total - at;
            let own = at * at.transpose();
            rest.dot(&(gt * &rest)) - gt.component_mul(&(&outer - own)).sum()
        })
        .sum()
}

/// `sum over t1 != t2` of `u_t1' M v_t2`.
pub fn distinct_pair_sum(m: &DMatrix<f64>, u: &[DVector<f64>], v: &[DVector<f64>]) -> f64 {
    let Some(first) = u.first() else {
        return 0.0;
    };
    let mut su = DVector::zeros(first.len());
    let mut sv = DVector::zeros(first.len());
    let mut diag = 0.0;
    for (ut, vt) in u.iter().zip(v) {
        su += ut;
        sv += vt;
        diag += ut.dot(&(m * vt));
    }
    su.dot(&(m * sv)) - diag
}

/// Plug-in components of `sigma_ql^2`.
pub fn variance_terms(data: &MirData, fit: &FitResult, scope: VarianceScope) -> Result<VarianceTerms> {
    check_fit(data, fit)?;
    let periods = data.periods();
    if periods < 3 {
        return Err(MirError::Regime(format!("the adequacy test needs T >= 3, got {periods}")));
    }
    let n = data.n() as f64;
    let tf = periods as f64;
    let d = data.d();
    let mu4 = fit.mu4_hat;
    let sigma2 = fit.theta_hat.sigma2;
    let lambda = fit.lambda();
    let inv = fit
        .i_hat
        .clone()
        .try_inverse()
        .ok_or_else(|| MirError::Numerical("information matrix is singular".into()))?;
    let mut inv = inv.view((0, 0), (d + 1, d + 1)).into_owned();
    if scope == VarianceScope::LambdaOnly {
        inv.row_mut(d).fill(0.0);
        inv.column_mut(d).fill(0.0);
    }
    let per_t = par::map_range(periods, |t| {
        let ops: Vec<&WeightMatrix> = data.weights.period(t).iter().collect();
        period_terms(&ops, lambda, sigma2, mu4, t)
    });
    let terms: Vec<PeriodTerms> = per_t.into_iter().collect::<Result<_>>()?;
    let g: Vec<DMatrix<f64>> = terms.iter().map(|p| p.g.clone()).collect();
    let a: Vec<DVector<f64>> = terms.iter().map(|p| &inv * &p.v).collect();
    let u: Vec<DVector<f64>> = terms.iter().map(|p| p.u.clone()).collect();
    let v: Vec<DVector<f64>> = terms.iter().map(|p| p.v.clone()).collect();
    let leading = (4.0 * mu4 - 4.0) * n / tf;
    let estimation = 4.0 * sigma2 * sigma2 / (n * n * tf.powi(4)) * distinct_triple_sum(&g, &a);
    let cross = (8.0 * mu4 - 8.0) * sigma2 / (n * tf.powi(3)) * distinct_pair_sum(&inv, &u, &v);
    Ok(VarianceTerms { leading, estimation, cross })
}

/// `2 (n - 1) (mu4 - 1)^2 / (nT)`.
pub fn u_statistic_variance(n: usize, periods: usize, mu4: f64) -> f64 {
    let nf = n as f64;
    2.0 * (nf - 1.0) * (mu4 - 1.0).powi(2) / (nf * periods as f64)
}

/// `(nT)^{-1} sum_t sum_{i != j} a_ti a_tj` with `a = e^2 - 1` from the
/// fitted standardized residuals.
pub fn pairwise_form(data: &MirData, fit: &FitResult) -> Result<f64> {
    check_fit(data, fit)?;
    let sigma2 = fit.theta_hat.sigma2;
    let total: f64 = fit
        .residuals
        .column_iter()
        .map(|e| {
            let a: Vec<f64> = e.iter().map(|v| v * v / sigma2 - 1.0).collect();
            let s: f64 = a.iter().sum();
            s * s - a.iter().map(|v| v * v).sum::<f64>()
        })
        .sum();
    Ok(total / data.nobs() as f64)
}

/// `sigma_ql` at the fitted parameters.
pub fn sigma_ql_hat(data: &MirData, fit: &FitResult, method: VarianceMethod) -> Result<f64> {
    match method {
        VarianceMethod::UStatistic => {
            check_fit(data, fit)?;
            if data.periods() < 3 {
                return Err(MirError::Regime(format!("the adequacy test needs T >= 3, got {}", data.periods())));
            }
            let var = u_statistic_variance(data.n(), data.periods(), fit.mu4_hat);
            if !(var > 0.0) || !var.is_finite() {
                return Err(MirError::Numerical(format!("nonpositive variance estimate {var}")));
            }
            Ok(var.sqrt())
        }
        VarianceMethod::PlugIn(scope) => positive_sd(&variance_terms(data, fit, scope)?),
    }
}

fn positive_sd(terms: &VarianceTerms) -> Result<f64> {
    let total = terms.total();
    if !(total > 0.0) || !total.is_finite() {
        return Err(MirError::Numerical(format!(
            "nonpositive variance estimate {total} (leading {}, estimation {}, cross {})",
            terms.leading, terms.estimation, terms.cross
        )));
    }
    Ok(total.sqrt())
}

/// Two-sided adequacy test at level `options.alpha`.
pub fn influence_test(data: &MirData, fit: &FitResult, options: &GofOptions) -> Result<GofResult> {
    let alpha = options.alpha;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(MirError::InvalidInput(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let t_ql = test_statistic(data, fit)?;
    let sigma_hat = sigma_ql_hat(data, fit, options.variance)?;
    let terms = match options.variance {
        VarianceMethod::PlugIn(scope) => Some(variance_terms(data, fit, scope)?),
        VarianceMethod::UStatistic if options.breakdown => Some(variance_terms(data, fit, VarianceScope::Full)?),
        VarianceMethod::UStatistic => None,
    };
    let mu_hat = data.n() as f64 + fit.mu4_hat - 2.0;
    let z = (t_ql - mu_hat) / sigma_hat;
    let p_value = (2.0 * (1.0 - normal_cdf(z.abs()))).clamp(0.0, 1.0);
    let n_over_t = data.n() as f64 / data.periods() as f64;
    Ok(GofResult {
        t_ql,
        mu_hat,
        sigma_hat,
        z,
        p_value,
        alpha,
        reject: p_value < alpha,
        n_over_t,
        regime_warning: !(0.25..=4.0).contains(&n_over_t),
        variance: options.variance,
        terms,
    })
}
