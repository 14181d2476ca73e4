//! Quasi-maximum likelihood estimation and its plug-in inference.

use std::borrow::Cow;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use libm::erfc;

use crate::error::{MirError, Result};
use crate::model::{factor_delta, MirData, Theta};
use crate::optimize::{Optimum, OptimizerOptions};
use crate::par;
use crate::profile::{Profile, ProfileSpec};
pub use crate::profile::{TraceMode, DEFAULT_PROBES, DEFAULT_PROBE_SEED};
use crate::weights::{WeightMatrix, WeightSet};

/// Which covariance estimate backs the reported standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    /// `(nT)^{-1} I^{-1} J I^{-1}`.
    #[default]
    Sandwich,
    /// `(nT)^{-1} I^{-1}`.
    InverseInformation,
}

/// Residuals entering the kurtosis estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KurtosisResiduals {
    /// `Delta_t(lambda) Y_t`, the model errors.
    #[default]
    Model,
    /// `Delta_t(lambda)^{-1} Y_t`, kept for comparison only.
    InverseDelta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub optimizer: OptimizerOptions,
    /// Starting points tried in addition to `lambda = 0`; the fit with the
    /// highest likelihood wins. Needed when the truth lies beyond a singular
    /// surface of `Delta_t`, which no path from zero crosses.
    pub extra_starts: Vec<DVector<f64>>,
    pub trace: TraceMode,
    pub covariance: CovarianceKind,
    pub kurtosis_residuals: KurtosisResiduals,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Base,
    Covariates,
    Interactions,
    Individual,
    Time,
    Endogenous,
}

/// Quantities recovered by the endogeneity-adjusted fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndogenousParts {
    /// `delta`, the coefficients on the attributes.
    pub delta: DVector<f64>,
    /// Conditional error variance `sigma_z^2`.
    pub sigma2_z: f64,
    /// Pooled attribute covariance `(nT)^{-1} sum_t Z_t' Z_t`.
    pub sigma_z: DMatrix<f64>,
    /// `Sigma_z delta`.
    pub sigma_z_eps: DVector<f64>,
    /// `sigma_z^2 + delta' Sigma_z delta`.
    pub sigma2: f64,
}

/// Output of any fit.
///
/// Parameters are ordered `(lambda_1..lambda_d, sigma^2, beta_1..beta_p)`;
/// `param_names` labels them. For the endogenous model `sigma^2` is
/// `sigma_z^2` and `beta` is `delta`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub model: ModelKind,
    pub theta_hat: Theta,
    pub beta: Option<DVector<f64>>,
    pub param_names: Vec<String>,
    pub loglik: f64,
    pub score_norm_at_opt: f64,
    pub i_hat: DMatrix<f64>,
    pub j_hat: DMatrix<f64>,
    pub cov_sandwich: DMatrix<f64>,
    pub std_errors: DVector<f64>,
    pub mu4_hat: f64,
    pub mu3_hat: f64,
    /// One column per period, in the fitted model's coordinates.
    pub residuals: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub n: usize,
    pub periods: usize,
    pub nobs: usize,
    /// `sigma^2 T / (T - 1)` for the fixed-effect models.
    pub sigma2_bias_corrected: Option<f64>,
    /// Recovered individual effects.
    pub omega: Option<DVector<f64>>,
    pub endogenous: Option<EndogenousParts>,
    /// Design columns removed by the collinearity guard.
    pub dropped_columns: Vec<usize>,
}

impl FitResult {
    pub fn lambda(&self) -> &DVector<f64> {
        &self.theta_hat.lambda
    }

    pub fn d(&self) -> usize {
        self.theta_hat.lambda.len()
    }

    /// All estimates in parameter order.
    pub fn estimates(&self) -> DVector<f64> {
        let d = self.d();
        let p = self.beta.as_ref().map(|b| b.len()).unwrap_or(0);
        let mut v = DVector::zeros(d + 1 + p);
        v.rows_mut(0, d).copy_from(&self.theta_hat.lambda);
        v[d] = self.theta_hat.sigma2;
        if let Some(b) = &self.beta {
            v.rows_mut(d + 1, p).copy_from(b);
        }
        v
    }

    /// Two-sided normal p-values of `estimate / se` (the variance entry is skipped).
    pub fn p_values(&self) -> DVector<f64> {
        let est = self.estimates();
        let d = self.d();
        DVector::from_fn(est.len(), |i, _| {
            if i == d {
                f64::NAN
            } else {
                let z = est[i] / self.std_errors[i];
                erfc(z.abs() / std::f64::consts::SQRT_2)
            }
        })
    }

    /// `theta` with `sigma^2` in the base parameterization.
    pub fn theta(&self) -> Theta {
        self.theta_hat.clone()
    }
}

pub(crate) fn param_names(d: usize, p: usize, sigma: &str, beta: &str) -> Vec<String> {
    let mut names: Vec<String> = (1..=d).map(|k| format!("lambda_{k}")).collect();
    names.push(sigma.to_string());
    names.extend((1..=p).map(|j| format!("{beta}_{j}")));
    names
}

/// Base profile over the data's weights.
pub(crate) fn base_profile<'a>(data: &'a MirData, trace: TraceMode) -> Result<Profile<'a>> {
    Profile::new(ProfileSpec {
        ops: (0..data.periods())
            .map(|t| data.weights.period(t).iter().map(Cow::Borrowed).collect())
            .collect(),
        responses: (0..data.periods()).map(|t| data.y_t(t)).collect(),
        regressors: None,
        within: false,
        trace,
    })
}

/// Fit the base model.
pub fn fit_qmle(data: &MirData, options: &FitOptions) -> Result<FitResult> {
    let profile = base_profile(data, options.trace)?;
    let opt = profile.maximize_from(&options.extra_starts, &options.optimizer)?;
    let mut fit = assemble(&profile, &opt, ModelKind::Base, options, Information::Expected)?;
    if options.kurtosis_residuals == KurtosisResiduals::InverseDelta {
        fit.mu4_hat = kurtosis_inverse_delta(data, &fit)?;
    }
    fit.n = data.n();
    Ok(fit)
}

fn kurtosis_inverse_delta(data: &MirData, fit: &FitResult) -> Result<f64> {
    let mut acc = 0.0;
    for t in 0..data.periods() {
        let f = crate::model::delta(data, fit.lambda(), t)?;
        acc += f.solve(&data.y_t(t)).iter().map(|v| v.powi(4)).sum::<f64>();
    }
    Ok(acc / data.nobs() as f64 / fit.theta_hat.sigma2.powi(2))
}

pub(crate) enum Information {
    /// Plug-in expected information with the kurtosis-adjusted score variance.
    Expected,
    /// Observed information of the profiled likelihood, `J = I`.
    Observed,
}

/// Turn an optimum of `profile` into a populated [`FitResult`].
pub(crate) fn assemble(
    profile: &Profile<'_>,
    opt: &Optimum,
    model: ModelKind,
    options: &FitOptions,
    info: Information,
) -> Result<FitResult> {
    let lambda = opt.x.clone();
    let sigma2 = profile.sigma2(&lambda);
    if !(sigma2 > 0.0) {
        return Err(MirError::DegenerateResponse);
    }
    let beta = (profile.p > 0).then(|| profile.beta(&lambda));
    let residuals = profile.residuals(&lambda);
    let count = residuals.len() as f64;
    let mu4_hat = residuals.iter().map(|e| e.powi(4)).sum::<f64>() / count / (sigma2 * sigma2);
    let mu3_hat = residuals.iter().map(|e| e.powi(3)).sum::<f64>() / count / sigma2.powf(1.5);
    let (i_hat, j_hat) = match info {
        Information::Expected => {
            let ops: Vec<Vec<&WeightMatrix>> = (0..profile.periods()).map(|t| profile.period_ops(t)).collect();
            let regs: Option<Vec<DMatrix<f64>>> =
                beta.as_ref().map(|_| (0..profile.periods()).map(|t| profile.regressors(t)).collect());
            lq_information(&ops, &lambda, sigma2, regs.as_deref(), beta.as_ref(), mu3_hat, mu4_hat)?
        }
        Information::Observed => {
            let i = observed_information(profile, &lambda, sigma2)?;
            (i.clone(), i)
        }
    };
    let cov = covariance(&i_hat, &j_hat, profile.nobs, options.covariance)?;
    let std_errors = DVector::from_fn(cov.nrows(), |i, _| cov[(i, i)].max(0.0).sqrt());
    let p = profile.p;
    Ok(FitResult {
        model,
        theta_hat: Theta::new(lambda, sigma2),
        beta,
        param_names: param_names(profile.d, p, "sigma2", "beta"),
        loglik: opt.value,
        score_norm_at_opt: opt.projected_grad_norm,
        i_hat,
        j_hat,
        cov_sandwich: cov,
        std_errors,
        mu4_hat,
        mu3_hat,
        residuals,
        converged: opt.converged,
        iterations: opt.iterations,
        n: profile.m,
        periods: profile.periods(),
        nobs: profile.nobs as usize,
        sigma2_bias_corrected: None,
        omega: None,
        endogenous: None,
        dropped_columns: Vec::new(),
    })
}

/// `N^{-1} I^{-1} J I^{-1}` or `N^{-1} I^{-1}`.
pub(crate) fn covariance(i: &DMatrix<f64>, j: &DMatrix<f64>, nobs: f64, kind: CovarianceKind) -> Result<DMatrix<f64>> {
    let inv = i
        .clone()
        .try_inverse()
        .ok_or_else(|| MirError::Numerical("information matrix is singular".into()))?;
    let cov = match kind {
        CovarianceKind::Sandwich => &inv * j * &inv / nobs,
        CovarianceKind::InverseInformation => inv / nobs,
    };
    Ok((&cov + cov.transpose()) * 0.5)
}

/// Plug-in `I` and `J` for scores that are linear-quadratic in the standardized
/// errors `e_t = eps_t / sigma`.
///
/// Each score component is `sum_t [c_t' e_t + e_t' A_t e_t - tr A_t]`, with
/// `A = s(W_k Delta^{-1})`, `c = W_k Delta^{-1} X beta / sigma` for `lambda_k`,
/// `A = I / (2 sigma^2)` for `sigma^2` and `c = X_j / sigma` for `beta_j`.
/// Then `N I_ab = sum_t c_a'c_b + 2 tr(A_a A_b)` and `J` adds
/// `(mu4 - 3) sum_i A_a,ii A_b,ii + mu3 sum_i (c_a,i A_b,ii + c_b,i A_a,ii)`.
pub(crate) fn lq_information(
    ops: &[Vec<&WeightMatrix>],
    lambda: &DVector<f64>,
    sigma2: f64,
    regressors: Option<&[DMatrix<f64>]>,
    beta: Option<&DVector<f64>>,
    mu3: f64,
    mu4: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let periods = ops.len();
    let d = lambda.len();
    let p = beta.map(|b| b.len()).unwrap_or(0);
    let q = d + 1 + p;
    let sigma = sigma2.sqrt();
    let hs = 1.0 / (2.0 * sigma2);
    let per_t = par::map_range(periods, |t| -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let f = factor_delta(&ops[t], lambda, t)?;
        let m = f.dim();
        let inv = f.inverse();
        let prods: Vec<DMatrix<f64>> = ops[t].iter().map(|w| w.mul_mat(&inv)).collect();
        let trans: Vec<DMatrix<f64>> = prods.iter().map(|p| p.transpose()).collect();
        let diags: Vec<DVector<f64>> = prods.iter().map(|p| p.diagonal()).collect();
        let (x, mean) = match (regressors, beta) {
            (Some(r), Some(b)) => (Some(&r[t]), Some(&r[t] * b)),
            _ => (None, None),
        };
        let c_lam: Vec<Option<DVector<f64>>> =
            prods.iter().map(|pk| mean.as_ref().map(|mu| pk * mu / sigma)).collect();
        let mut i_t = DMatrix::zeros(q, q);
        let mut j_t = DMatrix::zeros(q, q);
        let mf = m as f64;
        for k in 0..d {
            for l in 0..=k {
                let tr_uu = 0.5 * (prods[k].dot(&trans[l]) + prods[k].dot(&prods[l]));
                let mut ii = 2.0 * tr_uu;
                let mut extra = (mu4 - 3.0) * diags[k].dot(&diags[l]);
                if let (Some(ck), Some(cl)) = (&c_lam[k], &c_lam[l]) {
                    ii += ck.dot(cl);
                    extra += mu3 * (ck.dot(&diags[l]) + cl.dot(&diags[k]));
                }
                i_t[(k, l)] = ii;
                j_t[(k, l)] = ii + extra;
            }
            let tr = diags[k].sum();
            let mut extra = (mu4 - 3.0) * tr * hs;
            if let Some(ck) = &c_lam[k] {
                extra += mu3 * ck.sum() * hs;
            }
            i_t[(d, k)] = 2.0 * tr * hs;
            j_t[(d, k)] = i_t[(d, k)] + extra;
        }
        i_t[(d, d)] = 2.0 * mf * hs * hs;
        j_t[(d, d)] = i_t[(d, d)] + (mu4 - 3.0) * mf * hs * hs;
        if let Some(x) = x {
            let xs = x / sigma;
            for j in 0..p {
                let cj = xs.column(j);
                for k in 0..d {
                    let ck = c_lam[k].as_ref().expect("mean present with regressors");
                    let v = ck.dot(&cj);
                    i_t[(d + 1 + j, k)] = v;
                    j_t[(d + 1 + j, k)] = v + mu3 * cj.dot(&diags[k]);
                }
                j_t[(d + 1 + j, d)] = mu3 * cj.sum() * hs;
                for l in 0..=j {
                    let v = cj.dot(&xs.column(l));
                    i_t[(d + 1 + j, d + 1 + l)] = v;
                    j_t[(d + 1 + j, d + 1 + l)] = v;
                }
            }
        }
        Ok((i_t, j_t))
    });
    let mut i_hat = DMatrix::zeros(q, q);
    let mut j_hat = DMatrix::zeros(q, q);
    for r in per_t {
        let (a, b) = r?;
        i_hat += a;
        j_hat += b;
    }
    let nobs: f64 = ops.iter().map(|o| o.first().map(|w| w.dim()).unwrap_or(0) as f64).sum();
    symmetrize_lower(&mut i_hat);
    symmetrize_lower(&mut j_hat);
    Ok((i_hat / nobs, j_hat / nobs))
}

fn symmetrize_lower(m: &mut DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            m[(i, j)] = m[(j, i)];
        }
    }
}

/// `-N^{-1}` times the Hessian of the likelihood in `(lambda, sigma^2, beta)`
/// after the nuisance transform of `profile`.
pub(crate) fn observed_information(profile: &Profile<'_>, lambda: &DVector<f64>, sigma2: f64) -> Result<DMatrix<f64>> {
    let d = profile.d;
    let p = profile.p;
    let q = d + 1 + p;
    let (_, pairs) = profile.trace_sums(lambda)?;
    let w = profile.weights_vector(lambda);
    let cw = &profile.cross * &w;
    let rss = w.dot(&cw);
    let n = profile.nobs;
    let s4 = sigma2 * sigma2;
    // column index in `cross` for each parameter slot except sigma^2
    let col = |a: usize| if a < d { 1 + a } else { a };
    let mut h = DMatrix::zeros(q, q);
    for a in 0..q {
        for b in 0..=a {
            let v = if a == d && b == d {
                -n / (2.0 * s4) + rss / (s4 * sigma2)
            } else if a == d || b == d {
                let other = if a == d { b } else { a };
                cw[col(other)] / s4
            } else {
                let mut v = profile.cross[(col(a), col(b))] / sigma2;
                if a < d && b < d {
                    v += pairs[(a, b)];
                }
                v
            };
            h[(a, b)] = v;
            h[(b, a)] = v;
        }
    }
    Ok(h / n)
}

/// `I_hat` for the base model at `theta`.
pub fn info_i(data: &MirData, theta: &Theta) -> Result<DMatrix<f64>> {
    let ops: Vec<Vec<&WeightMatrix>> = (0..data.periods()).map(|t| data.weights.period(t).iter().collect()).collect();
    Ok(lq_information(&ops, &theta.lambda, theta.sigma2, None, None, 0.0, 3.0)?.0)
}

/// `J_hat` for the base model at `theta` with fourth standardized moment `mu4`.
pub fn info_j(data: &MirData, theta: &Theta, mu4: f64) -> Result<DMatrix<f64>> {
    let ops: Vec<Vec<&WeightMatrix>> = (0..data.periods()).map(|t| data.weights.period(t).iter().collect()).collect();
    Ok(lq_information(&ops, &theta.lambda, theta.sigma2, None, None, 0.0, mu4)?.1)
}

/// `(nT)^{-1} sum e^4 / sigma^4`.
pub fn mu4_hat(residuals: &DMatrix<f64>, sigma2: f64) -> f64 {
    residuals.iter().map(|e| e.powi(4)).sum::<f64>() / residuals.len() as f64 / (sigma2 * sigma2)
}

/// `B_t = sum_k lambda_k W_k^(t)`.
pub fn estimate_b(weights: &WeightSet, lambda: &DVector<f64>, t: usize) -> DMatrix<f64> {
    let n = weights.n();
    let mut b = DMatrix::zeros(n, n);
    for (k, &l) in lambda.iter().enumerate() {
        weights.get(k, t).add_scaled_to(l, &mut b);
    }
    b
}
