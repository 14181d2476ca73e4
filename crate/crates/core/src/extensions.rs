//! Model variants built on the shared concentrated likelihood: exogenous
//! covariates, covariate-weight interactions, individual fixed effects,
//! individual and time fixed effects, and endogenous attributes.

use std::borrow::Cow;
use std::io::Read;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MirError, Result};
use crate::estimate::{assemble, param_names, EndogenousParts, FitOptions, FitResult, Information, ModelKind};
use crate::model::MirData;
use crate::par;
use crate::profile::{Profile, ProfileSpec, MAX_REGRESSOR_CONDITION};
use crate::weights::{read_long_panel, AttributePanel, WeightMatrix, WeightSet};

/// Condition number above which an interaction column is dropped.
pub const INTERACTION_CONDITION_LIMIT: f64 = 1e10;

/// Exogenous covariates `X_t` (`n x p`) for each period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariatePanel {
    x: Vec<DMatrix<f64>>,
}

impl CovariatePanel {
    pub fn new(x: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = x.first().ok_or_else(|| MirError::InvalidInput("covariate panel has no periods".into()))?;
        let (n, p) = first.shape();
        if p == 0 {
            return Err(MirError::InvalidInput("covariate panel has no columns".into()));
        }
        for (t, xt) in x.iter().enumerate() {
            if xt.shape() != (n, p) {
                return Err(MirError::Dimension { what: format!("covariates at t={}", t + 1), expected: n * p, found: xt.len() });
            }
            if xt.iter().any(|v| !v.is_finite()) {
                return Err(MirError::InvalidInput(format!("non-finite covariate at t={}", t + 1)));
            }
        }
        Ok(Self { x })
    }

    /// Long-format CSV with header `j,t,i,value` (1-based indices).
    pub fn from_long_csv<R: Read>(reader: R) -> Result<Self> {
        let values = read_long_panel(reader, "j")?;
        let p = values.len();
        let periods = values[0].len();
        let n = values[0][0].len();
        Self::new((0..periods).map(|t| DMatrix::from_fn(n, p, |i, j| values[j][t][i])).collect())
    }

    pub fn to_long_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["j", "t", "i", "value"])?;
        for j in 0..self.p() {
            for (t, xt) in self.x.iter().enumerate() {
                for i in 0..self.n() {
                    w.write_record(&[(j + 1).to_string(), (t + 1).to_string(), (i + 1).to_string(), format!("{:e}", xt[(i, j)])])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.x[0].nrows()
    }

    pub fn p(&self) -> usize {
        self.x[0].ncols()
    }

    pub fn periods(&self) -> usize {
        self.x.len()
    }

    pub fn x_t(&self, t: usize) -> &DMatrix<f64> {
        &self.x[t]
    }

    /// `sum_t X_t' X_t`.
    pub fn pooled_gram(&self) -> DMatrix<f64> {
        self.x.iter().fold(DMatrix::zeros(self.p(), self.p()), |acc, xt| acc + xt.transpose() * xt)
    }

    fn check_against(&self, data: &MirData) -> Result<()> {
        if self.n() != data.n() || self.periods() != data.periods() {
            return Err(MirError::Dimension {
                what: "covariate panel vs responses (n * T)".into(),
                expected: data.n() * data.periods(),
                found: self.n() * self.periods(),
            });
        }
        Ok(())
    }
}

fn borrowed_ops(data: &MirData) -> Vec<Vec<Cow<'_, WeightMatrix>>> {
    (0..data.periods()).map(|t| data.weights.period(t).iter().map(Cow::Borrowed).collect()).collect()
}

fn responses(data: &MirData) -> Vec<DVector<f64>> {
    (0..data.periods()).map(|t| data.y_t(t)).collect()
}

fn optimize(spec: ProfileSpec<'_>, options: &FitOptions, model: ModelKind, info: Information) -> Result<FitResult> {
    let profile = Profile::new(spec)?;
    let opt = profile.maximize_from(&options.extra_starts, &options.optimizer)?;
    assemble(&profile, &opt, model, options, info)
}

/// `Y_t = B_t Y_t + X_t beta + eps_t`.
pub fn fit_covariates(data: &MirData, x: &CovariatePanel, options: &FitOptions) -> Result<FitResult> {
    x.check_against(data)?;
    let spec = ProfileSpec {
        ops: borrowed_ops(data),
        responses: responses(data),
        regressors: Some((0..data.periods()).map(|t| x.x_t(t).clone()).collect()),
        within: false,
        trace: options.trace,
    };
    let mut fit = optimize(spec, options, ModelKind::Covariates, Information::Expected)?;
    fit.n = data.n();
    Ok(fit)
}

/// `[X_t, W_1 X_t, ..., W_d X_t]`; column `p k + j` is `W_k X_tj` (`k = 0` is `X_t`).
pub fn build_interaction_design(weights: &WeightSet, x: &CovariatePanel, t: usize) -> DMatrix<f64> {
    let (n, p, d) = (x.n(), x.p(), weights.d());
    let xt = x.x_t(t);
    let mut out = DMatrix::zeros(n, p * (d + 1));
    out.columns_mut(0, p).copy_from(xt);
    for k in 0..d {
        out.columns_mut(p * (k + 1), p).copy_from(&weights.get(k, t).mul_mat(xt));
    }
    out
}

fn condition(g: &DMatrix<f64>) -> f64 {
    let eig = g.clone().symmetric_eigen();
    let (max, min) = (eig.eigenvalues.max(), eig.eigenvalues.min());
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// Keep columns in order while the pooled Gram stays below `limit` in condition number.
fn guard_columns(gram: &DMatrix<f64>, limit: f64) -> (Vec<usize>, Vec<usize>) {
    let mut kept: Vec<usize> = Vec::new();
    let mut dropped = Vec::new();
    for c in 0..gram.ncols() {
        let mut trial = kept.clone();
        trial.push(c);
        let sub = gram.select_rows(&trial).select_columns(&trial);
        if condition(&sub) <= limit {
            kept = trial;
        } else {
            dropped.push(c);
        }
    }
    (kept, dropped)
}

/// Covariates interacted with every weight matrix.
///
/// Columns that would push the pooled Gram condition number above
/// [`INTERACTION_CONDITION_LIMIT`] are dropped and listed in `dropped_columns`.
pub fn fit_interactions(data: &MirData, x: &CovariatePanel, options: &FitOptions) -> Result<FitResult> {
    x.check_against(data)?;
    let (p, d) = (x.p(), data.d());
    let designs: Vec<DMatrix<f64>> = par::map_range(data.periods(), |t| build_interaction_design(&data.weights, x, t));
    let gram = designs.iter().fold(DMatrix::zeros(p * (d + 1), p * (d + 1)), |acc, xt| acc + xt.transpose() * xt);
    let (kept, dropped) = guard_columns(&gram, INTERACTION_CONDITION_LIMIT);
    if kept.is_empty() {
        return Err(MirError::RankDeficient("every interaction column is degenerate".into()));
    }
    let spec = ProfileSpec {
        ops: borrowed_ops(data),
        responses: responses(data),
        regressors: Some(designs.iter().map(|xt| xt.select_columns(&kept)).collect()),
        within: false,
        trace: options.trace,
    };
    let mut fit = optimize(spec, options, ModelKind::Interactions, Information::Expected)?;
    let mut names = param_names(d, 0, "sigma2", "");
    names.extend(kept.iter().map(|&c| format!("beta_{}_{}", c % p + 1, c / p)));
    fit.param_names = names;
    fit.dropped_columns = dropped;
    fit.n = data.n();
    Ok(fit)
}

/// `Y_t = B_t Y_t + X_t beta + omega + eps_t` with `omega` profiled out.
///
/// Standard errors use the observed information of the profiled likelihood.
/// `sigma2_bias_corrected` is `sigma^2 T / (T - 1)`; `omega` is recovered as
/// `T^{-1} sum_t (Delta_t Y_t - X_t beta)`.
pub fn fit_individual_effects(data: &MirData, x: Option<&CovariatePanel>, options: &FitOptions) -> Result<FitResult> {
    let periods = data.periods();
    if periods < 2 {
        return Err(MirError::InvalidInput("individual effects need T >= 2".into()));
    }
    if let Some(x) = x {
        x.check_against(data)?;
    }
    let spec = ProfileSpec {
        ops: borrowed_ops(data),
        responses: responses(data),
        regressors: x.map(|x| (0..periods).map(|t| x.x_t(t).clone()).collect()),
        within: true,
        trace: options.trace,
    };
    let mut fit = optimize(spec, options, ModelKind::Individual, Information::Observed)?;
    let omega = recover_omega(data, x, fit.lambda(), fit.beta.as_ref());
    let tf = periods as f64;
    fit.sigma2_bias_corrected = Some(fit.theta_hat.sigma2 * tf / (tf - 1.0));
    fit.omega = Some(omega);
    fit.n = data.n();
    Ok(fit)
}

/// `omega = T^{-1} sum_t (Delta_t(lambda) Y_t - X_t beta)`.
pub fn recover_omega(
    data: &MirData,
    x: Option<&CovariatePanel>,
    lambda: &DVector<f64>,
    beta: Option<&DVector<f64>>,
) -> DVector<f64> {
    let mut omega = DVector::zeros(data.n());
    for t in 0..data.periods() {
        let y = data.y_t(t);
        omega += &y;
        for (k, w) in data.weights.period(t).iter().enumerate() {
            omega -= w.mul_vec(&y) * lambda[k];
        }
        if let (Some(x), Some(b)) = (x, beta) {
            omega -= x.x_t(t) * b;
        }
    }
    omega / data.periods() as f64
}

/// Orthonormal basis of the complement of `1` (`n x (n - 1)`), Helmert form.
pub fn helmert_basis(n: usize) -> DMatrix<f64> {
    let mut f = DMatrix::zeros(n, n.saturating_sub(1));
    for j in 1..n {
        let s = 1.0 / ((j * (j + 1)) as f64).sqrt();
        for i in 0..j {
            f[(i, j - 1)] = s;
        }
        f[(j, j - 1)] = -(j as f64) * s;
    }
    f
}

/// Individual and time effects removed by `F' . F` and the within transform.
///
/// Requires row-stochastic weights so that `F' W = F' W F F'`. The fit lives
/// on the `(n - 1)`-dimensional transformed system; `omega` is not recovered.
pub fn fit_time_effects(data: &MirData, x: Option<&CovariatePanel>, options: &FitOptions) -> Result<FitResult> {
    let (n, periods) = (data.n(), data.periods());
    if periods < 2 || n < 3 {
        return Err(MirError::InvalidInput("time effects need T >= 2 and n >= 3".into()));
    }
    for t in 0..periods {
        for (k, w) in data.weights.period(t).iter().enumerate() {
            w.check_row_stochastic().map_err(|e| {
                MirError::InvalidInput(format!("weight k={} t={} is not row-stochastic: {e}", k + 1, t + 1))
            })?;
        }
    }
    if let Some(x) = x {
        x.check_against(data)?;
    }
    let f = helmert_basis(n);
    let ft = f.transpose();
    let ops: Vec<Vec<Cow<'_, WeightMatrix>>> = par::map_range(periods, |t| {
        data.weights
            .period(t)
            .iter()
            .map(|w| Cow::Owned(WeightMatrix::Dense(&ft * w.mul_mat(&f))))
            .collect()
    });
    let spec = ProfileSpec {
        ops,
        responses: (0..periods).map(|t| &ft * data.y_t(t)).collect(),
        regressors: x.map(|x| (0..periods).map(|t| &ft * x.x_t(t)).collect()),
        within: true,
        trace: options.trace,
    };
    let mut fit = optimize(spec, options, ModelKind::Time, Information::Observed)?;
    let tf = periods as f64;
    fit.sigma2_bias_corrected = Some(fit.theta_hat.sigma2 * tf / (tf - 1.0));
    fit.n = n;
    Ok(fit)
}

/// Endogeneity-adjusted fit: `Y_t = B_t Y_t + Z_t delta + e_t`.
///
/// `theta_hat.sigma2` holds `sigma_z^2` and `beta` holds `delta`; the error
/// variance and covariance with the attributes are in `endogenous`.
pub fn fit_endogenous(data: &MirData, z: &AttributePanel, options: &FitOptions) -> Result<FitResult> {
    if z.n() != data.n() || z.periods() != data.periods() {
        return Err(MirError::Dimension {
            what: "attribute panel vs responses (n * T)".into(),
            expected: data.n() * data.periods(),
            found: z.n() * z.periods(),
        });
    }
    let zs: Vec<DMatrix<f64>> = (0..data.periods()).map(|t| z.period_matrix(t)).collect();
    let spec = ProfileSpec {
        ops: borrowed_ops(data),
        responses: responses(data),
        regressors: Some(zs.clone()),
        within: false,
        trace: options.trace,
    };
    let mut fit = optimize(spec, options, ModelKind::Endogenous, Information::Expected)?;
    let delta = fit.beta.clone().expect("endogenous fit has attribute coefficients");
    let dz = delta.len();
    let sigma_z = zs.iter().fold(DMatrix::zeros(dz, dz), |acc, zt| acc + zt.transpose() * zt) / data.nobs() as f64;
    let sigma_z_eps = &sigma_z * &delta;
    let sigma2_z = fit.theta_hat.sigma2;
    fit.endogenous = Some(EndogenousParts {
        sigma2: sigma2_z + delta.dot(&sigma_z_eps),
        delta,
        sigma2_z,
        sigma_z,
        sigma_z_eps,
    });
    fit.param_names = param_names(data.d(), dz, "sigma2_z", "delta");
    fit.n = data.n();
    Ok(fit)
}

/// Condition number of the pooled Gram used by the covariate fits.
pub fn covariate_condition(x: &CovariatePanel) -> f64 {
    condition(&x.pooled_gram())
}

/// Whether the pooled covariate Gram passes the fit-time check.
pub fn covariates_well_conditioned(x: &CovariatePanel) -> bool {
    covariate_condition(x) <= MAX_REGRESSOR_CONDITION
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimate::fit_qmle;
    use crate::model::factor_delta;
    use crate::weights::{build_weight_set, AttributePanel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn normal(rng: &mut ChaCha8Rng) -> f64 {
        rng.sample(StandardNormal)
    }

    fn weights(n: usize, periods: usize, d: usize, seed: u64) -> WeightSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..d).map(|_| (0..periods).map(|_| (0..n).map(|_| normal(&mut rng)).collect()).collect()).collect();
        build_weight_set(&AttributePanel::continuous(values).unwrap(), crate::weights::default_density(n)).unwrap()
    }

    fn covariates(n: usize, periods: usize, p: usize, seed: u64) -> CovariatePanel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CovariatePanel::new((0..periods).map(|_| DMatrix::from_fn(n, p, |_, _| normal(&mut rng))).collect()).unwrap()
    }

    /// `Y_t = Delta_t^{-1} (mean_t + eps_t)`.
    fn simulate(ws: &WeightSet, lambda: &[f64], mean: impl Fn(usize) -> DVector<f64>, seed: u64) -> MirData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lam = DVector::from_column_slice(lambda);
        let mut y = DMatrix::zeros(ws.n(), ws.periods());
        for t in 0..ws.periods() {
            let eps = DVector::from_fn(ws.n(), |_, _| normal(&mut rng));
            let ops: Vec<&WeightMatrix> = ws.period(t).iter().collect();
            y.set_column(t, &factor_delta(&ops, &lam, t).unwrap().solve(&(mean(t) + eps)));
        }
        MirData::new(y, ws.clone()).unwrap()
    }

    /// Full Gaussian log-likelihood with mean `m_t` subtracted from `Delta_t Y_t`.
    fn full_loglik(data: &MirData, lambda: &DVector<f64>, sigma2: f64, mean: impl Fn(usize) -> DVector<f64>) -> f64 {
        let nobs = data.nobs() as f64;
        let mut ll = -0.5 * nobs * (2.0 * std::f64::consts::PI * sigma2).ln();
        for t in 0..data.periods() {
            let ops: Vec<&WeightMatrix> = data.weights.period(t).iter().collect();
            let f = factor_delta(&ops, lambda, t).unwrap();
            ll += f.log_abs_det;
            let y = data.y_t(t);
            let e = &f.delta * &y - mean(t);
            ll -= e.norm_squared() / (2.0 * sigma2);
        }
        ll
    }

    fn covariate_profile<'a>(data: &'a MirData, x: &CovariatePanel, within: bool) -> Profile<'a> {
        Profile::new(ProfileSpec {
            ops: borrowed_ops(data),
            responses: responses(data),
            regressors: Some((0..data.periods()).map(|t| x.x_t(t).clone()).collect()),
            within,
            trace: Default::default(),
        })
        .unwrap()
    }

    #[test]
    fn zero_lambda_gives_pooled_ols() {
        let ws = weights(12, 5, 2, 1);
        let x = covariates(12, 5, 3, 2);
        let data = simulate(&ws, &[0.2, 0.1], |t| x.x_t(t) * DVector::from_vec(vec![1.0, -0.5, 0.3]), 3);
        let profile = covariate_profile(&data, &x, false);
        let beta = profile.beta(&DVector::zeros(2));
        let mut xty = DVector::zeros(3);
        for t in 0..5 {
            xty += x.x_t(t).transpose() * data.y_t(t);
        }
        let ols = x.pooled_gram().cholesky().unwrap().solve(&xty);
        assert!((beta - ols).amax() < 1e-10);
    }

    #[test]
    fn covariate_profile_matches_full_likelihood() {
        let ws = weights(10, 4, 2, 4);
        let x = covariates(10, 4, 2, 5);
        let data = simulate(&ws, &[0.3, -0.2], |t| x.x_t(t) * DVector::from_vec(vec![1.0, 0.5]), 6);
        let profile = covariate_profile(&data, &x, false);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let lam = DVector::from_fn(2, |_, _| rng.random_range(-0.45..0.45));
            let beta = profile.beta(&lam);
            let s2 = profile.sigma2(&lam);
            let full = full_loglik(&data, &lam, s2, |t| x.x_t(t) * &beta);
            assert!((profile.loglik(&lam).unwrap() - full).abs() < 1e-9 * full.abs().max(1.0));
        }
    }

    #[test]
    fn individual_profile_matches_full_likelihood_and_omega() {
        let ws = weights(9, 6, 2, 8);
        let x = covariates(9, 6, 1, 9);
        let omega0 = DVector::from_fn(9, |i, _| i as f64 * 0.3);
        let data = simulate(&ws, &[0.25, 0.1], |t| x.x_t(t) * 0.7 + &omega0, 10);
        let profile = covariate_profile(&data, &x, true);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let lam = DVector::from_fn(2, |_, _| rng.random_range(-0.45..0.45));
            let beta = profile.beta(&lam);
            let omega = recover_omega(&data, Some(&x), &lam, Some(&beta));
            let s2 = profile.sigma2(&lam);
            let full = full_loglik(&data, &lam, s2, |t| x.x_t(t) * &beta + &omega);
            assert!((profile.loglik(&lam).unwrap() - full).abs() < 1e-9 * full.abs().max(1.0));
        }
    }

    #[test]
    fn omega_at_zero_is_time_mean() {
        let data = simulate(&weights(7, 4, 1, 12), &[0.2], |_| DVector::zeros(7), 13);
        let omega = recover_omega(&data, None, &DVector::zeros(1), None);
        let mean = data.y.column_mean();
        assert!((omega - mean).amax() < 1e-14);
    }

    #[test]
    fn individual_effects_bias_correction_and_shift() {
        let ws = weights(20, 8, 2, 14);
        let omega0 = DVector::from_fn(20, |i, _| (i as f64).sin());
        let data = simulate(&ws, &[0.3, 0.2], |_| omega0.clone(), 15);
        let fit = fit_individual_effects(&data, None, &FitOptions::default()).unwrap();
        assert!(fit.converged);
        assert_eq!(fit.sigma2_bias_corrected.unwrap(), fit.theta_hat.sigma2 * 8.0 / 7.0);
        let c = 2.5;
        let shifted = MirData::new(data.y.add_scalar(c), ws.clone()).unwrap();
        let fit2 = fit_individual_effects(&shifted, None, &FitOptions::default()).unwrap();
        assert!((fit.lambda() - fit2.lambda()).amax() < 1e-6);
        let expect = fit.omega.as_ref().unwrap().add_scalar((1.0 - fit.lambda().sum()) * c);
        assert!((fit2.omega.unwrap() - expect).amax() < 1e-5);
        let one = WeightSet::from_matrices(vec![ws.period(0).to_vec()]).unwrap();
        let single = MirData::new(data.y.columns(0, 1).into_owned(), one).unwrap();
        assert!(fit_individual_effects(&single, None, &FitOptions::default()).is_err());
    }

    #[test]
    fn helmert_identities() {
        for n in [3usize, 10, 50] {
            let f = helmert_basis(n);
            assert!((f.transpose() * &f - DMatrix::identity(n - 1, n - 1)).amax() < 1e-12);
            let j = DMatrix::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
            assert!((&f * f.transpose() - j).amax() < 1e-12);
        }
    }

    #[test]
    fn transformed_delta_inverse_identity() {
        let ws = weights(8, 1, 2, 16);
        let lam = DVector::from_vec(vec![0.4, -0.3]);
        let f = helmert_basis(8);
        let ops: Vec<&WeightMatrix> = ws.period(0).iter().collect();
        let inv = factor_delta(&ops, &lam, 0).unwrap().inverse();
        let mut star = DMatrix::identity(7, 7);
        for (w, l) in ops.iter().zip(lam.iter()) {
            star -= f.transpose() * w.mul_mat(&f) * *l;
        }
        let prod = star * (f.transpose() * inv * &f);
        assert!((prod - DMatrix::identity(7, 7)).amax() < 1e-10);
    }

    #[test]
    fn time_effects_are_removed_exactly() {
        let ws = weights(15, 6, 2, 17);
        let data = simulate(&ws, &[0.3, 0.2], |_| DVector::zeros(15), 18);
        let fit = fit_time_effects(&data, None, &FitOptions::default()).unwrap();
        let mut y = data.y.clone();
        for t in 0..6 {
            y.column_mut(t).add_scalar_mut(3.0 * t as f64 - 4.0);
        }
        let fit2 = fit_time_effects(&MirData::new(y, ws).unwrap(), None, &FitOptions::default()).unwrap();
        assert!((fit.lambda() - fit2.lambda()).amax() < 1e-9);
        assert!((fit.theta_hat.sigma2 - fit2.theta_hat.sigma2).abs() < 1e-9);
        assert_eq!(fit.nobs, 14 * 6);
        assert_eq!(fit.sigma2_bias_corrected.unwrap(), fit.theta_hat.sigma2 * 6.0 / 5.0);
    }

    #[test]
    fn time_effects_need_row_stochastic_weights() {
        let ws = weights(6, 3, 1, 19);
        let mats = (0..3).map(|t| vec![WeightMatrix::Dense(ws.get(0, t).to_dense() * 0.5)]).collect();
        let data = simulate(&WeightSet::from_matrices(mats).unwrap(), &[0.1], |_| DVector::zeros(6), 20);
        assert!(matches!(fit_time_effects(&data, None, &FitOptions::default()), Err(MirError::InvalidInput(_))));
    }

    #[test]
    fn interaction_design_layout() {
        let w = DMatrix::from_row_slice(3, 3, &[0.0, 0.5, 0.5, 1.0, 0.0, 0.0, 0.25, 0.75, 0.0]);
        let ws = WeightSet::from_dense(vec![vec![w]]).unwrap();
        let x = CovariatePanel::new(vec![DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])]).unwrap();
        let design = build_interaction_design(&ws, &x, 0);
        // W X by hand
        let expect = DMatrix::from_row_slice(3, 4, &[1.0, 2.0, 4.0, 5.0, 3.0, 4.0, 1.0, 2.0, 5.0, 6.0, 2.5, 3.5]);
        assert_eq!(design, expect);
        let none = WeightSet::from_matrices(vec![Vec::new()]);
        if let Ok(none) = none {
            assert_eq!(build_interaction_design(&none, &x, 0), *x.x_t(0));
        }
    }

    #[test]
    fn interactions_nest_covariates_and_drop_duplicates() {
        let ws = weights(20, 6, 2, 21);
        let x = covariates(20, 6, 2, 22);
        let data = simulate(&ws, &[0.3, 0.1], |t| x.x_t(t) * DVector::from_vec(vec![1.0, -1.0]), 23);
        let cov = fit_covariates(&data, &x, &FitOptions::default()).unwrap();
        let int = fit_interactions(&data, &x, &FitOptions::default()).unwrap();
        assert!(int.loglik >= cov.loglik - 1e-8);
        assert!(int.dropped_columns.is_empty());
        assert_eq!(int.param_names[3], "beta_1_0");
        assert_eq!(int.param_names.last().unwrap(), "beta_2_2");
        // W_2 = I repeats the main-effect block
        let eye = WeightMatrix::from_dense(&DMatrix::identity(20, 20));
        let mats = (0..6).map(|t| vec![ws.get(0, t).clone(), eye.clone()]).collect();
        let dup = MirData::new(data.y.clone(), WeightSet::from_matrices(mats).unwrap()).unwrap();
        let int = fit_interactions(&dup, &x, &FitOptions::default()).unwrap();
        assert_eq!(int.dropped_columns, vec![4, 5]);
        assert_eq!(int.beta.unwrap().len(), 4);
    }

    #[test]
    fn endogenous_recovery_identity() {
        let ws = weights(20, 8, 2, 24);
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let z = AttributePanel::continuous((0..2).map(|_| (0..8).map(|_| (0..20).map(|_| normal(&mut rng)).collect()).collect()).collect()).unwrap();
        let data = simulate(&ws, &[0.2, 0.2], |t| z.period_matrix(t) * DVector::from_vec(vec![0.5, 0.0]), 26);
        let fit = fit_endogenous(&data, &z, &FitOptions::default()).unwrap();
        let e = fit.endogenous.as_ref().unwrap();
        assert_eq!(e.sigma2, e.sigma2_z + e.delta.dot(&(&e.sigma_z * &e.delta)));
        assert!((&e.sigma_z_eps - &e.sigma_z * &e.delta).amax() == 0.0);
        assert_eq!(fit.param_names[2], "sigma2_z");
        assert_eq!(fit.param_names[3], "delta_1");
        assert!((e.delta[0] - 0.5).abs() < 4.0 * fit.std_errors[3]);
        let base = fit_qmle(&data, &FitOptions::default()).unwrap();
        assert!(fit.loglik >= base.loglik - 1e-8);
    }

    #[test]
    fn covariate_csv_round_trip() {
        let x = covariates(4, 3, 2, 27);
        let mut buf = Vec::new();
        x.to_long_csv(&mut buf).unwrap();
        let back = CovariatePanel::from_long_csv(buf.as_slice()).unwrap();
        assert_eq!(back, x);
        assert!(covariates_well_conditioned(&x));
    }
}
