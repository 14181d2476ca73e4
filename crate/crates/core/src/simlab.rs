//! Monte Carlo studies.
//!
//! A [`SimConfig`] fixes the panel size, the true coefficients, the error law
//! and the data-generating setting; [`run_study`] replicates it and reports
//! bias, standard errors, selection accuracy or rejection rates.
//!
//! Every random draw comes from a ChaCha20 stream keyed by
//! `(base_seed, replication, role)`, so a replication's data do not depend on
//! which thread generated it or in which order.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MirError, Result};
use crate::estimate::{fit_qmle, FitOptions, FitResult};
use crate::extensions::{fit_covariates, fit_endogenous, fit_individual_effects, fit_time_effects, CovariatePanel};
use crate::gof::{influence_test, GofOptions};
use crate::model::{factor_delta, Feasibility, MirData, DEFAULT_VARSIGMA};
use crate::par;
use crate::select::{select_with, SelectOptions, Strategy, DEFAULT_GAMMA};
use crate::weights::{build_weight_set, default_density, AttributePanel, WeightMatrix, WeightSet};

/// Coefficient used for every weight matrix when `lambda_true` is left empty.
pub const DEFAULT_LAMBDA: f64 = 0.2;

/// Attempts at drawing a direction `E` that keeps every `I - B_t` invertible.
pub const MAX_DIRECTION_DRAWS: usize = 10;

/// Errors with mean zero and unit variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ErrorDist {
    #[default]
    Normal,
    /// `0.9 N(0, 5/9) + 0.1 N(0, 5)`.
    Mixture,
    /// `Exp(1) - 1`.
    StdExponential,
}

impl ErrorDist {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            ErrorDist::Normal => rng.sample(StandardNormal),
            ErrorDist::Mixture => {
                let wide = rng.random::<f64>() < 0.1;
                let z: f64 = rng.sample(StandardNormal);
                if wide {
                    z * 5f64.sqrt()
                } else {
                    z * (5.0f64 / 9.0).sqrt()
                }
            }
            ErrorDist::StdExponential => {
                let e: f64 = rng.sample(Exp1);
                e - 1.0
            }
        }
    }
}

/// How the responses are generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Setting {
    /// Attributes independent of the errors.
    #[default]
    Exogenous,
    /// Each `(Z_1i, ..., Z_di, eps_i)` is equicorrelated normal with correlation `rho`.
    Endogenous { rho: f64 },
    /// `B_t = sum_k lambda_k W_k^(t) + kappa E E'` with one standard normal `E` per replication.
    Alternative { kappa: f64 },
    /// `Y_t = Delta_t^{-1} (X_t beta + eps_t)` with standard normal covariates.
    /// An empty `beta_true` means all ones.
    Covariates {
        p: usize,
        #[serde(default)]
        beta_true: Vec<f64>,
    },
    /// `Y_t = Delta_t^{-1} (omega + eps_t)` with standard normal actor effects.
    FixedEffects,
    /// `Y_t = Delta_t^{-1} (g_t 1 + eps_t)` with standard normal period effects.
    TimeEffects,
}

/// What each replication computes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    /// Fit and summarize the estimates.
    #[default]
    Estimate,
    /// EBIC selection; the true subset is the support of `lambda_true`.
    Select {
        #[serde(default)]
        q_max: Option<usize>,
        #[serde(default)]
        strategy: Strategy,
    },
    /// Fit the base model and run the adequacy test at level `alpha`.
    Test {
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
}

fn default_alpha() -> f64 {
    0.05
}

/// Constraint used when fitting simulated data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeasibilityMode {
    /// The l1 ball when it contains `lambda_true`, invertibility otherwise.
    #[default]
    Auto,
    L1Ball,
    Invertible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    #[serde(rename = "T")]
    pub periods: usize,
    pub d: usize,
    /// Empty means [`DEFAULT_LAMBDA`] for every matrix.
    pub lambda_true: Vec<f64>,
    pub error_dist: ErrorDist,
    pub setting: Setting,
    pub task: Task,
    /// Target density of the similarity matrices; `None` means `10 / n`.
    pub density: Option<f64>,
    pub replications: usize,
    pub base_seed: u64,
    pub gamma: f64,
    /// Draw the attributes once and reuse them in every replication.
    pub fixed_weights: bool,
    pub feasibility: FeasibilityMode,
    /// Largest tolerated share of failed or non-converged replications.
    pub max_failure_rate: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 50,
            periods: 50,
            d: 2,
            lambda_true: Vec::new(),
            error_dist: ErrorDist::Normal,
            setting: Setting::Exogenous,
            task: Task::Estimate,
            density: None,
            replications: 100,
            base_seed: 1,
            gamma: DEFAULT_GAMMA,
            fixed_weights: false,
            feasibility: FeasibilityMode::Auto,
            max_failure_rate: 0.05,
        }
    }
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SimConfig = toml::from_str(text).map_err(|e| MirError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SimConfig = serde_json::from_str(text).map_err(|e| MirError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn lambda(&self) -> DVector<f64> {
        if self.lambda_true.is_empty() {
            DVector::from_element(self.d, DEFAULT_LAMBDA)
        } else {
            DVector::from_column_slice(&self.lambda_true)
        }
    }

    pub fn density(&self) -> f64 {
        self.density.unwrap_or_else(|| default_density(self.n))
    }

    /// Covariate coefficients, empty outside the covariate setting.
    pub fn beta(&self) -> Vec<f64> {
        match &self.setting {
            Setting::Covariates { p, beta_true } if beta_true.is_empty() => vec![1.0; *p],
            Setting::Covariates { beta_true, .. } => beta_true.clone(),
            _ => Vec::new(),
        }
    }

    /// Zero-based indices of the nonzero true coefficients.
    pub fn true_support(&self) -> Vec<usize> {
        self.lambda().iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(k, _)| k).collect()
    }

    pub fn feasibility(&self) -> Feasibility {
        let ball = Feasibility::L1Ball { varsigma: DEFAULT_VARSIGMA };
        match self.feasibility {
            FeasibilityMode::L1Ball => ball,
            FeasibilityMode::Invertible => Feasibility::Invertible,
            FeasibilityMode::Auto if ball.contains(&self.lambda()) => ball,
            FeasibilityMode::Auto => Feasibility::Invertible,
        }
    }

    /// Fit settings for simulated data. Outside the l1 ball the optimizer also
    /// starts from `lambda_true`, because a singular surface of `Delta_t` can
    /// separate the truth from zero.
    pub fn fit_options(&self) -> FitOptions {
        let mut options = FitOptions::default();
        options.optimizer.feasibility = self.feasibility();
        if options.optimizer.feasibility == Feasibility::Invertible {
            options.extra_starts = vec![self.lambda()];
        }
        options
    }

    /// Short identifier such as `n50_T50_d2`.
    pub fn cell_label(&self) -> String {
        format!("n{}_T{}_d{}", self.n, self.periods, self.d)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(MirError::Config(msg));
        if self.n < 3 {
            return bad(format!("n must be at least 3, got {}", self.n));
        }
        if self.periods < 1 {
            return bad("T must be at least 1".into());
        }
        if self.d < 1 {
            return bad("d must be at least 1".into());
        }
        if !self.lambda_true.is_empty() && self.lambda_true.len() != self.d {
            return bad(format!("lambda_true has {} entries but d = {}", self.lambda_true.len(), self.d));
        }
        if self.lambda_true.iter().any(|v| !v.is_finite()) {
            return bad("lambda_true must be finite".into());
        }
        if self.replications < 1 {
            return bad("replications must be at least 1".into());
        }
        let density = self.density();
        if !(density > 0.0 && density <= 1.0) {
            return bad(format!("density must lie in (0, 1], got {density}"));
        }
        if !(self.gamma >= 0.0) {
            return bad(format!("gamma must be non-negative, got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.max_failure_rate) {
            return bad("max_failure_rate must lie in [0, 1]".into());
        }
        if !self.feasibility().contains(&self.lambda()) {
            return bad("lambda_true lies outside the l1 ball; use feasibility = \"invertible\"".into());
        }
        match &self.setting {
            Setting::Endogenous { rho } => {
                if !(0.0..1.0).contains(rho) {
                    return bad(format!("rho must lie in [0, 1), got {rho}"));
                }
                if self.error_dist != ErrorDist::Normal {
                    return bad("the endogenous setting draws jointly normal errors; error_dist must be normal".into());
                }
                if self.fixed_weights {
                    return bad("fixed_weights is incompatible with endogenous attributes".into());
                }
            }
            Setting::Alternative { kappa } if !kappa.is_finite() => return bad("kappa must be finite".into()),
            Setting::Covariates { p, beta_true } => {
                if *p == 0 {
                    return bad("p must be at least 1".into());
                }
                if !beta_true.is_empty() && beta_true.len() != *p {
                    return bad(format!("beta_true has {} entries but p = {p}", beta_true.len()));
                }
            }
            Setting::FixedEffects if self.periods < 2 => return bad("fixed effects need T >= 2".into()),
            _ => {}
        }
        match &self.task {
            Task::Test { alpha } => {
                if !(*alpha > 0.0 && *alpha < 1.0) {
                    return bad(format!("alpha must lie in (0, 1), got {alpha}"));
                }
                if self.periods < 3 {
                    return bad("the adequacy test needs T >= 3".into());
                }
                if !matches!(self.setting, Setting::Exogenous | Setting::Alternative { .. }) {
                    return bad("the test task supports the exogenous and alternative settings".into());
                }
            }
            Task::Select { q_max, .. } => {
                if q_max.is_some_and(|q| q > self.d) {
                    return bad("q_max exceeds d".into());
                }
                if !matches!(self.setting, Setting::Exogenous) {
                    return bad("the select task supports the exogenous setting".into());
                }
            }
            Task::Estimate => {}
        }
        Ok(())
    }
}

/// Independent random streams within a replication.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Role {
    Attributes = 0,
    Errors = 1,
    Direction = 2,
    Covariates = 3,
    Effects = 4,
}

/// Generator for `(base_seed, rep, role)`; distinct keys give disjoint streams.
pub fn stream_rng(base_seed: u64, rep: usize, role: Role) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(base_seed);
    rng.set_stream(((rep as u64) << 8) | role as u64);
    rng
}

/// One simulated data set together with what generated it.
#[derive(Debug, Clone)]
pub struct SimData {
    pub data: MirData,
    pub attributes: AttributePanel,
    pub covariates: Option<CovariatePanel>,
}

fn attribute_rep(cfg: &SimConfig, rep: usize) -> usize {
    if cfg.fixed_weights {
        0
    } else {
        rep
    }
}

fn normal_attributes(cfg: &SimConfig, rep: usize) -> Result<AttributePanel> {
    let mut rng = stream_rng(cfg.base_seed, attribute_rep(cfg, rep), Role::Attributes);
    let values = (0..cfg.d)
        .map(|_| (0..cfg.periods).map(|_| (0..cfg.n).map(|_| rng.sample(StandardNormal)).collect()).collect())
        .collect();
    AttributePanel::continuous(values)
}

fn draw_errors(cfg: &SimConfig, rep: usize) -> DMatrix<f64> {
    let mut rng = stream_rng(cfg.base_seed, rep, Role::Errors);
    let mut e = DMatrix::zeros(cfg.n, cfg.periods);
    for t in 0..cfg.periods {
        for i in 0..cfg.n {
            e[(i, t)] = cfg.error_dist.sample(&mut rng);
        }
    }
    e
}

/// `Y_t = Delta_t(lambda)^{-1} v_t` for every column of `v`.
fn solve_responses(weights: &WeightSet, lambda: &DVector<f64>, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let cols = par::map_range(weights.periods(), |t| {
        let ops: Vec<&WeightMatrix> = weights.period(t).iter().collect();
        factor_delta(&ops, lambda, t).map(|f| f.solve(&v.column(t).into_owned()))
    });
    let mut y = DMatrix::zeros(v.nrows(), v.ncols());
    for (t, col) in cols.into_iter().enumerate() {
        y.set_column(t, &col?);
    }
    Ok(y)
}

/// Setting I: standard normal attributes, errors from `cfg.error_dist`.
pub fn gen_setting1(cfg: &SimConfig, rep: usize) -> Result<SimData> {
    let attributes = normal_attributes(cfg, rep)?;
    let weights = build_weight_set(&attributes, cfg.density())?;
    let eps = draw_errors(cfg, rep);
    let y = solve_responses(&weights, &cfg.lambda(), &eps)?;
    Ok(SimData { data: MirData::new(y, weights)?, attributes, covariates: None })
}

/// Lower Cholesky factor of `(1 - rho) I_m + rho 1 1'`.
pub fn equicorrelation_factor(m: usize, rho: f64) -> Result<DMatrix<f64>> {
    let sigma = DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { rho });
    sigma
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| MirError::Config(format!("equicorrelation matrix with rho = {rho} is not positive definite")))
}

/// Setting II: attributes and errors jointly equicorrelated normal.
pub fn gen_setting2(cfg: &SimConfig, rep: usize) -> Result<SimData> {
    let rho = match cfg.setting {
        Setting::Endogenous { rho } => rho,
        _ => 0.0,
    };
    let d = cfg.d;
    let l = equicorrelation_factor(d + 1, rho)?;
    let mut rng = stream_rng(cfg.base_seed, rep, Role::Attributes);
    let mut values = vec![vec![vec![0.0; cfg.n]; cfg.periods]; d];
    let mut eps = DMatrix::zeros(cfg.n, cfg.periods);
    for t in 0..cfg.periods {
        for i in 0..cfg.n {
            let u = DVector::from_fn(d + 1, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = &l * u;
            for k in 0..d {
                values[k][t][i] = x[k];
            }
            eps[(i, t)] = x[d];
        }
    }
    let attributes = AttributePanel::continuous(values)?;
    let weights = build_weight_set(&attributes, cfg.density())?;
    let y = solve_responses(&weights, &cfg.lambda(), &eps)?;
    Ok(SimData { data: MirData::new(y, weights)?, attributes, covariates: None })
}

/// Departure from the model: `B_t = sum_k lambda_k W_k^(t) + kappa E E'`.
///
/// With `kappa = 0` this is exactly [`gen_setting1`]. `E` is redrawn up to
/// [`MAX_DIRECTION_DRAWS`] times if some `I - B_t` is singular.
pub fn gen_alternative(cfg: &SimConfig, rep: usize) -> Result<SimData> {
    let kappa = match cfg.setting {
        Setting::Alternative { kappa } => kappa,
        _ => 0.0,
    };
    if kappa == 0.0 {
        return gen_setting1(cfg, rep);
    }
    let attributes = normal_attributes(cfg, rep)?;
    let weights = build_weight_set(&attributes, cfg.density())?;
    let eps = draw_errors(cfg, rep);
    let lambda = cfg.lambda();
    let mut rng = stream_rng(cfg.base_seed, rep, Role::Direction);
    for _ in 0..MAX_DIRECTION_DRAWS {
        let e = DVector::from_fn(cfg.n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let cols = par::map_range(cfg.periods, |t| {
            let mut delta = DMatrix::identity(cfg.n, cfg.n);
            for (k, w) in weights.period(t).iter().enumerate() {
                w.add_scaled_to(-lambda[k], &mut delta);
            }
            delta -= kappa * &e * e.transpose();
            let lu = delta.lu();
            let diag = lu.u().diagonal().abs();
            let scale = diag.max();
            if !(diag.min() > 1e-12 * scale) {
                return None;
            }
            lu.solve(&eps.column(t).into_owned())
        });
        if cols.iter().all(Option::is_some) {
            let mut y = DMatrix::zeros(cfg.n, cfg.periods);
            for (t, col) in cols.into_iter().enumerate() {
                y.set_column(t, &col.expect("checked above"));
            }
            return Ok(SimData { data: MirData::new(y, weights)?, attributes, covariates: None });
        }
    }
    Err(MirError::Numerical(format!(
        "I - B_t stayed singular after {MAX_DIRECTION_DRAWS} draws of the direction E"
    )))
}

/// Standard normal covariates with `Y_t = Delta_t^{-1} (X_t beta + eps_t)`.
pub fn gen_covariates(cfg: &SimConfig, rep: usize) -> Result<SimData> {
    let beta = DVector::from_vec(cfg.beta());
    let p = beta.len();
    let attributes = normal_attributes(cfg, rep)?;
    let weights = build_weight_set(&attributes, cfg.density())?;
    let mut rng = stream_rng(cfg.base_seed, rep, Role::Covariates);
    let x: Vec<DMatrix<f64>> = (0..cfg.periods)
        .map(|_| DMatrix::from_fn(cfg.n, p, |_, _| rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let mut v = draw_errors(cfg, rep);
    for (t, xt) in x.iter().enumerate() {
        let mean = xt * &beta;
        let mut col = v.column_mut(t);
        col += mean;
    }
    let y = solve_responses(&weights, &cfg.lambda(), &v)?;
    Ok(SimData { data: MirData::new(y, weights)?, attributes, covariates: Some(CovariatePanel::new(x)?) })
}

/// Actor effects (`FixedEffects`) or period effects (`TimeEffects`) added to the errors.
pub fn gen_effects(cfg: &SimConfig, rep: usize) -> Result<SimData> {
    let attributes = normal_attributes(cfg, rep)?;
    let weights = build_weight_set(&attributes, cfg.density())?;
    let mut v = draw_errors(cfg, rep);
    let mut rng = stream_rng(cfg.base_seed, rep, Role::Effects);
    match cfg.setting {
        Setting::FixedEffects => {
            let omega = DVector::from_fn(cfg.n, |_, _| rng.sample::<f64, _>(StandardNormal));
            for t in 0..cfg.periods {
                let mut col = v.column_mut(t);
                col += &omega;
            }
        }
        Setting::TimeEffects => {
            for t in 0..cfg.periods {
                let g: f64 = rng.sample(StandardNormal);
                v.column_mut(t).add_scalar_mut(g);
            }
        }
        _ => {}
    }
    let y = solve_responses(&weights, &cfg.lambda(), &v)?;
    Ok(SimData { data: MirData::new(y, weights)?, attributes, covariates: None })
}

/// Data for replication `rep` of `cfg`.
pub fn generate(cfg: &SimConfig, rep: usize) -> Result<SimData> {
    match cfg.setting {
        Setting::Exogenous => gen_setting1(cfg, rep),
        Setting::Endogenous { .. } => gen_setting2(cfg, rep),
        Setting::Alternative { .. } => gen_alternative(cfg, rep),
        Setting::Covariates { .. } => gen_covariates(cfg, rep),
        Setting::FixedEffects | Setting::TimeEffects => gen_effects(cfg, rep),
    }
}

/// Estimates from one estimator in one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub estimator: &'static str,
    pub names: Vec<String>,
    pub estimates: Vec<f64>,
    pub std_errors: Vec<f64>,
}

impl Draw {
    fn from_fit(estimator: &'static str, fit: &FitResult) -> Self {
        Self {
            estimator,
            names: fit.param_names.clone(),
            estimates: fit.estimates().iter().copied().collect(),
            std_errors: fit.std_errors.iter().copied().collect(),
        }
    }
}

/// What a replication produced.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Estimates(Vec<Draw>),
    Selected(Vec<usize>),
    Tested { reject: bool, z: f64 },
    NonConverged,
    Failed(String),
}

fn converged(fit: FitResult) -> std::result::Result<FitResult, Outcome> {
    if fit.converged {
        Ok(fit)
    } else {
        Err(Outcome::NonConverged)
    }
}

fn estimate_outcome(cfg: &SimConfig, sim: &SimData) -> Result<std::result::Result<Vec<Draw>, Outcome>> {
    let options = cfg.fit_options();
    let fits: Vec<(&'static str, FitResult)> = match &cfg.setting {
        Setting::Exogenous | Setting::Alternative { .. } => vec![("qmle", fit_qmle(&sim.data, &options)?)],
        Setting::Endogenous { .. } => vec![
            ("qmle", fit_qmle(&sim.data, &options)?),
            ("ea_qmle", fit_endogenous(&sim.data, &sim.attributes, &options)?),
        ],
        Setting::Covariates { .. } => {
            let x = sim.covariates.as_ref().expect("covariate setting generates covariates");
            vec![("qmle", fit_covariates(&sim.data, x, &options)?)]
        }
        Setting::FixedEffects => vec![("qmle", fit_individual_effects(&sim.data, None, &options)?)],
        Setting::TimeEffects => vec![("qmle", fit_time_effects(&sim.data, None, &options)?)],
    };
    let mut draws = Vec::with_capacity(fits.len());
    for (name, fit) in fits {
        match converged(fit) {
            Ok(fit) => draws.push(Draw::from_fit(name, &fit)),
            Err(o) => return Ok(Err(o)),
        }
    }
    Ok(Ok(draws))
}

/// Run replication `rep`; errors become [`Outcome::Failed`].
pub fn replicate(cfg: &SimConfig, rep: usize) -> Outcome {
    let run = || -> Result<Outcome> {
        let sim = generate(cfg, rep)?;
        Ok(match &cfg.task {
            Task::Estimate => match estimate_outcome(cfg, &sim)? {
                Ok(draws) => Outcome::Estimates(draws),
                Err(o) => o,
            },
            Task::Select { q_max, strategy } => {
                let options = SelectOptions {
                    gamma: cfg.gamma,
                    q_max: *q_max,
                    strategy: *strategy,
                    fit: cfg.fit_options(),
                };
                let res = select_with(&sim.data, &options)?;
                if res.per_subset_table.iter().any(|r| r.subset == res.best_subset && r.converged) {
                    Outcome::Selected(res.best_subset)
                } else {
                    Outcome::NonConverged
                }
            }
            Task::Test { alpha } => match converged(fit_qmle(&sim.data, &cfg.fit_options())?) {
                Ok(fit) => {
                    let options = GofOptions { alpha: *alpha, breakdown: false, ..GofOptions::default() };
                    let g = influence_test(&sim.data, &fit, &options)?;
                    Outcome::Tested { reject: g.reject, z: g.z }
                }
                Err(o) => o,
            },
        })
    };
    run().unwrap_or_else(|e| Outcome::Failed(e.to_string()))
}

/// Monte Carlo summary of one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRow {
    pub estimator: String,
    pub name: String,
    pub truth: f64,
    pub mean: f64,
    /// Mean of `estimate - truth`.
    pub bias: f64,
    /// Mean of the estimated standard errors.
    pub se: f64,
    /// Standard deviation of the estimates across replications (divisor `R`).
    pub se_star: f64,
    pub count: usize,
}

/// Summarize estimates and standard errors of one parameter.
pub fn param_row(estimator: &str, name: &str, truth: f64, estimates: &[f64], std_errors: &[f64]) -> ParamRow {
    let r = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / r;
    let var = estimates.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / r;
    ParamRow {
        estimator: estimator.to_string(),
        name: name.to_string(),
        truth,
        mean,
        bias: estimates.iter().map(|e| e - truth).sum::<f64>() / r,
        se: std_errors.iter().sum::<f64>() / std_errors.len() as f64,
        se_star: var.sqrt(),
        count: estimates.len(),
    }
}

/// Selection accuracy in percent, except `avg_size`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub avg_size: f64,
    pub correct_fit: f64,
    pub true_positive_rate: f64,
    pub false_positive_rate: f64,
    pub count: usize,
}

/// AS, CT, TPR and FPR of `selected` against `truth` among `d` candidates.
pub fn selection_summary(selected: &[Vec<usize>], truth: &[usize], d: usize) -> SelectionSummary {
    let r = selected.len() as f64;
    let negatives = d - truth.len();
    let (mut size, mut ct, mut tpr, mut fpr) = (0.0, 0.0, 0.0, 0.0);
    for s in selected {
        let tp = s.iter().filter(|k| truth.contains(k)).count();
        let fp = s.len() - tp;
        size += s.len() as f64;
        if tp == truth.len() && fp == 0 {
            ct += 1.0;
        }
        tpr += if truth.is_empty() { 1.0 } else { tp as f64 / truth.len() as f64 };
        fpr += if negatives == 0 { 0.0 } else { fp as f64 / negatives as f64 };
    }
    SelectionSummary {
        avg_size: size / r,
        correct_fit: 100.0 * ct / r,
        true_positive_rate: 100.0 * tpr / r,
        false_positive_rate: 100.0 * fpr / r,
        count: selected.len(),
    }
}

/// Rejection frequency of the adequacy test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSummary {
    pub kappa: f64,
    pub alpha: f64,
    pub rejections: usize,
    pub rate: f64,
    pub mean_z: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureCounts {
    pub attempted: usize,
    pub used: usize,
    pub non_converged: usize,
    pub errors: usize,
    /// First error message, if any.
    pub first_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub config: SimConfig,
    pub params: Vec<ParamRow>,
    pub selection: Option<SelectionSummary>,
    pub test: Option<TestSummary>,
    pub failures: FailureCounts,
}

/// Aggregate replication outcomes in replication order.
pub fn summarize(cfg: &SimConfig, outcomes: &[Outcome]) -> Result<SimReport> {
    let mut failures = FailureCounts {
        attempted: outcomes.len(),
        used: 0,
        non_converged: 0,
        errors: 0,
        first_error: None,
    };
    let mut draws: Vec<&Vec<Draw>> = Vec::new();
    let mut selected: Vec<Vec<usize>> = Vec::new();
    let mut tests: Vec<(bool, f64)> = Vec::new();
    for o in outcomes {
        match o {
            Outcome::Estimates(d) => draws.push(d),
            Outcome::Selected(s) => selected.push(s.clone()),
            Outcome::Tested { reject, z } => tests.push((*reject, *z)),
            Outcome::NonConverged => failures.non_converged += 1,
            Outcome::Failed(msg) => {
                failures.errors += 1;
                failures.first_error.get_or_insert_with(|| msg.clone());
            }
        }
    }
    let failed = failures.non_converged + failures.errors;
    failures.used = outcomes.len() - failed;
    if failures.used == 0 || failed as f64 > cfg.max_failure_rate * outcomes.len() as f64 {
        return Err(MirError::StudyFailed { failed, total: outcomes.len() });
    }
    let mut params = Vec::new();
    if let Some(first) = draws.first() {
        let lambda = cfg.lambda();
        let beta = cfg.beta();
        for (e, template) in first.iter().enumerate() {
            for (idx, name) in template.names.iter().enumerate() {
                let truth = if let Some(k) = name.strip_prefix("lambda_") {
                    k.parse::<usize>().ok().map(|k| lambda[k - 1])
                } else if let Some(j) = name.strip_prefix("beta_") {
                    j.parse::<usize>().ok().and_then(|j| beta.get(j - 1).copied())
                } else {
                    None
                };
                let Some(truth) = truth else { continue };
                let est: Vec<f64> = draws.iter().map(|d| d[e].estimates[idx]).collect();
                let se: Vec<f64> = draws.iter().map(|d| d[e].std_errors[idx]).collect();
                params.push(param_row(template.estimator, name, truth, &est, &se));
            }
        }
    }
    let selection = (!selected.is_empty()).then(|| selection_summary(&selected, &cfg.true_support(), cfg.d));
    let test = match (&cfg.task, tests.is_empty()) {
        (Task::Test { alpha }, false) => {
            let rejections = tests.iter().filter(|(r, _)| *r).count();
            Some(TestSummary {
                kappa: match cfg.setting {
                    Setting::Alternative { kappa } => kappa,
                    _ => 0.0,
                },
                alpha: *alpha,
                rejections,
                rate: rejections as f64 / tests.len() as f64,
                mean_z: tests.iter().map(|(_, z)| z).sum::<f64>() / tests.len() as f64,
                count: tests.len(),
            })
        }
        _ => None,
    };
    Ok(SimReport { config: cfg.clone(), params, selection, test, failures })
}

/// Replicate `cfg` and summarize. Replications run in parallel; the result
/// does not depend on the thread count.
pub fn run_study(cfg: &SimConfig) -> Result<SimReport> {
    cfg.validate()?;
    let outcomes = par::map_range(cfg.replications, |rep| replicate(cfg, rep));
    summarize(cfg, &outcomes)
}

impl SimReport {
    /// Long CSV: `cell,section,estimator,name,metric,value`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_reports_csv(std::slice::from_ref(self), writer)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Several reports in one long CSV.
pub fn write_reports_csv<W: Write>(reports: &[SimReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["cell", "section", "estimator", "name", "metric", "value"])?;
    for rep in reports {
        let cell = rep.config.cell_label();
        let mut row = |section: &str, estimator: &str, name: &str, metric: &str, value: String| {
            w.write_record([cell.as_str(), section, estimator, name, metric, value.as_str()])
        };
        for p in &rep.params {
            for (metric, v) in [("truth", p.truth), ("bias", p.bias), ("se", p.se), ("se_star", p.se_star)] {
                row("estimation", &p.estimator, &p.name, metric, v.to_string())?;
            }
        }
        if let Some(s) = &rep.selection {
            for (metric, v) in [
                ("AS", s.avg_size),
                ("CT", s.correct_fit),
                ("TPR", s.true_positive_rate),
                ("FPR", s.false_positive_rate),
            ] {
                row("selection", "ebic", "", metric, v.to_string())?;
            }
        }
        if let Some(t) = &rep.test {
            row("test", "influence", &format!("kappa={}", t.kappa), "rejection_rate", t.rate.to_string())?;
        }
        let f = &rep.failures;
        row("failures", "", "", "used", f.used.to_string())?;
        row("failures", "", "", "non_converged", f.non_converged.to_string())?;
        row("failures", "", "", "errors", f.errors.to_string())?;
    }
    w.flush()?;
    Ok(())
}

/// Whitespace-separated `kappa rate` lines for plotting, one per test report.
pub fn write_power_curve<W: Write>(reports: &[SimReport], mut writer: W) -> Result<()> {
    writeln!(writer, "# cell kappa rejection_rate")?;
    for rep in reports {
        if let Some(t) = &rep.test {
            writeln!(writer, "{} {} {}", rep.config.cell_label(), t.kappa, t.rate)?;
        }
    }
    Ok(())
}

/// Study grids of the published tables.
pub mod presets {
    use super::*;

    /// Panel sizes used in every table.
    pub const SIZES: [usize; 3] = [25, 50, 100];

    /// Default replication count of the published studies.
    pub const REPLICATIONS: usize = 500;

    fn grid(d_values: &[usize], make: impl Fn(usize, usize, usize) -> Vec<SimConfig>) -> Vec<SimConfig> {
        let mut out = Vec::new();
        for &d in d_values {
            for &n in &SIZES {
                for &t in &SIZES {
                    out.extend(make(n, t, d));
                }
            }
        }
        out
    }

    fn base(n: usize, periods: usize, d: usize) -> SimConfig {
        SimConfig { n, periods, d, replications: REPLICATIONS, ..SimConfig::default() }
    }

    /// Every cell of table `table` (1 to 4) with the given error law.
    ///
    /// 1: estimation, `d` in {2, 6}; 2: selection with `d = 8` and three
    /// active matrices; 3: test size and power, `d` in {2, 6} and
    /// `kappa` in {0, 0.1, 0.2}; 4: endogenous attributes, `d = 6`.
    pub fn table(table: u8, error_dist: ErrorDist) -> Result<Vec<SimConfig>> {
        let with_errors = |c: SimConfig| SimConfig { error_dist, ..c };
        let cells = match table {
            1 => grid(&[2, 6], |n, t, d| vec![with_errors(base(n, t, d))]),
            2 => grid(&[8], |n, t, d| {
                let mut lambda = vec![0.0; d];
                lambda[..3].fill(DEFAULT_LAMBDA);
                vec![with_errors(SimConfig {
                    lambda_true: lambda,
                    task: Task::Select { q_max: None, strategy: Strategy::Auto },
                    ..base(n, t, d)
                })]
            }),
            3 => grid(&[2, 6], |n, t, d| {
                [0.0, 0.1, 0.2]
                    .iter()
                    .map(|&kappa| {
                        with_errors(SimConfig {
                            setting: Setting::Alternative { kappa },
                            task: Task::Test { alpha: 0.05 },
                            ..base(n, t, d)
                        })
                    })
                    .collect()
            }),
            4 => {
                if error_dist != ErrorDist::Normal {
                    return Err(MirError::Config("table 4 uses jointly normal errors".into()));
                }
                grid(&[6], |n, t, d| vec![SimConfig { setting: Setting::Endogenous { rho: 0.5 }, ..base(n, t, d) }])
            }
            other => return Err(MirError::Config(format!("no preset for table {other}; expected 1 to 4"))),
        };
        Ok(cells)
    }

    /// Parse `n=25,T=25,d=2` (any subset of the keys) into a filter.
    pub fn parse_cell(spec: &str) -> Result<(Option<usize>, Option<usize>, Option<usize>)> {
        let (mut n, mut t, mut d) = (None, None, None);
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| MirError::Config(format!("cell entry {part:?} is not key=value")))?;
            let value: usize =
                value.trim().parse().map_err(|_| MirError::Config(format!("cell value {value:?} is not a count")))?;
            match key.trim() {
                "n" => n = Some(value),
                "T" | "t" => t = Some(value),
                "d" => d = Some(value),
                other => return Err(MirError::Config(format!("unknown cell key {other:?}"))),
            }
        }
        Ok((n, t, d))
    }

    /// Keep the cells matching `spec`.
    pub fn filter_cells(cells: Vec<SimConfig>, spec: &str) -> Result<Vec<SimConfig>> {
        let (n, t, d) = parse_cell(spec)?;
        let kept: Vec<SimConfig> = cells
            .into_iter()
            .filter(|c| n.is_none_or(|v| v == c.n) && t.is_none_or(|v| v == c.periods) && d.is_none_or(|v| v == c.d))
            .collect();
        if kept.is_empty() {
            return Err(MirError::Config(format!("no preset cell matches {spec:?}")));
        }
        Ok(kept)
    }
}
