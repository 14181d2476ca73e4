//! Running an [`Invocation`] and rendering its outputs.

use std::fs;
use std::path::Path;

use mir_core::estimate::{ModelKind, TraceMode, DEFAULT_PROBES};
use mir_core::extensions::{
    fit_covariates, fit_endogenous, fit_individual_effects, fit_interactions, fit_time_effects, CovariatePanel,
};
use mir_core::io::{read_wide_csv, write_wide_csv};
use mir_core::model::EXACT_TRACE_MAX_DIM;
use mir_core::select::{format_subset, select_with};
use mir_core::simlab::{self, stream_rng, Role, SimReport};
use mir_core::weights::{build_weight_set, default_density};
use mir_core::{fit_qmle, influence_test, AttributeKind, AttributePanel, FitOptions, FitResult, MirData, WeightSet};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{in_file, CliError};
use crate::invocation::{DataSpec, GenerateSpec, Invocation, WeightSource};

/// Files produced by a run, plus what to tell the user.
#[derive(Debug, Default)]
pub struct RunOutput {
    pub files: Vec<(String, Vec<u8>)>,
    pub messages: Vec<String>,
    /// Set when the optimizer stopped without meeting its criterion.
    pub not_converged: bool,
}

impl RunOutput {
    fn json<T: Serialize>(&mut self, name: &str, value: &T) {
        let mut bytes = serde_json::to_vec_pretty(value).expect("outputs serialize");
        bytes.push(b'\n');
        self.files.push((name.to_string(), bytes));
    }

    fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }
}

/// Loaded and cross-checked inputs.
pub struct Inputs {
    pub data: MirData,
    pub attributes: Option<AttributePanel>,
    pub covariates: Option<CovariatePanel>,
}

fn open(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn read_attributes(path: &Path, discrete: &[usize]) -> Result<AttributePanel, CliError> {
    let bytes = open(path)?;
    let panel = AttributePanel::from_long_csv(bytes.as_slice(), None).map_err(in_file(path))?;
    if discrete.is_empty() {
        return Ok(panel);
    }
    let d = panel.d();
    if let Some(bad) = discrete.iter().find(|&&k| k == 0 || k > d) {
        return Err(CliError::Input(format!("--discrete {bad} is outside 1..={d}")));
    }
    let kinds = (1..=d)
        .map(|k| if discrete.contains(&k) { AttributeKind::Discrete } else { AttributeKind::Continuous })
        .collect();
    AttributePanel::from_long_csv(bytes.as_slice(), Some(kinds)).map_err(in_file(path))
}

fn mismatch(what: &str, left: (&Path, usize), right: (&str, usize)) -> CliError {
    CliError::Input(format!(
        "{what} mismatch: {} has {} but {} has {}",
        left.0.display(),
        left.1,
        right.0,
        right.1
    ))
}

pub fn load(spec: &DataSpec) -> Result<Inputs, CliError> {
    let y = read_wide_csv(open(&spec.y)?.as_slice()).map_err(in_file(&spec.y))?;
    let (n, periods) = y.shape();
    let (weights, attributes, origin) = match &spec.weights {
        WeightSource::Dir { path } => (WeightSet::import_dir(path).map_err(in_file(path))?, None, path.display().to_string()),
        WeightSource::Attributes { path, density, discrete } => {
            let panel = read_attributes(path, discrete)?;
            if panel.n() != n {
                return Err(mismatch("actor count", (&spec.y, n), (&path.display().to_string(), panel.n())));
            }
            if panel.periods() != periods {
                return Err(mismatch("period count", (&spec.y, periods), (&path.display().to_string(), panel.periods())));
            }
            let ws = build_weight_set(&panel, density.unwrap_or_else(|| default_density(n))).map_err(in_file(path))?;
            (ws, Some(panel), path.display().to_string())
        }
    };
    if weights.n() != n {
        return Err(mismatch("actor count", (&spec.y, n), (&origin, weights.n())));
    }
    if weights.periods() != periods {
        return Err(mismatch("period count", (&spec.y, periods), (&origin, weights.periods())));
    }
    let covariates = match &spec.x {
        Some(path) => {
            let x = CovariatePanel::from_long_csv(open(path)?.as_slice()).map_err(in_file(path))?;
            if x.n() != n {
                return Err(mismatch("actor count", (&spec.y, n), (&path.display().to_string(), x.n())));
            }
            if x.periods() != periods {
                return Err(mismatch("period count", (&spec.y, periods), (&path.display().to_string(), x.periods())));
            }
            Some(x)
        }
        None => None,
    };
    Ok(Inputs { data: MirData::new(y, weights)?, attributes, covariates })
}

/// Stochastic traces only kick in above the exact-trace limit; there the
/// seed picks the probes.
pub fn seeded(fit: &FitOptions, seed: Option<u64>, n: usize) -> FitOptions {
    let mut fit = fit.clone();
    if let (Some(seed), TraceMode::Auto) = (seed, fit.trace) {
        if n > EXACT_TRACE_MAX_DIM {
            fit.trace = TraceMode::Stochastic { probes: DEFAULT_PROBES, seed };
        }
    }
    fit
}

/// Dispatch on the model flag.
pub fn fit_model(inputs: &Inputs, model: ModelKind, options: &FitOptions) -> Result<FitResult, CliError> {
    let need_x = |what: &str| {
        inputs.covariates.as_ref().ok_or_else(|| CliError::Input(format!("--model {what} needs covariates (--x)")))
    };
    let data = &inputs.data;
    let fit = match model {
        ModelKind::Base => fit_qmle(data, options)?,
        ModelKind::Covariates => fit_covariates(data, need_x("covariates")?, options)?,
        ModelKind::Interactions => fit_interactions(data, need_x("interactions")?, options)?,
        ModelKind::Individual => fit_individual_effects(data, inputs.covariates.as_ref(), options)?,
        ModelKind::Time => fit_time_effects(data, inputs.covariates.as_ref(), options)?,
        ModelKind::Endogenous => {
            let z = inputs.attributes.as_ref().ok_or_else(|| {
                CliError::Input("--model endogenous needs the attributes themselves (--attributes)".into())
            })?;
            fit_endogenous(data, z, options)?
        }
    };
    Ok(fit)
}

#[derive(Debug, Serialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub z: Option<f64>,
    pub p_value: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct Estimates<'a> {
    pub manifest_id: &'a str,
    pub model: ModelKind,
    pub n: usize,
    pub periods: usize,
    pub nobs: usize,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub lambda: Vec<f64>,
    pub sigma2: f64,
    pub sigma2_bias_corrected: Option<f64>,
    pub coefficients: Vec<Coefficient>,
    pub mu3: f64,
    pub mu4: f64,
    pub omega: Option<Vec<f64>>,
    /// 1-based design columns removed as collinear.
    pub dropped_columns: Vec<usize>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

pub fn estimates<'a>(fit: &FitResult, manifest_id: &'a str) -> Estimates<'a> {
    let est = fit.estimates();
    let p = fit.p_values();
    let sigma_index = fit.d();
    let coefficients = fit
        .param_names
        .iter()
        .enumerate()
        .map(|(i, name)| Coefficient {
            name: name.clone(),
            estimate: est[i],
            std_error: fit.std_errors[i],
            z: if i == sigma_index { None } else { finite(est[i] / fit.std_errors[i]) },
            p_value: finite(p[i]),
        })
        .collect();
    Estimates {
        manifest_id,
        model: fit.model,
        n: fit.n,
        periods: fit.periods,
        nobs: fit.nobs,
        loglik: fit.loglik,
        converged: fit.converged,
        iterations: fit.iterations,
        lambda: fit.lambda().iter().copied().collect(),
        sigma2: fit.theta_hat.sigma2,
        sigma2_bias_corrected: fit.sigma2_bias_corrected,
        coefficients,
        mu3: fit.mu3_hat,
        mu4: fit.mu4_hat,
        omega: fit.omega.as_ref().map(|w| w.iter().copied().collect()),
        dropped_columns: fit.dropped_columns.iter().map(|c| c + 1).collect(),
    }
}

fn wide_csv(m: &DMatrix<f64>) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    write_wide_csv(&mut buf, m)?;
    Ok(buf)
}

fn convergence_note(out: &mut RunOutput, fit: &FitResult) {
    if !fit.converged {
        out.not_converged = true;
        out.messages.push(format!("optimizer stopped after {} iterations without converging", fit.iterations));
    }
}

pub fn execute(inv: &Invocation, manifest_id: &str) -> Result<RunOutput, CliError> {
    let mut out = RunOutput::default();
    match inv {
        Invocation::Fit { data, model, fit, seed } => {
            let inputs = load(data)?;
            let options = seeded(fit, *seed, inputs.data.n());
            let result = fit_model(&inputs, *model, &options)?;
            let summary = estimates(&result, manifest_id);
            for c in &summary.coefficients {
                let p = c.p_value.map(|p| format!("{p:.4}")).unwrap_or_else(|| "-".into());
                out.messages.push(format!("{:<12} {:>12.6} {:>12.6} {:>8}", c.name, c.estimate, c.std_error, p));
            }
            out.messages.push(format!("log-likelihood {:.6}", result.loglik));
            out.json("estimates.json", &summary);
            out.add("residuals.csv", wide_csv(&result.residuals)?);
            convergence_note(&mut out, &result);
        }
        Invocation::Select { data, select, seed } => {
            let inputs = load(data)?;
            let mut options = select.clone();
            options.fit = seeded(&select.fit, *seed, inputs.data.n());
            let result = select_with(&inputs.data, &options)?;
            let mut csv = Vec::new();
            result.write_csv(&mut csv)?;
            out.add("selection.csv", csv);
            out.json("selection.json", &SelectionSummary::new(&result, manifest_id));
            out.messages.push(format!(
                "selected {} (EBIC {:.6}, gamma {}, q_max {})",
                format_subset(&result.best_subset),
                result.ebic_value,
                result.gamma,
                result.q_max
            ));
            if !result.excluded.is_empty() {
                out.messages.push(format!("{} candidate fits failed and were excluded", result.excluded.len()));
            }
        }
        Invocation::Test { data, fit, gof, seed } => {
            let inputs = load(data)?;
            let options = seeded(fit, *seed, inputs.data.n());
            let fitted = fit_qmle(&inputs.data, &options)?;
            let test = influence_test(&inputs.data, &fitted, gof)?;
            out.messages.push(format!(
                "{}: z = {:.4}, p = {:.4}, alpha = {}",
                if test.reject { "reject the fitted covariance" } else { "no evidence against the fitted covariance" },
                test.z,
                test.p_value,
                test.alpha
            ));
            if let Some(terms) = &test.terms {
                out.messages.push(format!(
                    "variance terms: leading {:.6}, estimation {:.6}, cross {:.6}, total {:.6}",
                    terms.leading,
                    terms.estimation,
                    terms.cross,
                    terms.total()
                ));
            }
            if test.regime_warning {
                out.messages.push(format!("warning: n/T = {:.3} is far from 1; the normal reference is rough", test.n_over_t));
            }
            out.json(
                "gof.json",
                &GofReport {
                    manifest_id,
                    lambda: fitted.lambda().iter().copied().collect(),
                    sigma2: fitted.theta_hat.sigma2,
                    loglik: fitted.loglik,
                    converged: fitted.converged,
                    test,
                },
            );
            convergence_note(&mut out, &fitted);
        }
        Invocation::Simulate { cells, .. } => {
            let mut reports = Vec::with_capacity(cells.len());
            for (i, cell) in cells.iter().enumerate() {
                eprintln!("[{}/{}] {} ({} replications)", i + 1, cells.len(), cell.cell_label(), cell.replications);
                reports.push(simlab::run_study(cell)?);
            }
            let mut csv = Vec::new();
            simlab::write_reports_csv(&reports, &mut csv)?;
            out.add("report.csv", csv);
            out.json("report.json", &SimulationReport { manifest_id, reports: &reports });
            write_tables(&mut out, &reports)?;
            if reports.iter().any(|r| r.test.is_some()) {
                let mut curve = Vec::new();
                simlab::write_power_curve(&reports, &mut curve)?;
                out.add("power_curve.dat", curve);
            }
            out.messages.push(format!("{} cells simulated", reports.len()));
        }
        Invocation::Generate(spec) => generate(spec, manifest_id, &mut out)?,
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct SelectionSummary<'a> {
    manifest_id: &'a str,
    /// 1-based.
    best_subset: Vec<usize>,
    ebic: f64,
    gamma: f64,
    q_max: usize,
    candidates_evaluated: usize,
    pruned: usize,
    excluded: Vec<Vec<usize>>,
    nesting_violations: usize,
}

impl<'a> SelectionSummary<'a> {
    fn new(r: &mir_core::SelectionResult, manifest_id: &'a str) -> Self {
        let one_based = |s: &Vec<usize>| s.iter().map(|k| k + 1).collect::<Vec<_>>();
        Self {
            manifest_id,
            best_subset: one_based(&r.best_subset),
            ebic: r.ebic_value,
            gamma: r.gamma,
            q_max: r.q_max,
            candidates_evaluated: r.per_subset_table.len(),
            pruned: r.pruned,
            excluded: r.excluded.iter().map(one_based).collect(),
            nesting_violations: r.nesting_violations.len(),
        }
    }
}

#[derive(Debug, Serialize)]
struct GofReport<'a> {
    manifest_id: &'a str,
    lambda: Vec<f64>,
    sigma2: f64,
    loglik: f64,
    converged: bool,
    test: mir_core::GofResult,
}

#[derive(Debug, Serialize)]
struct SimulationReport<'a> {
    manifest_id: &'a str,
    reports: &'a [SimReport],
}

/// One wide table per study kind, one row per cell.
fn write_tables(out: &mut RunOutput, reports: &[SimReport]) -> Result<(), CliError> {
    let cell = |r: &SimReport| [r.config.n.to_string(), r.config.periods.to_string(), r.config.d.to_string()];
    let mut estimation = csv::Writer::from_writer(Vec::new());
    let mut selection = csv::Writer::from_writer(Vec::new());
    let mut test = csv::Writer::from_writer(Vec::new());
    let (mut any_e, mut any_s, mut any_t) = (false, false, false);
    let io = |e: csv::Error| CliError::Internal(e.to_string());
    estimation.write_record(["n", "T", "d", "errors", "estimator", "parameter", "bias", "SE", "SE*"]).map_err(io)?;
    selection.write_record(["n", "T", "d", "errors", "AS", "CT", "TPR", "FPR"]).map_err(io)?;
    test.write_record(["n", "T", "d", "errors", "kappa", "rejection_rate"]).map_err(io)?;
    for r in reports {
        let errors = serde_json::to_value(r.config.error_dist).expect("serializes").as_str().unwrap_or("").to_string();
        let [n, t, d] = cell(r);
        for p in &r.params {
            any_e = true;
            estimation
                .write_record([&n, &t, &d, &errors, &p.estimator, &p.name, &p.bias.to_string(), &p.se.to_string(), &p.se_star.to_string()])
                .map_err(io)?;
        }
        if let Some(s) = &r.selection {
            any_s = true;
            let v = [s.avg_size, s.correct_fit, s.true_positive_rate, s.false_positive_rate].map(|x| x.to_string());
            selection.write_record([&n, &t, &d, &errors, &v[0], &v[1], &v[2], &v[3]]).map_err(io)?;
        }
        if let Some(s) = &r.test {
            any_t = true;
            test.write_record([&n, &t, &d, &errors, &s.kappa.to_string(), &s.rate.to_string()]).map_err(io)?;
        }
    }
    for (name, w, any) in [("table_estimation.csv", estimation, any_e), ("table_selection.csv", selection, any_s), ("table_test.csv", test, any_t)] {
        if any {
            out.add(name, w.into_inner().map_err(|e| CliError::Internal(e.to_string()))?);
        }
    }
    Ok(())
}

fn generate(spec: &GenerateSpec, manifest_id: &str, out: &mut RunOutput) -> Result<(), CliError> {
    let cfg = &spec.config;
    let sim = simlab::gen_setting1(cfg, 0)?;
    out.add("Y.csv", wide_csv(&sim.data.y)?);
    let mut attributes = Vec::new();
    sim.attributes.to_long_csv(&mut attributes)?;
    out.add("attributes.csv", attributes);
    for t in 0..cfg.periods {
        for k in 0..cfg.d {
            let w = sim.data.weights.get(k, t).to_dense();
            let mut buf = Vec::new();
            {
                let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(&mut buf);
                for i in 0..cfg.n {
                    wr.write_record(w.row(i).iter().map(|v| format!("{v:e}"))).map_err(|e| CliError::Internal(e.to_string()))?;
                }
                wr.flush().map_err(|e| CliError::Internal(e.to_string()))?;
            }
            out.add(&format!("weights/W_k{}_t{}.csv", k + 1, t + 1), buf);
        }
    }
    if spec.covariates > 0 {
        let mut rng = stream_rng(cfg.base_seed, 0, Role::Covariates);
        let x: Vec<DMatrix<f64>> = (0..cfg.periods)
            .map(|_| DMatrix::from_fn(cfg.n, spec.covariates, |_, _| rng.sample(StandardNormal)))
            .collect();
        let mut buf = Vec::new();
        CovariatePanel::new(x)?.to_long_csv(&mut buf)?;
        out.add("X.csv", buf);
    }
    #[derive(Serialize)]
    struct Truth<'a> {
        manifest_id: &'a str,
        lambda: Vec<f64>,
        density: f64,
        config: &'a mir_core::simlab::SimConfig,
    }
    out.json("truth.json", &Truth { manifest_id, lambda: cfg.lambda().iter().copied().collect(), density: cfg.density(), config: cfg });
    out.messages.push(format!("generated n={}, T={}, d={} with seed {}", cfg.n, cfg.periods, cfg.d, cfg.base_seed));
    Ok(())
}
