//! Concentrated likelihood over `lambda` for every model variant.
//!
//! All variants share the structure
//! `l(lambda) = -N/2 (log 2pi + 1) - N/2 log(RSS(lambda)/N) + sum_t log|det Delta_t(lambda)|`
//! where `RSS(lambda) = u' G u`, `u = (1, -lambda)`, and `G` is the Gram matrix of
//! `[a_t, W_1 a_t, ..., W_d a_t]` after partialling out pooled regressors and,
//! for fixed effects, the per-actor time means. Only the log-determinants depend
//! on `lambda` beyond a small quadratic form.

use std::borrow::Cow;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MirError, Result};
use crate::model::{factor_delta, DeltaFactor, EXACT_TRACE_MAX_DIM};
use crate::optimize::{maximize, Objective, Optimum, OptimizerOptions};
use crate::par;
use crate::weights::WeightMatrix;

/// How `tr(W_k Delta^{-1})` and its derivatives are computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TraceMode {
    /// Exact up to [`EXACT_TRACE_MAX_DIM`], stochastic above.
    Auto,
    Exact,
    /// Hutchinson estimator with Rademacher probes.
    Stochastic { probes: usize, seed: u64 },
}

impl Default for TraceMode {
    fn default() -> Self {
        TraceMode::Auto
    }
}

pub const DEFAULT_PROBES: usize = 64;
pub const DEFAULT_PROBE_SEED: u64 = 0x5eed_7ace;

/// Condition number above which the pooled regressor Gram is rejected.
pub const MAX_REGRESSOR_CONDITION: f64 = 1e12;

pub(crate) struct ProfileSpec<'a> {
    /// Operators `[t][k]` in working coordinates.
    pub ops: Vec<Vec<Cow<'a, WeightMatrix>>>,
    /// Responses `a_t` in working coordinates.
    pub responses: Vec<DVector<f64>>,
    /// Exogenous regressors `X_t` (`m x p`).
    pub regressors: Option<Vec<DMatrix<f64>>>,
    /// Sweep out per-actor time means (individual fixed effects).
    pub within: bool,
    pub trace: TraceMode,
}

pub(crate) struct Profile<'a> {
    pub ops: Vec<Vec<Cow<'a, WeightMatrix>>>,
    /// Per period `[a, b_1..b_d, X_1..X_p]` after the within transform.
    pub columns: Vec<DMatrix<f64>>,
    pub m: usize,
    pub d: usize,
    pub p: usize,
    /// Full cross-product of the columns, `(1+d+p)^2`.
    pub cross: DMatrix<f64>,
    /// Partialled Gram, `(1+d)^2`.
    pub gram: DMatrix<f64>,
    /// Regression of `[a, b]` on the regressors, `p x (1+d)`.
    pub coef: DMatrix<f64>,
    pub nobs: f64,
    trace: TraceMode,
}

pub(crate) struct Evaluation {
    pub loglik: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Order {
    Value,
    Gradient,
    Hessian,
}

struct PeriodTerms {
    log_det: f64,
    traces: DVector<f64>,
    pair_traces: DMatrix<f64>,
}

impl<'a> Profile<'a> {
    pub fn new(spec: ProfileSpec<'a>) -> Result<Self> {
        let periods = spec.responses.len();
        if periods == 0 || spec.ops.len() != periods {
            return Err(MirError::InvalidInput("profile needs matching, nonempty period lists".into()));
        }
        let d = spec.ops[0].len();
        let m = spec.responses[0].len();
        let p = spec.regressors.as_ref().map(|x| x[0].ncols()).unwrap_or(0);
        let q = 1 + d + p;
        let mut columns: Vec<DMatrix<f64>> = par::map_range(periods, |t| {
            let a = &spec.responses[t];
            let mut c = DMatrix::zeros(m, q);
            c.set_column(0, a);
            for (k, w) in spec.ops[t].iter().enumerate() {
                c.set_column(1 + k, &w.mul_vec(a));
            }
            if let Some(x) = &spec.regressors {
                c.columns_mut(1 + d, p).copy_from(&x[t]);
            }
            c
        });
        if spec.within {
            let mut mean = DMatrix::zeros(m, q);
            for c in &columns {
                mean += c;
            }
            mean /= periods as f64;
            for c in &mut columns {
                *c -= &mean;
            }
        }
        let mut cross = DMatrix::zeros(q, q);
        for c in &columns {
            cross += c.transpose() * c;
        }
        let q1 = 1 + d;
        let (gram, coef) = if p > 0 {
            let sxx = cross.view((q1, q1), (p, p)).into_owned();
            check_condition(&sxx)?;
            let chol = sxx.clone().cholesky().ok_or_else(|| {
                MirError::RankDeficient("pooled regressor cross-product is not positive definite".into())
            })?;
            let sxab = cross.view((q1, 0), (p, q1)).into_owned();
            let coef = chol.solve(&sxab);
            let gram = cross.view((0, 0), (q1, q1)) - sxab.transpose() * &coef;
            (gram, coef)
        } else {
            (cross.view((0, 0), (q1, q1)).into_owned(), DMatrix::zeros(0, q1))
        };
        Ok(Self {
            ops: spec.ops,
            columns,
            m,
            d,
            p,
            cross,
            gram,
            coef,
            nobs: (m * periods) as f64,
            trace: spec.trace,
        })
    }

    pub fn periods(&self) -> usize {
        self.columns.len()
    }

    /// The same problem with only the operators in `subset`.
    pub fn restrict(&self, subset: &[usize]) -> Profile<'a> {
        let d = subset.len();
        let mut keep: Vec<usize> = Vec::with_capacity(1 + d + self.p);
        keep.push(0);
        keep.extend(subset.iter().map(|k| 1 + k));
        keep.extend((0..self.p).map(|j| 1 + self.d + j));
        let q = keep.len();
        let cross = DMatrix::from_fn(q, q, |i, j| self.cross[(keep[i], keep[j])]);
        let q1 = 1 + d;
        let coef = DMatrix::from_fn(self.p, q1, |j, i| self.coef[(j, keep[i])]);
        let gram = DMatrix::from_fn(q1, q1, |i, j| self.gram[(keep[i], keep[j])]);
        Profile {
            ops: self.ops.iter().map(|per_t| subset.iter().map(|&k| per_t[k].clone()).collect()).collect(),
            columns: self
                .columns
                .iter()
                .map(|c| DMatrix::from_fn(self.m, q, |i, j| c[(i, keep[j])]))
                .collect(),
            m: self.m,
            d,
            p: self.p,
            cross,
            gram,
            coef,
            nobs: self.nobs,
            trace: self.trace,
        }
    }

    fn u(lambda: &DVector<f64>) -> DVector<f64> {
        let mut u = DVector::zeros(lambda.len() + 1);
        u[0] = 1.0;
        for (k, l) in lambda.iter().enumerate() {
            u[k + 1] = -l;
        }
        u
    }

    pub fn rss(&self, lambda: &DVector<f64>) -> f64 {
        let u = Self::u(lambda);
        u.dot(&(&self.gram * &u))
    }

    pub fn sigma2(&self, lambda: &DVector<f64>) -> f64 {
        self.rss(lambda) / self.nobs
    }

    pub fn beta(&self, lambda: &DVector<f64>) -> DVector<f64> {
        &self.coef * Self::u(lambda)
    }

    /// Coefficients `(1, -lambda, -beta)` applied to the stored columns.
    pub fn weights_vector(&self, lambda: &DVector<f64>) -> DVector<f64> {
        let mut w = DVector::zeros(1 + self.d + self.p);
        w.rows_mut(0, 1 + self.d).copy_from(&Self::u(lambda));
        let beta = self.beta(lambda);
        for j in 0..self.p {
            w[1 + self.d + j] = -beta[j];
        }
        w
    }

    /// Residuals in working coordinates, one column per period.
    pub fn residuals(&self, lambda: &DVector<f64>) -> DMatrix<f64> {
        let w = self.weights_vector(lambda);
        let mut out = DMatrix::zeros(self.m, self.periods());
        for (t, c) in self.columns.iter().enumerate() {
            out.set_column(t, &(c * &w));
        }
        out
    }

    pub fn factor(&self, lambda: &DVector<f64>, t: usize) -> Result<DeltaFactor> {
        let ops: Vec<&WeightMatrix> = self.ops[t].iter().map(|c| c.as_ref()).collect();
        factor_delta(&ops, lambda, t)
    }

    fn use_exact(&self) -> bool {
        match self.trace {
            TraceMode::Auto => self.m <= EXACT_TRACE_MAX_DIM,
            TraceMode::Exact => true,
            TraceMode::Stochastic { .. } => false,
        }
    }

    fn period_terms(&self, lambda: &DVector<f64>, t: usize, order: Order) -> Result<PeriodTerms> {
        let f = self.factor(lambda, t)?;
        let d = self.d;
        let mut traces = DVector::zeros(0);
        let mut pair_traces = DMatrix::zeros(0, 0);
        if order >= Order::Gradient {
            traces = DVector::zeros(d);
            if order == Order::Hessian {
                pair_traces = DMatrix::zeros(d, d);
            }
            if self.use_exact() {
                let inv = f.inverse();
                if order == Order::Hessian {
                    let prods: Vec<DMatrix<f64>> = self.ops[t].iter().map(|w| w.mul_mat(&inv)).collect();
                    let trans: Vec<DMatrix<f64>> = prods.iter().map(|p| p.transpose()).collect();
                    for k in 0..d {
                        traces[k] = prods[k].trace();
                        for l in 0..=k {
                            let v = prods[k].dot(&trans[l]);
                            pair_traces[(k, l)] = v;
                            pair_traces[(l, k)] = v;
                        }
                    }
                } else {
                    for k in 0..d {
                        traces[k] = self.ops[t][k].trace_mul(&inv);
                    }
                }
            } else {
                let (probes, seed) = match self.trace {
                    TraceMode::Stochastic { probes, seed } => (probes, seed),
                    _ => (DEFAULT_PROBES, DEFAULT_PROBE_SEED),
                };
                self.hutchinson(&f, t, probes, seed, order, &mut traces, &mut pair_traces);
            }
        }
        Ok(PeriodTerms { log_det: f.log_abs_det, traces, pair_traces })
    }

    #[allow(clippy::too_many_arguments)]
    fn hutchinson(
        &self,
        f: &DeltaFactor,
        t: usize,
        probes: usize,
        seed: u64,
        order: Order,
        traces: &mut DVector<f64>,
        pair_traces: &mut DMatrix<f64>,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64);
        let d = self.d;
        let ops = &self.ops[t];
        for _ in 0..probes {
            let z = DVector::from_fn(self.m, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 });
            let y = f.solve(&z);
            let wz: Vec<DVector<f64>> = if order == Order::Hessian {
                ops.iter().map(|w| w.mul_vec(&y)).collect()
            } else {
                Vec::new()
            };
            for k in 0..d {
                let wk_y = if order == Order::Hessian { wz[k].clone() } else { ops[k].mul_vec(&y) };
                traces[k] += z.dot(&wk_y);
            }
            if order == Order::Hessian {
                // tr(W_k D^-1 W_l D^-1) ~ z' W_k D^-1 (W_l D^-1 z)
                let solved: Vec<DVector<f64>> = wz.iter().map(|v| f.solve(v)).collect();
                for k in 0..d {
                    for l in 0..d {
                        pair_traces[(k, l)] += z.dot(&ops[k].mul_vec(&solved[l]));
                    }
                }
            }
        }
        *traces /= probes as f64;
        if order == Order::Hessian {
            *pair_traces /= probes as f64;
            let sym = (pair_traces.clone() + pair_traces.transpose()) * 0.5;
            *pair_traces = sym;
        }
    }

    fn evaluate(&self, lambda: &DVector<f64>, order: Order) -> Result<Evaluation> {
        let d = self.d;
        let n = self.nobs;
        let rss = self.rss(lambda);
        if !(rss > 0.0) {
            return Err(MirError::DegenerateResponse);
        }
        let terms = par::map_range(self.periods(), |t| self.period_terms(lambda, t, order));
        let mut log_det = 0.0;
        let mut traces = DVector::zeros(if order >= Order::Gradient { d } else { 0 });
        let mut pairs = DMatrix::zeros(if order == Order::Hessian { d } else { 0 }, if order == Order::Hessian { d } else { 0 });
        for term in terms {
            let term = term?;
            log_det += term.log_det;
            if order >= Order::Gradient {
                traces += &term.traces;
            }
            if order == Order::Hessian {
                pairs += &term.pair_traces;
            }
        }
        let loglik = -0.5 * n * ((2.0 * std::f64::consts::PI).ln() + 1.0) - 0.5 * n * (rss / n).ln() + log_det;
        let mut grad = DVector::zeros(0);
        let mut hess = DMatrix::zeros(0, 0);
        if order >= Order::Gradient {
            let u = Self::u(lambda);
            let gu = &self.gram * &u;
            // dRSS/dlambda_k = -2 (G u)_{k+1}
            let drss = DVector::from_fn(d, |k, _| -2.0 * gu[k + 1]);
            grad = DVector::from_fn(d, |k, _| -0.5 * n * drss[k] / rss - traces[k]);
            if order == Order::Hessian {
                hess = DMatrix::from_fn(d, d, |k, l| {
                    let d2 = 2.0 * self.gram[(k + 1, l + 1)];
                    -0.5 * n * (d2 / rss - drss[k] * drss[l] / (rss * rss)) - pairs[(k, l)]
                });
            }
        }
        Ok(Evaluation { loglik, grad, hess })
    }

    pub fn loglik(&self, lambda: &DVector<f64>) -> Result<f64> {
        Ok(self.evaluate(lambda, Order::Value)?.loglik)
    }

    #[cfg(test)]
    pub fn gradient(&self, lambda: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.evaluate(lambda, Order::Gradient)?.grad)
    }

    #[cfg(test)]
    pub fn hessian(&self, lambda: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.evaluate(lambda, Order::Hessian)?.hess)
    }

    /// `sum_t tr(W_k Delta_t^{-1})` and `sum_t tr(W_k Delta_t^{-1} W_l Delta_t^{-1})`.
    pub fn trace_sums(&self, lambda: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let terms = par::map_range(self.periods(), |t| self.period_terms(lambda, t, Order::Hessian));
        let mut traces = DVector::zeros(self.d);
        let mut pairs = DMatrix::zeros(self.d, self.d);
        for term in terms {
            let term = term?;
            traces += &term.traces;
            pairs += &term.pair_traces;
        }
        Ok((traces, pairs))
    }

    /// Borrowed operators of period `t`.
    pub fn period_ops(&self, t: usize) -> Vec<&WeightMatrix> {
        self.ops[t].iter().map(|c| c.as_ref()).collect()
    }

    /// Regressor block of period `t` (after any within transform).
    pub fn regressors(&self, t: usize) -> DMatrix<f64> {
        self.columns[t].columns(1 + self.d, self.p).into_owned()
    }

    pub fn maximize(&self, opts: &OptimizerOptions) -> Result<Optimum> {
        maximize(self, &DVector::zeros(self.d), opts)
    }

    /// Best optimum over `lambda = 0` and `starts`. Converged runs beat
    /// non-converged ones; ties in likelihood keep the earlier start.
    pub fn maximize_from(&self, starts: &[DVector<f64>], opts: &OptimizerOptions) -> Result<Optimum> {
        let mut best = self.maximize(opts);
        for x0 in starts {
            if x0.len() != self.d {
                return Err(MirError::Dimension {
                    what: "starting point".into(),
                    expected: self.d,
                    found: x0.len(),
                });
            }
            let Ok(cand) = maximize(self, x0, opts) else { continue };
            let wins = match &best {
                Err(_) => true,
                Ok(b) => (cand.converged, cand.value) > (b.converged, b.value),
            };
            if wins {
                best = Ok(cand);
            }
        }
        best
    }
}

impl Objective for Profile<'_> {
    fn dim(&self) -> usize {
        self.d
    }

    fn scale(&self) -> f64 {
        self.nobs
    }

    fn value(&self, x: &DVector<f64>) -> Result<f64> {
        self.loglik(x)
    }

    fn value_grad(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let e = self.evaluate(x, Order::Gradient)?;
        Ok((e.loglik, e.grad))
    }

    fn value_grad_hess(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let e = self.evaluate(x, Order::Hessian)?;
        Ok((e.loglik, e.grad, e.hess))
    }
}

fn check_condition(s: &DMatrix<f64>) -> Result<()> {
    let eig = s.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(min > 0.0) || max / min > MAX_REGRESSOR_CONDITION {
        return Err(MirError::RankDeficient(format!(
            "pooled regressor cross-product has condition number {:.3e}",
            if min > 0.0 { max / min } else { f64::INFINITY }
        )));
    }
    Ok(())
}
