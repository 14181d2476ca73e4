//! Projected Newton and projected BFGS ascent over the admissible `lambda` region.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MirError, Result};
use crate::model::Feasibility;

/// A smooth objective to be maximized.
pub trait Objective {
    fn dim(&self) -> usize;
    /// Scale used for the gradient tolerance (the number of observations).
    fn scale(&self) -> f64;
    fn value(&self, x: &DVector<f64>) -> Result<f64>;
    fn value_grad(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)>;
    fn value_grad_hess(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>, DMatrix<f64>)>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Exact Hessian, modified to be negative definite when needed.
    #[default]
    Newton,
    /// Quasi-Newton with BFGS updates of the inverse Hessian.
    Bfgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerOptions {
    pub method: Method,
    pub max_iter: usize,
    /// Projected-gradient tolerance, multiplied by the number of observations.
    pub grad_tol: f64,
    /// Relative tolerance on successive objective values.
    pub f_tol: f64,
    pub feasibility: Feasibility,
    pub armijo: f64,
    pub max_backtracks: usize,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self {
            method: Method::Newton,
            max_iter: 500,
            grad_tol: 1e-6,
            f_tol: 1e-9,
            feasibility: Feasibility::default(),
            armijo: 1e-4,
            max_backtracks: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimum {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad: DVector<f64>,
    pub projected_grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// KKT residual in gradient units: `L |x - P(x + g / L)|`.
fn projected_grad(x: &DVector<f64>, g: &DVector<f64>, feas: &Feasibility, curvature: f64) -> f64 {
    let l = curvature.max(1e-12);
    (x - feas.project(&(x + g / l))).norm() * l
}

/// `Q = -H` shifted until positive definite.
fn positive_curvature(h: &DMatrix<f64>) -> DMatrix<f64> {
    let q = -h;
    let base = q.diagonal().iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-12);
    let mut shift = 0.0;
    for _ in 0..60 {
        let shifted = &q + DMatrix::identity(q.nrows(), q.ncols()) * shift;
        if shifted.clone().cholesky().is_some() {
            return shifted;
        }
        shift = if shift == 0.0 { 1e-8 * base } else { shift * 10.0 };
    }
    DMatrix::identity(q.nrows(), q.ncols()) * base
}

/// Maximize the model `g's - s'Qs/2` over `x + s` feasible.
///
/// Unconstrained Newton point when it is feasible, otherwise accelerated
/// projected gradient on the quadratic model.
fn model_step(x: &DVector<f64>, g: &DVector<f64>, q: &DMatrix<f64>, feas: &Feasibility) -> DVector<f64> {
    let chol = q.clone().cholesky().expect("curvature made positive definite");
    let newton = x + chol.solve(g);
    let projected = feas.project(&newton);
    if (&projected - &newton).amax() == 0.0 {
        return newton - x;
    }
    let l = q.clone().symmetric_eigen().eigenvalues.max();
    let mut z = projected.clone();
    let mut y = z.clone();
    let mut tk = 1.0f64;
    for _ in 0..2000 {
        let grad = q * (&y - x) - g;
        let zn = feas.project(&(&y - grad / l));
        let tn = 0.5 * (1.0 + (1.0 + 4.0 * tk * tk).sqrt());
        let moved = (&zn - &z).amax();
        y = &zn + (&zn - &z) * ((tk - 1.0) / tn);
        z = zn;
        tk = tn;
        if moved < 1e-15 {
            break;
        }
    }
    z - x
}

/// Maximize `obj` starting from `x0` (projected first when infeasible).
pub fn maximize<O: Objective>(obj: &O, x0: &DVector<f64>, opts: &OptimizerOptions) -> Result<Optimum> {
    let feas = opts.feasibility;
    let mut x = feas.project(x0);
    let dim = x.len();
    let tol = opts.grad_tol * obj.scale().max(1.0);
    if dim == 0 {
        let value = obj.value(&x)?;
        return Ok(Optimum { x, value, grad: DVector::zeros(0), projected_grad_norm: 0.0, iterations: 0, converged: true });
    }
    let eval = |x: &DVector<f64>| -> Result<(f64, DVector<f64>, Option<DMatrix<f64>>)> {
        match opts.method {
            Method::Newton => obj.value_grad_hess(x).map(|(f, g, h)| (f, g, Some(h))),
            Method::Bfgs => obj.value_grad(x).map(|(f, g)| (f, g, None)),
        }
    };
    let (mut f, mut g, h) = eval(&x)?;
    // curvature of -f: exact for Newton, BFGS approximation otherwise
    let mut q = match &h {
        Some(h) => positive_curvature(h),
        None => DMatrix::identity(dim, dim) * g.amax().max(1.0) * 10.0,
    };
    let mut first_bfgs = true;
    let curvature = |q: &DMatrix<f64>| q.diagonal().amax();
    let mut pg = projected_grad(&x, &g, &feas, curvature(&q));
    let mut iterations = 0;
    let mut converged = pg <= tol;
    while !converged && iterations < opts.max_iter {
        iterations += 1;
        let step = model_step(&x, &g, &q, &feas);
        let mut accepted = None;
        let mut alpha = 1.0;
        for _ in 0..opts.max_backtracks {
            let xn = &x + &step * alpha;
            let gain = g.dot(&(&xn - &x));
            match obj.value(&xn) {
                Ok(fnew) if fnew.is_finite() && fnew >= f + opts.armijo * alpha * gain.max(0.0) => {
                    accepted = Some((xn, alpha));
                    break;
                }
                Ok(_) | Err(MirError::Singular { .. }) => alpha *= 0.5,
                Err(e) => return Err(e),
            }
        }
        let Some((xn, alpha)) = accepted else {
            break;
        };
        let (fnew, gn, hn) = eval(&xn)?;
        match hn {
            Some(h) => q = positive_curvature(&h),
            None => {
                // BFGS update of the curvature of -f
                let s = &xn - &x;
                let y = &g - &gn;
                let sy = s.dot(&y);
                if sy > 1e-12 * s.norm() * y.norm() {
                    if first_bfgs {
                        q = DMatrix::identity(dim, dim) * (y.norm_squared() / sy);
                        first_bfgs = false;
                    }
                    let qs = &q * &s;
                    q = &q - &qs * qs.transpose() / s.dot(&qs) + &y * y.transpose() / sy;
                }
            }
        }
        let df = (fnew - f).abs();
        x = xn;
        f = fnew;
        g = gn;
        pg = projected_grad(&x, &g, &feas, curvature(&q));
        converged = pg <= tol || (alpha == 1.0 && df <= opts.f_tol * (1.0 + f.abs()) && pg <= tol.sqrt());
    }
    Ok(Optimum { x, value: f, grad: g, projected_grad_norm: pg, iterations, converged })
}
