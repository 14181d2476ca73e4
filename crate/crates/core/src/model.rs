//! Likelihood machinery of the mutual influence model.

use std::ops::AddAssign;

use nalgebra::{DMatrix, DVector, Dyn, LU};
use serde::{Deserialize, Serialize};

use crate::error::{MirError, Result};
use crate::par;
use crate::weights::{WeightMatrix, WeightSet};

/// Default margin `varsigma` of the parameter space `sum |lambda_k| < 1 - varsigma`.
pub const DEFAULT_VARSIGMA: f64 = 1e-3;

/// Relative pivot size below which `Delta_t` is treated as singular.
pub const SINGULAR_PIVOT_TOL: f64 = 1e-12;

/// Largest dimension for which traces use the dense inverse.
pub const EXACT_TRACE_MAX_DIM: usize = 256;

/// Parameters `(lambda, sigma^2)` of the base model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub lambda: DVector<f64>,
    pub sigma2: f64,
}

impl Theta {
    pub fn new(lambda: DVector<f64>, sigma2: f64) -> Self {
        Self { lambda, sigma2 }
    }

    pub fn d(&self) -> usize {
        self.lambda.len()
    }
}

/// Admissible region for `lambda`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Feasibility {
    /// The l1 ball `sum |lambda_k| <= 1 - varsigma`.
    L1Ball { varsigma: f64 },
    /// Any `lambda` for which every `Delta_t` is numerically invertible.
    Invertible,
}

impl Default for Feasibility {
    fn default() -> Self {
        Feasibility::L1Ball { varsigma: DEFAULT_VARSIGMA }
    }
}

impl Feasibility {
    pub fn project(&self, lambda: &DVector<f64>) -> DVector<f64> {
        match *self {
            Feasibility::L1Ball { varsigma } => project_to_lambda_space(lambda, varsigma),
            Feasibility::Invertible => lambda.clone(),
        }
    }

    pub fn contains(&self, lambda: &DVector<f64>) -> bool {
        match *self {
            Feasibility::L1Ball { varsigma } => lambda.lp_norm(1) <= 1.0 - varsigma + 1e-12,
            Feasibility::Invertible => lambda.iter().all(|v| v.is_finite()),
        }
    }
}

/// Responses and weights. `y` is `n x T`; column `t` is `Y_t`.
#[derive(Debug, Clone)]
pub struct MirData {
    pub y: DMatrix<f64>,
    pub weights: WeightSet,
}

impl MirData {
    pub fn new(y: DMatrix<f64>, weights: WeightSet) -> Result<Self> {
        if y.nrows() != weights.n() {
            return Err(MirError::Dimension {
                what: "actors in Y vs weights".into(),
                expected: weights.n(),
                found: y.nrows(),
            });
        }
        if y.ncols() != weights.periods() {
            return Err(MirError::Dimension {
                what: "periods in Y vs weights".into(),
                expected: weights.periods(),
                found: y.ncols(),
            });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(MirError::InvalidInput("Y contains non-finite values".into()));
        }
        Ok(Self { y, weights })
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn periods(&self) -> usize {
        self.y.ncols()
    }

    pub fn d(&self) -> usize {
        self.weights.d()
    }

    pub fn nobs(&self) -> usize {
        self.n() * self.periods()
    }

    pub fn y_t(&self, t: usize) -> DVector<f64> {
        self.y.column(t).into_owned()
    }

    /// Same responses with only the listed weight matrices.
    pub fn restrict(&self, subset: &[usize]) -> Result<Self> {
        Ok(Self { y: self.y.clone(), weights: self.weights.restrict(subset)? })
    }
}

/// `Delta_t(lambda)` with its LU factorization.
#[derive(Debug, Clone)]
pub struct DeltaFactor {
    pub t: usize,
    pub delta: DMatrix<f64>,
    lu: LU<f64, Dyn, Dyn>,
    pub log_abs_det: f64,
    /// Sign of the determinant, kept for diagnostics.
    pub det_sign: f64,
}

impl DeltaFactor {
    pub fn dim(&self) -> usize {
        self.delta.nrows()
    }

    /// `Delta^{-1} v`.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        self.lu.solve(v).expect("factor checked nonsingular")
    }

    pub fn solve_mat(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.lu.solve(m).expect("factor checked nonsingular")
    }

    /// `Delta^{-T} v`.
    pub fn solve_transpose(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v.clone();
        // P A = L U, so A^T x = v  <=>  U^T L^T P x = v
        let l = self.lu.l();
        let u = self.lu.u();
        u.tr_solve_upper_triangular_mut(&mut out);
        l.tr_solve_lower_triangular_mut(&mut out);
        self.lu.p().inv_permute_rows(&mut out);
        out
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.lu.try_inverse().expect("factor checked nonsingular")
    }
}

/// Factorize `I - sum_k lambda_k ops[k]`.
pub fn factor_delta(ops: &[&WeightMatrix], lambda: &DVector<f64>, t: usize) -> Result<DeltaFactor> {
    if ops.len() != lambda.len() {
        return Err(MirError::Dimension { what: "lambda length".into(), expected: ops.len(), found: lambda.len() });
    }
    let m = ops.first().map(|w| w.dim()).unwrap_or(0);
    let mut delta = DMatrix::identity(m, m);
    for (w, &l) in ops.iter().zip(lambda.iter()) {
        if l != 0.0 {
            w.add_scaled_to(-l, &mut delta);
        }
    }
    factor_matrix(delta, t)
}

pub(crate) fn factor_matrix(delta: DMatrix<f64>, t: usize) -> Result<DeltaFactor> {
    let scale = delta.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    let lu = delta.clone().lu();
    let mut log_abs_det = 0.0;
    let mut sign = lu.p().determinant::<f64>();
    let diag = lu.u().diagonal();
    for &p in diag.iter() {
        if !(p.abs() > SINGULAR_PIVOT_TOL * scale) || !p.is_finite() {
            return Err(MirError::Singular { t: t + 1 });
        }
        log_abs_det += p.abs().ln();
        if p < 0.0 {
            sign = -sign;
        }
    }
    Ok(DeltaFactor { t, delta, lu, log_abs_det, det_sign: sign })
}

/// `Delta_t(lambda)` for the data's weights.
pub fn delta(data: &MirData, lambda: &DVector<f64>, t: usize) -> Result<DeltaFactor> {
    let ops: Vec<&WeightMatrix> = data.weights.period(t).iter().collect();
    factor_delta(&ops, lambda, t)
}

/// Residuals `Delta_t(lambda) Y_t` as an `n x T` matrix.
pub fn residuals(data: &MirData, lambda: &DVector<f64>) -> DMatrix<f64> {
    let mut out = data.y.clone();
    for t in 0..data.periods() {
        let y = data.y.column(t).into_owned();
        for (k, &l) in lambda.iter().enumerate() {
            if l != 0.0 {
                let wy = data.weights.get(k, t).mul_vec(&y);
                let mut col = out.column_mut(t);
                col.axpy(-l, &wy, 1.0);
            }
        }
    }
    out
}

/// `sigma^2(lambda) = (nT)^{-1} sum_t |Delta_t Y_t|^2`.
pub fn sigma2_profile(data: &MirData, lambda: &DVector<f64>) -> Result<f64> {
    let r = residuals(data, lambda);
    let s2 = r.norm_squared() / data.nobs() as f64;
    if !(s2 > 0.0) {
        return Err(MirError::DegenerateResponse);
    }
    Ok(s2)
}

fn sum_log_det(data: &MirData, lambda: &DVector<f64>) -> Result<f64> {
    let parts = par::map_range(data.periods(), |t| delta(data, lambda, t).map(|f| f.log_abs_det));
    let mut acc = 0.0;
    for p in parts {
        acc += p?;
    }
    Ok(acc)
}

/// Concentrated log-likelihood with `sigma^2` profiled out.
pub fn concentrated_loglik(data: &MirData, lambda: &DVector<f64>) -> Result<f64> {
    let nt = data.nobs() as f64;
    let s2 = sigma2_profile(data, lambda)?;
    let ld = sum_log_det(data, lambda)?;
    Ok(-0.5 * nt * (2.0 * std::f64::consts::PI).ln() - 0.5 * nt - 0.5 * nt * s2.ln() + ld)
}

/// Gaussian quasi log-likelihood at `theta`.
pub fn full_loglik(data: &MirData, theta: &Theta) -> Result<f64> {
    if !(theta.sigma2 > 0.0) {
        return Err(MirError::InvalidInput("sigma2 must be positive".into()));
    }
    let nt = data.nobs() as f64;
    let rss = residuals(data, &theta.lambda).norm_squared();
    let ld = sum_log_det(data, &theta.lambda)?;
    Ok(-0.5 * nt * (2.0 * std::f64::consts::PI * theta.sigma2).ln() + ld - rss / (2.0 * theta.sigma2))
}

/// Analytic gradient of [`full_loglik`] with respect to `(lambda, sigma^2)`.
pub fn score(data: &MirData, theta: &Theta) -> Result<DVector<f64>> {
    let d = data.d();
    let s2 = theta.sigma2;
    let per_t = par::map_range(data.periods(), |t| -> Result<(DVector<f64>, f64)> {
        let f = delta(data, &theta.lambda, t)?;
        let y = data.y_t(t);
        let r = &f.delta * &y;
        let inv = f.inverse();
        let mut g = DVector::zeros(d);
        for k in 0..d {
            let w = data.weights.get(k, t);
            g[k] = w.mul_vec(&y).dot(&r) / s2 - w.trace_mul(&inv);
        }
        Ok((g, r.norm_squared()))
    });
    let mut grad = DVector::zeros(d + 1);
    let mut rss = 0.0;
    for p in per_t {
        let (g, r) = p?;
        grad.rows_mut(0, d).add_assign(&g);
        rss += r;
    }
    grad[d] = -(data.nobs() as f64) / (2.0 * s2) + rss / (2.0 * s2 * s2);
    Ok(grad)
}

/// Euclidean projection onto `{ x : |x|_1 <= 1 - varsigma }`.
pub fn project_to_lambda_space(lambda: &DVector<f64>, varsigma: f64) -> DVector<f64> {
    let radius = (1.0 - varsigma).max(0.0);
    if lambda.lp_norm(1) <= radius {
        return lambda.clone();
    }
    let mut mags: Vec<f64> = lambda.iter().map(|v| v.abs()).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut shift = 0.0;
    for (j, &u) in mags.iter().enumerate() {
        cum += u;
        let candidate = (cum - radius) / (j + 1) as f64;
        if u > candidate {
            shift = candidate;
        }
    }
    lambda.map(|v| v.signum() * (v.abs() - shift).max(0.0))
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::weights::{build_weight_set, AttributePanel};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_data(n: usize, periods: usize, d: usize, lambda: &[f64], seed: u64) -> MirData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..d)
            .map(|_| (0..periods).map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect()).collect())
            .collect();
        let panel = AttributePanel::continuous(values).unwrap();
        let ws = build_weight_set(&panel, 0.4).unwrap();
        let lam = DVector::from_column_slice(lambda);
        let mut y = DMatrix::zeros(n, periods);
        for t in 0..periods {
            let eps = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let ops: Vec<&WeightMatrix> = ws.period(t).iter().collect();
            let f = factor_delta(&ops, &lam, t).unwrap();
            y.set_column(t, &f.solve(&eps));
        }
        MirData::new(y, ws).unwrap()
    }

    fn swap_pair() -> WeightSet {
        let w = DMatrix::from_row_slice(2, 2, &[0., 1., 1., 0.]);
        WeightSet::from_dense(vec![vec![w]]).unwrap()
    }

    #[test]
    fn delta_identity_at_zero() {
        let data = random_data(6, 2, 2, &[0.0, 0.0], 1);
        let f = delta(&data, &DVector::zeros(2), 1).unwrap();
        assert_eq!(f.delta, DMatrix::identity(6, 6));
        assert_eq!(f.log_abs_det, 0.0);
    }

    #[test]
    fn delta_two_by_two() {
        let data = MirData::new(DMatrix::from_element(2, 1, 1.0), swap_pair()).unwrap();
        let f = delta(&data, &DVector::from_element(1, 0.5), 0).unwrap();
        assert_eq!(f.delta, DMatrix::from_row_slice(2, 2, &[1.0, -0.5, -0.5, 1.0]));
        // 1*1 - (-0.5)(-0.5)
        assert!((f.log_abs_det - 0.75f64.ln()).abs() < 1e-15);
        assert_eq!(f.det_sign, 1.0);
    }

    #[test]
    fn delta_singular_is_reported() {
        let data = MirData::new(DMatrix::from_element(2, 1, 1.0), swap_pair()).unwrap();
        match delta(&data, &DVector::from_element(1, 1.0), 0) {
            Err(MirError::Singular { t }) => assert_eq!(t, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn delta_reconstruction_and_transpose_solve() {
        let data = random_data(9, 1, 3, &[0.0; 3], 2);
        let lam = DVector::from_vec(vec![0.3, -0.2, 0.25]);
        let f = delta(&data, &lam, 0).unwrap();
        let mut expect = DMatrix::identity(9, 9);
        for k in 0..3 {
            expect -= data.weights.get(k, 0).to_dense() * lam[k];
        }
        assert!((&f.delta - &expect).abs().max() < 1e-10);
        let v = DVector::from_fn(9, |i, _| (i as f64).sin());
        let x = f.solve_transpose(&v);
        assert!((f.delta.transpose() * x - v).abs().max() < 1e-12);
        let logdet = expect.determinant().abs().ln();
        assert!((f.log_abs_det - logdet).abs() < 1e-10);
    }

    #[test]
    fn sigma2_at_zero_and_scaling() {
        let data = random_data(7, 3, 2, &[0.2, 0.1], 3);
        let z = DVector::zeros(2);
        let s0 = sigma2_profile(&data, &z).unwrap();
        assert!((s0 - data.y.norm_squared() / 21.0).abs() < 1e-14);
        let lam = DVector::from_vec(vec![0.2, 0.1]);
        let mut scaled = data.clone();
        scaled.y *= 3.0;
        let a = sigma2_profile(&data, &lam).unwrap();
        let b = sigma2_profile(&scaled, &lam).unwrap();
        assert!((b - 9.0 * a).abs() < 1e-12 * b);
    }

    #[test]
    fn sigma2_at_truth_recovers_error_moment() {
        let (n, periods, seed) = (8, 4, 5);
        let lam = [0.3, 0.2];
        let data = random_data(n, periods, 2, &lam, seed);
        // replay the generator to recover eps
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..(2 * periods * n) {
            let _: f64 = rng.sample(StandardNormal);
        }
        let mut ss = 0.0;
        for _ in 0..periods {
            for _ in 0..n {
                let e: f64 = rng.sample(StandardNormal);
                ss += e * e;
            }
        }
        let s2 = sigma2_profile(&data, &DVector::from_column_slice(&lam)).unwrap();
        assert!((s2 - ss / (n * periods) as f64).abs() < 1e-12);
    }

    #[test]
    fn degenerate_response_is_an_error() {
        let data = MirData::new(DMatrix::zeros(2, 1), swap_pair()).unwrap();
        assert!(matches!(sigma2_profile(&data, &DVector::zeros(1)), Err(MirError::DegenerateResponse)));
        assert!(concentrated_loglik(&data, &DVector::zeros(1)).is_err());
    }

    #[test]
    fn concentrated_at_zero_matches_closed_form() {
        let data = random_data(6, 3, 2, &[0.1, 0.1], 4);
        let nt = 18.0;
        let s2 = data.y.norm_squared() / nt;
        let expect = -0.5 * nt * (2.0 * std::f64::consts::PI).ln() - 0.5 * nt - 0.5 * nt * s2.ln();
        let got = concentrated_loglik(&data, &DVector::zeros(2)).unwrap();
        assert!((got - expect).abs() < 1e-10);
    }

    #[test]
    fn full_loglik_zero_data() {
        let data = MirData::new(DMatrix::zeros(2, 3), {
            let w = DMatrix::from_row_slice(2, 2, &[0., 1., 1., 0.]);
            WeightSet::from_dense(vec![vec![w.clone()], vec![w.clone()], vec![w]]).unwrap()
        })
        .unwrap();
        let th = Theta::new(DVector::zeros(1), 1.0);
        let expect = -3.0 * (2.0 * std::f64::consts::PI).ln();
        assert!((full_loglik(&data, &th).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn concentrated_equals_full_at_profiled_sigma() {
        let data = random_data(10, 4, 3, &[0.2, 0.1, 0.2], 6);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let lam = project_to_lambda_space(
                &DVector::from_fn(3, |_, _| rng.random_range(-0.6..0.6)),
                DEFAULT_VARSIGMA,
            );
            let lc = concentrated_loglik(&data, &lam).unwrap();
            let s2 = sigma2_profile(&data, &lam).unwrap();
            let lf = full_loglik(&data, &Theta::new(lam, s2)).unwrap();
            assert!((lc - lf).abs() < 1e-9, "{lc} vs {lf}");
        }
    }

    #[test]
    fn score_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for rep in 0..20 {
            let data = random_data(10, 3, 3, &[0.2, 0.2, 0.1], 100 + rep);
            let lam = DVector::from_fn(3, |_, _| rng.random_range(-0.3..0.3));
            let th = Theta::new(lam, rng.random_range(0.5..2.0));
            let g = score(&data, &th).unwrap();
            for j in 0..4 {
                let h = 1e-5;
                let mut plus = th.clone();
                let mut minus = th.clone();
                if j < 3 {
                    plus.lambda[j] += h;
                    minus.lambda[j] -= h;
                } else {
                    plus.sigma2 += h;
                    minus.sigma2 -= h;
                }
                let fd = (full_loglik(&data, &plus).unwrap() - full_loglik(&data, &minus).unwrap()) / (2.0 * h);
                let rel = (fd - g[j]).abs() / g[j].abs().max(1.0);
                assert!(rel < 1e-5, "component {j}: {fd} vs {}", g[j]);
            }
        }
    }

    #[test]
    fn score_sigma_component_vanishes_at_profile() {
        let data = random_data(8, 3, 2, &[0.2, 0.2], 8);
        let lam = DVector::from_vec(vec![0.1, 0.3]);
        let s2 = sigma2_profile(&data, &lam).unwrap();
        let g = score(&data, &Theta::new(lam, s2)).unwrap();
        assert!(g[2].abs() < 1e-9);
    }

    #[test]
    fn score_at_zero_data_is_minus_trace() {
        let mut data = random_data(6, 2, 2, &[0.0, 0.0], 9);
        data.y.fill(0.0);
        let lam = DVector::from_vec(vec![0.3, 0.2]);
        let g = score(&data, &Theta::new(lam.clone(), 1.0)).unwrap();
        for k in 0..2 {
            let mut tr = 0.0;
            for t in 0..2 {
                let inv = delta(&data, &lam, t).unwrap().delta.try_inverse().unwrap();
                tr += (data.weights.get(k, t).to_dense() * inv).trace();
            }
            assert!((g[k] + tr).abs() < 1e-10);
        }
    }

    #[test]
    fn projection_examples() {
        let v = DVector::from_vec(vec![0.1, 0.1]);
        assert_eq!(project_to_lambda_space(&v, 0.01), v);
        let p = project_to_lambda_space(&DVector::from_vec(vec![2.0, 0.0]), 0.0);
        assert_eq!(p, DVector::from_vec(vec![1.0, 0.0]));
        let p = project_to_lambda_space(&DVector::from_vec(vec![0.8, 0.8]), 0.005);
        assert!((p[0] - 0.4975).abs() < 1e-12 && (p[1] - 0.4975).abs() < 1e-12);
    }

    /// Brute-force projection: minimize |x - v|^2 on the ball by bisection
    /// over the KKT shift.
    fn kkt_projection(v: &DVector<f64>, radius: f64) -> DVector<f64> {
        if v.lp_norm(1) <= radius {
            return v.clone();
        }
        let (mut lo, mut hi) = (0.0, v.amax());
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let s: f64 = v.iter().map(|x| (x.abs() - mid).max(0.0)).sum();
            if s > radius {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let shift = 0.5 * (lo + hi);
        v.map(|x| x.signum() * (x.abs() - shift).max(0.0))
    }

    #[test]
    fn log_det_nonpositive_for_nonnegative_lambda() {
        let data = random_data(12, 3, 3, &[0.0; 3], 10);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..30 {
            let raw = DVector::from_fn(3, |_, _| rng.random_range(0.0..0.5));
            let lam = project_to_lambda_space(&raw, DEFAULT_VARSIGMA);
            for t in 0..3 {
                assert!(delta(&data, &lam, t).unwrap().log_abs_det <= 1e-12);
            }
        }
    }

    #[test]
    fn concentrated_is_permutation_invariant() {
        let data = random_data(9, 2, 2, &[0.2, 0.3], 12);
        let perm = [3usize, 0, 8, 1, 7, 2, 6, 4, 5];
        let y = DMatrix::from_fn(9, 2, |i, t| data.y[(perm[i], t)]);
        let mats = (0..2)
            .map(|t| {
                (0..2)
                    .map(|k| {
                        let w = data.weights.get(k, t).to_dense();
                        DMatrix::from_fn(9, 9, |i, j| w[(perm[i], perm[j])])
                    })
                    .collect()
            })
            .collect();
        let permuted = MirData::new(y, WeightSet::from_dense(mats).unwrap()).unwrap();
        let lam = DVector::from_vec(vec![0.25, 0.15]);
        let a = concentrated_loglik(&data, &lam).unwrap();
        let b = concentrated_loglik(&permuted, &lam).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn projection_matches_kkt(v in proptest::collection::vec(-3.0f64..3.0, 1..=4), vs in 0.0f64..0.5) {
            let v = DVector::from_vec(v);
            let p = project_to_lambda_space(&v, vs);
            let q = kkt_projection(&v, 1.0 - vs);
            prop_assert!(p.lp_norm(1) <= 1.0 - vs + 1e-12);
            prop_assert!((&p - &q).amax() < 1e-9);
        }

        #[test]
        fn sigma2_positive_inside_space(seed in 0u64..500) {
            let data = random_data(6, 2, 2, &[0.2, 0.2], seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lam = project_to_lambda_space(&DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0)), DEFAULT_VARSIGMA);
            prop_assert!(sigma2_profile(&data, &lam).unwrap() > 0.0);
        }
    }
}
