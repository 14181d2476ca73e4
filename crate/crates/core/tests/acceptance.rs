//! Acceptance suite.
//!
//! Runs every criterion at its stated tolerance and prints one `PASS` or
//! `FAIL` line per criterion. Pass a substring as the first argument to run a
//! subset (`cargo test --test acceptance -- selection`). The exit status is
//! non-zero on failure only when `MIR_ACCEPTANCE_STRICT=1`, so a red line does
//! not hide the rest of the test run.

use std::time::Instant;

use mir_core::estimate::info_i;
use mir_core::extensions::helmert_basis;
use mir_core::gof::{distinct_triple_sum, rank_one_loss};
use mir_core::model::{concentrated_loglik, full_loglik, project_to_lambda_space, score, sigma2_profile};
use mir_core::simlab::{run_study, ErrorDist, Setting, SimConfig, SimReport, Task};
use mir_core::weights::{build_weight_set, AttributePanel};
use mir_core::{MirData, Theta, WeightMatrix};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Relative band used for "SE close to x": the estimation criterion's
/// [0.020, 0.028] around 0.024.
const SE_BAND: (f64, f64) = (0.020 / 0.024, 0.028 / 0.024);

struct Verdict {
    pass: bool,
    detail: String,
}

#[derive(Default)]
struct Checks {
    failed: Vec<String>,
    notes: Vec<String>,
}

impl Checks {
    fn check(&mut self, ok: bool, what: String) {
        if ok {
            self.notes.push(what);
        } else {
            self.failed.push(what);
        }
    }

    fn verdict(self) -> Verdict {
        let pass = self.failed.is_empty();
        let detail = if pass { self.notes.join("; ") } else { format!("failed: {}", self.failed.join("; ")) };
        Verdict { pass, detail }
    }
}

fn study(cfg: SimConfig) -> SimReport {
    run_study(&cfg).unwrap_or_else(|e| panic!("study {} failed: {e}", cfg.cell_label()))
}

fn cell(d: usize, replications: usize, base_seed: u64) -> SimConfig {
    SimConfig { n: 50, periods: 50, d, replications, base_seed, ..SimConfig::default() }
}

fn se_close(c: &mut Checks, label: &str, se: f64, target: f64) {
    let (lo, hi) = (target * SE_BAND.0, target * SE_BAND.1);
    c.check((lo..=hi).contains(&se), format!("{label} SE {se:.4} in [{lo:.4}, {hi:.4}]"));
}

fn estimation() -> Verdict {
    let report = study(cell(2, 200, 101));
    let mut c = Checks::default();
    for p in &report.params {
        c.check(p.bias.abs() <= 0.006, format!("{} |bias| {:.4} <= 0.006", p.name, p.bias.abs()));
        c.check((0.020..=0.028).contains(&p.se), format!("{} SE {:.4} in [0.020, 0.028]", p.name, p.se));
        let ratio = p.se / p.se_star;
        c.check((0.8..=1.25).contains(&ratio), format!("{} SE/SE* {ratio:.3} in [0.8, 1.25]", p.name));
    }
    c.verdict()
}

fn robustness() -> Verdict {
    let mut c = Checks::default();
    for (dist, seed) in [(ErrorDist::StdExponential, 201), (ErrorDist::Mixture, 202)] {
        let report = study(SimConfig { error_dist: dist, ..cell(2, 200, seed) });
        for p in &report.params {
            c.check(p.bias.abs() <= 0.008, format!("{dist:?} {} |bias| {:.4} <= 0.008", p.name, p.bias.abs()));
        }
    }
    c.verdict()
}

fn selection() -> Verdict {
    let mut lambda = vec![0.0; 8];
    lambda[..3].fill(0.2);
    let cfg = SimConfig {
        lambda_true: lambda,
        gamma: 2.0,
        task: Task::Select { q_max: None, strategy: Default::default() },
        ..cell(8, 200, 301)
    };
    let s = study(cfg).selection.expect("selection summary");
    let mut c = Checks::default();
    c.check((75.0..=90.0).contains(&s.correct_fit), format!("CT {:.1}% in [75, 90]", s.correct_fit));
    c.check(s.true_positive_rate >= 95.0, format!("TPR {:.1}% >= 95", s.true_positive_rate));
    c.check(s.false_positive_rate <= 9.0, format!("FPR {:.1}% <= 9", s.false_positive_rate));
    c.check((3.0..=3.3).contains(&s.avg_size), format!("AS {:.3} in [3.0, 3.3]", s.avg_size));
    c.verdict()
}

fn test_size_power() -> Verdict {
    let rates: Vec<f64> = [0.0, 0.1, 0.2]
        .iter()
        .map(|&kappa| {
            let cfg = SimConfig {
                setting: Setting::Alternative { kappa },
                task: Task::Test { alpha: 0.05 },
                ..cell(2, 300, 401)
            };
            study(cfg).test.expect("test summary").rate
        })
        .collect();
    let mut c = Checks::default();
    c.check((0.01..=0.07).contains(&rates[0]), format!("size {:.3} in [0.01, 0.07]", rates[0]));
    c.check(rates[2] >= 0.80, format!("power at kappa=0.2 {:.3} >= 0.80", rates[2]));
    c.check(
        rates[0] <= rates[1] && rates[1] <= rates[2],
        format!("monotone {:.3} <= {:.3} <= {:.3}", rates[0], rates[1], rates[2]),
    );
    c.verdict()
}

fn endogeneity() -> Verdict {
    let report = study(SimConfig { setting: Setting::Endogenous { rho: 0.5 }, ..cell(6, 200, 501) });
    let mut c = Checks::default();
    for p in &report.params {
        match p.estimator.as_str() {
            "qmle" => c.check((0.04..=0.08).contains(&p.bias), format!("naive {} bias {:.4} in [0.04, 0.08]", p.name, p.bias)),
            _ => {
                c.check(p.bias.abs() <= 0.006, format!("adjusted {} |bias| {:.4} <= 0.006", p.name, p.bias.abs()));
                se_close(&mut c, &format!("adjusted {}", p.name), p.se, 0.020);
            }
        }
    }
    c.verdict()
}

fn covariates() -> Verdict {
    let report = study(SimConfig { setting: Setting::Covariates { p: 3, beta_true: vec![] }, ..cell(6, 200, 601) });
    let mut c = Checks::default();
    for p in &report.params {
        if p.name.starts_with("lambda") {
            c.check(p.bias.abs() <= 0.004, format!("{} |bias| {:.4} <= 0.004", p.name, p.bias.abs()));
            se_close(&mut c, &p.name, p.se, 0.014);
        } else {
            se_close(&mut c, &p.name, p.se, 0.020);
        }
    }
    c.verdict()
}

fn random_data(rng: &mut ChaCha8Rng, n: usize, periods: usize, d: usize, lambda: &DVector<f64>) -> MirData {
    let values = (0..d).map(|_| (0..periods).map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect()).collect()).collect();
    let density = rng.random_range(0.2..0.6);
    let weights = build_weight_set(&AttributePanel::continuous(values).unwrap(), density).unwrap();
    responses(rng, weights, lambda)
}

fn responses(rng: &mut ChaCha8Rng, weights: mir_core::WeightSet, lambda: &DVector<f64>) -> MirData {
    let (n, periods) = (weights.n(), weights.periods());
    let mut y = DMatrix::zeros(n, periods);
    for t in 0..periods {
        let eps = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let ops: Vec<&WeightMatrix> = weights.period(t).iter().collect();
        y.set_column(t, &mir_core::model::factor_delta(&ops, lambda, t).unwrap().solve(&eps));
    }
    MirData::new(y, weights).unwrap()
}

fn random_lambda(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.random_range(-0.8..0.8) / d as f64)
}

fn score_matches_differences(c: &mut Checks, rng: &mut ChaCha8Rng) {
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (n, periods, d) = (rng.random_range(6..16), rng.random_range(2..6), rng.random_range(1..4));
        let lambda = random_lambda(rng, d);
        let data = random_data(rng, n, periods, d, &lambda);
        let theta = Theta::new(random_lambda(rng, d), rng.random_range(0.5..2.0));
        let analytic = score(&data, &theta).unwrap();
        let mut fd = DVector::zeros(d + 1);
        for j in 0..=d {
            let h = 1e-5;
            let shifted = |s: f64| {
                let mut th = theta.clone();
                if j < d {
                    th.lambda[j] += s;
                } else {
                    th.sigma2 += s;
                }
                full_loglik(&data, &th).unwrap()
            };
            fd[j] = (shifted(h) - shifted(-h)) / (2.0 * h);
        }
        worst = worst.max((&fd - &analytic).amax() / analytic.amax().max(1.0));
    }
    c.check(worst <= 1e-5, format!("score vs differences {worst:.1e} <= 1e-5"));
}

fn likelihood_identity(c: &mut Checks, rng: &mut ChaCha8Rng) {
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let d = rng.random_range(1..4);
        let truth = random_lambda(rng, d);
        let data = random_data(rng, 12, 4, d, &truth);
        let lambda = random_lambda(rng, d);
        let conc = concentrated_loglik(&data, &lambda).unwrap();
        let full = full_loglik(&data, &Theta::new(lambda.clone(), sigma2_profile(&data, &lambda).unwrap())).unwrap();
        worst = worst.max((conc - full).abs() / full.abs().max(1.0));
    }
    c.check(worst <= 1e-9, format!("concentrated vs full {worst:.1e} <= 1e-9"));
}

fn information_matches_hessian(c: &mut Checks, rng: &mut ChaCha8Rng) {
    let (n, periods, d) = (30, 10, 2);
    let theta = Theta::new(DVector::from_vec(vec![0.3, 0.2]), 1.0);
    let weights = random_data(rng, n, periods, d, &theta.lambda).weights;
    let reps = 200;
    let nobs = (n * periods) as f64;
    let mut avg = DMatrix::zeros(d + 1, d + 1);
    for _ in 0..reps {
        let data = responses(rng, weights.clone(), &theta.lambda);
        for j in 0..=d {
            let h = 1e-6;
            let at = |s: f64| {
                let mut th = theta.clone();
                if j < d {
                    th.lambda[j] += s;
                } else {
                    th.sigma2 += s;
                }
                score(&data, &th).unwrap()
            };
            let col = (at(h) - at(-h)) / (2.0 * h);
            let mut target = avg.column_mut(j);
            target -= col / (nobs * reps as f64);
        }
    }
    let info = info_i(&responses(rng, weights, &theta.lambda), &theta).unwrap();
    let gap = (&info - &avg).amax();
    c.check(gap <= 2e-2, format!("I_hat vs averaged Hessian {gap:.1e} <= 2e-2"));
}

fn triple_sum_factorization(c: &mut Checks, rng: &mut ChaCha8Rng) {
    let mut worst: f64 = 0.0;
    for periods in 3..=8 {
        let q = rng.random_range(1..5);
        let g: Vec<DMatrix<f64>> = (0..periods)
            .map(|_| {
                let m = DMatrix::from_fn(q, q, |_, _| rng.sample::<f64, _>(StandardNormal));
                &m + m.transpose()
            })
            .collect();
        let a: Vec<DVector<f64>> =
            (0..periods).map(|_| DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal))).collect();
        let mut brute = 0.0;
        for t1 in 0..periods {
            for t2 in 0..periods {
                for t3 in 0..periods {
                    if t1 != t2 && t2 != t3 && t1 != t3 {
                        brute += a[t2].dot(&(&g[t1] * &a[t3]));
                    }
                }
            }
        }
        worst = worst.max((distinct_triple_sum(&g, &a) - brute).abs() / brute.abs().max(1.0));
    }
    c.check(worst <= 1e-8, format!("triple sum vs brute force {worst:.1e} <= 1e-8"));
}

fn transform_identities(c: &mut Checks, rng: &mut ChaCha8Rng) {
    let mut worst: f64 = 0.0;
    for n in [3, 7, 20, 50] {
        let f = helmert_basis(n);
        let j = DMatrix::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
        worst = worst.max((f.transpose() * &f - DMatrix::identity(n - 1, n - 1)).amax());
        worst = worst.max((&f * f.transpose() - j).amax());
        let data = random_data(rng, n, 1, 2, &DVector::zeros(2));
        let mut delta = DMatrix::identity(n, n);
        for (k, w) in data.weights.period(0).iter().enumerate() {
            w.add_scaled_to(-[0.3, 0.25][k], &mut delta);
        }
        let star = f.transpose() * &delta * &f;
        let lhs = star.try_inverse().unwrap();
        let rhs = f.transpose() * delta.try_inverse().unwrap() * &f;
        worst = worst.max((lhs - rhs).amax());
    }
    c.check(worst <= 1e-10, format!("F'F = I, FF' = J, inverse identity {worst:.1e} <= 1e-10"));
}

/// Projection onto the l1 ball by enumerating supports and checking KKT.
fn kkt_projection(v: &DVector<f64>, radius: f64) -> DVector<f64> {
    if v.lp_norm(1) <= radius {
        return v.clone();
    }
    let d = v.len();
    for mask in 1u32..(1 << d) {
        let support: Vec<usize> = (0..d).filter(|i| mask & (1 << i) != 0).collect();
        let tau = (support.iter().map(|&i| v[i].abs()).sum::<f64>() - radius) / support.len() as f64;
        let valid = tau >= 0.0
            && support.iter().all(|&i| v[i].abs() > tau)
            && (0..d).filter(|i| !support.contains(i)).all(|i| v[i].abs() <= tau);
        if valid {
            return DVector::from_fn(d, |i, _| if support.contains(&i) { v[i].signum() * (v[i].abs() - tau) } else { 0.0 });
        }
    }
    unreachable!("some support satisfies the KKT conditions")
}

fn projection_matches_kkt(c: &mut Checks, rng: &mut ChaCha8Rng) {
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let d = rng.random_range(1..=4);
        let v = DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0));
        let varsigma = 1e-3;
        let got = project_to_lambda_space(&v, varsigma);
        worst = worst.max((got - kkt_projection(&v, 1.0 - varsigma)).amax());
    }
    c.check(worst <= 1e-12, format!("l1 projection vs KKT enumeration {worst:.1e} <= 1e-12"));
}

fn rank_one_identity(c: &mut Checks, rng: &mut ChaCha8Rng) {
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(2..40);
        let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let m = &a * a.transpose() / n as f64;
        let e = &y * y.transpose() * &m - DMatrix::identity(n, n);
        let dense = (&e * &e).trace();
        let q = y.dot(&(&m * &y));
        worst = worst.max((rank_one_loss(q, n) - dense).abs() / dense.abs().max(1.0));
    }
    c.check(worst <= 1e-8, format!("rank-one trace identity {worst:.1e} <= 1e-8"));
}

fn weight_invariants(c: &mut Checks, rng: &mut ChaCha8Rng) {
    let mut problems = Vec::new();
    for case in 0..40 {
        let (n, periods, d) = (rng.random_range(4..40), rng.random_range(1..4), rng.random_range(1..4));
        let values: Vec<Vec<Vec<f64>>> =
            (0..d).map(|_| (0..periods).map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect()).collect()).collect();
        let target = rng.random_range(0.05..0.9);
        let ws = build_weight_set(&AttributePanel::continuous(values.clone()).unwrap(), target).unwrap();
        let pairs = (n * (n - 1)) as f64;
        for t in 0..periods {
            for k in 0..d {
                let w = ws.get(k, t).to_dense();
                let info = ws.info(k, t);
                let th = info.threshold.expect("continuous slices record a threshold");
                let z = &values[k][t];
                let sums_ok = (0..n).all(|i| (w.row(i).sum() - 1.0).abs() < 1e-12);
                let diag_ok = (0..n).all(|i| w[(i, i)] == 0.0);
                let sign_ok = w.iter().all(|v| *v >= 0.0);
                let density_ok = th.realized_density >= target && th.realized_density <= target + 2.0 / pairs + 1e-15;
                let support_ok = (0..n).filter(|i| !info.repaired.contains(i)).all(|i| {
                    (0..n).filter(|&j| j != i).all(|j| (w[(i, j)] > 0.0) == ((z[i] - z[j]).abs() < th.phi))
                });
                if !(sums_ok && diag_ok && sign_ok && density_ok && support_ok) {
                    problems.push(format!("case {case} (k={k}, t={t})"));
                }
            }
        }
    }
    c.check(problems.is_empty(), format!("weight invariants on 40 random builds {problems:?}"));
}

fn properties() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(701);
    let mut c = Checks::default();
    score_matches_differences(&mut c, &mut rng);
    likelihood_identity(&mut c, &mut rng);
    information_matches_hessian(&mut c, &mut rng);
    triple_sum_factorization(&mut c, &mut rng);
    transform_identities(&mut c, &mut rng);
    projection_matches_kkt(&mut c, &mut rng);
    rank_one_identity(&mut c, &mut rng);
    weight_invariants(&mut c, &mut rng);
    let secs = start.elapsed().as_secs_f64();
    c.check(secs <= 120.0, format!("runtime {secs:.1}s <= 120s"));
    c.verdict()
}

fn outputs(cfg: &SimConfig, threads: usize) -> (Vec<u8>, String) {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let report = study(cfg.clone());
        let mut csv = Vec::new();
        report.write_csv(&mut csv).unwrap();
        (csv, report.to_json().unwrap())
    })
}

fn determinism() -> Verdict {
    let small = SimConfig { n: 20, periods: 10, replications: 12, base_seed: 801, ..SimConfig::default() };
    let mut lambda = vec![0.0; 4];
    lambda[..2].fill(0.25);
    let configs = [
        small.clone(),
        SimConfig { d: 4, lambda_true: lambda, task: Task::Select { q_max: None, strategy: Default::default() }, ..small.clone() },
        SimConfig { setting: Setting::Alternative { kappa: 0.1 }, task: Task::Test { alpha: 0.05 }, ..small.clone() },
        SimConfig { d: 3, setting: Setting::Endogenous { rho: 0.5 }, ..small.clone() },
        SimConfig { setting: Setting::Covariates { p: 2, beta_true: vec![] }, error_dist: ErrorDist::Mixture, ..small },
    ];
    let mut c = Checks::default();
    for cfg in &configs {
        let reference = outputs(cfg, 1);
        for threads in [4, 8] {
            c.check(outputs(cfg, threads) == reference, format!("{:?} {:?} identical at {threads} threads", cfg.setting, cfg.task));
        }
    }
    c.verdict()
}

fn main() {
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let criteria: [(&str, fn() -> Verdict); 8] = [
        ("1 estimation", estimation),
        ("2 robustness", robustness),
        ("3 selection", selection),
        ("4 test size and power", test_size_power),
        ("5 endogeneity", endogeneity),
        ("6 covariates", covariates),
        ("7 properties", properties),
        ("8 determinism", determinism),
    ];
    let mut failures = 0;
    for (name, run) in criteria {
        if filter.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let start = Instant::now();
        let v = run();
        let status = if v.pass { "PASS" } else { "FAIL" };
        failures += usize::from(!v.pass);
        println!("{status} criterion {name} ({:.0}s): {}", start.elapsed().as_secs_f64(), v.detail);
    }
    if failures > 0 && std::env::var("MIR_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
