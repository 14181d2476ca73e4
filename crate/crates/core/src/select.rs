//! EBIC selection of the relevant weight matrices.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{MirError, Result};
use crate::estimate::{base_profile, FitOptions};
use crate::model::MirData;
use crate::par;
use crate::profile::Profile;

/// Default EBIC parameter `gamma`.
pub const DEFAULT_GAMMA: f64 = 2.0;

/// Largest `d` searched exactly under [`Strategy::Auto`].
pub const EXHAUSTIVE_MAX_D: usize = 16;

/// Likelihood slack tolerated when checking nested fits and bounds.
pub const NESTING_TOL: f64 = 1e-6;

/// `EBIC_gamma(S) = -2 l + |S| log(nT) + gamma |S| log d`.
pub fn ebic(loglik: f64, subset_size: usize, n: usize, periods: usize, d: usize, gamma: f64) -> f64 {
    let s = subset_size as f64;
    -2.0 * loglik + s * ((n * periods) as f64).ln() + gamma * s * (d as f64).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Branch-and-bound up to [`EXHAUSTIVE_MAX_D`], greedy forward above.
    #[default]
    Auto,
    Exhaustive,
    /// Best-first search bounded by the drop-one likelihoods
    /// `min_{j not in S} l(all but j)`. Same answer, far fewer fits.
    BranchAndBound,
    /// Forward selection adding the matrix with the best EBIC each step.
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectOptions {
    pub gamma: f64,
    /// Defaults to `min(d, 6)`.
    pub q_max: Option<usize>,
    pub strategy: Strategy,
    pub fit: FitOptions,
}

impl Default for SelectOptions {
    fn default() -> Self {
        Self { gamma: DEFAULT_GAMMA, q_max: None, strategy: Strategy::Auto, fit: FitOptions::default() }
    }
}

/// One evaluated candidate. `subset` holds zero-based attribute indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetRow {
    pub subset: Vec<usize>,
    pub loglik: f64,
    pub ebic: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Zero-based indices of the selected weight matrices.
    pub best_subset: Vec<usize>,
    pub ebic_value: f64,
    pub per_subset_table: Vec<SubsetRow>,
    pub gamma: f64,
    pub q_max: usize,
    /// Candidates whose fit failed or did not converge; excluded from the argmin.
    pub excluded: Vec<Vec<usize>>,
    /// Pairs `(S, S')` with `S` inside `S'` but a larger likelihood for `S`.
    pub nesting_violations: Vec<(Vec<usize>, Vec<usize>)>,
    /// Candidates skipped by the bound of [`Strategy::BranchAndBound`].
    pub pruned: usize,
}

impl SelectionResult {
    /// Write `(subset, size, loglik, ebic, converged)` rows with 1-based subsets.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["subset", "size", "loglik", "ebic", "converged"])?;
        for row in &self.per_subset_table {
            w.write_record(&[
                format_subset(&row.subset),
                row.subset.len().to_string(),
                format!("{:.10e}", row.loglik),
                format!("{:.10e}", row.ebic),
                row.converged.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `{1,3}` style, 1-based.
pub fn format_subset(subset: &[usize]) -> String {
    let inner: Vec<String> = subset.iter().map(|k| (k + 1).to_string()).collect();
    format!("{{{}}}", inner.join(","))
}

/// Total order used to pick the winner: EBIC, then size, then lexicographic.
fn better(a: &SubsetRow, b: &SubsetRow) -> bool {
    let tol = 1e-9 * (1.0 + a.ebic.abs().max(b.ebic.abs()));
    if (a.ebic - b.ebic).abs() > tol {
        return a.ebic < b.ebic;
    }
    if a.subset.len() != b.subset.len() {
        return a.subset.len() < b.subset.len();
    }
    a.subset < b.subset
}

/// All subsets of `0..d` of size `k` in lexicographic order.
pub fn combinations(d: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..k).collect();
    if k > d {
        return out;
    }
    loop {
        out.push(cur.clone());
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if cur[i] < d - k + i {
                cur[i] += 1;
                for j in (i + 1)..k {
                    cur[j] = cur[j - 1] + 1;
                }
                break;
            }
        }
    }
}

struct Context<'p, 'a> {
    full: &'p Profile<'a>,
    n: usize,
    periods: usize,
    d: usize,
    gamma: f64,
    fit: FitOptions,
}

impl Context<'_, '_> {
    fn evaluate(&self, subset: &[usize]) -> Option<SubsetRow> {
        let prof = self.full.restrict(subset);
        let opt = prof.maximize(&self.fit.optimizer).ok()?;
        Some(SubsetRow {
            subset: subset.to_vec(),
            loglik: opt.value,
            ebic: ebic(opt.value, subset.len(), self.n, self.periods, self.d, self.gamma),
            converged: opt.converged,
        })
    }

    fn evaluate_all(&self, subsets: &[Vec<usize>]) -> Vec<(Vec<usize>, Option<SubsetRow>)> {
        let rows = par::map_slice(subsets, |s| self.evaluate(s));
        subsets.iter().cloned().zip(rows).collect()
    }

    fn penalty(&self) -> f64 {
        ((self.n * self.periods) as f64).ln() + self.gamma * (self.d as f64).ln()
    }
}

/// Candidates evaluated between bound checks; fixed so results do not depend
/// on the thread count.
const BOUND_BATCH: usize = 8;

/// Best-first search over subsets of size `<= q_max`.
///
/// Fits the full model and every drop-one model first; `l(S)` is bounded by
/// the smallest drop-one likelihood over matrices outside `S`. Candidates are
/// visited in order of the resulting EBIC lower bound and the search stops once
/// that bound exceeds the incumbent.
fn branch_and_bound(ctx: &Context<'_, '_>, q_max: usize) -> (Vec<(Vec<usize>, Option<SubsetRow>)>, usize) {
    let d = ctx.d;
    let all: Vec<usize> = (0..d).collect();
    let mut bound_sets = vec![all.clone()];
    bound_sets.extend((0..d).map(|j| all.iter().copied().filter(|&k| k != j).collect::<Vec<_>>()));
    let bound_rows = ctx.evaluate_all(&bound_sets);
    let ll = |i: usize| bound_rows[i].1.as_ref().filter(|r| r.converged).map(|r| r.loglik);
    let full = ll(0);
    let drop_one: Vec<Option<f64>> = (0..d).map(|j| ll(j + 1)).collect();
    let bound = |s: &[usize]| -> f64 {
        let Some(full) = full else {
            return f64::INFINITY;
        };
        (0..d)
            .filter(|j| !s.contains(j))
            .filter_map(|j| drop_one[j])
            .fold(full, f64::min)
    };
    let pen = ctx.penalty();
    let mut candidates: Vec<(f64, Vec<usize>)> = (0..=q_max)
        .flat_map(|k| combinations(d, k))
        .map(|s| (-2.0 * (bound(&s) + NESTING_TOL) + s.len() as f64 * pen, s))
        .collect();
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.len().cmp(&b.1.len())).then(a.1.cmp(&b.1)));
    let mut known: Vec<(Vec<usize>, Option<SubsetRow>)> =
        bound_rows.into_iter().filter(|(s, _)| s.len() <= q_max).collect();
    let mut best: Option<SubsetRow> = None;
    for (_, row) in &known {
        if let Some(r) = row.as_ref().filter(|r| r.converged) {
            if best.as_ref().map_or(true, |b| better(r, b)) {
                best = Some(r.clone());
            }
        }
    }
    let queue: Vec<(f64, Vec<usize>)> =
        candidates.into_iter().filter(|(_, s)| !known.iter().any(|(k, _)| k == s)).collect();
    let mut pruned = 0;
    let mut pos = 0;
    while pos < queue.len() {
        if let Some(b) = &best {
            if queue[pos].0 > b.ebic {
                pruned = queue.len() - pos;
                break;
            }
        }
        let end = (pos + BOUND_BATCH).min(queue.len());
        let batch: Vec<Vec<usize>> = queue[pos..end].iter().map(|(_, s)| s.clone()).collect();
        for (s, row) in ctx.evaluate_all(&batch) {
            if let Some(r) = row.as_ref().filter(|r| r.converged) {
                if best.as_ref().map_or(true, |b| better(r, b)) {
                    best = Some(r.clone());
                }
            }
            known.push((s, row));
        }
        pos = end;
    }
    known.sort_by(|a, b| a.0.len().cmp(&b.0.len()).then(a.0.cmp(&b.0)));
    (known, pruned)
}

/// Select with `gamma` and `q_max`, other settings at their defaults.
pub fn select_subsets(data: &MirData, gamma: f64, q_max: usize) -> Result<SelectionResult> {
    select_with(data, &SelectOptions { gamma, q_max: Some(q_max), ..Default::default() })
}

pub fn select_with(data: &MirData, options: &SelectOptions) -> Result<SelectionResult> {
    let d = data.d();
    let q_max = options.q_max.unwrap_or(d.min(6));
    if q_max > d {
        return Err(MirError::InvalidInput(format!("q_max = {q_max} exceeds d = {d}")));
    }
    if !(options.gamma >= 0.0) {
        return Err(MirError::InvalidInput("gamma must be nonnegative".into()));
    }
    let full = base_profile(data, options.fit.trace)?;
    let ctx = Context { full: &full, n: data.n(), periods: data.periods(), d, gamma: options.gamma, fit: options.fit.clone() };
    let strategy = match options.strategy {
        Strategy::Auto if d > EXHAUSTIVE_MAX_D => Strategy::Greedy,
        Strategy::Auto => Strategy::BranchAndBound,
        s => s,
    };
    let mut evaluated: Vec<(Vec<usize>, Option<SubsetRow>)> = Vec::new();
    let mut pruned = 0;
    match strategy {
        Strategy::Exhaustive | Strategy::Auto => {
            let all: Vec<Vec<usize>> = (0..=q_max).flat_map(|k| combinations(d, k)).collect();
            evaluated = ctx.evaluate_all(&all);
        }
        Strategy::BranchAndBound => {
            let (rows, skipped) = branch_and_bound(&ctx, q_max);
            evaluated = rows;
            pruned = skipped;
        }
        Strategy::Greedy => {
            let mut current: Vec<usize> = Vec::new();
            evaluated.extend(ctx.evaluate_all(&[current.clone()]));
            let mut current_best = evaluated[0].1.clone();
            for _ in 0..q_max {
                let candidates: Vec<Vec<usize>> = (0..d)
                    .filter(|k| !current.contains(k))
                    .map(|k| {
                        let mut s = current.clone();
                        s.push(k);
                        s.sort_unstable();
                        s
                    })
                    .collect();
                let rows = ctx.evaluate_all(&candidates);
                let step_best = rows
                    .iter()
                    .filter_map(|(_, r)| r.clone())
                    .filter(|r| r.converged)
                    .reduce(|a, b| if better(&b, &a) { b } else { a });
                evaluated.extend(rows);
                match (step_best, &current_best) {
                    (Some(sb), Some(cb)) if better(&sb, cb) => {
                        current = sb.subset.clone();
                        current_best = Some(sb);
                    }
                    (Some(sb), None) => {
                        current = sb.subset.clone();
                        current_best = Some(sb);
                    }
                    _ => break,
                }
            }
        }
    }
    finish(evaluated, options.gamma, q_max, pruned)
}

fn finish(
    evaluated: Vec<(Vec<usize>, Option<SubsetRow>)>,
    gamma: f64,
    q_max: usize,
    pruned: usize,
) -> Result<SelectionResult> {
    let mut table = Vec::new();
    let mut excluded = Vec::new();
    for (s, row) in evaluated {
        match row {
            Some(r) => {
                if !r.converged {
                    excluded.push(s);
                }
                table.push(r);
            }
            None => excluded.push(s),
        }
    }
    let best = table
        .iter()
        .filter(|r| r.converged)
        .fold(None::<&SubsetRow>, |acc, r| match acc {
            Some(b) if !better(r, b) => Some(b),
            _ => Some(r),
        })
        .cloned()
        .ok_or_else(|| MirError::Numerical("no candidate subset could be fitted".into()))?;
    let mut nesting_violations = Vec::new();
    for a in &table {
        for b in &table {
            if b.subset.len() == a.subset.len() + 1
                && a.subset.iter().all(|k| b.subset.contains(k))
                && a.loglik > b.loglik + NESTING_TOL
            {
                nesting_violations.push((a.subset.clone(), b.subset.clone()));
            }
        }
    }
    Ok(SelectionResult {
        best_subset: best.subset.clone(),
        ebic_value: best.ebic,
        per_subset_table: table,
        gamma,
        q_max,
        excluded,
        nesting_violations,
        pruned,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::factor_delta;
    use crate::weights::{build_weight_set, AttributePanel, WeightMatrix, WeightSet};
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn simulate(ws: WeightSet, lambda: &[f64], seed: u64) -> MirData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lam = DVector::from_column_slice(lambda);
        let n = ws.n();
        let mut y = DMatrix::zeros(n, ws.periods());
        for t in 0..ws.periods() {
            let eps = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let ops: Vec<&WeightMatrix> = ws.period(t).iter().collect();
            y.set_column(t, &factor_delta(&ops, &lam, t).unwrap().solve(&eps));
        }
        MirData::new(y, ws).unwrap()
    }

    fn weights(n: usize, periods: usize, d: usize, seed: u64) -> WeightSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..d)
            .map(|_| (0..periods).map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect()).collect())
            .collect();
        build_weight_set(&AttributePanel::continuous(values).unwrap(), crate::weights::default_density(n)).unwrap()
    }

    #[test]
    fn ebic_examples() {
        let v = ebic(-100.0, 3, 25, 25, 8, 2.0);
        let expect = 200.0 + 3.0 * 625f64.ln() + 6.0 * 8f64.ln();
        assert!((v - expect).abs() < 1e-12);
        assert!((v - 231.790).abs() < 1e-3);
        assert_eq!(ebic(-100.0, 0, 25, 25, 8, 2.0), 200.0);
        let bic = -2.0 * -100.0 + 3.0 * 625f64.ln();
        assert!((ebic(-100.0, 3, 25, 25, 8, 0.0) - bic).abs() < 1e-12);
    }

    #[test]
    fn combinations_are_lexicographic() {
        assert_eq!(combinations(4, 2), vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]);
        assert_eq!(combinations(3, 0), vec![Vec::<usize>::new()]);
        assert_eq!(combinations(5, 3).len(), 10);
    }

    #[test]
    fn duplicate_matrices_tie_break_to_first() {
        let base = weights(20, 8, 1, 1);
        let mats = (0..8).map(|t| vec![base.get(0, t).clone(), base.get(0, t).clone()]).collect();
        let ws = WeightSet::from_matrices(mats).unwrap();
        let data = simulate(ws, &[0.4, 0.0], 2);
        let sel = select_subsets(&data, 2.0, 2).unwrap();
        assert_eq!(sel.best_subset, vec![0]);
    }

    #[test]
    fn branch_and_bound_agrees_with_exhaustive() {
        for seed in 0..3 {
            let data = simulate(weights(20, 10, 5, 10 + seed), &[0.3, 0.0, 0.25, 0.0, 0.0], 20 + seed);
            let ex = select_with(&data, &SelectOptions { strategy: Strategy::Exhaustive, ..Default::default() }).unwrap();
            let bb = select_with(&data, &SelectOptions { strategy: Strategy::BranchAndBound, ..Default::default() }).unwrap();
            assert_eq!(ex.best_subset, bb.best_subset);
            assert!((ex.ebic_value - bb.ebic_value).abs() < 1e-9);
            assert!(ex.nesting_violations.is_empty());
        }
    }

    #[test]
    fn greedy_finds_strong_signal() {
        let data = simulate(weights(40, 20, 4, 3), &[0.0, 0.6, 0.0, 0.0], 4);
        let sel = select_with(&data, &SelectOptions { strategy: Strategy::Greedy, ..Default::default() }).unwrap();
        assert_eq!(sel.best_subset, vec![1]);
    }

    #[test]
    fn larger_gamma_never_enlarges_selection() {
        let data = simulate(weights(20, 10, 4, 5), &[0.15, 0.1, 0.0, 0.05], 6);
        let mut prev = usize::MAX;
        for gamma in [0.0, 1.0, 2.0, 4.0] {
            let sel = select_subsets(&data, gamma, 4).unwrap();
            assert!(sel.best_subset.len() <= prev);
            prev = sel.best_subset.len();
        }
    }

    #[test]
    fn table_contains_every_candidate_and_csv() {
        let data = simulate(weights(12, 5, 3, 7), &[0.3, 0.0, 0.0], 8);
        let sel = select_subsets(&data, 2.0, 2).unwrap();
        assert_eq!(sel.per_subset_table.len(), 1 + 3 + 3);
        assert_eq!(sel.per_subset_table[0].subset, Vec::<usize>::new());
        let mut buf = Vec::new();
        sel.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("subset,size,loglik,ebic,converged\n"));
        assert!(text.contains("\"{1,2}\",2,"));
    }

    #[test]
    fn q_max_above_d_is_rejected() {
        let data = simulate(weights(8, 3, 2, 9), &[0.2, 0.0], 10);
        assert!(select_subsets(&data, 2.0, 3).is_err());
    }
}
