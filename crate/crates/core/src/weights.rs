//! Similarity and weight matrices.
//!
//! Each attribute `k` observed in period `t` yields a nonnegative similarity
//! matrix `A_k^(t)`; its row-normalized version `W_k^(t)` is the weight
//! matrix entering the mutual influence model. Continuous attributes use a
//! truncated Gaussian kernel `exp{-(z_i - z_j)^2}` on pairs closer than a
//! threshold `phi`, discrete attributes connect actors of the same class.

use std::fs;
use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::{CooMatrix, CsrMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{MirError, Result};
use crate::par;

/// Tolerance used when checking the row-stochastic invariant.
pub const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeKind {
    Continuous,
    Discrete,
}

/// Attribute values indexed `[k][t][i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributePanel {
    n: usize,
    periods: usize,
    kinds: Vec<AttributeKind>,
    values: Vec<Vec<Vec<f64>>>,
}

impl AttributePanel {
    pub fn new(values: Vec<Vec<Vec<f64>>>, kinds: Vec<AttributeKind>) -> Result<Self> {
        if values.is_empty() {
            return Err(MirError::InvalidInput("attribute panel has no attributes".into()));
        }
        if kinds.len() != values.len() {
            return Err(MirError::Dimension {
                what: "attribute kinds".into(),
                expected: values.len(),
                found: kinds.len(),
            });
        }
        let periods = values[0].len();
        if periods == 0 {
            return Err(MirError::InvalidInput("attribute panel has no periods".into()));
        }
        let n = values[0][0].len();
        for (k, per_k) in values.iter().enumerate() {
            if per_k.len() != periods {
                return Err(MirError::Dimension {
                    what: format!("periods of attribute {}", k + 1),
                    expected: periods,
                    found: per_k.len(),
                });
            }
            for (t, z) in per_k.iter().enumerate() {
                if z.len() != n {
                    return Err(MirError::Dimension {
                        what: format!("actors of attribute {} in period {}", k + 1, t + 1),
                        expected: n,
                        found: z.len(),
                    });
                }
                if kinds[k] == AttributeKind::Continuous {
                    if let Some(i) = z.iter().position(|v| !v.is_finite()) {
                        return Err(MirError::NonFiniteAttribute { k: k + 1, t: t + 1, i: i + 1 });
                    }
                }
            }
        }
        Ok(Self { n, periods, kinds, values })
    }

    /// All-continuous panel from `[k][t][i]` values.
    pub fn continuous(values: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let d = values.len();
        Self::new(values, vec![AttributeKind::Continuous; d])
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn periods(&self) -> usize {
        self.periods
    }

    pub fn d(&self) -> usize {
        self.kinds.len()
    }

    pub fn kind(&self, k: usize) -> AttributeKind {
        self.kinds[k]
    }

    pub fn kinds(&self) -> &[AttributeKind] {
        &self.kinds
    }

    /// Attribute vector `Z_k^(t)` (zero-based indices).
    pub fn slice(&self, k: usize, t: usize) -> &[f64] {
        &self.values[k][t]
    }

    /// The `n x d` attribute matrix for period `t`.
    pub fn period_matrix(&self, t: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.d(), |i, k| self.values[k][t][i])
    }

    /// Read a long-format CSV with header `k,t,i,value` (1-based indices).
    pub fn from_long_csv<R: Read>(reader: R, kinds: Option<Vec<AttributeKind>>) -> Result<Self> {
        let values = read_long_panel(reader, "k")?;
        let d = values.len();
        let kinds = kinds.unwrap_or_else(|| vec![AttributeKind::Continuous; d]);
        Self::new(values, kinds)
    }

    pub fn to_long_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["k", "t", "i", "value"])?;
        for k in 0..self.d() {
            for t in 0..self.periods {
                for i in 0..self.n {
                    w.write_record(&[
                        (k + 1).to_string(),
                        (t + 1).to_string(),
                        (i + 1).to_string(),
                        format!("{:e}", self.values[k][t][i]),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Parse a long-format panel `(<outer>, t, i, value)` into `[outer][t][i]`.
pub(crate) fn read_long_panel<R: Read>(reader: R, outer: &str) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows = Vec::new();
    let (mut max_o, mut max_t, mut max_i) = (0usize, 0usize, 0usize);
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() < 4 {
            return Err(MirError::InvalidInput(format!(
                "line {}: expected 4 columns ({outer},t,i,value)",
                line + 2
            )));
        }
        let parse_idx = |s: &str, name: &str| -> Result<usize> {
            s.parse::<usize>()
                .ok()
                .filter(|v| *v >= 1)
                .ok_or_else(|| MirError::InvalidInput(format!("line {}: bad {name} index '{s}'", line + 2)))
        };
        let o = parse_idx(&rec[0], outer)?;
        let t = parse_idx(&rec[1], "t")?;
        let i = parse_idx(&rec[2], "i")?;
        let v: f64 = rec[3]
            .parse()
            .map_err(|_| MirError::InvalidInput(format!("line {}: bad value '{}'", line + 2, &rec[3])))?;
        max_o = max_o.max(o);
        max_t = max_t.max(t);
        max_i = max_i.max(i);
        rows.push((o, t, i, v));
    }
    if rows.is_empty() {
        return Err(MirError::InvalidInput("empty long-format panel".into()));
    }
    let mut out = vec![vec![vec![f64::NAN; max_i]; max_t]; max_o];
    let mut seen = vec![vec![vec![false; max_i]; max_t]; max_o];
    for (o, t, i, v) in rows {
        if seen[o - 1][t - 1][i - 1] {
            return Err(MirError::InvalidInput(format!("duplicate entry ({o},{t},{i})")));
        }
        seen[o - 1][t - 1][i - 1] = true;
        out[o - 1][t - 1][i - 1] = v;
    }
    for o in 0..max_o {
        for t in 0..max_t {
            for i in 0..max_i {
                if !seen[o][t][i] {
                    return Err(MirError::InvalidInput(format!(
                        "missing entry ({},{},{})",
                        o + 1,
                        t + 1,
                        i + 1
                    )));
                }
            }
        }
    }
    Ok(out)
}

/// A square operator `W` used in `Delta = I - sum lambda_k W_k`.
///
/// Weight matrices built from attributes are stored sparse; transformed
/// operators (e.g. `F' W F`) are dense.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightMatrix {
    Sparse(CsrMatrix<f64>),
    Dense(DMatrix<f64>),
}

impl WeightMatrix {
    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut coo = CooMatrix::new(m.nrows(), m.ncols());
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                let v = m[(i, j)];
                if v != 0.0 {
                    coo.push(i, j, v);
                }
            }
        }
        WeightMatrix::Sparse(CsrMatrix::from(&coo))
    }

    pub fn dim(&self) -> usize {
        match self {
            WeightMatrix::Sparse(s) => s.nrows(),
            WeightMatrix::Dense(d) => d.nrows(),
        }
    }

    pub fn nnz(&self) -> usize {
        match self {
            WeightMatrix::Sparse(s) => s.nnz(),
            WeightMatrix::Dense(d) => d.iter().filter(|v| **v != 0.0).count(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            WeightMatrix::Sparse(s) => DMatrix::from(s),
            WeightMatrix::Dense(d) => d.clone(),
        }
    }

    /// `W v`.
    pub fn mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            WeightMatrix::Sparse(s) => {
                let mut out = DVector::zeros(s.nrows());
                for (i, row) in s.row_iter().enumerate() {
                    let mut acc = 0.0;
                    for (&j, &w) in row.col_indices().iter().zip(row.values()) {
                        acc += w * v[j];
                    }
                    out[i] = acc;
                }
                out
            }
            WeightMatrix::Dense(d) => d * v,
        }
    }

    /// `W M` for a dense right factor.
    pub fn mul_mat(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            WeightMatrix::Sparse(s) => {
                let (rows, inner) = (s.nrows(), m.nrows());
                let mut out = DMatrix::zeros(rows, m.ncols());
                let (offsets, indices, values) = (s.row_offsets(), s.col_indices(), s.values());
                let src = m.as_slice();
                for (col, dst) in src.chunks_exact(inner.max(1)).zip(out.as_mut_slice().chunks_exact_mut(rows.max(1))) {
                    for (i, slot) in dst.iter_mut().enumerate() {
                        let range = offsets[i]..offsets[i + 1];
                        *slot = indices[range.clone()].iter().zip(&values[range]).map(|(&j, &w)| w * col[j]).sum();
                    }
                }
                out
            }
            WeightMatrix::Dense(d) => d * m,
        }
    }

    /// `tr(W M)` without forming the product.
    pub fn trace_mul(&self, m: &DMatrix<f64>) -> f64 {
        match self {
            WeightMatrix::Sparse(s) => {
                let mut acc = 0.0;
                for (i, row) in s.row_iter().enumerate() {
                    for (&j, &w) in row.col_indices().iter().zip(row.values()) {
                        acc += w * m[(j, i)];
                    }
                }
                acc
            }
            WeightMatrix::Dense(d) => d.component_mul(&m.transpose()).sum(),
        }
    }

    /// Add `scale * W` into a dense accumulator.
    pub fn add_scaled_to(&self, scale: f64, acc: &mut DMatrix<f64>) {
        match self {
            WeightMatrix::Sparse(s) => {
                for (i, row) in s.row_iter().enumerate() {
                    for (&j, &w) in row.col_indices().iter().zip(row.values()) {
                        acc[(i, j)] += scale * w;
                    }
                }
            }
            WeightMatrix::Dense(d) => *acc += d * scale,
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        match self {
            WeightMatrix::Sparse(s) => s.row_iter().map(|r| r.values().iter().sum()).collect(),
            WeightMatrix::Dense(d) => d.row_iter().map(|r| r.sum()).collect(),
        }
    }

    /// Check zero diagonal, nonnegativity and unit row sums.
    pub fn check_row_stochastic(&self) -> std::result::Result<(), String> {
        let dense = self.to_dense();
        for i in 0..dense.nrows() {
            if dense[(i, i)] != 0.0 {
                return Err(format!("nonzero diagonal at {i}"));
            }
            let mut s = 0.0;
            for j in 0..dense.ncols() {
                let v = dense[(i, j)];
                if v < 0.0 {
                    return Err(format!("negative entry at ({i},{j})"));
                }
                s += v;
            }
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(format!("row {i} sums to {s}"));
            }
        }
        Ok(())
    }
}

/// Truncated Gaussian similarity for a continuous attribute.
pub fn build_similarity_continuous(z: &[f64], phi: f64) -> Result<DMatrix<f64>> {
    if !(phi > 0.0) {
        return Err(MirError::InvalidInput(format!("threshold phi must be positive, got {phi}")));
    }
    if let Some(i) = z.iter().position(|v| !v.is_finite()) {
        return Err(MirError::NonFiniteAttribute { k: 0, t: 0, i: i + 1 });
    }
    let n = z.len();
    let mut a = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in (j + 1)..n {
            let diff = z[i] - z[j];
            if diff.abs() < phi {
                let v = (-diff * diff).exp();
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
    }
    Ok(a)
}

/// Same-class adjacency for a discrete attribute.
pub fn build_similarity_discrete<L: PartialEq>(z: &[L]) -> DMatrix<f64> {
    let n = z.len();
    DMatrix::from_fn(n, n, |i, j| if i != j && z[i] == z[j] { 1.0 } else { 0.0 })
}

/// Threshold chosen for one similarity slice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub phi: f64,
    /// Proportion of nonzero off-diagonal entries the threshold produces.
    pub realized_density: f64,
}

/// Pick `phi` so that the proportion of ordered pairs with `|z_i - z_j| < phi`
/// is the smallest achievable value not below `target_density`. Ties at the
/// cut are all included.
pub fn select_threshold(z: &[f64], target_density: f64) -> Result<Threshold> {
    let n = z.len();
    if n < 2 {
        return Err(MirError::InvalidInput("threshold selection needs n >= 2".into()));
    }
    if !(target_density > 0.0 && target_density <= 1.0) {
        return Err(MirError::InvalidInput(format!(
            "target density must lie in (0, 1], got {target_density}"
        )));
    }
    if let Some(i) = z.iter().position(|v| !v.is_finite()) {
        return Err(MirError::NonFiniteAttribute { k: 0, t: 0, i: i + 1 });
    }
    let mut dist = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            dist.push((z[i] - z[j]).abs());
        }
    }
    dist.sort_by(f64::total_cmp);
    let ordered = (n * (n - 1)) as f64;
    // m-th smallest ordered distance == ceil(m/2)-th smallest unordered one
    let m = ((target_density * ordered) - 1e-9).ceil().max(1.0) as usize;
    let pos = m.div_ceil(2) - 1;
    let cut = dist[pos];
    let phi = match dist[pos..].iter().find(|&&v| v > cut) {
        Some(&next) => cut + 0.5 * (next - cut),
        None => cut + 1.0,
    };
    let passing = dist.iter().take_while(|&&v| v < phi).count();
    Ok(Threshold { phi, realized_density: 2.0 * passing as f64 / ordered })
}

/// Divide each row by its sum. Zero rows are rejected.
pub fn row_normalize(a: &DMatrix<f64>, period: usize) -> Result<DMatrix<f64>> {
    let mut w = a.clone();
    for i in 0..a.nrows() {
        let s: f64 = a.row(i).sum();
        if !(s > 0.0) {
            return Err(MirError::IsolatedActor { actor: i + 1, t: period + 1 });
        }
        for j in 0..a.ncols() {
            w[(i, j)] = a[(i, j)] / s;
        }
    }
    Ok(w)
}

/// Connect each isolated actor to its nearest neighbour in attribute space.
/// Returns the (zero-based) actors that were repaired.
fn repair_isolated(a: &mut DMatrix<f64>, z: &[f64], kind: AttributeKind) -> Vec<usize> {
    let n = a.nrows();
    let mut repaired = Vec::new();
    for i in 0..n {
        if a.row(i).sum() > 0.0 {
            continue;
        }
        let mut best = None;
        let mut best_dist = f64::INFINITY;
        for j in 0..n {
            if j == i {
                continue;
            }
            let dist = match kind {
                AttributeKind::Continuous => (z[i] - z[j]).abs(),
                AttributeKind::Discrete => {
                    if z[i] == z[j] {
                        0.0
                    } else {
                        1.0
                    }
                }
            };
            if dist < best_dist {
                best_dist = dist;
                best = Some(j);
            }
        }
        if let Some(j) = best {
            let v = match kind {
                AttributeKind::Continuous => (-best_dist * best_dist).exp().max(f64::MIN_POSITIVE),
                AttributeKind::Discrete => 1.0,
            };
            a[(i, j)] = v;
            repaired.push(i);
        }
    }
    repaired
}

/// Construction record of one `(k, t)` slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceInfo {
    pub threshold: Option<Threshold>,
    /// Actors (zero-based) connected to their nearest neighbour.
    pub repaired: Vec<usize>,
}

/// The stack of weight matrices, indexed `[t][k]`.
#[derive(Debug, Clone)]
pub struct WeightSet {
    n: usize,
    d: usize,
    mats: Vec<Vec<WeightMatrix>>,
    info: Vec<Vec<SliceInfo>>,
}

impl WeightSet {
    /// Wrap existing matrices given as `[t][k]`.
    pub fn from_matrices(mats: Vec<Vec<WeightMatrix>>) -> Result<Self> {
        if mats.is_empty() || mats[0].is_empty() {
            return Err(MirError::InvalidInput("weight set needs T >= 1 and d >= 1".into()));
        }
        let d = mats[0].len();
        let n = mats[0][0].dim();
        for (t, per_t) in mats.iter().enumerate() {
            if per_t.len() != d {
                return Err(MirError::Dimension {
                    what: format!("weight matrices in period {}", t + 1),
                    expected: d,
                    found: per_t.len(),
                });
            }
            for w in per_t {
                if w.dim() != n {
                    return Err(MirError::Dimension { what: "weight matrix size".into(), expected: n, found: w.dim() });
                }
            }
        }
        let info = vec![vec![SliceInfo { threshold: None, repaired: vec![] }; d]; mats.len()];
        Ok(Self { n, d, mats, info })
    }

    /// Dense matrices given as `[t][k]`; stored sparse.
    pub fn from_dense(mats: Vec<Vec<DMatrix<f64>>>) -> Result<Self> {
        Self::from_matrices(
            mats.iter()
                .map(|per_t| per_t.iter().map(WeightMatrix::from_dense).collect())
                .collect(),
        )
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn periods(&self) -> usize {
        self.mats.len()
    }

    /// `W_k^(t)` (zero-based).
    pub fn get(&self, k: usize, t: usize) -> &WeightMatrix {
        &self.mats[t][k]
    }

    pub fn period(&self, t: usize) -> &[WeightMatrix] {
        &self.mats[t]
    }

    pub fn info(&self, k: usize, t: usize) -> &SliceInfo {
        &self.info[t][k]
    }

    /// Borrowed `[t][k]` view restricted to the attributes in `subset`.
    pub fn view(&self, subset: &[usize]) -> Vec<Vec<&WeightMatrix>> {
        self.mats.iter().map(|per_t| subset.iter().map(|&k| &per_t[k]).collect()).collect()
    }

    pub fn full_view(&self) -> Vec<Vec<&WeightMatrix>> {
        self.mats.iter().map(|per_t| per_t.iter().collect()).collect()
    }

    /// New weight set keeping only the listed attributes.
    pub fn restrict(&self, subset: &[usize]) -> Result<Self> {
        let mats = self.mats.iter().map(|per_t| subset.iter().map(|&k| per_t[k].clone()).collect()).collect();
        let info = self.info.iter().map(|per_t| subset.iter().map(|&k| per_t[k].clone()).collect()).collect();
        let mut out = Self::from_matrices(mats)?;
        out.info = info;
        Ok(out)
    }

    /// Verify the row-stochastic invariants on every slice.
    pub fn validate(&self) -> Result<()> {
        for (t, per_t) in self.mats.iter().enumerate() {
            for (k, w) in per_t.iter().enumerate() {
                w.check_row_stochastic().map_err(|e| {
                    MirError::InvalidInput(format!("W_{}^({}) not row-stochastic: {e}", k + 1, t + 1))
                })?;
            }
        }
        Ok(())
    }

    /// Write one CSV per slice, named `W_k{k}_t{t}.csv` (1-based).
    pub fn export_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for t in 0..self.periods() {
            for k in 0..self.d {
                let path = dir.join(format!("W_k{}_t{}.csv", k + 1, t + 1));
                let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
                let dense = self.mats[t][k].to_dense();
                for i in 0..self.n {
                    w.write_record(dense.row(i).iter().map(|v| format!("{v:e}")))?;
                }
                w.flush()?;
            }
        }
        Ok(())
    }

    /// Read a directory written by [`WeightSet::export_dir`].
    pub fn import_dir(dir: &Path) -> Result<Self> {
        let mut slices = Vec::new();
        let (mut max_k, mut max_t) = (0, 0);
        for entry in fs::read_dir(dir)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().to_string();
            if let Some((k, t)) = parse_slice_name(&name) {
                max_k = max_k.max(k);
                max_t = max_t.max(t);
                slices.push((k, t, entry.path()));
            }
        }
        if slices.is_empty() {
            return Err(MirError::InvalidInput(format!("no W_k*_t*.csv files in {}", dir.display())));
        }
        let mut grid: Vec<Vec<Option<DMatrix<f64>>>> = vec![vec![None; max_k]; max_t];
        for (k, t, path) in slices {
            let mut rdr = csv::ReaderBuilder::new()
                .has_headers(false)
                .comment(Some(b'#'))
                .trim(csv::Trim::All)
                .from_path(&path)?;
            let mut rows: Vec<Vec<f64>> = Vec::new();
            for (line, rec) in rdr.records().enumerate() {
                let rec = rec?;
                let row = rec
                    .iter()
                    .map(|s| s.parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| MirError::InvalidInput(format!("{}: line {}: bad number", path.display(), line + 1)))?;
                rows.push(row);
            }
            let n = rows.len();
            if rows.iter().any(|r| r.len() != n) {
                return Err(MirError::InvalidInput(format!("{}: matrix is not square", path.display())));
            }
            grid[t - 1][k - 1] = Some(DMatrix::from_fn(n, n, |i, j| rows[i][j]));
        }
        let mut mats = Vec::with_capacity(max_t);
        for (t, per_t) in grid.into_iter().enumerate() {
            let mut row = Vec::with_capacity(max_k);
            for (k, m) in per_t.into_iter().enumerate() {
                let m = m.ok_or_else(|| MirError::InvalidInput(format!("missing W_k{}_t{}.csv", k + 1, t + 1)))?;
                row.push(m);
            }
            mats.push(row);
        }
        Self::from_dense(mats)
    }
}

fn parse_slice_name(name: &str) -> Option<(usize, usize)> {
    let rest = name.strip_prefix("W_k")?.strip_suffix(".csv")?;
    let (k, t) = rest.split_once("_t")?;
    Some((k.parse().ok()?, t.parse().ok()?))
}

/// Build one weight matrix from one attribute slice.
pub fn build_slice(z: &[f64], kind: AttributeKind, target_density: f64, t: usize) -> Result<(WeightMatrix, SliceInfo)> {
    let (mut a, threshold) = match kind {
        AttributeKind::Continuous => {
            let th = select_threshold(z, target_density)?;
            (build_similarity_continuous(z, th.phi)?, Some(th))
        }
        AttributeKind::Discrete => (build_similarity_discrete(z), None),
    };
    let repaired = repair_isolated(&mut a, z, kind);
    let w = row_normalize(&a, t)?;
    Ok((WeightMatrix::from_dense(&w), SliceInfo { threshold, repaired }))
}

/// Threshold, kernel, repair and normalize every `(k, t)` slice.
pub fn build_weight_set(panel: &AttributePanel, target_density: f64) -> Result<WeightSet> {
    let d = panel.d();
    let periods = panel.periods();
    let slices = par::map_range(d * periods, |idx| {
        let (t, k) = (idx / d, idx % d);
        build_slice(panel.slice(k, t), panel.kind(k), target_density, t).map_err(|e| match e {
            MirError::NonFiniteAttribute { i, .. } => MirError::NonFiniteAttribute { k: k + 1, t: t + 1, i },
            other => other,
        })
    });
    let mut mats = Vec::with_capacity(periods);
    let mut info = Vec::with_capacity(periods);
    let mut it = slices.into_iter();
    for _ in 0..periods {
        let mut row_m = Vec::with_capacity(d);
        let mut row_i = Vec::with_capacity(d);
        for _ in 0..d {
            let (m, i) = it.next().expect("slice count")?;
            row_m.push(m);
            row_i.push(i);
        }
        mats.push(row_m);
        info.push(row_i);
    }
    let mut ws = WeightSet::from_matrices(mats)?;
    ws.info = info;
    Ok(ws)
}

/// Default target density `10/n`, capped at 1.
pub fn default_density(n: usize) -> f64 {
    (10.0 / n as f64).min(1.0)
}
