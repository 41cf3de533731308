//! Data-driven context selection.
//!
//! Pearson correlation, the correlation spanning tree and histogram mutual
//! information are min-max scaled and averaged into one relevance matrix.
//! Each target keeps its top `⌈1.5·S⌉` candidates, which are then ranked by
//! Granger-causality F-test p-values; the best `S` become its contexts.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use petgraph::unionfind::UnionFind;

use crate::data::SeriesPanel;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatrixKind {
    Correlation,
    SpanningTree,
    MutualInformation,
    Granger,
    Aggregated,
}

/// Dense symmetric (except Granger) `n x n` relation matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencyMatrix {
    pub n: usize,
    pub weights: Vec<f64>,
    pub kind: MatrixKind,
}

impl AdjacencyMatrix {
    pub fn zeros(n: usize, kind: MatrixKind) -> Self {
        Self {
            n,
            weights: vec![0.0; n * n],
            kind,
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.weights[i * self.n + j] = v;
    }

    fn set_sym(&mut self, i: usize, j: usize, v: f64) {
        self.set(i, j, v);
        self.set(j, i, v);
    }

    pub fn abs(&self) -> Self {
        Self {
            n: self.n,
            weights: self.weights.iter().map(|w| w.abs()).collect(),
            kind: self.kind,
        }
    }

    fn off_diagonal(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n).flat_map(move |i| (0..self.n).filter(move |&j| j != i).map(move |j| self.get(i, j)))
    }
}

/// Pairs of values observed in both series.
fn joint(panel: &SeriesPanel, a: usize, b: usize) -> (Vec<f64>, Vec<f64>) {
    let (xa, ma) = (panel.series(a), panel.mask(a));
    let (xb, mb) = (panel.series(b), panel.mask(b));
    (0..panel.len()).filter(|&t| ma[t] && mb[t]).map(|t| (xa[t], xb[t])).unzip()
}

/// Pearson correlation; zero when either side has no variance.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
}

pub fn pearson_matrix(panel: &SeriesPanel) -> Result<AdjacencyMatrix> {
    let n = panel.n();
    for i in 0..n {
        let obs = panel.mask(i).iter().filter(|m| **m).count();
        if obs < 3 {
            return Err(Error::Data(format!("series {i} has {obs} observations; correlation needs 3")));
        }
    }
    let mut m = AdjacencyMatrix::zeros(n, MatrixKind::Correlation);
    for i in 0..n {
        m.set(i, i, 1.0);
        for j in i + 1..n {
            let (x, y) = joint(panel, i, j);
            if x.len() < 3 {
                return Err(Error::Data(format!("series {i} and {j} share fewer than 3 observations")));
            }
            m.set_sym(i, j, pearson(&x, &y));
        }
    }
    Ok(m)
}

/// Kruskal's algorithm on a dense distance matrix. Equal distances are
/// taken in ascending `(i, j)` order. Returns `n - 1` edges with `i < j`.
pub fn minimum_spanning_tree(dist: &[f64], n: usize) -> Vec<(usize, usize)> {
    let mut edges: Vec<(f64, usize, usize)> = Vec::with_capacity(n * (n.saturating_sub(1)) / 2);
    for i in 0..n {
        for j in i + 1..n {
            edges.push((dist[i * n + j], i, j));
        }
    }
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut uf = UnionFind::<usize>::new(n);
    let mut tree = Vec::with_capacity(n.saturating_sub(1));
    for (_, i, j) in edges {
        if uf.union(i, j) {
            tree.push((i, j));
            if tree.len() + 1 == n {
                break;
            }
        }
    }
    tree
}

/// Spanning tree over `D = 1 - |corr|`; tree edges carry `|corr|`.
pub fn cst_matrix(panel: &SeriesPanel) -> Result<AdjacencyMatrix> {
    let n = panel.n();
    if n < 2 {
        return Err(Error::Data("spanning tree needs at least two series".into()));
    }
    let corr = pearson_matrix(panel)?;
    let dist: Vec<f64> = corr.weights.iter().map(|c| 1.0 - c.abs()).collect();
    let mut m = AdjacencyMatrix::zeros(n, MatrixKind::SpanningTree);
    for (i, j) in minimum_spanning_tree(&dist, n) {
        m.set_sym(i, j, corr.get(i, j).abs());
    }
    Ok(m)
}

/// Bins per marginal: `max(8, ⌊√T⌋)`, capped at 64.
pub fn mi_bins(t: usize) -> usize {
    ((t as f64).sqrt().floor() as usize).clamp(8, 64)
}

fn bin_of(v: f64, lo: f64, width: f64, bins: usize) -> usize {
    if width <= 0.0 {
        0
    } else {
        (((v - lo) / width) as usize).min(bins - 1)
    }
}

/// Equal-width histogram estimate of mutual information in nats.
pub fn mutual_information(x: &[f64], y: &[f64], bins: usize) -> f64 {
    let n = x.len();
    let range = |v: &[f64]| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (lo, (hi - lo) / bins as f64)
    };
    let (xl, xw) = range(x);
    let (yl, yw) = range(y);
    let mut joint = vec![0usize; bins * bins];
    let mut px = vec![0usize; bins];
    let mut py = vec![0usize; bins];
    for (a, b) in x.iter().zip(y) {
        let (i, j) = (bin_of(*a, xl, xw, bins), bin_of(*b, yl, yw, bins));
        joint[i * bins + j] += 1;
        px[i] += 1;
        py[j] += 1;
    }
    let nf = n as f64;
    let mut mi = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            let c = joint[i * bins + j];
            if c > 0 {
                let pxy = c as f64 / nf;
                mi += pxy * (pxy * nf * nf / (px[i] as f64 * py[j] as f64)).ln();
            }
        }
    }
    mi.max(0.0)
}

pub fn mi_matrix(panel: &SeriesPanel) -> Result<AdjacencyMatrix> {
    let n = panel.n();
    let mut m = AdjacencyMatrix::zeros(n, MatrixKind::MutualInformation);
    for i in 0..n {
        for j in i..n {
            let (x, y) = joint(panel, i, j);
            if x.len() < 32 {
                return Err(Error::Data(format!(
                    "series {i} and {j} share {} observations; mutual information needs 32",
                    x.len()
                )));
            }
            m.set_sym(i, j, mutual_information(&x, &y, mi_bins(x.len())));
        }
    }
    Ok(m)
}

/// Min-max scales each matrix over its off-diagonal entries and averages
/// them entrywise. A constant matrix contributes zeros. The diagonal is zero.
pub fn aggregate(matrices: &[AdjacencyMatrix]) -> Result<AdjacencyMatrix> {
    let first = matrices
        .first()
        .ok_or_else(|| Error::Data("nothing to aggregate".into()))?;
    let n = first.n;
    if matrices.iter().any(|m| m.n != n) {
        return Err(Error::Data("aggregated matrices differ in size".into()));
    }
    let mut out = AdjacencyMatrix::zeros(n, MatrixKind::Aggregated);
    for m in matrices {
        if m.weights.iter().any(|w| *w < 0.0) {
            return Err(Error::Data(format!("{:?} matrix has negative relevance scores", m.kind)));
        }
        let lo = m.off_diagonal().fold(f64::INFINITY, f64::min);
        let hi = m.off_diagonal().fold(f64::NEG_INFINITY, f64::max);
        if !(hi > lo) {
            continue;
        }
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let k = i * n + j;
                    out.weights[k] += (m.weights[k] - lo) / (hi - lo);
                }
            }
        }
    }
    let count = matrices.len() as f64;
    for w in out.weights.iter_mut() {
        *w /= count;
    }
    Ok(out)
}

pub fn shortlist_size(s: usize) -> usize {
    (3 * s).div_ceil(2)
}

/// Ranks each target's `limit` best candidates by descending weight, ties by id.
fn ranked(agg: &AdjacencyMatrix, limit: usize) -> Vec<Vec<usize>> {
    (0..agg.n)
        .map(|t| {
            let mut c: Vec<usize> = (0..agg.n).filter(|&j| j != t).collect();
            c.sort_by(|&a, &b| agg.get(t, b).total_cmp(&agg.get(t, a)).then(a.cmp(&b)));
            c.truncate(limit);
            c
        })
        .collect()
}

/// `⌈1.5·S⌉` candidates per target, best first.
pub fn shortlist(agg: &AdjacencyMatrix, s: usize) -> Result<Vec<Vec<usize>>> {
    let k = shortlist_size(s);
    if s == 0 || k > agg.n.saturating_sub(1) {
        return Err(Error::Data(format!(
            "shortlist of {k} candidates needs at least {} series, have {}",
            k + 1,
            agg.n
        )));
    }
    Ok(ranked(agg, k))
}

/// Result of one Granger-causality F-test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GrangerTest {
    pub f_stat: f64,
    pub p_value: f64,
    pub df1: usize,
    pub df2: usize,
    pub rss_restricted: f64,
    pub rss_augmented: f64,
}

/// Upper tail of the F distribution through the regularized incomplete beta.
pub fn f_survival(f: f64, df1: usize, df2: usize) -> f64 {
    if f.is_nan() {
        return 1.0;
    }
    if f <= 0.0 {
        return 1.0;
    }
    if f.is_infinite() {
        return 0.0;
    }
    let (d1, d2) = (df1 as f64, df2 as f64);
    let x = d2 / (d2 + d1 * f);
    statrs::function::beta::checked_beta_reg(d2 / 2.0, d1 / 2.0, x).unwrap_or(if x <= 0.0 { 0.0 } else { 1.0 })
}

/// Residual sum of squares of an OLS fit through the normal equations.
/// Falls back to a relative ridge of 1e-8 when the system is singular.
fn ols_rss(x: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    let xt = x.transpose();
    let xtx = &xt * x;
    let xty = &xt * y;
    let beta = match xtx.clone().cholesky() {
        Some(c) => c.solve(&xty),
        None => {
            let scale = (xtx.trace() / xtx.nrows() as f64).max(f64::MIN_POSITIVE);
            log::warn!("singular regression; adding ridge jitter");
            let jittered = xtx + DMatrix::identity(x.ncols(), x.ncols()) * (1e-8 * scale);
            match jittered.clone().cholesky() {
                Some(c) => c.solve(&xty),
                None => jittered.lu().solve(&xty).unwrap_or_else(|| DVector::zeros(x.ncols())),
            }
        }
    };
    (y - x * beta).norm_squared()
}

/// Does `cause` help predict `target` beyond `target`'s own `maxlag` lags?
/// Both slices must be fully observed and equally long.
pub fn granger_test(target: &[f64], cause: &[f64], maxlag: usize) -> Result<GrangerTest> {
    let len = target.len();
    if cause.len() != len {
        return Err(Error::Data("granger series differ in length".into()));
    }
    if maxlag == 0 || len <= 10 * maxlag {
        return Err(Error::Data(format!("granger test needs more than {} points, have {len}", 10 * maxlag)));
    }
    let rows = len - maxlag;
    let df1 = maxlag;
    let df2 = rows - 2 * maxlag - 1;
    let y = DVector::from_iterator(rows, (maxlag..len).map(|t| target[t]));
    let restricted = DMatrix::from_fn(rows, 1 + maxlag, |r, c| {
        let t = r + maxlag;
        if c == 0 {
            1.0
        } else {
            target[t - c]
        }
    });
    let augmented = DMatrix::from_fn(rows, 1 + 2 * maxlag, |r, c| {
        let t = r + maxlag;
        match c {
            0 => 1.0,
            c if c <= maxlag => target[t - c],
            c => cause[t - (c - maxlag)],
        }
    });
    let rss_r = ols_rss(&restricted, &y);
    let rss_a = ols_rss(&augmented, &y).min(rss_r);
    let f_stat = if rss_a > 0.0 {
        ((rss_r - rss_a) / df1 as f64) / (rss_a / df2 as f64)
    } else if rss_r > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    Ok(GrangerTest {
        f_stat,
        p_value: f_survival(f_stat, df1, df2),
        df1,
        df2,
        rss_restricted: rss_r,
        rss_augmented: rss_a,
    })
}

/// Longest run of steps where both series are observed, as `(start, end)`.
fn longest_joint_run(panel: &SeriesPanel, a: usize, b: usize) -> (usize, usize) {
    let (ma, mb) = (panel.mask(a), panel.mask(b));
    let mut best = (0, 0);
    let mut start = 0;
    for t in 0..=panel.len() {
        let ok = t < panel.len() && ma[t] && mb[t];
        if !ok {
            if t - start > best.1 - best.0 {
                best = (start, t);
            }
            start = t + 1;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrangerOutcome {
    /// p-value of candidate `j` for target `i` at `(i, j)`; 1 where untested.
    pub pvalues: AdjacencyMatrix,
    pub per_target: Vec<Vec<usize>>,
    /// Number of F-tests performed.
    pub tests: usize,
}

/// Tests every shortlisted `(target, candidate)` pair and keeps the `s`
/// candidates with the smallest p-values (ties: higher aggregated weight,
/// then lower id).
pub fn granger_rank(
    panel: &SeriesPanel,
    candidates: &[Vec<usize>],
    agg: &AdjacencyMatrix,
    s: usize,
    maxlag: usize,
) -> Result<GrangerOutcome> {
    let n = panel.n();
    if candidates.len() != n {
        return Err(Error::Data(format!("{} candidate lists for {n} series", candidates.len())));
    }
    let mut pvalues = AdjacencyMatrix::zeros(n, MatrixKind::Granger);
    pvalues.weights.iter_mut().for_each(|w| *w = 1.0);
    let mut tests = 0;
    let mut per_target = Vec::with_capacity(n);
    for (target, cands) in candidates.iter().enumerate() {
        if cands.len() < s {
            return Err(Error::Data(format!("target {target} has {} candidates, need {s}", cands.len())));
        }
        for &c in cands {
            if c == target || c >= n {
                return Err(Error::Data(format!("invalid candidate {c} for target {target}")));
            }
            let (a, b) = longest_joint_run(panel, target, c);
            let g = granger_test(&panel.series(target)[a..b], &panel.series(c)[a..b], maxlag)?;
            tests += 1;
            pvalues.set(target, c, g.p_value);
        }
        let mut ranked = cands.clone();
        ranked.sort_by(|&x, &y| {
            pvalues
                .get(target, x)
                .total_cmp(&pvalues.get(target, y))
                .then(agg.get(target, y).total_cmp(&agg.get(target, x)))
                .then(x.cmp(&y))
        });
        ranked.truncate(s);
        per_target.push(ranked);
    }
    Ok(GrangerOutcome {
        pvalues,
        per_target,
        tests,
    })
}

/// Contexts per target plus the shared context batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextMap {
    pub per_target: BTreeMap<usize, Vec<usize>>,
    pub global_batch: Vec<usize>,
}

impl ContextMap {
    /// Contexts per target (`S`).
    pub fn s(&self) -> usize {
        self.per_target.values().next().map_or(0, Vec::len)
    }

    /// Context batch size (`K`).
    pub fn k(&self) -> usize {
        self.global_batch.len()
    }

    /// Checks ids against a panel of `n` series.
    pub fn validate(&self, n: usize) -> Result<()> {
        let s = self.s();
        for (&t, list) in &self.per_target {
            if t >= n {
                return Err(Error::Data(format!("context map names unknown series {t}")));
            }
            if list.len() != s {
                return Err(Error::Data(format!("target {t} lists {} contexts, expected {s}", list.len())));
            }
            let mut seen = std::collections::BTreeSet::new();
            for &c in list {
                if c >= n {
                    return Err(Error::Data(format!("context map names unknown series {c}")));
                }
                if c == t || !seen.insert(c) {
                    return Err(Error::Data(format!("target {t} has a repeated or self context {c}")));
                }
            }
        }
        if self.global_batch.is_empty() {
            return Err(Error::Data("context map has an empty GLOBAL batch".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &g in &self.global_batch {
            if g >= n {
                return Err(Error::Data(format!("context map names unknown series {g}")));
            }
            if !seen.insert(g) {
                return Err(Error::Data(format!("GLOBAL batch repeats {g}")));
            }
        }
        Ok(())
    }

    /// Parses `target: c1,c2,...` lines followed by `GLOBAL: g1,...`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut per_target = BTreeMap::new();
        let mut global = None;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let bad = |m: &str| Error::Format(format!("context map line {}: {m}", no + 1));
            let (head, tail) = line.split_once(':').ok_or_else(|| bad("missing ':'"))?;
            let ids = tail
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<usize>().map_err(|_| bad("bad id")))
                .collect::<Result<Vec<_>>>()?;
            let head = head.trim();
            if head == "GLOBAL" {
                if global.replace(ids).is_some() {
                    return Err(bad("second GLOBAL line"));
                }
            } else {
                let t = head.parse::<usize>().map_err(|_| bad("bad target id"))?;
                if per_target.insert(t, ids).is_some() {
                    return Err(bad("target listed twice"));
                }
            }
        }
        let global_batch = global.ok_or_else(|| Error::Format("context map has no GLOBAL line".into()))?;
        Ok(Self {
            per_target,
            global_batch,
        })
    }
}

impl fmt::Display for ContextMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        for (t, list) in &self.per_target {
            writeln!(f, "{t}: {}", join(list))?;
        }
        writeln!(f, "GLOBAL: {}", join(&self.global_batch))
    }
}

/// Everything computed while selecting contexts.
#[derive(Clone, Debug)]
pub struct Selection {
    pub map: ContextMap,
    pub aggregated: AdjacencyMatrix,
    pub granger: GrangerOutcome,
}

/// Full data-driven pipeline. `K` is capped at `n`; the shortlist is capped
/// at `n - 1` candidates.
pub fn build_context_map(panel: &SeriesPanel, s: usize, k: usize, maxlag: usize) -> Result<Selection> {
    let n = panel.n();
    if n < 2 {
        return Err(Error::Data("context selection needs at least two series".into()));
    }
    if s == 0 || s > n - 1 {
        return Err(Error::Data(format!("cannot pick {s} contexts from {} other series", n - 1)));
    }
    let cm = pearson_matrix(panel)?;
    let cst = cst_matrix(panel)?;
    let mi = mi_matrix(panel)?;
    let aggregated = aggregate(&[cm.abs(), cst, mi])?;
    let candidates = ranked(&aggregated, shortlist_size(s).min(n - 1));
    let granger = granger_rank(panel, &candidates, &aggregated, s, maxlag)?;
    let global_batch = global_batch(&granger.per_target, &aggregated, k.min(n));
    let map = ContextMap {
        per_target: granger.per_target.iter().cloned().enumerate().collect(),
        global_batch,
    };
    Ok(Selection {
        map,
        aggregated,
        granger,
    })
}

/// The `k` series chosen most often as a context (ties: larger total
/// aggregated weight, then lower id).
pub fn global_batch(per_target: &[Vec<usize>], agg: &AdjacencyMatrix, k: usize) -> Vec<usize> {
    let n = agg.n;
    let mut freq = vec![0usize; n];
    for list in per_target {
        for &c in list {
            freq[c] += 1;
        }
    }
    let total: Vec<f64> = (0..n).map(|j| (0..n).map(|i| agg.get(i, j)).sum()).collect();
    let mut ids: Vec<usize> = (0..n).collect();
    ids.sort_by(|&a, &b| freq[b].cmp(&freq[a]).then(total[b].total_cmp(&total[a])).then(a.cmp(&b)));
    ids.truncate(k);
    ids
}
