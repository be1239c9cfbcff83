//! Vertex assignment and the contour deformation losses.
//!
//! All three losses compare a predicted contour against a target contour of
//! equal length, differing only in how vertices are paired:
//!
//! * DML — identity pairing (index i to index i);
//! * NNML — each predicted vertex to its nearest target vertex (many-to-one);
//! * OBGML — the bipartite pairing of minimum total squared distance, found
//!   by the Hungarian algorithm.
//!
//! The per-pair penalty is always smooth-L1, applied per coordinate and
//! summed over x and y, then averaged over vertices. Gradients are analytic;
//! no gradient flows through the matching itself.

use crate::error::{Error, Result};
use crate::geometry::{Contour, Point};
use serde::{Deserialize, Serialize};

/// Dense n x n matrix of squared vertex distances, row = predicted vertex,
/// column = target vertex.
#[derive(Clone, Debug)]
pub struct CostMatrix {
    values: Vec<f64>,
    n: usize,
}

impl CostMatrix {
    pub fn from_values(rows: Vec<Vec<f64>>) -> Result<CostMatrix> {
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::ShapeMismatch {
                expected: "square matrix".into(),
                got: format!("{} rows", n),
            });
        }
        let values: Vec<f64> = rows.into_iter().flatten().collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cost matrix"));
        }
        Ok(CostMatrix { values, n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }
}

/// M[i][j] = squared Euclidean distance between predicted vertex i and target
/// vertex j.
pub fn cost_matrix(pred: &Contour, target: &Contour) -> Result<CostMatrix> {
    if pred.n() != target.n() || pred.n() == 0 {
        return Err(Error::ShapeMismatch {
            expected: format!("matching contour lengths, pred has {}", pred.n()),
            got: format!("target has {}", target.n()),
        });
    }
    let n = pred.n();
    let mut values = Vec::with_capacity(n * n);
    for &p in pred.points() {
        for &t in target.points() {
            values.push(p.dist_sq(t));
        }
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cost matrix"));
    }
    Ok(CostMatrix { values, n })
}

/// Result of the Hungarian matcher: `pairs[i] = (i, sigma(i))` sorted by
/// predicted index, plus the total cost of the permutation.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Minimum-cost perfect matching on a square cost matrix in O(n^3).
///
/// Among cost ties the lexicographically smallest pair list wins: sigma(0) is
/// minimized first, then sigma(1), and so on.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    let n = cost.n;
    if cost.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cost matrix"));
    }

    // Shortest-augmenting-path assignment with dual potentials (u, v).
    // Rows and columns are 1-based with a virtual column 0.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut col_row = vec![0usize; n + 1]; // col_row[j] = row matched to column j (1-based, 0 = free)
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        col_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_row[j0] = col_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_col = vec![0usize; n];
    for j in 1..=n {
        row_col[col_row[j] - 1] = j - 1;
    }

    // Optimal duals certify optimality: every optimal assignment uses only
    // tight edges (reduced cost zero). Re-select within the tight subgraph to
    // get the lexicographically smallest optimal permutation.
    let scale = cost
        .values
        .iter()
        .fold(1.0f64, |m, &c| m.max(c.abs()))
        .max(1.0);
    let tol = 1e-9 * scale;
    let mut tight: Vec<Vec<usize>> = Vec::with_capacity(n);
    let mut unique = true;
    for i in 0..n {
        let mut cols: Vec<usize> = (0..n)
            .filter(|&j| cost.get(i, j) - u[i + 1] - v[j + 1] <= tol)
            .collect();
        if cols.is_empty() {
            // Numerical slack ate the matched edge; fall back to it.
            cols = vec![row_col[i]];
        }
        unique &= cols.len() == 1;
        tight.push(cols);
    }
    if !unique {
        if let Some(lex) = lex_smallest_perfect_matching(&tight, n) {
            row_col = lex;
        }
    }

    let pairs: Vec<(usize, usize)> = row_col.iter().copied().enumerate().collect();
    let total_cost = pairs.iter().map(|&(i, j)| cost.get(i, j)).sum();
    Ok(Assignment { pairs, total_cost })
}

/// Greedy-with-feasibility lexicographic selection inside the tight subgraph.
fn lex_smallest_perfect_matching(adj: &[Vec<usize>], n: usize) -> Option<Vec<usize>> {
    let mut fixed = vec![usize::MAX; n];
    let mut col_taken = vec![false; n];
    for i in 0..n {
        let mut chosen = None;
        for &j in &adj[i] {
            if col_taken[j] {
                continue;
            }
            col_taken[j] = true;
            fixed[i] = j;
            if rest_is_matchable(adj, n, i + 1, &col_taken) {
                chosen = Some(j);
                break;
            }
            col_taken[j] = false;
            fixed[i] = usize::MAX;
        }
        chosen?;
    }
    Some(fixed)
}

/// Can rows `from..n` still be perfectly matched into the free columns?
fn rest_is_matchable(adj: &[Vec<usize>], n: usize, from: usize, col_taken: &[bool]) -> bool {
    let mut matched_col = vec![usize::MAX; n];
    for i in from..n {
        let mut seen = vec![false; n];
        if !augment(adj, i, col_taken, &mut matched_col, &mut seen, from) {
            return false;
        }
    }
    true
}

fn augment(
    adj: &[Vec<usize>],
    row: usize,
    col_taken: &[bool],
    matched_col: &mut [usize],
    seen: &mut [bool],
    from: usize,
) -> bool {
    for &j in &adj[row] {
        if col_taken[j] || seen[j] {
            continue;
        }
        seen[j] = true;
        if matched_col[j] == usize::MAX
            || (matched_col[j] >= from
                && augment(adj, matched_col[j], col_taken, matched_col, seen, from))
        {
            matched_col[j] = row;
            return true;
        }
    }
    false
}

/// Smooth-L1 penalty with the kink at |d| = 1: quadratic inside, linear
/// outside.
#[inline]
pub fn smooth_l1(d: f64) -> f64 {
    let a = d.abs();
    if a < 1.0 {
        0.5 * d * d
    } else {
        a - 0.5
    }
}

#[inline]
pub fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

/// A scalar loss plus its gradient with respect to every predicted vertex.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub value: f64,
    /// d(value)/d(pred[i]) as a 2-vector per vertex.
    pub grad: Vec<Point>,
}

/// Which deformation loss pairs predicted and target vertices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Dml,
    Nnml,
    Obgml,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Dml, LossKind::Nnml, LossKind::Obgml];
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
        let s = match self {
            LossKind::Dml => "dml",
            LossKind::Nnml => "nnml",
            LossKind::Obgml => "obgml",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<LossKind> {
        match s {
            "dml" => Ok(LossKind::Dml),
            "nnml" => Ok(LossKind::Nnml),
            "obgml" => Ok(LossKind::Obgml),
            other => Err(Error::InvalidParam {
                name: "loss",
                reason: format!("unknown loss kind `{other}` (expected dml, nnml or obgml)"),
            }),
        }
    }
}

/// Dispatch to the loss selected by `kind`.
pub fn contour_loss(kind: LossKind, pred: &Contour, target: &Contour) -> Result<LossValue> {
    match kind {
        LossKind::Dml => dml_loss(pred, target),
        LossKind::Nnml => nnml_loss(pred, target),
        LossKind::Obgml => obgml_loss(pred, target),
    }
}

fn paired_loss(pred: &Contour, target: &Contour, pairing: &[usize]) -> LossValue {
    let n = pred.n();
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = vec![Point::default(); n];
    for i in 0..n {
        let d = pred.points()[i] - target.points()[pairing[i]];
        value += smooth_l1(d.x) + smooth_l1(d.y);
        grad[i] = Point::new(smooth_l1_grad(d.x) * inv_n, smooth_l1_grad(d.y) * inv_n);
    }
    LossValue {
        value: value * inv_n,
        grad,
    }
}

fn check_lengths(pred: &Contour, target: &Contour) -> Result<()> {
    if pred.n() != target.n() || pred.n() == 0 {
        return Err(Error::ShapeMismatch {
            expected: format!("equal contour lengths, pred has {}", pred.n()),
            got: format!("target has {}", target.n()),
        });
    }
    Ok(())
}

/// Identity pairing: vertex i against vertex i.
pub fn dml_loss(pred: &Contour, target: &Contour) -> Result<LossValue> {
    check_lengths(pred, target)?;
    let pairing: Vec<usize> = (0..pred.n()).collect();
    Ok(paired_loss(pred, target, &pairing))
}

/// Nearest-target pairing: vertex i against argmin_j M[i][j] (lowest index on
/// ties). Several predictions may share one target; some targets go unused.
pub fn nnml_loss(pred: &Contour, target: &Contour) -> Result<LossValue> {
    check_lengths(pred, target)?;
    let m = cost_matrix(pred, target)?;
    let pairing: Vec<usize> = (0..m.n()).map(|i| argmin_row(m.row(i))).collect();
    Ok(paired_loss(pred, target, &pairing))
}

fn argmin_row(row: &[f64]) -> usize {
    let mut best = 0usize;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v < row[best] {
            best = j;
        }
    }
    best
}

/// Bipartite-matched pairing: the Hungarian permutation on the squared
/// distance matrix. The matching is held fixed for the gradient.
pub fn obgml_loss(pred: &Contour, target: &Contour) -> Result<LossValue> {
    check_lengths(pred, target)?;
    let m = cost_matrix(pred, target)?;
    let assignment = hungarian(&m)?;
    let pairing: Vec<usize> = assignment.pairs.iter().map(|&(_, j)| j).collect();
    Ok(paired_loss(pred, target, &pairing))
}
