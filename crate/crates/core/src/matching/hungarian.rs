//! Minimum-cost bipartite assignment (Kuhn–Munkres with row/column
//! potentials), `O(G^2 N)` for `G` targets and `N` predictions.

use crate::error::{Error, Result};
use crate::numeric::Real;

/// Cost of assigning prediction `i` (row) to target `j` (column).
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Real>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<Real>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Invalid(format!(
                "cost matrix {rows}x{cols} with {} entries",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("cost matrix entry {v} is not finite")));
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Real) -> Result<Self> {
        let data = (0..rows * cols).map(|k| f(k / cols, k % cols)).collect();
        Self::new(rows, cols, data)
    }

    /// Number of predictions.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Number of targets.
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, pred: usize, target: usize) -> Real {
        self.data[pred * self.cols + target]
    }
}

/// Prediction assigned to each target, in target order.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub pred_of_target: Vec<usize>,
    pub total: Real,
}

impl Assignment {
    /// `(target, prediction)` pairs in target order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pred_of_target.iter().copied().enumerate()
    }
}

/// Optimal injective map targets -> predictions. Among optimal assignments
/// the one whose prediction sequence (in target order) is lexicographically
/// smallest is returned.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    let (n, g) = (cost.rows, cost.cols);
    if g > n {
        return Err(Error::Invalid(format!("{g} targets but only {n} predictions")));
    }
    let targets: Vec<usize> = (0..g).collect();
    let preds: Vec<usize> = (0..n).collect();
    let best = solve(cost, &targets, &preds).0;
    let tol = 1e-9 * (1.0 + best.abs());

    // Fix targets one at a time to the smallest prediction that still admits
    // an optimal completion.
    let mut used = vec![false; n];
    let mut pred_of_target = Vec::with_capacity(g);
    let mut acc = 0.0;
    for t in 0..g {
        let rest: Vec<usize> = (t + 1..g).collect();
        let mut chosen = None;
        for p in (0..n).filter(|&p| !used[p]) {
            let free: Vec<usize> = (0..n).filter(|&q| !used[q] && q != p).collect();
            let tail = if rest.is_empty() {
                0.0
            } else {
                solve(cost, &rest, &free).0
            };
            if acc + cost.get(p, t) + tail <= best + tol {
                chosen = Some(p);
                break;
            }
        }
        let p = chosen.expect("an optimal completion always exists");
        used[p] = true;
        acc += cost.get(p, t);
        pred_of_target.push(p);
    }
    let total = pred_of_target.iter().enumerate().map(|(t, &p)| cost.get(p, t)).sum();
    Ok(Assignment { pred_of_target, total })
}

/// Minimum cost of assigning every target in `targets` to a distinct
/// prediction in `preds` (`targets.len() <= preds.len()`), with the
/// assignment as positions into `preds`.
fn solve(cost: &CostMatrix, targets: &[usize], preds: &[usize]) -> (Real, Vec<usize>) {
    let (rows, cols) = (targets.len(), preds.len());
    let c = |i: usize, j: usize| cost.get(preds[j - 1], targets[i - 1]);
    // 1-based potentials; p[j] is the row matched to column j (0 = free).
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut p = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![Real::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = Real::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if !used[j] {
                    let cur = c(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; rows];
    for j in 1..=cols {
        if p[j] != 0 {
            col_of_row[p[j] - 1] = j - 1;
        }
    }
    let total = col_of_row.iter().enumerate().map(|(i, &j)| c(i + 1, j + 1)).sum();
    (total, col_of_row)
}
