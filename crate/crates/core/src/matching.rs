//! Minimum-cost bipartite matching (rectangular Hungarian algorithm).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A one-to-one assignment of rows (candidates) to columns (targets).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(row, column)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Shortest-augmenting-path Hungarian algorithm with row/column potentials.
/// Requires `rows ≤ cols`; returns the column assigned to every row.
fn assign(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> Vec<usize> {
    let n = rows.len();
    let m = cols.len();
    debug_assert!(n <= m);
    let c = |i: usize, j: usize| cost[rows[i - 1]][cols[j - 1]];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
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
            for j in 0..=m {
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
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// Optimal cost of a maximum-cardinality matching restricted to the given
/// rows and columns.
fn restricted_optimum(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() || cols.is_empty() {
        return 0.0;
    }
    if rows.len() <= cols.len() {
        let a = assign(cost, rows, cols);
        rows.iter().zip(&a).map(|(&r, &j)| cost[r][cols[j]]).sum()
    } else {
        let t: Vec<Vec<f64>> = (0..cost[0].len())
            .map(|j| (0..cost.len()).map(|i| cost[i][j]).collect())
            .collect();
        let a = assign(&t, cols, rows);
        cols.iter().zip(&a).map(|(&c, &i)| cost[rows[i]][c]).sum()
    }
}

/// Minimum-cost one-to-one matching of size `min(m, n)`.
///
/// Among optimal assignments (costs equal within a relative `1e-9`), the
/// lexicographically smallest row-sorted pair list is returned.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<MatchResult> {
    let m = cost.len();
    if m == 0 || cost[0].is_empty() {
        return Ok(MatchResult::default());
    }
    let n = cost[0].len();
    if cost.iter().any(|r| r.len() != n) {
        return Err(Error::Input("cost matrix rows have different lengths".into()));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::Input("cost matrix has non-finite entries".into()));
    }
    let all_rows: Vec<usize> = (0..m).collect();
    let all_cols: Vec<usize> = (0..n).collect();
    let best = restricted_optimum(cost, &all_rows, &all_cols);
    let k = m.min(n);
    let scale = cost.iter().flatten().fold(1.0f64, |a, &c| a.max(c.abs())) * k as f64;
    let tol = 1e-9 * scale;

    let mut pairs = Vec::with_capacity(k);
    let mut fixed = 0.0;
    let mut used_cols = vec![false; n];
    let mut next_row = 0;
    while pairs.len() < k {
        let need_after = k - pairs.len() - 1;
        let mut chosen = None;
        'search: for r in next_row..m {
            let rows_after: Vec<usize> = (r + 1..m).collect();
            if rows_after.len() < need_after {
                break;
            }
            for c in 0..n {
                if used_cols[c] {
                    continue;
                }
                let cols_after: Vec<usize> = (0..n).filter(|&j| !used_cols[j] && j != c).collect();
                if cols_after.len() < need_after {
                    continue;
                }
                let rest = restricted_optimum(cost, &rows_after, &cols_after);
                if (fixed + cost[r][c] + rest - best).abs() <= tol {
                    chosen = Some((r, c));
                    break 'search;
                }
            }
        }
        let (r, c) = chosen.expect("an optimal completion always exists");
        fixed += cost[r][c];
        used_cols[c] = true;
        next_row = r + 1;
        pairs.push((r, c));
    }
    let total_cost = pairs.iter().map(|&(r, c)| cost[r][c]).sum();
    Ok(MatchResult { pairs, total_cost })
}
