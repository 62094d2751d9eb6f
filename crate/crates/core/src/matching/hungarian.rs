//! Exact minimum-cost assignment of `m` rows to `n >= m` columns.
//!
//! Shortest-augmenting-path Hungarian method with row/column potentials,
//! viewed as the `n × n` problem padded with zero rows. Among all optimal assignments the
//! lexicographically smallest column list (by row order) is returned: starting
//! from one optimum, each row in turn is moved to the smallest column reachable
//! through an alternating cycle of tight (zero reduced cost) edges.

use crate::error::{Error, Result};

/// Costs with ground truths as rows and queries as columns.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Contract(format!(
                "cost matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            data: self.data.iter().map(|x| x * k).collect(),
            ..self.clone()
        }
    }
}

/// One-to-one matching of ground truths to queries.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `(gt_index, query_index)` sorted by ground truth.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn empty() -> Self {
        Self {
            pairs: Vec::new(),
            total_cost: 0.0,
        }
    }

    /// `query -> gt` lookup over `num_queries` slots.
    pub fn query_to_gt(&self, num_queries: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; num_queries];
        for &(gt, q) in &self.pairs {
            out[q] = Some(gt);
        }
        out
    }
}

pub fn hungarian(c: &CostMatrix) -> Result<Assignment> {
    let (m, n) = (c.rows, c.cols);
    if m > n {
        return Err(Error::Contract(format!(
            "more ground truths ({m}) than queries ({n})"
        )));
    }
    if let Some(i) = c.data.iter().position(|x| !x.is_finite()) {
        return Err(Error::Validation(format!(
            "non-finite cost {} at ({}, {})",
            c.data[i],
            i / n,
            i % n
        )));
    }
    if m == 0 {
        return Ok(Assignment::empty());
    }
    let cost = |i: usize, j: usize| if i < m { c.data[i * n + j] } else { 0.0 };

    // 1-based potentials; p[j] = row assigned to column j (0 = none).
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    // Only the real rows need augmenting: columns enter the alternating tree
    // only once assigned, so free columns keep v = 0 and zero rows with u = 0
    // stay dual feasible against every column.
    for i in 1..=m {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
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

    // row -> column, 0-based
    let mut col_of = vec![0usize; n];
    let mut row_of = vec![0usize; n];
    let mut pad = m;
    for j in 1..=n {
        let r = if p[j] == 0 {
            pad += 1;
            pad - 1
        } else {
            p[j] - 1
        };
        col_of[r] = j - 1;
        row_of[j - 1] = r;
    }

    let scale = 1.0 + c.data.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let tol = 1e-12 * scale;
    let tight = |i: usize, j: usize| cost(i, j) - u[i + 1] - v[j + 1] <= tol;

    // Lexicographic refinement over the real rows.
    let mut locked_col = vec![false; n];
    for i in 0..m {
        let cur = col_of[i];
        for q in 0..cur {
            if locked_col[q] || !tight(i, q) {
                continue;
            }
            // alternating path from the row holding q back to column `cur`
            let mut visited = vec![false; n];
            visited[q] = true;
            let mut path = Vec::new();
            if find_path(row_of[q], cur, &tight, &row_of, &locked_col, &mut visited, &mut path, n) {
                // path lists (row, new column) moves
                let start = row_of[q];
                let mut moves = vec![(i, q)];
                let mut row = start;
                for &col in &path {
                    moves.push((row, col));
                    row = row_of[col];
                }
                let mut next_col = col_of.clone();
                for &(r, col) in &moves {
                    next_col[r] = col;
                }
                // tightness is tolerance-based; only accept swaps that do not
                // raise the exact total
                let total = |cols: &[usize]| (0..m).map(|r| c.get(r, cols[r])).sum::<f64>();
                if total(&next_col) > total(&col_of) {
                    continue;
                }
                for (r, col) in moves {
                    col_of[r] = col;
                    row_of[col] = r;
                }
                break;
            }
        }
        locked_col[col_of[i]] = true;
    }

    let pairs: Vec<(usize, usize)> = (0..m).map(|i| (i, col_of[i])).collect();
    let total_cost = pairs.iter().map(|&(i, j)| c.get(i, j)).sum();
    Ok(Assignment { pairs, total_cost })
}

/// DFS for an alternating path: from `row` take a tight edge to an unvisited,
/// unlocked column; stop on `target`, otherwise continue from that column's row.
/// On success `path` holds the columns taken, in order.
#[allow(clippy::too_many_arguments)]
fn find_path(
    row: usize,
    target: usize,
    tight: &impl Fn(usize, usize) -> bool,
    row_of: &[usize],
    locked: &[bool],
    visited: &mut [bool],
    path: &mut Vec<usize>,
    n: usize,
) -> bool {
    for col in 0..n {
        if visited[col] || locked[col] || !tight(row, col) {
            continue;
        }
        visited[col] = true;
        path.push(col);
        if col == target || find_path(row_of[col], target, tight, row_of, locked, visited, path, n) {
            return true;
        }
        path.pop();
    }
    false
}
