//! Rectangular linear assignment by shortest augmenting paths.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// A minimum-cost matching of `min(rows, cols)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(row, col)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

impl Assignment {
    /// Column matched to each row, if any.
    pub fn col_for_rows(&self, rows: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; rows];
        for &(r, c) in &self.pairs {
            out[r] = Some(c);
        }
        out
    }
}

/// Solves `min sum cost[r, c]` over matchings that cover the smaller side.
pub fn rectangular_assignment(cost: &DMatrix<f64>) -> Result<Assignment> {
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("assignment cost matrix".into()));
    }
    let (nr, nc) = cost.shape();
    if nr == 0 || nc == 0 {
        return Ok(Assignment { pairs: Vec::new(), cost: 0.0 });
    }
    let transposed = nr > nc;
    let c = if transposed { cost.transpose() } else { cost.clone() };
    let col4row = solve(&c);
    let mut pairs: Vec<(usize, usize)> = col4row
        .iter()
        .enumerate()
        .map(|(r, &col)| if transposed { (col, r) } else { (r, col) })
        .collect();
    pairs.sort_unstable();
    let total = pairs.iter().map(|&(r, col)| cost[(r, col)]).sum();
    Ok(Assignment { pairs, cost: total })
}

/// Rows <= cols. Returns the column assigned to every row.
fn solve(cost: &DMatrix<f64>) -> Vec<usize> {
    let (n, m) = cost.shape();
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; m];
    let mut path = vec![usize::MAX; m];
    let mut col4row = vec![usize::MAX; n];
    let mut row4col = vec![usize::MAX; m];
    let mut shortest = vec![f64::INFINITY; m];
    let mut sr = vec![false; n];
    let mut sc = vec![false; m];
    let mut remaining = vec![0usize; m];

    for cur_row in 0..n {
        // Dijkstra over reduced costs from `cur_row` to the nearest free column.
        shortest.fill(f64::INFINITY);
        sr.fill(false);
        sc.fill(false);
        // Reverse order so a constant matrix yields the identity matching.
        for (it, r) in remaining.iter_mut().enumerate() {
            *r = m - 1 - it;
        }
        let mut num_remaining = m;
        let mut min_val = 0.0;
        let mut i = cur_row;
        let sink = loop {
            let mut index = usize::MAX;
            let mut lowest = f64::INFINITY;
            sr[i] = true;
            for (it, &j) in remaining[..num_remaining].iter().enumerate() {
                let r = min_val + cost[(i, j)] - u[i] - v[j];
                if r < shortest[j] {
                    path[j] = i;
                    shortest[j] = r;
                }
                if shortest[j] < lowest || (shortest[j] == lowest && row4col[j] == usize::MAX) {
                    lowest = shortest[j];
                    index = it;
                }
            }
            min_val = lowest;
            let j = remaining[index];
            sc[j] = true;
            num_remaining -= 1;
            remaining[index] = remaining[num_remaining];
            if row4col[j] == usize::MAX {
                break j;
            }
            i = row4col[j];
        };

        u[cur_row] += min_val;
        for r in 0..n {
            if sr[r] && r != cur_row {
                u[r] += min_val - shortest[col4row[r]];
            }
        }
        for j in 0..m {
            if sc[j] {
                v[j] -= min_val - shortest[j];
            }
        }
        let mut j = sink;
        loop {
            let r = path[j];
            row4col[j] = r;
            std::mem::swap(&mut col4row[r], &mut j);
            if r == cur_row {
                break;
            }
        }
    }
    col4row
}
