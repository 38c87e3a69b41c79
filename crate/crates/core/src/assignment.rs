//! IoU cost matrices and minimum-cost rectangular assignment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

/// Dense row-major cost matrix, rows = tracks, columns = detections.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{rows}x{cols} cost matrix with {} entries", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged cost matrix".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
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

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    fn transposed(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.get(r, c);
            }
        }
        Self { rows: self.cols, cols: self.rows, data }
    }
}

/// `C[i][j] = 1 − IoU(predicted_i, detection_j)`.
pub fn cost_matrix(predicted: &[BBox], detections: &[BBox]) -> CostMatrix {
    let data = predicted.iter().flat_map(|p| detections.iter().map(move |d| 1.0 - iou(p, d))).collect();
    CostMatrix { rows: predicted.len(), cols: detections.len(), data }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentResult {
    /// `(row, column)` pairs sorted by row.
    pub matches: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
}

/// Minimum-total-cost matching covering `min(rows, cols)` pairs.
///
/// Shortest augmenting paths with row/column potentials, O(n²m). Among
/// equally cheap augmenting columns the lowest index wins, so results are
/// deterministic.
pub fn min_cost_matching(cost: &CostMatrix) -> Result<Vec<(usize, usize)>> {
    if let Some(v) = cost.values().iter().find(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite cost {v}")));
    }
    if cost.rows == 0 || cost.cols == 0 {
        return Ok(Vec::new());
    }
    if cost.rows > cost.cols {
        let mut pairs: Vec<_> = min_cost_matching(&cost.transposed())?.into_iter().map(|(c, r)| (r, c)).collect();
        pairs.sort_unstable();
        return Ok(pairs);
    }
    let (n, m) = (cost.rows, cost.cols);
    let a = |i: usize, j: usize| cost.get(i - 1, j - 1);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // col_row[j]: row (1-based) matched to column j; 0 = free
    let mut col_row = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        col_row[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = col_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
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
    let mut pairs: Vec<(usize, usize)> =
        (1..=m).filter(|&j| col_row[j] != 0).map(|j| (col_row[j] - 1, j - 1)).collect();
    pairs.sort_unstable();
    Ok(pairs)
}

/// Optimal matching on a `1 − IoU` cost matrix, then dissolve every pair
/// whose cost exceeds `1 − gate` (i.e. IoU below `gate`).
pub fn assign_with_gate(cost: &CostMatrix, gate: f64) -> Result<AssignmentResult> {
    assign_max_cost(cost, 1.0 - gate)
}

/// Optimal matching, keeping only pairs with cost `<= max_cost`.
pub fn assign_max_cost(cost: &CostMatrix, max_cost: f64) -> Result<AssignmentResult> {
    let pairs = min_cost_matching(cost)?;
    let mut row_used = vec![false; cost.rows];
    let mut col_used = vec![false; cost.cols];
    let mut matches = Vec::with_capacity(pairs.len());
    for (r, c) in pairs {
        if cost.get(r, c) <= max_cost {
            row_used[r] = true;
            col_used[c] = true;
            matches.push((r, c));
        }
    }
    Ok(AssignmentResult {
        matches,
        unmatched_rows: (0..cost.rows).filter(|&r| !row_used[r]).collect(),
        unmatched_cols: (0..cost.cols).filter(|&c| !col_used[c]).collect(),
    })
}
