//! Minimum-cost bipartite assignment (Hungarian algorithm with potentials)
//! plus the cluster-to-class relabelling built on top of it.
//!
//! Among co-optimal assignments the solver returns the lexicographically
//! smallest row-to-column vector, which keeps downstream reports stable when
//! confusion counts tie.

use crate::error::{Error, Result};

/// Tolerance scale for deciding that an edge is tight (cost equals the dual
/// bound) relative to the largest absolute cost.
const TIGHT_EPS: f64 = 1e-9;

/// A square matrix of finite assignment costs.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    n: usize,
    costs: Vec<Vec<f64>>,
}

/// An optimal assignment: `row_to_col[i]` is the column given to row `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub row_to_col: Vec<usize>,
    pub total_cost: f64,
}

/// Relabelling of cluster indices onto class indices with its accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMapping {
    /// `cluster_to_class[c]` is the class assigned to cluster `c`.
    pub cluster_to_class: Vec<usize>,
    /// Fraction of samples whose mapped cluster equals the ground truth.
    pub accuracy: f64,
}

impl LabelMapping {
    /// Inverse permutation: `class_to_cluster[k]` is the cluster mapped to
    /// class `k`.
    pub fn class_to_cluster(&self) -> Vec<usize> {
        let mut inv = vec![0; self.cluster_to_class.len()];
        for (cluster, &class) in self.cluster_to_class.iter().enumerate() {
            inv[class] = cluster;
        }
        inv
    }
}

impl CostMatrix {
    pub fn new(costs: Vec<Vec<f64>>) -> Result<Self> {
        let n = costs.len();
        if n == 0 {
            return Err(Error::Validation("cost matrix must be non-empty".into()));
        }
        for (i, row) in costs.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Shape {
                    op: "cost_matrix",
                    detail: format!("row {i} has {} entries, expected {n}", row.len()),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "cost_matrix" });
            }
        }
        Ok(CostMatrix { n, costs })
    }

    /// Pads a rectangular cost table with zero-cost dummy rows or columns
    /// until it is square.
    pub fn from_rectangular(costs: Vec<Vec<f64>>) -> Result<Self> {
        let rows = costs.len();
        if rows == 0 {
            return Err(Error::Validation("cost matrix must be non-empty".into()));
        }
        let cols = costs[0].len();
        if cols == 0 {
            return Err(Error::Validation("cost matrix must be non-empty".into()));
        }
        for (i, row) in costs.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::Shape {
                    op: "cost_matrix",
                    detail: format!("row {i} has {} entries, expected {cols}", row.len()),
                });
            }
        }
        let n = rows.max(cols);
        let mut square = Vec::with_capacity(n);
        for i in 0..n {
            let mut row = vec![0.0; n];
            if i < rows {
                row[..cols].copy_from_slice(&costs[i]);
            }
            square.push(row);
        }
        CostMatrix::new(square)
    }

    pub fn size(&self) -> usize {
        self.n
    }

    /// Solves the assignment problem exactly in O(n^3), then refines the
    /// answer to the lexicographically smallest co-optimal assignment using
    /// the tight-edge subgraph induced by the optimal dual potentials.
    pub fn solve(&self) -> Result<Assignment> {
        let (row_to_col, u, v) = self.hungarian();
        let max_abs = self
            .costs
            .iter()
            .flatten()
            .fold(0.0f64, |m, &c| m.max(c.abs()));
        let tol = TIGHT_EPS * (1.0 + max_abs);

        let n = self.n;
        let mut allowed = vec![vec![false; n]; n];
        for i in 0..n {
            for j in 0..n {
                if self.costs[i][j] - u[i] - v[j] <= tol {
                    allowed[i][j] = true;
                }
            }
            // The solved matching is tight by construction; keep it usable
            // even under adversarial rounding.
            allowed[i][row_to_col[i]] = true;
        }

        let best = lexicographic_perfect_matching(&allowed).ok_or_else(|| {
            Error::Validation("tight subgraph lost its perfect matching".into())
        })?;
        let total_cost = best
            .iter()
            .enumerate()
            .map(|(i, &j)| self.costs[i][j])
            .sum();
        Ok(Assignment {
            row_to_col: best,
            total_cost,
        })
    }

    /// Classic potentials formulation; returns the matching and the final
    /// dual variables (u for rows, v for columns).
    fn hungarian(&self) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
        let n = self.n;
        let mut u = vec![0.0f64; n + 1];
        let mut v = vec![0.0f64; n + 1];
        let mut p = vec![0usize; n + 1]; // p[j]: row matched to column j (1-based, 0 = free)
        let mut way = vec![0usize; n + 1];

        for i in 1..=n {
            p[0] = i;
            let mut j0 = 0usize;
            let mut minv = vec![f64::INFINITY; n + 1];
            let mut used = vec![false; n + 1];
            loop {
                used[j0] = true;
                let i0 = p[j0];
                let mut delta = f64::INFINITY;
                let mut j1 = 0usize;
                for j in 1..=n {
                    if !used[j] {
                        let cur = self.costs[i0 - 1][j - 1] - u[i0] - v[j];
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

        let mut row_to_col = vec![0usize; n];
        for j in 1..=n {
            row_to_col[p[j] - 1] = j - 1;
        }
        (
            row_to_col,
            u[1..].to_vec(),
            v[1..].to_vec(),
        )
    }
}

/// Greedy row-by-row construction of the lexicographically smallest perfect
/// matching in a bipartite graph, checking completability with Kuhn's
/// augmenting-path algorithm before committing each choice.
fn lexicographic_perfect_matching(allowed: &[Vec<bool>]) -> Option<Vec<usize>> {
    let n = allowed.len();
    let mut used_cols = vec![false; n];
    let mut result = Vec::with_capacity(n);
    for i in 0..n {
        let mut chosen = None;
        for j in 0..n {
            if used_cols[j] || !allowed[i][j] {
                continue;
            }
            used_cols[j] = true;
            if remaining_rows_matchable(allowed, i + 1, &used_cols) {
                chosen = Some(j);
                break;
            }
            used_cols[j] = false;
        }
        result.push(chosen?);
    }
    Some(result)
}

fn remaining_rows_matchable(allowed: &[Vec<bool>], first_row: usize, used_cols: &[bool]) -> bool {
    let n = allowed.len();
    let mut col_match: Vec<Option<usize>> = vec![None; n];

    fn augment(
        row: usize,
        allowed: &[Vec<bool>],
        used_cols: &[bool],
        visited: &mut [bool],
        col_match: &mut [Option<usize>],
    ) -> bool {
        let n = allowed.len();
        for c in 0..n {
            if used_cols[c] || visited[c] || !allowed[row][c] {
                continue;
            }
            visited[c] = true;
            let can = match col_match[c] {
                None => true,
                Some(other) => augment(other, allowed, used_cols, visited, col_match),
            };
            if can {
                col_match[c] = Some(row);
                return true;
            }
        }
        false
    }

    for r in first_row..n {
        let mut visited = vec![false; n];
        if !augment(r, allowed, used_cols, &mut visited, &mut col_match) {
            return false;
        }
    }
    true
}

/// Finds the cluster-to-class relabelling that maximises agreement between
/// predicted cluster indices and ground-truth class indices, and reports the
/// resulting accuracy.
pub fn optimal_label_mapping(predictions: &[usize], ground_truth: &[usize]) -> Result<LabelMapping> {
    let k = predictions
        .iter()
        .chain(ground_truth)
        .max()
        .map(|&m| m + 1)
        .unwrap_or(1);
    optimal_label_mapping_with_k(predictions, ground_truth, k)
}

/// Same as `optimal_label_mapping` but over an explicit index space of size
/// `k`, so unused trailing clusters still receive a (dummy) class.
pub fn optimal_label_mapping_with_k(
    predictions: &[usize],
    ground_truth: &[usize],
    k: usize,
) -> Result<LabelMapping> {
    if predictions.is_empty() {
        return Err(Error::Validation("label mapping needs at least one sample".into()));
    }
    if predictions.len() != ground_truth.len() {
        return Err(Error::Validation(format!(
            "{} predictions vs {} ground-truth labels",
            predictions.len(),
            ground_truth.len()
        )));
    }
    if let Some(bad) = predictions.iter().chain(ground_truth).find(|&&v| v >= k) {
        return Err(Error::Validation(format!(
            "label {bad} out of range for {k} clusters"
        )));
    }
    let mut counts = vec![vec![0.0f64; k]; k];
    for (&p, &g) in predictions.iter().zip(ground_truth) {
        counts[p][g] += 1.0;
    }
    let negated = counts
        .iter()
        .map(|row| row.iter().map(|&c| -c).collect())
        .collect();
    let assignment = CostMatrix::new(negated)?.solve()?;
    let agree: f64 = assignment
        .row_to_col
        .iter()
        .enumerate()
        .map(|(cluster, &class)| counts[cluster][class])
        .sum();
    Ok(LabelMapping {
        cluster_to_class: assignment.row_to_col,
        accuracy: agree / predictions.len() as f64,
    })
}
