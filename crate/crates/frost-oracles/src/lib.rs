//! Brute-force reference implementations used as independent test oracles.
//!
//! Everything here is deliberately naive — exhaustive enumeration and
//! numerical differencing — and shares no code with the main crate, so
//! the two sides can be checked against each other.

use std::collections::BTreeSet;
use std::fmt;

/// Largest square size `brute_assignment` will enumerate (6! = 720 permutations).
pub const MAX_BRUTE_N: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OracleError {
    /// Matrix side exceeds `MAX_BRUTE_N`.
    TooLarge(usize),
    /// Input is empty or ragged.
    Malformed(String),
}

impl fmt::Display for OracleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OracleError::TooLarge(n) => {
                write!(f, "refusing to enumerate {n}x{n} (max {MAX_BRUTE_N})")
            }
            OracleError::Malformed(msg) => write!(f, "malformed input: {msg}"),
        }
    }
}

impl std::error::Error for OracleError {}

/// Result of exhaustively enumerating every assignment of an n x n cost matrix.
#[derive(Debug, Clone)]
pub struct BruteAssignment {
    /// Lexicographically smallest optimal row -> column mapping.
    pub best: Vec<usize>,
    /// Cost achieved by `best`.
    pub cost: f64,
    /// Every permutation whose cost ties the optimum (within a small
    /// relative tolerance), sorted lexicographically.
    pub co_optimal: Vec<Vec<usize>>,
}

/// Enumerates all n! assignments and reports the optimum plus its tie set.
pub fn brute_assignment(cost: &[Vec<f64>]) -> Result<BruteAssignment, OracleError> {
    let n = cost.len();
    if n == 0 {
        return Err(OracleError::Malformed("empty matrix".into()));
    }
    if n > MAX_BRUTE_N {
        return Err(OracleError::TooLarge(n));
    }
    for row in cost {
        if row.len() != n {
            return Err(OracleError::Malformed(format!(
                "row of width {} in {n}x{n} matrix",
                row.len()
            )));
        }
    }

    let mut all: Vec<(Vec<usize>, f64)> = Vec::new();
    let mut perm = Vec::with_capacity(n);
    let mut used = vec![false; n];
    enumerate(cost, n, &mut perm, &mut used, &mut all);

    let best_cost = all
        .iter()
        .map(|(_, c)| *c)
        .fold(f64::INFINITY, f64::min);
    let tol = 1e-9 * (1.0 + best_cost.abs());
    let mut co_optimal: Vec<Vec<usize>> = all
        .into_iter()
        .filter(|(_, c)| (c - best_cost).abs() <= tol)
        .map(|(p, _)| p)
        .collect();
    co_optimal.sort();
    Ok(BruteAssignment {
        best: co_optimal[0].clone(),
        cost: best_cost,
        co_optimal,
    })
}

fn enumerate(
    cost: &[Vec<f64>],
    n: usize,
    perm: &mut Vec<usize>,
    used: &mut [bool],
    out: &mut Vec<(Vec<usize>, f64)>,
) {
    if perm.len() == n {
        let total = perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        out.push((perm.clone(), total));
        return;
    }
    for j in 0..n {
        if !used[j] {
            used[j] = true;
            perm.push(j);
            enumerate(cost, n, perm, used, out);
            perm.pop();
            used[j] = false;
        }
    }
}

/// Indices of the k largest entries of `z`; value ties prefer the lower index.
pub fn brute_topk_set(z: &[f64], k: usize) -> BTreeSet<usize> {
    let mut order: Vec<usize> = (0..z.len()).collect();
    order.sort_by(|&a, &b| {
        z[b].partial_cmp(&z[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.into_iter().take(k).collect()
}

/// Pairwise rank-statistics label: 1 iff both vectors share the same top-k set.
pub fn brute_pair_label(zi: &[f64], zj: &[f64], k: usize) -> bool {
    brute_topk_set(zi, k) == brute_topk_set(zj, k)
}

/// Central finite differences: grad_i ~= (f(x + h e_i) - f(x - h e_i)) / 2h.
pub fn finite_difference_gradient<F>(f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = f(&probe);
        probe[i] = orig - step;
        let down = f(&probe);
        probe[i] = orig;
        grad[i] = (up - down) / (2.0 * step);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_matches_sum_of_squares() {
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let g = finite_difference_gradient(f, &[1.0, 2.0], 1e-5);
        assert!((g[0] - 2.0).abs() < 1e-8);
        assert!((g[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn fd_step_sensitivity_is_mild_on_smooth_functions() {
        let f = |x: &[f64]| x.iter().map(|v| v.sin()).sum::<f64>();
        let x = [0.3, -1.2, 2.0];
        let g5 = finite_difference_gradient(f, &x, 1e-5);
        let g6 = finite_difference_gradient(f, &x, 1e-6);
        for (a, b) in g5.iter().zip(&g6) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn brute_identity_matrix_prefers_diagonal() {
        // Identity cost: diagonal assignment is optimal at cost 0... here we
        // want the *minimum*, so use 1 - I, whose optimum is the diagonal.
        let cost = vec![
            vec![0.0, 1.0, 1.0],
            vec![1.0, 0.0, 1.0],
            vec![1.0, 1.0, 0.0],
        ];
        let r = brute_assignment(&cost).unwrap();
        assert_eq!(r.best, vec![0, 1, 2]);
        assert_eq!(r.cost, 0.0);
        assert_eq!(r.co_optimal.len(), 1);
    }

    #[test]
    fn brute_all_equal_matrix_reports_every_permutation() {
        let cost = vec![vec![2.0; 3]; 3];
        let r = brute_assignment(&cost).unwrap();
        assert_eq!(r.co_optimal.len(), 6);
        assert_eq!(r.best, vec![0, 1, 2]); // lexicographically smallest
        assert_eq!(r.cost, 6.0);
    }

    #[test]
    fn brute_refuses_large_inputs() {
        let cost = vec![vec![0.0; 7]; 7];
        assert!(matches!(
            brute_assignment(&cost),
            Err(OracleError::TooLarge(7))
        ));
    }

    #[test]
    fn topk_ties_prefer_lower_index() {
        let set = brute_topk_set(&[1.0, 3.0, 3.0, 0.0], 1);
        assert!(set.contains(&1));
        let set2 = brute_topk_set(&[5.0, 4.0, 0.0], 2);
        assert_eq!(set2, BTreeSet::from([0, 1]));
    }

    #[test]
    fn pair_label_examples() {
        assert!(!brute_pair_label(
            &[3.0, 2.0, 1.0, 0.0],
            &[0.0, 1.0, 2.0, 3.0],
            2
        ));
        assert!(brute_pair_label(&[5.0, 4.0, 0.0], &[4.0, 5.0, 0.0], 2));
    }
}
