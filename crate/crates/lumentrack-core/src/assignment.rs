//! Gated rectangular assignment.
//!
//! [`solve`] minimizes total cost over all partial matchings of a
//! rectangular cost matrix, where every entry at or above the gate (or set to
//! the [`GATED`] sentinel) is unusable and leaving a row or column unmatched
//! costs `gate / 2`. This is the usual tracking-by-detection gating scheme:
//! the matrix is implicitly padded to a square with gate-level dummy costs,
//! a Hungarian pass solves the padded problem exactly, and dummy pairs are
//! reported as unmatched.
//!
//! The solver is fully deterministic: scanning order breaks ties toward the
//! lowest row index, then the lowest column index, so repeated runs on the
//! same matrix reproduce the same assignment.

use thiserror::Error;

/// Sentinel marking a forbidden (gated) cost entry.
pub const GATED: f64 = f64::INFINITY;

/// Assignment failure cases.
#[derive(Debug, Error, PartialEq)]
pub enum AssignmentError {
    /// The gate must be a finite, strictly positive cost level.
    #[error("gate must be finite and > 0, got {0}")]
    InvalidGate(f64),
    /// Finite cost entries must be non-negative.
    #[error("negative cost entry {value} at ({row}, {col})")]
    NegativeCost { row: usize, col: usize, value: f64 },
}

/// Dense row-major cost matrix.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    /// Matrix with every entry gated.
    pub fn gated(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![GATED; rows * cols],
        }
    }

    /// Matrix from a row-major closure.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
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

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }
}

/// Result of a gated assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// Matched `(row, col)` pairs, sorted by row.
    pub pairs: Vec<(usize, usize)>,
    /// Rows left unmatched, ascending.
    pub unmatched_rows: Vec<usize>,
    /// Columns left unmatched, ascending.
    pub unmatched_cols: Vec<usize>,
    /// Sum of the matched pairs' original cost entries.
    pub total_cost: f64,
}

impl Assignment {
    /// Objective value including the `gate / 2` penalty per unmatched row or
    /// column; this is the quantity the solver provably minimizes.
    pub fn padded_cost(&self, gate: f64) -> f64 {
        self.total_cost
            + (gate / 2.0) * (self.unmatched_rows.len() + self.unmatched_cols.len()) as f64
    }
}

/// Solve the gated assignment problem.
///
/// Entries that are `>= gate`, infinite, or NaN are treated as forbidden.
/// Remaining entries must be non-negative.
pub fn solve(costs: &CostMatrix, gate: f64) -> Result<Assignment, AssignmentError> {
    if !gate.is_finite() || gate <= 0.0 {
        return Err(AssignmentError::InvalidGate(gate));
    }
    let (r, c) = (costs.rows, costs.cols);
    for i in 0..r {
        for j in 0..c {
            let v = costs.get(i, j);
            if v.is_finite() && v < 0.0 {
                return Err(AssignmentError::NegativeCost {
                    row: i,
                    col: j,
                    value: v,
                });
            }
        }
    }
    if r == 0 || c == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            unmatched_rows: (0..r).collect(),
            unmatched_cols: (0..c).collect(),
            total_cost: 0.0,
        });
    }

    // Padded square problem of size r + c. Row i owns dummy column c + i and
    // column j owns dummy row r + j, both at cost gate / 2; dummies pair with
    // each other for free. A finite perfect matching therefore always exists.
    let n = r + c;
    let half_gate = gate / 2.0;
    let entry = |i: usize, j: usize| -> f64 {
        match (i < r, j < c) {
            (true, true) => {
                let v = costs.get(i, j);
                if v.is_finite() && v < gate {
                    v
                } else {
                    f64::INFINITY
                }
            }
            (true, false) => {
                if j - c == i {
                    half_gate
                } else {
                    f64::INFINITY
                }
            }
            (false, true) => {
                if i - r == j {
                    half_gate
                } else {
                    f64::INFINITY
                }
            }
            (false, false) => 0.0,
        }
    };

    // Hungarian algorithm with potentials and shortest augmenting paths.
    // Index n is a virtual column used to seed each augmentation.
    const FREE: usize = usize::MAX;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut matched_row = vec![FREE; n + 1]; // per column, including virtual
    let mut way = vec![0usize; n + 1];

    for i in 0..n {
        matched_row[n] = i;
        let mut j0 = n;
        let mut min_slack = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = n;
            for j in 0..n {
                if !used[j] {
                    let cur = entry(i0, j) - u[i0] - v[j];
                    if cur < min_slack[j] {
                        min_slack[j] = cur;
                        way[j] = j0;
                    }
                    if min_slack[j] < delta {
                        delta = min_slack[j];
                        j1 = j;
                    }
                }
            }
            debug_assert!(delta.is_finite(), "padded matrix admits a finite matching");
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_slack[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == FREE {
                break;
            }
        }
        while j0 != n {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
        }
    }

    let mut pairs = Vec::new();
    let mut total = 0.0;
    let mut row_matched = vec![false; r];
    let mut col_matched = vec![false; c];
    for j in 0..c {
        let i = matched_row[j];
        if i != FREE && i < r {
            pairs.push((i, j));
            total += costs.get(i, j);
            row_matched[i] = true;
            col_matched[j] = true;
        }
    }
    pairs.sort_unstable();
    Ok(Assignment {
        pairs,
        unmatched_rows: (0..r).filter(|&i| !row_matched[i]).collect(),
        unmatched_cols: (0..c).filter(|&j| !col_matched[j]).collect(),
        total_cost: total,
    })
}

/// Exhaustive reference solver used by tests and benches.
///
/// Enumerates every partial matching that respects the gate and returns the
/// minimal objective value (matched cost plus `gate / 2` per unmatched row or
/// column). Exponential: usable up to roughly 8x8.
pub fn exhaustive_best_cost(costs: &CostMatrix, gate: f64) -> f64 {
    assert!(costs.cols() < 32, "reference solver is for small matrices");
    let half = gate / 2.0;
    fn recurse(costs: &CostMatrix, gate: f64, half: f64, row: usize, used: u32) -> f64 {
        if row == costs.rows() {
            let unmatched_cols = costs.cols() - used.count_ones() as usize;
            return half * unmatched_cols as f64;
        }
        // Option 1: leave this row unmatched.
        let mut best = half + recurse(costs, gate, half, row + 1, used);
        // Option 2: match it to any free, gate-feasible column.
        for j in 0..costs.cols() {
            if used & (1 << j) != 0 {
                continue;
            }
            let v = costs.get(row, j);
            if v.is_finite() && v < gate {
                let sub = v + recurse(costs, gate, half, row + 1, used | (1 << j));
                if sub < best {
                    best = sub;
                }
            }
        }
        best
    }
    recurse(costs, gate, half, 0, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn matrix(rows: usize, cols: usize, entries: &[f64]) -> CostMatrix {
        assert_eq!(entries.len(), rows * cols);
        CostMatrix::from_fn(rows, cols, |i, j| entries[i * cols + j])
    }

    #[test]
    fn diagonal_is_optimal() {
        let m = matrix(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let a = solve(&m, 10.0).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost, 2.0);
        assert!(a.unmatched_rows.is_empty());
        assert!(a.unmatched_cols.is_empty());
    }

    #[test]
    fn entry_at_or_above_gate_is_unusable() {
        let m = matrix(1, 1, &[0.9]);
        let a = solve(&m, 0.5).unwrap();
        assert!(a.pairs.is_empty());
        assert_eq!(a.unmatched_rows, vec![0]);
        assert_eq!(a.unmatched_cols, vec![0]);

        // Exactly at the gate is also excluded.
        let m = matrix(1, 1, &[0.5]);
        let a = solve(&m, 0.5).unwrap();
        assert!(a.pairs.is_empty());
    }

    #[test]
    fn gated_sentinel_is_never_selected() {
        let m = matrix(2, 2, &[GATED, 0.3, 0.2, GATED]);
        let a = solve(&m, 1.0).unwrap();
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(a.total_cost, 0.5);
    }

    #[test]
    fn fully_gated_matrix_yields_empty_assignment() {
        let a = solve(&CostMatrix::gated(3, 2), 1.0).unwrap();
        assert!(a.pairs.is_empty());
        assert_eq!(a.unmatched_rows, vec![0, 1, 2]);
        assert_eq!(a.unmatched_cols, vec![0, 1]);
    }

    #[test]
    fn rectangular_matrix_leaves_extra_columns_unmatched() {
        let m = matrix(2, 3, &[0.1, 0.5, 0.6, 0.4, 0.2, 0.9]);
        let a = solve(&m, 1.0).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.unmatched_cols, vec![2]);
    }

    #[test]
    fn leaving_both_unmatched_can_beat_a_costly_pair() {
        // Matching costs 0.9; leaving row and column unmatched costs
        // 2 * gate / 2 = 1.0, so the pair is still taken at gate 1.0 but
        // dropped at gate 0.8.
        let m = matrix(1, 1, &[0.9]);
        let keep = solve(&m, 1.0).unwrap();
        assert_eq!(keep.pairs, vec![(0, 0)]);
        let drop = solve(&m, 0.8).unwrap();
        assert!(drop.pairs.is_empty());
    }

    #[test]
    fn tie_breaks_prefer_lowest_row_then_column() {
        let m = matrix(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let a = solve(&m, 10.0).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn invalid_gate_is_rejected() {
        let m = matrix(1, 1, &[0.1]);
        assert!(matches!(
            solve(&m, 0.0),
            Err(AssignmentError::InvalidGate(_))
        ));
        assert!(matches!(
            solve(&m, f64::INFINITY),
            Err(AssignmentError::InvalidGate(_))
        ));
    }

    #[test]
    fn negative_cost_is_rejected() {
        let m = matrix(1, 2, &[0.1, -0.2]);
        assert!(matches!(
            solve(&m, 1.0),
            Err(AssignmentError::NegativeCost { col: 1, .. })
        ));
    }

    #[test]
    fn empty_dimensions_are_handled() {
        let a = solve(&CostMatrix::gated(0, 3), 1.0).unwrap();
        assert!(a.pairs.is_empty());
        assert_eq!(a.unmatched_cols, vec![0, 1, 2]);
        let b = solve(&CostMatrix::gated(2, 0), 1.0).unwrap();
        assert!(b.pairs.is_empty());
        assert_eq!(b.unmatched_rows, vec![0, 1]);
    }

    /// Dyadic costs make every partial-matching sum exact in f64, so the
    /// solver and the exhaustive reference must agree to the last bit.
    fn arb_gated_matrix() -> impl Strategy<Value = (CostMatrix, f64)> {
        (1usize..=5, 1usize..=5).prop_flat_map(|(r, c)| {
            proptest::collection::vec(0u32..1400, r * c).prop_map(move |raw| {
                let m = CostMatrix::from_fn(r, c, |i, j| {
                    let k = raw[i * c + j];
                    if k >= 1024 {
                        GATED
                    } else {
                        f64::from(k) / 1024.0
                    }
                });
                (m, 0.75)
            })
        })
    }

    proptest! {
        #[test]
        fn matches_exhaustive_reference((m, gate) in arb_gated_matrix()) {
            let a = solve(&m, gate).unwrap();
            let best = exhaustive_best_cost(&m, gate);
            prop_assert_eq!(a.padded_cost(gate), best);
            // Every reported pair respects the gate.
            for &(i, j) in &a.pairs {
                prop_assert!(m.get(i, j) < gate);
            }
        }

        #[test]
        fn row_permutation_preserves_total_cost((m, gate) in arb_gated_matrix()) {
            let r = m.rows();
            let perm: Vec<usize> = (0..r).rev().collect();
            let pm = CostMatrix::from_fn(r, m.cols(), |i, j| m.get(perm[i], j));
            let a = solve(&m, gate).unwrap();
            let b = solve(&pm, gate).unwrap();
            prop_assert_eq!(a.padded_cost(gate), b.padded_cost(gate));
        }
    }
}
