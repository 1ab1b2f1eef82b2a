//! Exact linear assignment.
//!
//! Minimising `X ⊗ C` over doubly stochastic `X` always has a permutation
//! matrix among its optima, so the LP reduces to the classic assignment
//! problem. [`solve`] uses the shortest-augmenting-path form of the
//! Hungarian method with dual potentials (O(n³)); [`brute_force_solve`] is
//! the enumeration oracle used to check it.

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Permutation};

pub const BRUTE_FORCE_MAX_N: usize = 9;

/// Square, finite cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(Matrix);

impl CostMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::InvalidCost(format!("not square: {}x{}", m.rows(), m.cols())));
        }
        if !m.is_finite() {
            return Err(Error::InvalidCost("non-finite entry".into()));
        }
        Ok(Self(m))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    pub fn n(&self) -> usize {
        self.0.rows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    /// `Σ_a cost[a][perm[a]]`, summed in row order.
    pub fn evaluate(&self, perm: &Permutation) -> f64 {
        perm.map().iter().enumerate().map(|(a, &j)| self.0[(a, j)]).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentSolution {
    /// Row `a` is assigned to column `perm[a]`.
    pub perm: Permutation,
    pub objective: f64,
}

/// Minimum-cost perfect assignment.
pub fn solve(cost: &CostMatrix) -> AssignmentSolution {
    let n = cost.n();
    if n <= 1 {
        let perm = Permutation::identity(n);
        let objective = cost.evaluate(&perm);
        return AssignmentSolution { perm, objective };
    }
    let c = cost.as_matrix();

    // 1-based bookkeeping; index 0 is the virtual source column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0f64; n + 1];
    let mut used = vec![false; n + 1];

    for row in 1..=n {
        row_of_col[0] = row;
        let mut col0 = 0usize;
        minv.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[col0] = true;
            let i0 = row_of_col[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = c[(i0 - 1, j - 1)] - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = col0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    col1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            col0 = col1;
            if row_of_col[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            row_of_col[col0] = row_of_col[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }

    let mut map = vec![0usize; n];
    for j in 1..=n {
        map[row_of_col[j] - 1] = j - 1;
    }
    let perm = Permutation::new(map).expect("augmenting paths yield a perfect matching");
    let objective = cost.evaluate(&perm);
    AssignmentSolution { perm, objective }
}

/// Exhaustive search over all `n!` permutations in lexicographic order.
/// Returns the lexicographically smallest optimum.
pub fn brute_force_solve(cost: &CostMatrix) -> Result<AssignmentSolution> {
    let n = cost.n();
    if n > BRUTE_FORCE_MAX_N {
        return Err(Error::TooLarge { n, max: BRUTE_FORCE_MAX_N });
    }
    let mut current: Vec<usize> = (0..n).collect();
    let mut best = current.clone();
    let mut best_obj = eval_raw(cost.as_matrix(), &current);
    while next_permutation(&mut current) {
        let obj = eval_raw(cost.as_matrix(), &current);
        if obj < best_obj {
            best_obj = obj;
            best.copy_from_slice(&current);
        }
    }
    Ok(AssignmentSolution { perm: Permutation::new(best)?, objective: best_obj })
}

fn eval_raw(c: &Matrix, map: &[usize]) -> f64 {
    map.iter().enumerate().map(|(a, &j)| c[(a, j)]).sum()
}

fn next_permutation(xs: &mut [usize]) -> bool {
    if xs.len() < 2 {
        return false;
    }
    let mut i = xs.len() - 1;
    while i > 0 && xs[i - 1] >= xs[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = xs.len() - 1;
    while xs[j] <= xs[i - 1] {
        j -= 1;
    }
    xs.swap(i - 1, j);
    xs[i..].reverse();
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_int_cost(rng: &mut ChaCha8Rng, n: usize, hi: i32) -> CostMatrix {
        CostMatrix::new(Matrix::from_fn(n, n, |_, _| rng.gen_range(0..=hi) as f64)).unwrap()
    }

    #[test]
    fn two_by_two_examples() {
        let c = CostMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let s = solve(&c);
        assert_eq!(s.perm.map(), &[0, 1]);
        assert_eq!(s.objective, 0.0);

        let c = CostMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let s = solve(&c);
        assert_eq!(s.perm.map(), &[1, 0]);
        assert_eq!(s.objective, 0.0);
    }

    #[test]
    fn rejects_bad_costs() {
        assert!(CostMatrix::new(Matrix::zeros(2, 3)).is_err());
        assert!(CostMatrix::from_rows(&[vec![f64::INFINITY]]).is_err());
    }

    #[test]
    fn one_by_one() {
        let c = CostMatrix::from_rows(&[vec![5.0]]).unwrap();
        let s = solve(&c);
        assert_eq!((s.perm.map(), s.objective), (&[0usize][..], 5.0));
        let b = brute_force_solve(&c).unwrap();
        assert_eq!((b.perm.map(), b.objective), (&[0usize][..], 5.0));
    }

    #[test]
    fn brute_force_ties_pick_lexicographic_first() {
        let c = CostMatrix::new(Matrix::filled(4, 4, 2.5)).unwrap();
        let b = brute_force_solve(&c).unwrap();
        assert_eq!(b.perm.map(), &[0, 1, 2, 3]);
        assert_eq!(b.objective, 10.0);
    }

    #[test]
    fn brute_force_refuses_large_n() {
        let c = CostMatrix::new(Matrix::zeros(10, 10)).unwrap();
        assert!(matches!(brute_force_solve(&c), Err(Error::TooLarge { n: 10, .. })));
    }

    #[test]
    fn six_by_six_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let c = random_int_cost(&mut rng, 6, 9);
            assert_eq!(solve(&c).objective, brute_force_solve(&c).unwrap().objective);
        }
    }

    #[test]
    fn seven_by_seven_cross_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for _ in 0..200 {
            let c = CostMatrix::new(Matrix::from_fn(7, 7, |_, _| rng.gen_range(-50.0..50.0))).unwrap();
            let fast = solve(&c).objective;
            let slow = brute_force_solve(&c).unwrap().objective;
            assert!((fast - slow).abs() <= 1e-9 * (1.0 + slow.abs()), "{fast} vs {slow}");
        }
    }

    #[test]
    fn handles_negative_and_large_costs() {
        let c = CostMatrix::from_rows(&[
            vec![-1e6, 3.0, 0.0],
            vec![2.0, -1e6, 1.0],
            vec![0.5, 4.0, 7.0],
        ])
        .unwrap();
        let s = solve(&c);
        assert_eq!(s.objective, brute_force_solve(&c).unwrap().objective);
    }

    proptest! {
        #[test]
        fn optimal_and_vertex(seed in any::<u64>(), n in 1usize..=8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = random_int_cost(&mut rng, n, 20);
            let s = solve(&c);
            let mut cols = s.perm.map().to_vec();
            cols.sort_unstable();
            prop_assert_eq!(cols, (0..n).collect::<Vec<_>>());
            prop_assert_eq!(s.objective, brute_force_solve(&c).unwrap().objective);
            prop_assert_eq!(s.objective, c.evaluate(&s.perm));
            prop_assert_eq!(solve(&c), s);
        }

        #[test]
        fn row_shift_moves_objective_by_constant(seed in any::<u64>(), n in 2usize..=7, row in 0usize..7, shift in -20i32..20) {
            let row = row % n;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = random_int_cost(&mut rng, n, 30);
            let mut shifted = c.as_matrix().clone();
            for j in 0..n {
                shifted[(row, j)] += shift as f64;
            }
            let shifted = CostMatrix::new(shifted).unwrap();
            let base = solve(&c);
            let moved = solve(&shifted);
            prop_assert_eq!(moved.objective, base.objective + shift as f64);
            // The original optimum stays optimal after the shift.
            prop_assert_eq!(shifted.evaluate(&base.perm), moved.objective);
        }
    }
}
