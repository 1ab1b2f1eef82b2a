//! Learning the channel shuffle: alternating exact assignment solves for the
//! output permutation `P` and input permutation `Q` that make `P S Q` as
//! block diagonal as the cost matrix asks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{solve, CostMatrix};
use crate::error::{shape_err, Result};
use crate::structure::{block_diagonality_score, build_relationship_matrix, max_group_level, RegMatrix};
use crate::tensor::{permute_importance, ImportanceMatrix, Matrix, Permutation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShuffleOptions {
    pub max_iters: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for ShuffleOptions {
    fn default() -> Self {
        Self { max_iters: 50, restarts: 5, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShuffleResult {
    pub p_out: Permutation,
    pub q_in: Permutation,
    pub objective: f64,
    /// Full P/Q alternations of the winning run.
    pub iterations: usize,
    pub restarts_used: usize,
    /// Objective before the first step and after every half step of the
    /// winning run.
    pub history: Vec<f64>,
}

/// Assignment cost for the output permutation with `Q` fixed:
/// `cost[a][j] = Σ_b R[a][b] · S[j][q[b]]`.
pub fn output_step_cost(s: &ImportanceMatrix, q: &Permutation, cost: &RegMatrix) -> Result<CostMatrix> {
    check_shapes(s, cost)?;
    let sq = permute_importance(s, &Permutation::identity(s.rows()), q)?;
    CostMatrix::new(cost.as_matrix().matmul(&sq.as_matrix().transpose())?)
}

/// Assignment cost for the input permutation with `P` fixed:
/// `cost[b][i] = Σ_a R[a][b] · S[p[a]][i]`.
pub fn input_step_cost(s: &ImportanceMatrix, p: &Permutation, cost: &RegMatrix) -> Result<CostMatrix> {
    check_shapes(s, cost)?;
    let ps = permute_importance(s, p, &Permutation::identity(s.cols()))?;
    CostMatrix::new(cost.as_matrix().transpose().matmul(ps.as_matrix())?)
}

fn check_shapes(s: &ImportanceMatrix, cost: &RegMatrix) -> Result<()> {
    if (s.rows(), s.cols()) != (cost.rows(), cost.cols()) {
        return Err(shape_err(format!(
            "importance {}x{} vs cost {}x{}",
            s.rows(),
            s.cols(),
            cost.rows(),
            cost.cols()
        )));
    }
    Ok(())
}

fn score(s: &ImportanceMatrix, cost: &RegMatrix, p: &Permutation, q: &Permutation) -> Result<f64> {
    block_diagonality_score(&permute_importance(s, p, q)?, cost)
}

/// Cold start from identity permutations, followed by `opts.restarts`
/// seeded random restarts; the best run wins.
pub fn optimize_permutations(s: &ImportanceMatrix, cost: &RegMatrix, opts: &ShuffleOptions) -> Result<ShuffleResult> {
    let p0 = Permutation::identity(s.rows());
    let q0 = Permutation::identity(s.cols());
    optimize_from(s, cost, p0, q0, opts)
}

/// Same as [`optimize_permutations`] but warm-started from `(p0, q0)`.
pub fn optimize_from(
    s: &ImportanceMatrix,
    cost: &RegMatrix,
    p0: Permutation,
    q0: Permutation,
    opts: &ShuffleOptions,
) -> Result<ShuffleResult> {
    check_shapes(s, cost)?;
    if p0.len() != s.rows() || q0.len() != s.cols() {
        return Err(shape_err("initial permutations do not match the importance matrix"));
    }
    if max_group_level(s.rows(), s.cols()) == 1 {
        let objective = score(s, cost, &p0, &q0)?;
        return Ok(ShuffleResult {
            p_out: p0,
            q_in: q0,
            objective,
            iterations: 0,
            restarts_used: 0,
            history: vec![objective],
        });
    }

    let mut best = alternate(s, cost, p0, q0, opts.max_iters)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut restarts_used = 0;
    for _ in 0..opts.restarts {
        if best.objective == 0.0 {
            break;
        }
        let q = Permutation::random(s.cols(), &mut rng);
        let run = alternate(s, cost, Permutation::identity(s.rows()), q, opts.max_iters)?;
        restarts_used += 1;
        if run.objective < best.objective {
            best = run;
        }
    }
    best.restarts_used = restarts_used;
    Ok(best)
}

fn alternate(
    s: &ImportanceMatrix,
    cost: &RegMatrix,
    mut p: Permutation,
    mut q: Permutation,
    max_iters: usize,
) -> Result<ShuffleResult> {
    let mut objective = score(s, cost, &p, &q)?;
    let mut history = vec![objective];
    let mut iterations = 0;
    while iterations < max_iters && objective > 0.0 {
        iterations += 1;
        let start = objective;

        let cand = solve(&output_step_cost(s, &q, cost)?).perm;
        let obj = score(s, cost, &cand, &q)?;
        // The current P is feasible for the LP, so only rounding can make
        // the solver's answer look worse; keep the incumbent in that case.
        if obj < objective {
            p = cand;
            objective = obj;
        }
        history.push(objective);

        let cand = solve(&input_step_cost(s, &p, cost)?).perm;
        let obj = score(s, cost, &p, &cand)?;
        if obj < objective {
            q = cand;
            objective = obj;
        }
        history.push(objective);

        if objective >= start {
            break;
        }
    }
    Ok(ShuffleResult { p_out: p, q_in: q, objective, iterations, restarts_used: 0, history })
}

/// Whether every entry of `P S Q` outside the level-`g` diagonal blocks is at
/// most `tol`.
pub fn is_groupable(s: &ImportanceMatrix, g: u32, p_out: &Permutation, q_in: &Permutation, tol: f64) -> Result<bool> {
    let mask = build_relationship_matrix(s.rows(), s.cols(), g)?;
    let sp = permute_importance(s, p_out, q_in)?;
    Ok(sp
        .as_matrix()
        .as_slice()
        .iter()
        .zip(mask.as_matrix().as_slice())
        .all(|(&v, &keep)| keep == 1.0 || v <= tol))
}

/// A block-diagonal importance matrix with `groups` blocks of distinct
/// positive entries, scrambled by random row/column permutations.
pub fn planted_instance(n: usize, groups: usize, rng: &mut ChaCha8Rng) -> ImportanceMatrix {
    use rand::seq::SliceRandom;
    let b = n / groups;
    let mut values: Vec<f64> = (1..=n * n).map(|v| v as f64).collect();
    values.shuffle(rng);
    let base = Matrix::from_fn(n, n, |r, c| if r / b == c / b { values[r * n + c] } else { 0.0 });
    let s = ImportanceMatrix::new(base).expect("nonnegative");
    let p = Permutation::random(n, rng);
    let q = Permutation::random(n, rng);
    permute_importance(&s, &p, &q).expect("square")
}
