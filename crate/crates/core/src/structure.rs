//! Group-level structure: regularization/cost matrices `R_g`, relationship
//! masks `U_g`, layer capacity, and the group-level criterion.
//!
//! Cardinality at group level `g` is `2^(g-1)`. A layer whose channel
//! counts share `gcd = 2^u · z` (odd `z`) admits levels `1..=u+1`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{contract, ImportanceMatrix, Matrix};

pub const DEFAULT_POWER: f64 = 0.5;

fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Highest admissible group level for a layer, `u + 1` where `2^u` is the
/// largest power of two dividing `gcd(c_out, c_in)`.
pub fn max_group_level(c_out: usize, c_in: usize) -> u32 {
    assert!(c_out >= 1 && c_in >= 1, "channel counts must be positive");
    gcd(c_out, c_in).trailing_zeros() + 1
}

pub fn cardinality(level: u32) -> usize {
    1usize << (level - 1)
}

/// Depth budget of a regularization matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegLevel {
    Level(u32),
    /// Unlimited depth: the cost matrix of the permutation objective.
    Max,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegMatrix {
    matrix: Matrix,
    level: RegLevel,
    power: f64,
}

impl RegMatrix {
    pub fn as_matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn level(&self) -> RegLevel {
        self.level
    }

    pub fn power(&self) -> f64 {
        self.power
    }

    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.cols()
    }
}

/// Banded penalty matrix.
///
/// Starting from the full matrix with value 1: the two off-diagonal half
/// blocks take the current value, then both diagonal half blocks recurse
/// with `value * power` and one less level of budget. Recursion stops when
/// the budget is spent or either block dimension is odd.
pub fn build_reg_matrix(c_out: usize, c_in: usize, level: RegLevel, power: f64) -> Result<RegMatrix> {
    if c_out == 0 || c_in == 0 {
        return Err(shape_err("channel counts must be positive"));
    }
    if !(power > 0.0 && power <= 1.0) {
        return Err(Error::Config(format!("decay power {power} outside (0, 1]")));
    }
    let budget = match level {
        RegLevel::Level(g) => {
            let capacity = max_group_level(c_out, c_in);
            if g < 1 || g > capacity {
                return Err(Error::LevelOutOfRange { level: g, capacity });
            }
            Some(g)
        }
        RegLevel::Max => None,
    };
    let matrix = Matrix::from_fn(c_out, c_in, |r, c| reg_entry(c_out, c_in, r, c, budget, power));
    Ok(RegMatrix { matrix, level, power })
}

fn reg_entry(mut h: usize, mut w: usize, mut r: usize, mut c: usize, mut budget: Option<u32>, power: f64) -> f64 {
    let mut value = 1.0;
    loop {
        if h % 2 == 1 || w % 2 == 1 || budget == Some(0) {
            return 0.0;
        }
        let (hh, hw) = (h / 2, w / 2);
        let (bottom, right) = (r >= hh, c >= hw);
        if bottom != right {
            return value;
        }
        if bottom {
            r -= hh;
            c -= hw;
        }
        h = hh;
        w = hw;
        value *= power;
        budget = budget.map(|b| b - 1);
    }
}

/// 0/1 mask of connections kept at a group level.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationshipMatrix {
    matrix: Matrix,
    level: u32,
}

impl RelationshipMatrix {
    pub fn as_matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn level(&self) -> u32 {
        self.level
    }
}

pub fn build_relationship_matrix(c_out: usize, c_in: usize, level: u32) -> Result<RelationshipMatrix> {
    let capacity = max_group_level(c_out, c_in);
    if level < 1 || level > capacity {
        return Err(Error::LevelOutOfRange { level, capacity });
    }
    let groups = cardinality(level);
    if c_out % groups != 0 || c_in % groups != 0 {
        return Err(Error::Divisibility { c_out, c_in, groups });
    }
    let (bo, bi) = (c_out / groups, c_in / groups);
    let matrix = Matrix::from_fn(c_out, c_in, |r, c| if r / bo == c / bi { 1.0 } else { 0.0 });
    Ok(RelationshipMatrix { matrix, level })
}

/// Largest `g` in `1..=capacity` whose diagonal blocks hold at least
/// `p_threshold` of the total importance. `capacity` is clamped to what the
/// matrix dimensions admit.
pub fn group_level(s_perm: &ImportanceMatrix, p_threshold: f64, capacity: u32) -> u32 {
    let capacity = capacity.min(max_group_level(s_perm.rows(), s_perm.cols()));
    let required = p_threshold * s_perm.total();
    let mut level = 1;
    for g in 2..=capacity {
        let mask = build_relationship_matrix(s_perm.rows(), s_perm.cols(), g)
            .expect("level within dimension capacity");
        let kept = contract(s_perm.as_matrix(), mask.as_matrix()).expect("matching shapes");
        if kept >= required {
            level = g;
        } else {
            // Kept mass is nonincreasing in g.
            break;
        }
    }
    level
}

/// `S' ⊗ R`; zero exactly when `S'` has no mass where `R` penalizes.
pub fn block_diagonality_score(s_perm: &ImportanceMatrix, cost: &RegMatrix) -> Result<f64> {
    contract(s_perm.as_matrix(), cost.as_matrix())
}
