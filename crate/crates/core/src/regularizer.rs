//! Structured L1 penalty, parameter-reduction sparsity, and the dynamic
//! penalty-coefficient controller.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::structure::{cardinality, max_group_level, RegMatrix};
use crate::tensor::{contract, ImportanceMatrix, Norm, Permutation, TensorShape, WeightTensor};

pub const DEFAULT_DELTA_LAMBDA: f64 = 2e-6;

/// `S' ⊗ R_g` for one layer.
pub fn reg_loss(s_perm: &ImportanceMatrix, reg: &RegMatrix) -> Result<f64> {
    contract(s_perm.as_matrix(), reg.as_matrix())
}

/// Subgradient of `reg_loss(P · importance(w) · Q, reg)` with respect to `w`.
///
/// Slice `(j, i)` sits at permuted position `(p⁻¹(j), q⁻¹(i))`; its gradient
/// is that penalty coefficient times the norm's subgradient, with zero at
/// an all-zero slice.
pub fn reg_subgradient(
    w: &WeightTensor,
    p_out: &Permutation,
    q_in: &Permutation,
    reg: &RegMatrix,
    norm: Norm,
) -> Result<WeightTensor> {
    let mut grad = WeightTensor::zeros(w.c_out(), w.c_in(), w.k());
    accumulate_reg_subgradient(w, p_out, q_in, reg, norm, 1.0, grad.as_mut_slice())?;
    Ok(grad)
}

/// Adds `scale × reg_subgradient(..)` into `out`, which must have the
/// layout of `w`.
pub fn accumulate_reg_subgradient(
    w: &WeightTensor,
    p_out: &Permutation,
    q_in: &Permutation,
    reg: &RegMatrix,
    norm: Norm,
    scale: f64,
    out: &mut [f64],
) -> Result<()> {
    if p_out.len() != w.c_out() || q_in.len() != w.c_in() || (reg.rows(), reg.cols()) != (w.c_out(), w.c_in()) {
        return Err(shape_err(format!(
            "weights ({}, {}) with permutations ({}, {}) and penalty {}x{}",
            w.c_out(),
            w.c_in(),
            p_out.len(),
            q_in.len(),
            reg.rows(),
            reg.cols()
        )));
    }
    if out.len() != w.as_slice().len() {
        return Err(shape_err("gradient buffer length"));
    }
    let p_inv = p_out.inverse();
    let q_inv = q_in.inverse();
    let kk = w.slice_len();
    let r = reg.as_matrix();
    for j in 0..w.c_out() {
        for i in 0..w.c_in() {
            let coef = r[(p_inv.get(j), q_inv.get(i))];
            if coef == 0.0 {
                continue;
            }
            let kernel = w.kernel(j, i);
            let start = (j * w.c_in() + i) * kk;
            let dst = &mut out[start..start + kk];
            match norm {
                Norm::L1 => {
                    for (d, &v) in dst.iter_mut().zip(kernel) {
                        if v > 0.0 {
                            *d += scale * coef;
                        } else if v < 0.0 {
                            *d -= scale * coef;
                        }
                    }
                }
                Norm::L2 => {
                    let n = Norm::L2.of(kernel);
                    if n > 0.0 {
                        for (d, &v) in dst.iter_mut().zip(kernel) {
                            *d += scale * coef * v / n;
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Shape description of one convolution for sparsity accounting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub in_shape: TensorShape,
    #[serde(default)]
    pub shortcut: bool,
}

impl LayerSpec {
    pub fn params(&self) -> usize {
        self.c_in * self.c_out * self.k * self.k
    }

    pub fn capacity(&self) -> u32 {
        max_group_level(self.c_out, self.c_in)
    }
}

/// Fraction of convolution parameters removed by the given group levels:
/// `1 - Σ p_l / 2^(g_l - 1) / Σ p_l`.
pub fn model_sparsity(levels: &[u32], specs: &[LayerSpec]) -> Result<f64> {
    if levels.len() != specs.len() {
        return Err(shape_err(format!("{} levels for {} layers", levels.len(), specs.len())));
    }
    let mut dense = 0.0;
    let mut kept = 0.0;
    for (&g, spec) in levels.iter().zip(specs) {
        let capacity = spec.capacity();
        if g < 1 || g > capacity {
            return Err(Error::LevelOutOfRange { level: g, capacity });
        }
        let p = spec.params() as f64;
        dense += p;
        kept += p / cardinality(g) as f64;
    }
    if dense == 0.0 {
        return Ok(0.0);
    }
    Ok(1.0 - kept / dense)
}

/// Controller state for the penalty coefficient λ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityState {
    pub lambda: f64,
    pub delta_lambda: f64,
    /// 1-based epoch the next step refers to.
    pub epoch: usize,
    pub total_epochs: usize,
    pub target: f64,
    pub last_sparsity: f64,
}

impl SparsityState {
    pub fn new(total_epochs: usize, target: f64) -> Self {
        Self {
            lambda: 0.0,
            delta_lambda: DEFAULT_DELTA_LAMBDA,
            epoch: 1,
            total_epochs,
            target,
            last_sparsity: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaAction {
    Increase,
    Decrease,
    Hold,
}

/// One epoch of λ adjustment. Raises λ when sparsity lags the linear
/// schedule toward the target, lowers it (never below 0) once the target is
/// exceeded.
pub fn lambda_step(state: SparsityState, current_sparsity: f64) -> (SparsityState, LambdaAction) {
    let remaining = state.total_epochs.saturating_sub(state.epoch) + 1;
    let expected_gain = (state.target - state.last_sparsity) / remaining as f64;
    let mut next = state;
    let action = if current_sparsity - state.last_sparsity < expected_gain {
        next.lambda += state.delta_lambda;
        LambdaAction::Increase
    } else if current_sparsity > state.target {
        next.lambda = (state.lambda - state.delta_lambda).max(0.0);
        LambdaAction::Decrease
    } else {
        LambdaAction::Hold
    };
    next.last_sparsity = current_sparsity.clamp(0.0, 1.0);
    next.epoch += 1;
    (next, action)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structure::{build_reg_matrix, RegLevel};
    use crate::tensor::{importance_matrix, permute_importance, Matrix};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(c_in: usize, c_out: usize, k: usize) -> LayerSpec {
        LayerSpec {
            name: format!("conv{c_in}x{c_out}"),
            c_in,
            c_out,
            k,
            stride: 1,
            in_shape: TensorShape::new(c_in, 8, 8).unwrap(),
            shortcut: false,
        }
    }

    #[test]
    fn reg_loss_examples() {
        let ones = ImportanceMatrix::new(Matrix::filled(4, 4, 1.0)).unwrap();
        let r1 = build_reg_matrix(4, 4, RegLevel::Level(1), 0.5).unwrap();
        assert_eq!(reg_loss(&ones, &r1).unwrap(), 8.0);
        assert_eq!(reg_loss(&ones.scale(2.0), &r1).unwrap(), 16.0);
        let blocks = ImportanceMatrix::new(Matrix::from_fn(4, 4, |r, c| if r / 2 == c / 2 { 3.0 } else { 0.0 })).unwrap();
        assert_eq!(reg_loss(&blocks, &r1).unwrap(), 0.0);
    }

    #[test]
    fn subgradient_zero_cases() {
        let w = WeightTensor::zeros(4, 4, 3);
        let id = Permutation::identity(4);
        let r = build_reg_matrix(4, 4, RegLevel::Max, 0.5).unwrap();
        for norm in [Norm::L1, Norm::L2] {
            let g = reg_subgradient(&w, &id, &id, &r, norm).unwrap();
            assert!(g.as_slice().iter().all(|&v| v == 0.0));
        }
        // Diagonal coefficients of R are zero.
        let w = WeightTensor::new(4, 4, 1, (0..16).map(|v| v as f64 + 1.0).collect()).unwrap();
        let g = reg_subgradient(&w, &id, &id, &r, Norm::L1).unwrap();
        for j in 0..4 {
            assert_eq!(g.kernel(j, j), &[0.0]);
        }
    }

    fn loss_of(w: &WeightTensor, p: &Permutation, q: &Permutation, r: &RegMatrix, norm: Norm) -> f64 {
        let s = permute_importance(&importance_matrix(w, norm), p, q).unwrap();
        reg_loss(&s, r).unwrap()
    }

    #[test]
    fn subgradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = (0..8 * 4 * 9)
            .map(|_| {
                let v: f64 = rng.gen_range(0.1..1.0);
                if rng.gen_bool(0.5) { v } else { -v }
            })
            .collect();
        let w = WeightTensor::new(8, 4, 3, data).unwrap();
        let p = Permutation::random(8, &mut rng);
        let q = Permutation::random(4, &mut rng);
        let r = build_reg_matrix(8, 4, RegLevel::Max, 0.5).unwrap();
        let h = 1e-5;
        for norm in [Norm::L1, Norm::L2] {
            let g = reg_subgradient(&w, &p, &q, &r, norm).unwrap();
            for _ in 0..20 {
                let dir: Vec<f64> = (0..w.as_slice().len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let shifted = |sign: f64| {
                    let d = w.as_slice().iter().zip(&dir).map(|(a, b)| a + sign * h * b).collect();
                    WeightTensor::new(8, 4, 3, d).unwrap()
                };
                let fd = (loss_of(&shifted(1.0), &p, &q, &r, norm) - loss_of(&shifted(-1.0), &p, &q, &r, norm)) / (2.0 * h);
                let an: f64 = g.as_slice().iter().zip(&dir).map(|(a, b)| a * b).sum();
                assert!((fd - an).abs() <= 1e-4 * an.abs().max(fd.abs()), "{norm:?}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn sparsity_examples() {
        assert_eq!(model_sparsity(&[2], &[spec(16, 16, 3)]).unwrap(), 0.5);
        assert_eq!(model_sparsity(&[1, 1], &[spec(16, 16, 3), spec(16, 32, 3)]).unwrap(), 0.0);
        // 2304 params at g=1 and 9216 at g=3.
        let s = model_sparsity(&[1, 3], &[spec(16, 16, 3), spec(32, 32, 3)]).unwrap();
        assert!((s - 0.6).abs() < 1e-15);
        assert!(model_sparsity(&[2], &[spec(3, 16, 3)]).is_err());
        assert!(model_sparsity(&[1], &[]).is_err());
    }

    #[test]
    fn lambda_increase_branch() {
        let st = SparsityState::new(100, 0.5);
        assert_eq!(st.lambda, 0.0);
        assert_eq!(st.delta_lambda, 2e-6);
        let (next, action) = lambda_step(st, 0.001);
        assert_eq!(action, LambdaAction::Increase);
        assert_eq!(next.lambda, 2e-6);
        assert_eq!((next.epoch, next.last_sparsity), (2, 0.001));
    }

    #[test]
    fn lambda_decrease_and_clamp() {
        let st = SparsityState { lambda: 1e-5, last_sparsity: 0.55, ..SparsityState::new(100, 0.5) };
        let (next, action) = lambda_step(st, 0.6);
        assert_eq!(action, LambdaAction::Decrease);
        assert!((next.lambda - 8e-6).abs() < 1e-20);

        let st = SparsityState { lambda: 0.0, last_sparsity: 0.55, ..SparsityState::new(100, 0.5) };
        let (next, action) = lambda_step(st, 0.6);
        assert_eq!(action, LambdaAction::Decrease);
        assert_eq!(next.lambda, 0.0);
    }

    #[test]
    fn lambda_hold_branch() {
        let st = SparsityState { lambda: 4e-6, last_sparsity: 0.2, epoch: 50, ..SparsityState::new(100, 0.5) };
        let (next, action) = lambda_step(st, 0.3);
        assert_eq!(action, LambdaAction::Hold);
        assert_eq!(next.lambda, 4e-6);
    }

    proptest! {
        #[test]
        fn lambda_never_negative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 200;
            let mut st = SparsityState::new(n, rng.gen_range(0.05..0.95));
            let start = st.lambda;
            for _ in 0..n {
                let (next, _) = lambda_step(st, rng.gen_range(0.0..1.0));
                prop_assert!(next.lambda >= 0.0);
                st = next;
            }
            prop_assert!((st.lambda - start).abs() <= n as f64 * st.delta_lambda + 1e-18);
        }

        #[test]
        fn sparsity_increases_with_level(c in 1u32..5, k in 1usize..4, g in 1u32..5) {
            let ch = 1usize << c;
            let specs = vec![spec(ch, ch, k), spec(ch, 2 * ch, k)];
            let g = g.min(specs[0].capacity() - 1).max(1);
            let a = model_sparsity(&[g, 1], &specs).unwrap();
            let b = model_sparsity(&[g + 1, 1], &specs).unwrap();
            prop_assert!((0.0..1.0).contains(&a) && b > a);
        }

        #[test]
        fn reg_loss_homogeneous_in_weights(seed in any::<u64>(), c in 0.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = WeightTensor::new(4, 4, 3, (0..144).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let p = Permutation::random(4, &mut rng);
            let q = Permutation::random(4, &mut rng);
            let r = build_reg_matrix(4, 4, RegLevel::Max, 0.5).unwrap();
            let base = loss_of(&w, &p, &q, &r, Norm::L1);
            prop_assert!(base >= 0.0);
            let scaled = loss_of(&w.scale(c), &p, &q, &r, Norm::L1);
            prop_assert!((scaled - c * base).abs() <= 1e-10 * (1.0 + c * base));
        }
    }
}
