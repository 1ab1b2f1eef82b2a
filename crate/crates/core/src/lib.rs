//! Structured sparsification of convolutions into group convolutions with a
//! learned channel shuffle.
//!
//! The crate covers the whole train → compress → finetune loop at desk scale:
//!
//! * [`tensor`]: matrices, convolution weights, permutations, `⊗`.
//! * [`assignment`]: exact linear assignment (Hungarian with potentials).
//! * [`structure`]: penalty/cost matrices, relationship masks, group levels.
//! * [`shuffle`]: alternating permutation learning and the groupability test.
//! * [`regularizer`]: structured L1 penalty, sparsity accounting, λ control.
//! * [`micronet`]: a small CNN with manual gradients and grouped layers.
//! * [`compressor`]: threshold search and conversion to grouped layers.
//! * [`accounting`]: parameter/FLOP counting over architecture specs.
//! * [`pipeline`]: run orchestration, checkpoint/plan formats, reports.

pub mod accounting;
pub mod assignment;
pub mod compressor;
pub mod error;
pub mod micronet;
pub mod pipeline;
pub mod regularizer;
pub mod shuffle;
pub mod structure;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{contract, importance_matrix, permute_importance, permute_weights};
pub use tensor::{ImportanceMatrix, Matrix, Norm, Permutation, TensorShape, WeightTensor};
