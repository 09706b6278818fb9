//! Dependency-guided parallel unmasking over exactly computable tabular
//! sequence models.
//!
//! Parallel unmasking samples several masked positions from the product of
//! their per-position conditionals instead of their joint. This crate
//! provides the pieces to study and bound that approximation exactly:
//!
//! - [`model`]: small sequence models whose conditionals are computed by
//!   exact summation, standing in for a diffusion backbone's forward pass.
//! - [`tv`]: total-variation distance, exact pairwise dependency matrices,
//!   and sub-additivity slack quantities.
//! - [`selection`]: greedy dependency-bounded subset selection.
//! - [`decoding`]: the iterative unmasking loop with pluggable selectors
//!   (dependency-guided, entropy, top-1, token-order, stability-gated),
//!   sampling transforms, and EOS fast-fill.
//! - [`predictor`]: the bilinear sigmoid dependency predictor, its TV cache
//!   generation, and MSE training.
//! - [`verify`]: brute-force harnesses that check the TV bound, the
//!   sub-additivity assumption, and end-to-end decoder exactness by
//!   enumeration.

pub mod decoding;
pub mod error;
pub mod model;
pub mod predictor;
pub mod sampling;
pub mod seed;
pub mod selection;
pub mod tv;
pub mod verify;

pub use error::{Error, Result};
pub use model::{
    all_masked_marginals, conditional_marginal, joint_conditional, make_task_model,
    make_task_model_for_prompt, sample_sequential, MaskState, ModelSpec, OrderPolicy, Position,
    TabularModel, TaskKind, Token, VocabSpec,
};
pub use sampling::{transform_distribution, transform_sample, SamplerConfig};
pub use selection::{greedy_subset_select, SelectionConfig, SelectionResult};
pub use tv::{
    dependency_matrix_exact, dependency_sample, subadditivity_slack, tv_distance, DepSource,
    DependencyMatrix,
};
