//! Explicit layer sequences for the contextual matching construction.
//!
//! Layers here are unnormalized single-direction ReLU self-attention
//! updates, kept separate from the normalized kernels in [`crate::kernel`].
//! A [`MatchPlan`] moves a group of source sequences onto a group of targets
//! in three stages: disentangling along a random direction, then bumps
//! fixing orthogonal components, then bumps fixing the components along the
//! direction.

mod bump;
mod direction;
mod disentangle;
mod gamma;
mod group;
mod layer;
mod matching;
mod split;

pub use bump::{bump_coefficients, bump_layer, bump_value};
pub use direction::{check_direction, choose_direction, Direction, DEFAULT_DIRECTION_ATTEMPTS};
pub use disentangle::{disentangle_1d, Disentanglement};
pub use gamma::{gamma_lambda, gamma_lambda_composed, GammaParams, MeanFieldHead};
pub use group::{apply_constructive_layers, SequenceGroup};
pub use layer::{ConstructiveLayer, KeyAffine, LayerTerm};
pub use matching::{layer_bound, match_sequences, MatchOptions, MatchPlan, PhaseCounts};
pub use split::{placement_layer, split_layer, Placement, Split, SplitChecks};
