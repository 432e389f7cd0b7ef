//! Sliced ReLU attention.
//!
//! Queries and keys are projected to scalar scores and interact through
//! `relu(s^q_i - s^k_j)`. Sorting the merged scores turns every sum over
//! keys into a running prefix sum, so a head costs `O(n log n + n d)`
//! instead of `O(n^2 d)`.
//!
//! ```
//! use ndarray::array;
//! use sliced_attention::{relu_attention_forward, HeadParams, KernelConfig, Projection, TokenSequence};
//!
//! let seq = TokenSequence::<f64>::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![3.0, 2.0]])?;
//! let head = HeadParams::identity(2, Projection::linear(array![1.0, 0.0], 0.0));
//! let out = relu_attention_forward(&seq, &head, &KernelConfig::relu())?;
//! assert_eq!(out.dim(), (3, 2));
//! # Ok::<(), sliced_attention::Error>(())
//! ```

pub mod bench;
pub mod ddouble;
pub mod diagnostics;
pub mod error;
pub mod expressivity;
pub mod grad;
pub mod gradcheck;
pub mod io;
pub mod kernel;
pub mod random;
pub mod real;
pub mod reference;
pub mod scan;
pub mod types;

pub use error::{Error, Result};
pub use kernel::{
    attention_forward, bump_attention_forward, multi_head_layer, pointwise_mlp, project_scores,
    relu_attention_forward, value_vectors,
};
pub use real::{Dtype, Real};
pub use reference::{
    bump_attention_naive, relative_error, relu_attention_naive, relu_convolution_naive,
    softmax_attention_naive,
};
pub use scan::{abs_diff_normalizer, relu_convolve, relu_scan, PrefixSums, ScanPlan};
pub use types::{
    Affine, HeadParams, KernelConfig, Mlp, Projection, ProjectionKind, TokenSequence, Variant,
};

// Rust snippets in the guide compile and run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/relu-head.md")]
    pub struct ReluHead;
    #[doc = include_str!("../../../book/src/sort-and-scan.md")]
    pub struct SortAndScan;
    #[doc = include_str!("../../../book/src/bump-head.md")]
    pub struct BumpHead;
    #[doc = include_str!("../../../book/src/gradients.md")]
    pub struct Gradients;
    #[doc = include_str!("../../../book/src/positive-definiteness.md")]
    pub struct PositiveDefiniteness;
    #[doc = include_str!("../../../book/src/expressivity.md")]
    pub struct Expressivity;
    #[doc = include_str!("../../../book/src/command-line.md")]
    pub struct CommandLine;
}
