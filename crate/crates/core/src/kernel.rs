//! Sliced ReLU and ReLU-bump attention, evaluated in `O(n log n + n d)`.
//!
//! Queries and keys are mapped to scalar scores `s^q_i = P(Q x_i)` and
//! `s^k_j = P(K x_j)`. The ReLU head computes
//!
//! ```text
//! out_i = sum_j relu(s^q_i - s^k_j) / (sum_l |s^q_i - s^k_l| + eps) * g_j
//! ```
//!
//! with `g_j = V x_j` (optionally mean-centered), and the bump head computes
//! `out_i = (1/n) sum_j relu(1 - |s^q_i - s^k_j| / b) V x_j`. The ReLU head is
//! read off a merged sorted score array (see [`crate::scan`]); the bump head
//! reads two ranges of sorted key prefix sums per query.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::scan::{Convolution, PrefixSums, ScanPlan, UnitSums};
use crate::types::{
    check_finite, Affine, HeadParams, KernelConfig, Mlp, Projection, ProjectionKind, TokenSequence,
    Variant,
};

/// `score_i = P(map(x_i))[head]`.
pub fn project_scores<T: Real>(
    seq: &TokenSequence<T>,
    map: &Affine<T>,
    proj: &Projection<T>,
    head: usize,
) -> Result<Array1<T>> {
    if head >= proj.head_count() {
        return Err(Error::config(format!(
            "head {head} requested from a projection with {} outputs",
            proj.head_count()
        )));
    }
    if map.input_dim() != seq.d() || proj.input_dim() != map.output_dim() {
        return Err(Error::shape(format!(
            "tokens have dimension {}, map is {}x{}, projection expects {}",
            seq.d(),
            map.output_dim(),
            map.input_dim(),
            proj.input_dim()
        )));
    }
    let mapped = map.apply_rows(seq.view());
    let scores = proj.scores(mapped.view(), head);
    check_finite(scores.iter().copied(), "projected scores")?;
    Ok(scores)
}

/// `V x_j`, minus the column mean when `centering` is set.
///
/// The mean is accumulated over the rows in lexicographic order, so
/// permuting the tokens permutes the result exactly.
pub fn value_vectors<T: Real>(
    seq: &TokenSequence<T>,
    value: &Affine<T>,
    centering: bool,
) -> Array2<T> {
    let mut values = value.apply_rows(seq.view());
    if centering {
        let order = lexicographic_order(&values);
        let mut mean = Array1::<T>::zeros(values.ncols());
        for &i in &order {
            mean += &values.row(i);
        }
        mean /= T::from_usize(values.nrows()).expect("length fits in a float");
        values -= &mean;
    }
    values
}

/// Row indices sorted lexicographically by row contents.
pub(crate) fn lexicographic_order<T: Real>(rows: &Array2<T>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..rows.nrows()).collect();
    order.sort_by(|&a, &b| {
        rows.row(a)
            .iter()
            .zip(rows.row(b).iter())
            .map(|(x, y)| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

/// Rank of each row in [`lexicographic_order`].
pub(crate) fn lexicographic_rank<T: Real>(rows: &Array2<T>) -> Vec<usize> {
    let mut rank = vec![0; rows.nrows()];
    for (r, i) in lexicographic_order(rows).into_iter().enumerate() {
        rank[i] = r;
    }
    rank
}

/// Intermediate state of a ReLU-head forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct ReluForward<T> {
    pub query_scores: Array1<T>,
    pub key_scores: Array1<T>,
    pub gamma: Array2<T>,
    pub plan: ScanPlan<T>,
    pub numerator: Convolution<T>,
    pub unit: UnitSums<T>,
    pub denominator: Array1<T>,
    pub output: Array2<T>,
}

fn check_head<T: Real>(
    seq: &TokenSequence<T>,
    head: &HeadParams<T>,
    cfg: &KernelConfig,
) -> Result<()> {
    cfg.validate::<T>()?;
    head.validate(seq.d())
}

pub(crate) fn relu_forward_parts<T: Real>(
    seq: &TokenSequence<T>,
    head: &HeadParams<T>,
    cfg: &KernelConfig,
) -> Result<ReluForward<T>> {
    check_head(seq, head, cfg)?;
    let query_scores = project_scores(seq, &head.query, &head.projection, head.slot)?;
    let key_scores = project_scores(seq, &head.key, &head.projection, head.slot)?;
    let gamma = value_vectors(seq, &head.value, cfg.centering);

    // tied keys are summed in value order so the result does not depend on token order
    let plan = ScanPlan::with_source_rank(
        key_scores.as_slice().expect("contiguous"),
        query_scores.as_slice().expect("contiguous"),
        &lexicographic_rank(&gamma),
    );
    let numerator = plan.convolve(gamma.view());
    let unit = plan.unit_sums();
    let eps = T::from_f64_lossy(cfg.epsilon);
    let denominator = unit.abs_sums().mapv(|nrm| nrm + eps);

    let mut output = numerator.relu.clone();
    for (mut row, &den) in output.outer_iter_mut().zip(denominator.iter()) {
        row /= den;
    }
    check_finite(output.iter().copied(), "relu attention output")?;
    Ok(ReluForward {
        query_scores,
        key_scores,
        gamma,
        plan,
        numerator,
        unit,
        denominator,
        output,
    })
}

/// Sliced ReLU attention head; returns one `d`-vector per token.
pub fn relu_attention_forward<T: Real>(
    seq: &TokenSequence<T>,
    head: &HeadParams<T>,
    cfg: &KernelConfig,
) -> Result<Array2<T>> {
    relu_forward_parts(seq, head, cfg).map(|parts| parts.output)
}

/// Shifts applied to the key scores for the three relu terms of the bump,
/// with their weights: `relu(1 - |t|/b) = (relu(t + b) + relu(t - b) - 2 relu(t)) / b`.
pub(crate) fn bump_terms<T: Real>(bandwidth: T) -> [(T, T); 3] {
    let two = T::one() + T::one();
    [
        (-bandwidth, T::one()),
        (bandwidth, T::one()),
        (T::zero(), -two),
    ]
}

pub(crate) fn check_bump<T: Real>(
    seq: &TokenSequence<T>,
    head: &HeadParams<T>,
    cfg: &KernelConfig,
) -> Result<()> {
    check_head(seq, head, cfg)?;
    if cfg.centering {
        return Err(Error::config(
            "value centering is not available for the bump kernel",
        ));
    }
    if head.projection.kind() != ProjectionKind::Linear {
        return Err(Error::config(
            "the bump kernel requires a linear projection",
        ));
    }
    Ok(())
}

/// Points sorted by score with prefix sums of their rows, for sums of the
/// tent `b - |t|` over the window `|t| < b` around a target.
///
/// `relu(t + b) + relu(t - b) - 2 relu(t)` is that tent, so each target
/// reads two ranges of prefix sums instead of three full scans, and points
/// outside the window add exactly nothing.
pub(crate) struct WindowSums<T> {
    points: Vec<T>,
    center: T,
    sums: PrefixSums<T>,
}

impl<T: Real> WindowSums<T> {
    /// Equal scores are ordered by row contents, so sums do not depend on
    /// the order of the points.
    pub fn new(scores: &[T], rows: ArrayView2<'_, T>) -> Self {
        let owned = rows.to_owned();
        let rank = lexicographic_rank(&owned);
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_unstable_by(|&i, &j| {
            scores[i]
                .partial_cmp(&scores[j])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(rank[i].cmp(&rank[j]))
        });
        let center = if order.is_empty() {
            T::zero()
        } else {
            order.iter().map(|&j| scores[j]).sum::<T>()
                / T::from_usize(order.len()).expect("length fits in a float")
        };
        let points: Vec<T> = order.iter().map(|&j| scores[j] - center).collect();
        let sorted_rows = owned.select(Axis(0), &order);
        let sums = PrefixSums::new(&points, sorted_rows.view()).expect("finite sorted scores");
        Self {
            points,
            center,
            sums,
        }
    }

    /// For each target `x`, `sum_j (b - |x - p_j|)_+ r_j` and the slope sum
    /// `sum_{x <= p_j < x + b} r_j - sum_{x - b <= p_j < x} r_j`.
    pub fn apply(&self, targets: &[T], b: T) -> (Array2<T>, Array2<T>) {
        let d = self.sums.a.ncols();
        let mut tent = Array2::<T>::zeros((targets.len(), d));
        let mut slope = Array2::<T>::zeros((targets.len(), d));
        let (a, s) = (&self.sums.a, &self.sums.b);
        for (i, &x) in targets.iter().enumerate() {
            let x = x - self.center;
            let lo = self.points.partition_point(|&p| p < x - b);
            let mid = self.points.partition_point(|&p| p < x);
            let hi = self.points.partition_point(|&p| p < x + b);
            if lo == hi {
                continue;
            }
            // points in [x - b, x) weigh b - x + p, points in [x, x + b) weigh b + x - p
            for c in 0..d {
                let below_a = a[[mid, c]] - a[[lo, c]];
                let below_b = s[[mid, c]] - s[[lo, c]];
                let above_a = a[[hi, c]] - a[[mid, c]];
                let above_b = s[[hi, c]] - s[[mid, c]];
                tent[[i, c]] = (b - x) * below_a + below_b + (b + x) * above_a - above_b;
                slope[[i, c]] = above_a - below_a;
            }
        }
        (tent, slope)
    }
}

/// Sliced ReLU-bump attention head.
pub fn bump_attention_forward<T: Real>(
    seq: &TokenSequence<T>,
    head: &HeadParams<T>,
    cfg: &KernelConfig,
) -> Result<Array2<T>> {
    check_bump(seq, head, cfg)?;
    let query_scores = project_scores(seq, &head.query, &head.projection, head.slot)?;
    let key_scores = project_scores(seq, &head.key, &head.projection, head.slot)?;
    let values = value_vectors(seq, &head.value, false);

    let b = T::from_f64_lossy(cfg.bandwidth);
    let windows = WindowSums::new(key_scores.as_slice().expect("contiguous"), values.view());
    let (mut output, _) = windows.apply(query_scores.as_slice().expect("contiguous"), b);
    let scale = T::one() / (T::from_usize(seq.n()).unwrap() * b);
    output *= scale;
    check_finite(output.iter().copied(), "bump attention output")?;
    Ok(output)
}

/// Dispatches to the head kernel selected by `variant`.
pub fn attention_forward<T: Real>(
    seq: &TokenSequence<T>,
    head: &HeadParams<T>,
    cfg: &KernelConfig,
    variant: Variant,
) -> Result<Array2<T>> {
    match variant {
        Variant::Relu => relu_attention_forward(seq, head, cfg),
        Variant::Bump => bump_attention_forward(seq, head, cfg),
    }
}

/// Residual multi-head layer `x_i + sum_h W^h head_h(x_i)`.
///
/// Heads are evaluated independently (in parallel on the current rayon
/// pool) and combined in head order, so the result does not depend on the
/// thread count.
pub fn multi_head_layer<T: Real>(
    seq: &TokenSequence<T>,
    heads: &[HeadParams<T>],
    cfg: &KernelConfig,
    variant: Variant,
) -> Result<TokenSequence<T>> {
    let d = seq.d();
    if let Some((h, head)) = heads.iter().enumerate().find(|(_, h)| h.dim() != d) {
        return Err(Error::config(format!(
            "head {h} has dimension {}, tokens have dimension {d}",
            head.dim()
        )));
    }
    let outputs: Vec<Array2<T>> = heads
        .par_iter()
        .map(|head| attention_forward(seq, head, cfg, variant))
        .collect::<Result<_>>()?;
    let mut out = seq.data().clone();
    for (head, head_out) in heads.iter().zip(&outputs) {
        out += &head_out.dot(&head.mixer.t());
    }
    TokenSequence::new(out)
}

/// Applies a perceptron to every token independently.
pub fn pointwise_mlp<T: Real>(seq: &TokenSequence<T>, mlp: &Mlp<T>) -> Result<TokenSequence<T>> {
    mlp.validate()?;
    if mlp.input_dim() != seq.d() {
        return Err(Error::shape(format!(
            "perceptron expects dimension {}, tokens have {}",
            mlp.input_dim(),
            seq.d()
        )));
    }
    TokenSequence::new(mlp.apply_rows(seq.view()))
}
