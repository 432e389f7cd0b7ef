use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::group::SequenceGroup;
use crate::error::{Error, Result};

pub const DEFAULT_DIRECTION_ATTEMPTS: usize = 1000;

/// A projection direction and the smallest gap between projected scores of
/// distinct tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    pub eta: Array1<f64>,
    pub min_gap: f64,
    pub attempts: usize,
}

fn distinct_tokens(groups: &[&SequenceGroup]) -> Vec<Vec<f64>> {
    let mut pts: Vec<Vec<f64>> = groups
        .iter()
        .flat_map(|g| g.sequences().iter())
        .flat_map(|s| {
            s.view()
                .outer_iter()
                .map(|r| r.to_vec())
                .collect::<Vec<_>>()
        })
        .collect();
    pts.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    pts.dedup();
    pts
}

/// Checks that `eta` separates what the matching construction needs.
///
/// Distinct tokens anywhere in `sources` or `targets` must get distinct
/// scores, which covers injectivity within each sequence, and distinct
/// source sequences must have distinct score sets. Returns the smallest gap
/// between scores of distinct tokens, or a reason for rejection.
pub fn check_direction(
    eta: &Array1<f64>,
    sources: &SequenceGroup,
    targets: &SequenceGroup,
) -> std::result::Result<f64, String> {
    let mut scores: Vec<f64> = distinct_tokens(&[sources, targets])
        .iter()
        .map(|p| p.iter().zip(eta.iter()).map(|(a, b)| a * b).sum())
        .collect();
    scores.sort_by(f64::total_cmp);
    let gap = scores
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    if !(gap > 0.0) {
        return Err("two distinct tokens share a projected score".into());
    }
    let mut sets = sources.project(eta);
    for s in &mut sets {
        s.sort_by(f64::total_cmp);
    }
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            if sets[i] == sets[j] {
                return Err(format!(
                    "source sequences {i} and {j} project to the same scores"
                ));
            }
        }
    }
    Ok(gap)
}

/// Draws unit directions from a seeded Gaussian until one passes
/// [`check_direction`] with a gap above a small multiple of the score scale.
pub fn choose_direction(
    sources: &SequenceGroup,
    targets: &SequenceGroup,
    seed: u64,
    max_attempts: usize,
) -> Result<Direction> {
    if sources.d() != targets.d() {
        return Err(Error::shape("sources and targets differ in dimension"));
    }
    let scale = sources
        .sequences()
        .iter()
        .chain(targets.sequences())
        .flat_map(|s| s.data().iter())
        .fold(0.0f64, |m, x| m.max(x.abs()));
    let floor = 1e-9 * (1.0 + scale);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reason = String::from("no draws");
    for attempt in 1..=max_attempts {
        let raw: Array1<f64> =
            Array1::from_shape_simple_fn(sources.d(), || StandardNormal.sample(&mut rng));
        let norm: f64 = raw.dot(&raw).sqrt();
        if !(norm > 0.0) {
            continue;
        }
        let eta = raw / norm;
        match check_direction(&eta, sources, targets) {
            Ok(gap) if gap > floor => {
                return Ok(Direction {
                    eta,
                    min_gap: gap,
                    attempts: attempt,
                })
            }
            Ok(gap) => reason = format!("best gap {gap:e} is below {floor:e}"),
            Err(r) => reason = r,
        }
    }
    Err(Error::NoValidDirection {
        attempts: max_attempts,
        reason,
    })
}
