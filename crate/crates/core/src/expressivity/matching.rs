use ndarray::{Array1, Array2};

use super::bump::bump_layer;
use super::direction::{choose_direction, DEFAULT_DIRECTION_ATTEMPTS};
use super::disentangle::disentangle_1d;
use super::group::{apply_constructive_layers, SequenceGroup};
use super::layer::ConstructiveLayer;
use crate::error::{Error, Result};

/// Layer counts of the three stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize)]
pub struct PhaseCounts {
    pub split_layers: usize,
    pub orthogonal_layers: usize,
    pub axial_layers: usize,
}

impl PhaseCounts {
    pub fn total(&self) -> usize {
        self.split_layers + self.orthogonal_layers + self.axial_layers
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchOptions {
    pub seed: u64,
    pub max_direction_attempts: usize,
}

impl Default for MatchOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            max_direction_attempts: DEFAULT_DIRECTION_ATTEMPTS,
        }
    }
}

/// Layers carrying a group of sources onto a group of targets.
#[derive(Debug, Clone)]
pub struct MatchPlan {
    pub layers: Vec<ConstructiveLayer>,
    /// The first `split_layers` layers disentangle, then come the bumps
    /// correcting components orthogonal to `direction`, then those along it.
    pub phase_counts: PhaseCounts,
    /// `2p(n + 1) - 1`
    pub bound: usize,
    pub direction: Option<Array1<f64>>,
    pub delta: Option<f64>,
    pub threshold: Option<f64>,
    /// Largest coordinate error of the construction's own simulation.
    pub max_error: f64,
}

impl MatchPlan {
    pub fn apply(&self, group: &SequenceGroup) -> Result<SequenceGroup> {
        apply_constructive_layers(group, &self.layers)
    }
}

pub fn layer_bound(p: usize, n: usize) -> usize {
    2 * p * (n + 1) - 1
}

fn check_distinct_sources(sources: &SequenceGroup) -> Result<()> {
    let sorted: Vec<Vec<Vec<f64>>> = sources
        .sequences()
        .iter()
        .map(|s| {
            let mut rows: Vec<Vec<f64>> = s.view().outer_iter().map(|r| r.to_vec()).collect();
            rows.sort_by(|a, b| {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            rows
        })
        .collect();
    for i in 0..sorted.len() {
        for j in i + 1..sorted.len() {
            if sorted[i] == sorted[j] {
                return Err(Error::Precondition(format!(
                    "source sequences {i} and {j} hold the same tokens"
                )));
            }
        }
    }
    Ok(())
}

fn push(
    layer: ConstructiveLayer,
    state: &mut Vec<Array2<f64>>,
    layers: &mut Vec<ConstructiveLayer>,
) {
    for x in state.iter_mut() {
        *x = layer.apply_rows(x.view());
    }
    layers.push(layer);
}

/// Builds layers mapping each source sequence to the target sequence with the
/// same index, token by token.
///
/// The sources are first projected on a random direction and moved apart
/// along it until every sequence sits in its own interval beyond all target
/// scores. Each token is then shifted orthogonally to the direction by a
/// bump supported on its own score, and finally along the direction. Bumps
/// with zero displacement are skipped.
pub fn match_sequences(
    sources: &SequenceGroup,
    targets: &SequenceGroup,
    opts: MatchOptions,
) -> Result<MatchPlan> {
    let (p, n, d) = (sources.p(), sources.n(), sources.d());
    if targets.p() != p || targets.n() != n || targets.d() != d {
        return Err(Error::shape(format!(
            "sources are {p} sequences of {n}x{d}, targets {} of {}x{}",
            targets.p(),
            targets.n(),
            targets.d()
        )));
    }
    if d < 2 {
        return Err(Error::Unsupported(format!(
            "matching needs token dimension at least 2, got {d}"
        )));
    }
    sources.check_distinct_tokens("source")?;
    targets.check_distinct_tokens("target")?;
    check_distinct_sources(sources)?;
    let bound = layer_bound(p, n);
    if sources == targets {
        return Ok(MatchPlan {
            layers: Vec::new(),
            phase_counts: PhaseCounts::default(),
            bound,
            direction: None,
            delta: None,
            threshold: None,
            max_error: 0.0,
        });
    }

    let eta = choose_direction(sources, targets, opts.seed, opts.max_direction_attempts)?.eta;
    let source_scores = sources.project(&eta);
    let target_scores = targets.project(&eta);
    let threshold = source_scores
        .iter()
        .chain(&target_scores)
        .flatten()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
        + 1.0;

    let sep = disentangle_1d(&source_scores, threshold)?;
    let mut layers = Vec::with_capacity(bound);
    let mut state: Vec<Array2<f64>> = sources
        .sequences()
        .iter()
        .map(|s| s.data().clone())
        .collect();
    for layer in &sep.layers {
        push(layer.lift(&eta)?, &mut state, &mut layers);
    }
    let split_layers = layers.len();

    let moved: Vec<f64> = state.iter().flat_map(|x| x.dot(&eta).to_vec()).collect();
    let fixed: Vec<f64> = target_scores.iter().flatten().copied().collect();
    let mut gap = f64::INFINITY;
    for (a, &x) in moved.iter().enumerate() {
        for &y in &moved[a + 1..] {
            gap = gap.min((x - y).abs());
        }
        for &y in &fixed {
            gap = gap.min((x - y).abs());
        }
    }
    let delta = 0.5 * gap;
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::Internal(format!(
            "separated scores have gap {gap:e}, bumps need a positive one"
        )));
    }

    let scale = state
        .iter()
        .flat_map(|x| x.iter())
        .chain(targets.sequences().iter().flat_map(|s| s.data().iter()))
        .fold(0.0f64, |m, x| m.max(x.abs()));
    let negligible = 1e-12 * (1.0 + scale);

    let mut orthogonal_layers = 0;
    for i in 0..p {
        for k in 0..n {
            let x = state[i].row(k).to_owned();
            let diff = &targets.get(i).row(k) - &x;
            let r = &diff - &(&eta * diff.dot(&eta));
            if r.dot(&r).sqrt() <= negligible {
                continue;
            }
            let layer = bump_layer(&eta, x.dot(&eta), delta, &r, n)?;
            push(layer, &mut state, &mut layers);
            orthogonal_layers += 1;
        }
    }

    let mut axial_layers = 0;
    for i in 0..p {
        for k in 0..n {
            let x = state[i].row(k).to_owned();
            let along = (&targets.get(i).row(k) - &x).dot(&eta);
            if along.abs() <= negligible {
                continue;
            }
            let layer = bump_layer(&eta, x.dot(&eta), delta, &(&eta * along), n)?;
            push(layer, &mut state, &mut layers);
            axial_layers += 1;
        }
    }

    let max_error = state
        .iter()
        .zip(targets.sequences())
        .flat_map(|(x, y)| x.iter().zip(y.data().iter()).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max);
    let phase_counts = PhaseCounts {
        split_layers,
        orthogonal_layers,
        axial_layers,
    };
    if phase_counts.total() > bound {
        return Err(Error::Internal(format!(
            "{} layers exceed the bound {bound}",
            phase_counts.total()
        )));
    }
    Ok(MatchPlan {
        layers,
        phase_counts,
        bound,
        direction: Some(eta),
        delta: Some(delta),
        threshold: Some(threshold),
        max_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::random_sequence;
    use crate::types::TokenSequence;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_group(p: usize, n: usize, d: usize, rng: &mut ChaCha8Rng) -> SequenceGroup {
        SequenceGroup::new((0..p).map(|_| random_sequence(n, d, rng)).collect()).unwrap()
    }

    #[test]
    fn identical_groups_need_no_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_group(2, 3, 2, &mut rng);
        let plan = match_sequences(&g, &g, MatchOptions::default()).unwrap();
        assert_eq!(
            plan.phase_counts.orthogonal_layers + plan.phase_counts.axial_layers,
            0
        );
        assert!(plan.apply(&g).unwrap().max_abs_diff(&g).unwrap() <= 1e-9);
    }

    #[test]
    fn small_random_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let src = random_group(2, 3, 2, &mut rng);
        let tgt = random_group(2, 3, 2, &mut rng);
        let plan = match_sequences(&src, &tgt, MatchOptions::default()).unwrap();
        assert_eq!(plan.bound, 15);
        assert!(plan.layers.len() <= 15);
        let err = plan.apply(&src).unwrap().max_abs_diff(&tgt).unwrap();
        assert!(err <= 1e-6, "error {err}");
    }

    #[test]
    fn many_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..40 {
            let p = rng.random_range(1..=4);
            let n = rng.random_range(1..=6);
            let d = rng.random_range(2..=3);
            let src = random_group(p, n, d, &mut rng);
            let tgt = random_group(p, n, d, &mut rng);
            let plan = match_sequences(
                &src,
                &tgt,
                MatchOptions {
                    seed,
                    ..Default::default()
                },
            )
            .unwrap();
            assert!(plan.layers.len() <= plan.bound);
            let err = plan.apply(&src).unwrap().max_abs_diff(&tgt).unwrap();
            assert!(err <= 1e-6, "p={p} n={n} d={d}: error {err}");
        }
    }

    #[test]
    fn repeated_source_token_rejected() {
        let src = SequenceGroup::new(vec![TokenSequence::from_rows(&[
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ])
        .unwrap()])
        .unwrap();
        let tgt = SequenceGroup::new(vec![TokenSequence::from_rows(&[
            vec![0.0, 1.0],
            vec![2.0, 1.0],
        ])
        .unwrap()])
        .unwrap();
        assert!(matches!(
            match_sequences(&src, &tgt, MatchOptions::default()),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn one_dimensional_tokens_unsupported() {
        let g = SequenceGroup::from_scores(&[vec![0.0, 1.0]]).unwrap();
        assert!(matches!(
            match_sequences(&g, &g, MatchOptions::default()),
            Err(Error::Unsupported(_))
        ));
    }
}
