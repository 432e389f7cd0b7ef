use ndarray::Array2;

use super::layer::ConstructiveLayer;
use super::split::{
    check_distinct_sequences, check_scores, placement_layer, split_layer, SplitChecks,
};
use crate::error::{Error, Result};

/// Layers separating one-dimensional sequences into disjoint intervals.
#[derive(Debug, Clone)]
pub struct Disentanglement {
    pub layers: Vec<ConstructiveLayer>,
    pub split_steps: usize,
    pub placement_steps: usize,
    /// Inequality checks of each split, in order.
    pub split_checks: Vec<SplitChecks>,
    /// Scores after all layers.
    pub scores: Vec<Vec<f64>>,
    /// `[min, max]` of each sequence after all layers.
    pub intervals: Vec<(f64, f64)>,
}

fn apply_all(layer: &ConstructiveLayer, scores: &mut [Vec<f64>]) {
    for s in scores.iter_mut() {
        let x = Array2::from_shape_vec((s.len(), 1), std::mem::take(s)).expect("column shape");
        *s = layer.apply_rows(x.view()).into_raw_vec_and_offset().0;
    }
}

fn hull(scores: &[Vec<f64>], members: &[usize]) -> (f64, f64) {
    members
        .iter()
        .flat_map(|&i| scores[i].iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
            (lo.min(x), hi.max(x))
        })
}

/// Moves `p` one-dimensional sequences, all left of `threshold`, into `p`
/// pairwise disjoint intervals to the right of `threshold` using `p - 1`
/// splits and `p` placements.
///
/// A working set is split repeatedly; the right part is parked and the left
/// part kept. A working set of one sequence is placed just right of
/// everything placed so far, and the most recently parked set becomes the
/// next working set. Each layer fixes every point at or above the protected
/// range, which starts at the leftmost parked interval.
pub fn disentangle_1d(scores: &[Vec<f64>], threshold: f64) -> Result<Disentanglement> {
    check_scores(scores)?;
    check_distinct_sequences(scores)?;
    if !threshold.is_finite() {
        return Err(Error::InvalidParameter("threshold must be finite".into()));
    }
    if let Some((i, x)) = scores
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.iter().map(move |&x| (i, x)))
        .find(|&(_, x)| x >= threshold)
    {
        return Err(Error::Precondition(format!(
            "sequence {i} has score {x}, not below the threshold {threshold}"
        )));
    }

    let p = scores.len();
    let mut current = scores.to_vec();
    let mut layers = Vec::with_capacity(2 * p - 1);
    let mut placed_max = threshold;
    let mut parked: Vec<((f64, f64), Vec<usize>)> = Vec::new();
    let mut working: Vec<usize> = (0..p).collect();
    let (mut split_steps, mut placement_steps) = (0, 0);
    let mut intervals = vec![(f64::NAN, f64::NAN); p];
    let mut split_checks = Vec::with_capacity(p - 1);

    while !working.is_empty() {
        let k_min = parked.last().map_or(threshold, |(iv, _)| iv.0);
        let protected = [k_min, placed_max];
        let before = current.clone();
        let outside: Vec<usize> = (0..p).filter(|i| !working.contains(i)).collect();

        if let [only] = working[..] {
            let placement = placement_layer(&current[only], &protected)?;
            apply_all(&placement.layer, &mut current);
            layers.push(placement.layer);
            placement_steps += 1;
            let iv = hull(&current, &[only]);
            if !(iv.0 > placed_max) {
                return Err(Error::Internal(format!(
                    "placed sequence {only} starts at {}, not right of {placed_max}",
                    iv.0
                )));
            }
            intervals[only] = iv;
            placed_max = iv.1;
            working = parked.pop().map(|(_, m)| m).unwrap_or_default();
        } else {
            let sub: Vec<Vec<f64>> = working.iter().map(|&i| current[i].clone()).collect();
            let split = split_layer(&sub, &protected)?;
            let checks = split.check();
            if !checks.all() {
                return Err(Error::Internal(format!(
                    "split inequalities fail: {checks:?}"
                )));
            }
            split_checks.push(checks);
            apply_all(&split.layer, &mut current);
            layers.push(split.layer);
            split_steps += 1;
            let s1: Vec<usize> = split.s1.iter().map(|&k| working[k]).collect();
            let s2: Vec<usize> = split.s2.iter().map(|&k| working[k]).collect();
            let (a, b) = (hull(&current, &s1), hull(&current, &s2));
            if !(a.1 < b.0 && b.1 < k_min) {
                return Err(Error::Internal(format!(
                    "split produced overlapping ranges {a:?} and {b:?} below {k_min}"
                )));
            }
            parked.push((b, s2));
            working = s1;
        }

        if let Some(&i) = outside.iter().find(|&&i| current[i] != before[i]) {
            return Err(Error::Internal(format!(
                "layer {} moved protected sequence {i}",
                layers.len() - 1
            )));
        }
    }

    if split_steps != p - 1 || placement_steps != p {
        return Err(Error::Internal(format!(
            "{split_steps} splits and {placement_steps} placements for {p} sequences"
        )));
    }
    Ok(Disentanglement {
        layers,
        split_steps,
        placement_steps,
        split_checks,
        scores: current,
        intervals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn disjoint(intervals: &[(f64, f64)]) -> bool {
        let mut iv = intervals.to_vec();
        iv.sort_by(|a, b| a.0.total_cmp(&b.0));
        iv.windows(2).all(|w| w[0].1 < w[1].0)
    }

    #[test]
    fn one_sequence_one_layer() {
        let d = disentangle_1d(&[vec![0.0, 1.0, -2.0]], 3.0).unwrap();
        assert_eq!(d.layers.len(), 1);
        assert_eq!((d.split_steps, d.placement_steps), (0, 1));
        assert!(d.intervals[0].0 > 3.0);
    }

    #[test]
    fn two_sequences() {
        let d = disentangle_1d(&[vec![0.0, 1.0], vec![0.0, 2.0]], 3.0).unwrap();
        assert!(d.layers.len() <= 3);
        assert!(disjoint(&d.intervals), "{:?}", d.intervals);
        for (s, iv) in d.scores.iter().zip(&d.intervals) {
            assert!(s.iter().all(|&x| x >= iv.0 && x <= iv.1 && x > 3.0));
        }
    }

    #[test]
    fn identical_sequences_rejected() {
        let r = disentangle_1d(&[vec![0.0, 1.0], vec![1.0, 0.0]], 3.0);
        assert!(matches!(r, Err(Error::Degenerate(m)) if m.contains("0 and 1")));
    }

    #[test]
    fn threshold_must_exceed_scores() {
        assert!(matches!(
            disentangle_1d(&[vec![0.0, 4.0]], 3.0),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn random_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let p = rng.random_range(1..=5);
            let n = rng.random_range(1..=4);
            // shared prefixes make the later split positions appear
            let base: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let scores: Vec<Vec<f64>> = (0..p)
                .map(|_| {
                    let mut s = base.clone();
                    let k = rng.random_range(0..n);
                    s[k] = rng.random_range(-1.0..1.0);
                    s
                })
                .collect();
            match disentangle_1d(&scores, 2.0) {
                Ok(d) => {
                    assert_eq!(d.layers.len(), 2 * p - 1);
                    assert!(disjoint(&d.intervals));
                }
                Err(Error::Degenerate(_)) | Err(Error::Precondition(_)) => {}
                Err(e) => panic!("{e}"),
            }
        }
    }
}
