use std::cmp::Ordering;

use ndarray::array;

use super::layer::{ConstructiveLayer, KeyAffine};
use crate::error::{Error, Result};

/// A splitting layer and the bookkeeping needed to check it.
#[derive(Debug, Clone)]
pub struct Split {
    pub layer: ConstructiveLayer,
    /// Sequences sent left.
    pub s1: Vec<usize>,
    /// Sequences sent right.
    pub s2: Vec<usize>,
    /// 1-based index of the first sorted position where sequences disagree.
    pub l: usize,
    pub t1: f64,
    pub t2: f64,
    pub left: f64,
    pub right: f64,
    pub v: f64,
    pub m_minus: f64,
    pub m_plus: f64,
    /// `S1` tokens move by `alpha1 * x + beta1`.
    pub alpha1: f64,
    pub beta1: f64,
    /// `S2` tokens move by `alpha2 * x + beta2`.
    pub alpha2: f64,
    pub beta2: f64,
}

/// Outcome of [`Split::check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitChecks {
    /// `0 <= alpha1 <= 1`
    pub order_kept: bool,
    /// `alpha1 M+ + beta1 < alpha2 M- + beta2`
    pub separated: bool,
    /// `alpha2 M+ + beta2 <= M+`
    pub stays_left: bool,
}

impl SplitChecks {
    pub fn all(&self) -> bool {
        self.order_kept && self.separated && self.stays_left
    }
}

impl Split {
    pub fn check(&self) -> SplitChecks {
        SplitChecks {
            order_kept: (0.0..=1.0).contains(&self.alpha1),
            separated: self.alpha1 * self.m_plus + self.beta1
                < self.alpha2 * self.m_minus + self.beta2,
            stays_left: self.alpha2 * self.m_plus + self.beta2 <= self.m_plus,
        }
    }
}

fn sorted(seq: &[f64]) -> Vec<f64> {
    let mut s = seq.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

fn lex(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

fn extent(seqs: &[&Vec<f64>]) -> (f64, f64) {
    seqs.iter()
        .flat_map(|s| s.iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
            (lo.min(x), hi.max(x))
        })
}

pub(crate) fn check_scores(scores: &[Vec<f64>]) -> Result<()> {
    let n = scores.first().ok_or(Error::EmptyInput("score sets"))?.len();
    if n == 0 {
        return Err(Error::EmptyInput("score sequence"));
    }
    for (i, s) in scores.iter().enumerate() {
        if s.len() != n {
            return Err(Error::shape(format!(
                "sequence {i} has {} scores, expected {n}",
                s.len()
            )));
        }
        if let Some(k) = s.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: "scores",
                index: i * n + k,
            });
        }
        let sorted = sorted(s);
        if let Some(w) = sorted.windows(2).position(|w| w[0] == w[1]) {
            return Err(Error::Precondition(format!(
                "sequence {i} has the score {} twice",
                sorted[w]
            )));
        }
    }
    Ok(())
}

pub(crate) fn check_distinct_sequences(scores: &[Vec<f64>]) -> Result<()> {
    let sorted: Vec<Vec<f64>> = scores.iter().map(|s| sorted(s)).collect();
    for i in 0..sorted.len() {
        for j in i + 1..sorted.len() {
            if lex(&sorted[i], &sorted[j]).is_eq() {
                return Err(Error::Degenerate(format!(
                    "sequences {i} and {j} hold the same scores"
                )));
            }
        }
    }
    Ok(())
}

fn protected_range(protected: &[f64]) -> Result<(f64, f64)> {
    if protected.is_empty() {
        return Err(Error::EmptyInput("protected set"));
    }
    let lo = protected.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = protected.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidParameter(
            "protected set must be finite".into(),
        ));
    }
    Ok((lo, hi))
}

/// Builds a one-dimensional layer sending the sequences of `scores` into two
/// nonempty groups `S1` left of `S2`, both left of `protected`, while fixing
/// every point at or above `min(protected)`.
///
/// Sequences are compared by their sorted scores. With `l` the first sorted
/// position at which they disagree, `S1` holds the sequences whose `l`-th
/// score is the smallest such value `t1`.
pub fn split_layer(scores: &[Vec<f64>], protected: &[f64]) -> Result<Split> {
    if scores.len() < 2 {
        return Err(Error::Precondition(format!(
            "splitting needs at least two sequences, got {}",
            scores.len()
        )));
    }
    check_scores(scores)?;
    check_distinct_sequences(scores)?;
    let (k_min, k_max) = protected_range(protected)?;
    let all: Vec<&Vec<f64>> = scores.iter().collect();
    let (m_minus, m_plus) = extent(&all);
    if m_plus >= k_min {
        return Err(Error::Precondition(format!(
            "scores reach {m_plus}, protected set starts at {k_min}"
        )));
    }

    let sorted: Vec<Vec<f64>> = scores.iter().map(|s| sorted(s)).collect();
    let n = sorted[0].len();
    let pos = (0..n)
        .find(|&m| sorted.iter().any(|s| s[m] != sorted[0][m]))
        .ok_or_else(|| Error::Degenerate("all sequences coincide".into()))?;
    let l = pos + 1;
    let t1 = sorted.iter().map(|s| s[pos]).fold(f64::INFINITY, f64::min);
    let (s1, s2): (Vec<usize>, Vec<usize>) = (0..sorted.len()).partition(|&i| sorted[i][pos] == t1);
    let t2 = sorted
        .iter()
        .flat_map(|s| s.iter().copied())
        .filter(|&x| x > t1)
        .fold(f64::INFINITY, f64::min);
    if !t2.is_finite() {
        return Err(Error::Internal("no score above the split value".into()));
    }

    let lf = l as f64;
    let right = k_max + 1.0;
    let left = (m_minus - 1.0).min(-(lf - 1.0) * m_plus + lf * m_minus - 1.0);
    let v_lo = -1.0 / lf;
    let v_hi = -(m_plus - m_minus) / (m_plus - left);
    let v = 0.5 * (v_lo + v_hi);
    let key = KeyAffine::through(t1, left, t2, right);

    // shared prefix of S1, mapped through the key affine
    let prefix = &sorted[s1[0]][..l];
    let head: f64 = prefix[..l - 1].iter().map(|&x| key.eval(x)).sum();
    let alpha1 = 1.0 + lf * v;
    let beta1 = -v * (head + key.eval(t1));
    let alpha2 = 1.0 + (lf - 1.0) * v;
    let beta2 = -v * head;

    let layer = ConstructiveLayer::plain(array![1.0], key, array![v])?;
    Ok(Split {
        layer,
        s1,
        s2,
        l,
        t1,
        t2,
        left,
        right,
        v,
        m_minus,
        m_plus,
        alpha1,
        beta1,
        alpha2,
        beta2,
    })
}

/// A layer moving one sequence to just right of `protected`.
#[derive(Debug, Clone)]
pub struct Placement {
    pub layer: ConstructiveLayer,
    /// Interval occupied by the sequence afterwards.
    pub interval: (f64, f64),
}

/// Sends the single sequence `scores` to `[max(protected) + 1, ..)` with an
/// increasing affine map, fixing every point at or above `min(protected)`.
pub fn placement_layer(scores: &[f64], protected: &[f64]) -> Result<Placement> {
    check_scores(&[scores.to_vec()])?;
    let (k_min, k_max) = protected_range(protected)?;
    let s = sorted(scores);
    let (t1, top) = (s[0], s[s.len() - 1]);
    if top >= k_min {
        return Err(Error::Precondition(format!(
            "scores reach {top}, protected set starts at {k_min}"
        )));
    }
    let t2 = s.get(1).copied().unwrap_or(k_min).min(k_min);
    let right = k_max + 1.0;
    // with v = 1/2 only the smallest key is active: x -> 1.5 x - left / 2
    let left = t1 - 2.0 * (right - t1);
    let v = 0.5;
    let key = KeyAffine::through(t1, left, t2, right);
    let layer = ConstructiveLayer::plain(array![1.0], key, array![v])?;
    let map = |x: f64| x + v * (x - key.eval(t1));
    Ok(Placement {
        layer,
        interval: (map(t1), map(top)),
    })
}
