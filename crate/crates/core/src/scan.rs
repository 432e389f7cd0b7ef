//! Sort-and-scan evaluation of one-dimensional ReLU convolutions.
//!
//! For sorted scores `z_1 <= ... <= z_m` with values `g_j`,
//!
//! ```text
//! sum_j relu(z_i - z_j) g_j = z_i * a_i - b_i,   a_i = sum_{j<=i} g_j,  b_i = sum_{j<=i} z_j g_j
//! ```
//!
//! so one linear pass over a sorted array replaces the `O(m^2)` double loop.
//! [`ScanPlan`] accumulates the same sum as `r_i = r_{i-1} + (z_i - z_{i-1}) a_{i-1}`,
//! which keeps the normaliser a sum of nonnegative terms.
//! Attention evaluates this on a merged array of keys ("sources", carrying
//! values) and queries ("targets", carrying zero), read back at the targets.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::real::Real;

/// Role of an entry of a merged score array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    Source(usize),
    Target(usize),
}

/// Sorted merged array of source and target scores.
///
/// Ties are ordered sources first, then by original index, so the plan is a
/// deterministic function of its inputs. Scores are stored relative to their
/// mean; relu differences do not change and the running sums stay smaller.
#[derive(Debug, Clone)]
pub struct ScanPlan<T> {
    sorted: Vec<T>,
    slots: Vec<Slot>,
    center: T,
    n_sources: usize,
    n_targets: usize,
}

/// Output of a merged scan, one row per target.
#[derive(Debug, Clone, PartialEq)]
pub struct Convolution<T> {
    /// `sum_j relu(t_i - s_j) v_j` (or `relu(s_j - t_i)` for [`ScanPlan::convolve_above`]).
    pub relu: Array2<T>,
    /// `sum_j v_j` over the sources on the active side of `t_i`.
    pub step: Array2<T>,
}

/// Unit-weight sums against every source, per target.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitSums<T> {
    pub relu_below: Array1<T>,
    pub relu_above: Array1<T>,
    pub count_below: Vec<usize>,
    pub count_above: Vec<usize>,
}

impl<T: Real> UnitSums<T> {
    /// `sum_j |t_i - s_j|`.
    pub fn abs_sums(&self) -> Array1<T> {
        &self.relu_below + &self.relu_above
    }
}

impl<T: Real> ScanPlan<T> {
    pub fn new(sources: &[T], targets: &[T]) -> Self {
        let rank: Vec<usize> = (0..sources.len()).collect();
        Self::with_source_rank(sources, targets, &rank)
    }

    /// Like [`ScanPlan::new`], but sources with equal scores are ordered by
    /// `rank` instead of by index. Ranking sources by their values makes the
    /// scan sums independent of the input order.
    pub fn with_source_rank(sources: &[T], targets: &[T], rank: &[usize]) -> Self {
        assert_eq!(rank.len(), sources.len(), "one rank per source");
        let m = sources.len() + targets.len();
        let mut entries: Vec<(T, Slot)> = Vec::with_capacity(m);
        entries.extend(
            sources
                .iter()
                .enumerate()
                .map(|(j, &s)| (s, Slot::Source(j))),
        );
        entries.extend(
            targets
                .iter()
                .enumerate()
                .map(|(i, &t)| (t, Slot::Target(i))),
        );
        entries.sort_unstable_by(|(za, sa), (zb, sb)| {
            za.partial_cmp(zb)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| slot_key(*sa, rank).cmp(&slot_key(*sb, rank)))
        });
        // summed in sorted order so the centre does not depend on input order
        let center = if m == 0 {
            T::zero()
        } else {
            let total: T = entries.iter().map(|&(z, _)| z).sum();
            total / T::from_usize(m).expect("length fits in a float")
        };
        let (sorted, slots) = entries.into_iter().map(|(z, s)| (z - center, s)).unzip();
        Self {
            sorted,
            slots,
            center,
            n_sources: sources.len(),
            n_targets: targets.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn n_sources(&self) -> usize {
        self.n_sources
    }

    pub fn n_targets(&self) -> usize {
        self.n_targets
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    /// Scores in sorted order.
    pub fn sorted_scores(&self) -> Vec<T> {
        self.sorted.iter().map(|&z| z + self.center).collect()
    }

    /// Merged index (sources `0..n_s`, then targets) at each sorted position.
    pub fn sort_perm(&self) -> Vec<usize> {
        self.slots
            .iter()
            .map(|slot| match *slot {
                Slot::Source(j) => j,
                Slot::Target(i) => self.n_sources + i,
            })
            .collect()
    }

    /// Sorted position of each merged index.
    pub fn inverse_perm(&self) -> Vec<usize> {
        let mut inv = vec![0; self.len()];
        for (pos, merged) in self.sort_perm().into_iter().enumerate() {
            inv[merged] = pos;
        }
        inv
    }

    /// Same ordering with the source and target roles exchanged.
    pub fn transposed(&self) -> Self {
        Self {
            sorted: self.sorted.clone(),
            slots: self
                .slots
                .iter()
                .map(|slot| match *slot {
                    Slot::Source(j) => Slot::Target(j),
                    Slot::Target(i) => Slot::Source(i),
                })
                .collect(),
            center: self.center,
            n_sources: self.n_targets,
            n_targets: self.n_sources,
        }
    }

    /// `relu_i = sum_j relu(t_i - s_j) v_j` and `step_i = sum_{s_j below t_i} v_j`.
    pub fn convolve(&self, values: ArrayView2<'_, T>) -> Convolution<T> {
        self.scan(values, self.slots.iter().zip(&self.sorted), false)
    }

    /// `relu_i = sum_j relu(s_j - t_i) v_j` and `step_i = sum_{s_j above t_i} v_j`.
    pub fn convolve_above(&self, values: ArrayView2<'_, T>) -> Convolution<T> {
        self.scan(values, self.slots.iter().zip(&self.sorted).rev(), true)
    }

    fn scan<'a>(
        &'a self,
        values: ArrayView2<'_, T>,
        walk: impl Iterator<Item = (&'a Slot, &'a T)>,
        descending: bool,
    ) -> Convolution<T> {
        assert_eq!(
            values.nrows(),
            self.n_sources,
            "one value row per source is required"
        );
        let d = values.ncols();
        let values = values.as_standard_layout();
        let flat = values.as_slice().expect("standard layout");
        let mut relu = Array2::<T>::zeros((self.n_targets, d));
        let mut step = Array2::<T>::zeros((self.n_targets, d));
        // acc holds the relu sum at the previous position; moving to z adds
        // |z - prev| per unit of active weight, so sources tied with a target
        // add exactly nothing
        let mut a = vec![T::zero(); d];
        let mut acc = vec![T::zero(); d];
        let mut prev: Option<T> = None;
        for (slot, &z) in walk {
            if let Some(p) = prev {
                let gap = if descending { p - z } else { z - p };
                if gap != T::zero() {
                    for (s, &ac) in acc.iter_mut().zip(&a) {
                        *s += ac * gap;
                    }
                }
            }
            prev = Some(z);
            match *slot {
                Slot::Source(j) => {
                    let row = &flat[j * d..(j + 1) * d];
                    for (ac, &v) in a.iter_mut().zip(row) {
                        *ac += v;
                    }
                }
                Slot::Target(i) => {
                    relu.row_mut(i)
                        .as_slice_mut()
                        .expect("row of a fresh array")
                        .copy_from_slice(&acc);
                    step.row_mut(i)
                        .as_slice_mut()
                        .expect("row of a fresh array")
                        .copy_from_slice(&a);
                }
            }
        }
        Convolution { relu, step }
    }

    /// Unit-weight relu sums and strict side counts for every target.
    pub fn unit_sums(&self) -> UnitSums<T> {
        let mut relu_below = Array1::<T>::zeros(self.n_targets);
        let mut relu_above = Array1::<T>::zeros(self.n_targets);
        let mut count_below = vec![0; self.n_targets];
        let mut count_above = vec![0; self.n_targets];

        let (mut count, mut acc) = (0usize, T::zero());
        let mut prev: Option<T> = None;
        for (slot, &z) in self.slots.iter().zip(&self.sorted) {
            if let Some(p) = prev {
                acc += T::from_usize(count).unwrap() * (z - p);
            }
            prev = Some(z);
            match *slot {
                Slot::Source(_) => count += 1,
                Slot::Target(i) => {
                    relu_below[i] = acc;
                    count_below[i] = count;
                }
            }
        }
        let (mut count, mut acc) = (0usize, T::zero());
        let mut prev: Option<T> = None;
        for (slot, &z) in self.slots.iter().zip(&self.sorted).rev() {
            if let Some(p) = prev {
                acc += T::from_usize(count).unwrap() * (p - z);
            }
            prev = Some(z);
            match *slot {
                Slot::Source(_) => count += 1,
                Slot::Target(i) => {
                    relu_above[i] = acc;
                    count_above[i] = count;
                }
            }
        }
        UnitSums {
            relu_below,
            relu_above,
            count_below,
            count_above,
        }
    }
}

fn slot_key(slot: Slot, rank: &[usize]) -> (u8, usize) {
    match slot {
        Slot::Source(j) => (0, rank[j]),
        Slot::Target(i) => (1, i),
    }
}

/// Running sums `a_i = a_{i-1} + g_i`, `b_i = b_{i-1} + z_i g_i` with `a_0 = b_0 = 0`.
///
/// Row `i` of `a`/`b` holds the sum of the first `i` sorted entries.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixSums<T> {
    pub a: Array2<T>,
    pub b: Array2<T>,
}

impl<T: Real> PrefixSums<T> {
    pub fn new(z: &[T], gamma: ArrayView2<'_, T>) -> Result<Self> {
        check_sorted_input(z, gamma)?;
        let (m, d) = gamma.dim();
        let mut a = Array2::<T>::zeros((m + 1, d));
        let mut b = Array2::<T>::zeros((m + 1, d));
        for i in 0..m {
            for c in 0..d {
                let g = gamma[[i, c]];
                a[[i + 1, c]] = a[[i, c]] + g;
                b[[i + 1, c]] = b[[i, c]] + z[i] * g;
            }
        }
        Ok(Self { a, b })
    }
}

fn check_sorted_input<T: Real>(z: &[T], gamma: ArrayView2<'_, T>) -> Result<()> {
    if z.len() != gamma.nrows() {
        return Err(Error::shape(format!(
            "{} scores but {} value rows",
            z.len(),
            gamma.nrows()
        )));
    }
    crate::types::check_finite(z.iter().copied(), "scores")?;
    if let Some(index) = z.windows(2).position(|w| w[0] > w[1]) {
        return Err(Error::Unsorted { index });
    }
    Ok(())
}

/// `out_i = sum_j relu(z_i - z_j) g_j` for nondecreasing `z`, in one pass.
pub fn relu_scan<T: Real>(z: &[T], gamma: ArrayView2<'_, T>) -> Result<Array2<T>> {
    let sums = PrefixSums::new(z, gamma)?;
    let (m, d) = gamma.dim();
    let mut out = Array2::<T>::zeros((m, d));
    for i in 0..m {
        for c in 0..d {
            out[[i, c]] = sums.a[[i + 1, c]] * z[i] - sums.b[[i + 1, c]];
        }
    }
    Ok(out)
}

/// `out_i = sum_l |q_i - k_l|` in `O(n log n)`, as the sum of the two
/// one-sided relu scans `relu(q - k) + relu(k - q)`.
pub fn abs_diff_normalizer<T: Real>(query_scores: &[T], key_scores: &[T]) -> Result<Array1<T>> {
    crate::types::check_finite(query_scores.iter().copied(), "query scores")?;
    crate::types::check_finite(key_scores.iter().copied(), "key scores")?;
    Ok(ScanPlan::new(key_scores, query_scores)
        .unit_sums()
        .abs_sums())
}

/// Convenience wrapper: `out_i = sum_j relu(t_i - s_j) v_j` on unsorted inputs.
pub fn relu_convolve<T: Real>(
    targets: &[T],
    sources: &[T],
    values: ArrayView2<'_, T>,
) -> Result<Array2<T>> {
    if sources.len() != values.nrows() {
        return Err(Error::shape(format!(
            "{} sources but {} value rows",
            sources.len(),
            values.nrows()
        )));
    }
    Ok(ScanPlan::new(sources, targets).convolve(values).relu)
}
