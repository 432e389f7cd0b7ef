use ndarray::{Array1, Array2};

use super::layer::ConstructiveLayer;
use crate::error::{Error, Result};
use crate::types::TokenSequence;

/// `p` token sequences with a common length `n` and dimension `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceGroup {
    sequences: Vec<TokenSequence>,
}

impl SequenceGroup {
    pub fn new(sequences: Vec<TokenSequence>) -> Result<Self> {
        let first = sequences
            .first()
            .ok_or(Error::EmptyInput("sequence group"))?;
        let (n, d) = (first.n(), first.d());
        for (i, s) in sequences.iter().enumerate() {
            if s.n() != n || s.d() != d {
                return Err(Error::shape(format!(
                    "sequence {i} is {}x{}, sequence 0 is {n}x{d}",
                    s.n(),
                    s.d()
                )));
            }
        }
        Ok(Self { sequences })
    }

    /// Group of one-dimensional sequences.
    pub fn from_scores(scores: &[Vec<f64>]) -> Result<Self> {
        let seqs = scores
            .iter()
            .map(|s| {
                let col = Array2::from_shape_vec((s.len(), 1), s.clone())
                    .map_err(|e| Error::shape(e.to_string()))?;
                TokenSequence::new(col)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(seqs)
    }

    pub fn p(&self) -> usize {
        self.sequences.len()
    }

    pub fn n(&self) -> usize {
        self.sequences[0].n()
    }

    pub fn d(&self) -> usize {
        self.sequences[0].d()
    }

    pub fn sequences(&self) -> &[TokenSequence] {
        &self.sequences
    }

    pub fn get(&self, i: usize) -> &TokenSequence {
        &self.sequences[i]
    }

    pub fn into_sequences(self) -> Vec<TokenSequence> {
        self.sequences
    }

    /// Scores `<eta, x>` of every token, one vector per sequence.
    pub fn project(&self, eta: &Array1<f64>) -> Vec<Vec<f64>> {
        self.sequences
            .iter()
            .map(|s| s.view().dot(eta).to_vec())
            .collect()
    }

    /// Fails if some sequence contains the same token twice.
    pub fn check_distinct_tokens(&self, what: &str) -> Result<()> {
        for (i, s) in self.sequences.iter().enumerate() {
            for a in 0..s.n() {
                for b in a + 1..s.n() {
                    if s.row(a) == s.row(b) {
                        return Err(Error::Precondition(format!(
                            "{what} sequence {i} repeats a token at positions {a} and {b}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Largest absolute coordinate difference to `other`.
    pub fn max_abs_diff(&self, other: &SequenceGroup) -> Result<f64> {
        if self.p() != other.p() || self.n() != other.n() || self.d() != other.d() {
            return Err(Error::shape("groups differ in shape"));
        }
        Ok(self
            .sequences
            .iter()
            .zip(&other.sequences)
            .flat_map(|(a, b)| {
                a.data()
                    .iter()
                    .zip(b.data().iter())
                    .map(|(x, y)| (x - y).abs())
            })
            .fold(0.0, f64::max))
    }
}

/// Applies `layers` in order to every sequence.
pub fn apply_constructive_layers(
    group: &SequenceGroup,
    layers: &[ConstructiveLayer],
) -> Result<SequenceGroup> {
    if let Some(l) = layers.iter().find(|l| l.dim() != group.d()) {
        return Err(Error::shape(format!(
            "layer has dimension {}, tokens have {}",
            l.dim(),
            group.d()
        )));
    }
    let sequences = group
        .sequences
        .iter()
        .map(|s| {
            let mut x = s.data().clone();
            for layer in layers {
                x = layer.apply_rows(x.view());
            }
            TokenSequence::new(x)
        })
        .collect::<Result<Vec<_>>>()?;
    SequenceGroup::new(sequences)
}
