use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::types::{check_finite, TokenSequence};

/// Affine map `a(s) = slope * s + intercept` applied to key scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyAffine {
    pub slope: f64,
    pub intercept: f64,
}

impl KeyAffine {
    pub fn new(slope: f64, intercept: f64) -> Self {
        Self { slope, intercept }
    }

    /// Constant map `s -> c`.
    pub fn constant(c: f64) -> Self {
        Self::new(0.0, c)
    }

    /// The affine map sending `t1 -> y1` and `t2 -> y2`.
    pub fn through(t1: f64, y1: f64, t2: f64, y2: f64) -> Self {
        let slope = (y2 - y1) / (t2 - t1);
        Self::new(slope, y1 - slope * t1)
    }

    pub fn eval(&self, s: f64) -> f64 {
        self.slope * s + self.intercept
    }
}

/// One `(shift, value)` pair of a layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTerm {
    pub shift: f64,
    pub value: Array1<f64>,
}

/// Unnormalized single-direction ReLU self-attention update
///
/// ```text
/// x_k <- x_k + sum_m sum_t relu(<eta, x_k> - a(<eta, x_m>) + c_t) v_t
/// ```
///
/// applied within each sequence. There is no denominator and no centering.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstructiveLayer {
    direction: Array1<f64>,
    key: KeyAffine,
    terms: Vec<LayerTerm>,
}

impl ConstructiveLayer {
    pub fn new(direction: Array1<f64>, key: KeyAffine, terms: Vec<LayerTerm>) -> Result<Self> {
        let d = direction.len();
        if d == 0 {
            return Err(Error::EmptyInput("layer direction"));
        }
        check_finite(direction.iter().copied(), "layer direction")?;
        let norm = direction.dot(&direction).sqrt();
        if (norm - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "layer direction must have unit norm, got {norm}"
            )));
        }
        if !key.slope.is_finite() || !key.intercept.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "non-finite key map {key:?}"
            )));
        }
        for term in &terms {
            if term.value.len() != d {
                return Err(Error::shape(format!(
                    "layer value has dimension {}, direction has {d}",
                    term.value.len()
                )));
            }
            check_finite(term.value.iter().copied(), "layer value")?;
            if !term.shift.is_finite() {
                return Err(Error::InvalidParameter("non-finite layer shift".into()));
            }
        }
        Ok(Self {
            direction,
            key,
            terms,
        })
    }

    /// A one-term layer without shift.
    pub fn plain(direction: Array1<f64>, key: KeyAffine, value: Array1<f64>) -> Result<Self> {
        Self::new(direction, key, vec![LayerTerm { shift: 0.0, value }])
    }

    pub fn dim(&self) -> usize {
        self.direction.len()
    }

    pub fn direction(&self) -> &Array1<f64> {
        &self.direction
    }

    pub fn key(&self) -> KeyAffine {
        self.key
    }

    pub fn terms(&self) -> &[LayerTerm] {
        &self.terms
    }

    /// Re-embeds a one-dimensional layer along `direction`: each scalar value
    /// `v` becomes `v * direction`.
    pub fn lift(&self, direction: &Array1<f64>) -> Result<Self> {
        if self.dim() != 1 {
            return Err(Error::shape(format!(
                "only one-dimensional layers can be lifted, this one has dimension {}",
                self.dim()
            )));
        }
        let terms = self
            .terms
            .iter()
            .map(|t| LayerTerm {
                shift: t.shift,
                value: direction * t.value[0],
            })
            .collect();
        Self::new(direction.clone(), self.key, terms)
    }

    /// Applies the update to one sequence given as rows of `x`.
    ///
    /// For each token the sum over keys is taken in grouped form
    /// `k_t s - A_t + k_t c_t`, where `k_t` keys are active and `A_t` is the
    /// sum of their mapped scores. Terms with the same active set then share
    /// one coefficient, so a bump leaves tokens beyond its window exactly
    /// where they were.
    pub fn apply_rows(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        assert_eq!(
            x.ncols(),
            self.dim(),
            "token dimension must match the layer"
        );
        let scores = x.dot(&self.direction);
        let mut keys: Vec<f64> = scores.iter().map(|&s| self.key.eval(s)).collect();
        keys.sort_by(f64::total_cmp);
        let mut prefix = Vec::with_capacity(keys.len() + 1);
        prefix.push(0.0);
        for &k in &keys {
            prefix.push(prefix.last().unwrap() + k);
        }

        let d = self.dim();
        let mut out = x.to_owned();
        let mut grouped = Array1::<f64>::zeros(d);
        let mut offsets = Array1::<f64>::zeros(d);
        for (mut row, &s) in out.outer_iter_mut().zip(scores.iter()) {
            grouped.fill(0.0);
            offsets.fill(0.0);
            let mut touched = false;
            for term in &self.terms {
                let active = keys.partition_point(|&a| (s - a) + term.shift > 0.0);
                if active == 0 {
                    continue;
                }
                touched = true;
                let count = active as f64;
                grouped.scaled_add(count * s - prefix[active], &term.value);
                offsets.scaled_add(count * term.shift, &term.value);
            }
            if touched {
                row += &grouped;
                row += &offsets;
            }
        }
        out
    }

    pub fn apply(&self, seq: &TokenSequence) -> Result<TokenSequence> {
        if seq.d() != self.dim() {
            return Err(Error::shape(format!(
                "tokens have dimension {}, layer has {}",
                seq.d(),
                self.dim()
            )));
        }
        TokenSequence::new(self.apply_rows(seq.view()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn naive(layer: &ConstructiveLayer, x: &Array2<f64>) -> Array2<f64> {
        let eta = layer.direction();
        let mut out = x.clone();
        for k in 0..x.nrows() {
            let sk = x.row(k).dot(eta);
            for m in 0..x.nrows() {
                let am = layer.key().eval(x.row(m).dot(eta));
                for t in layer.terms() {
                    let w = (sk - am + t.shift).max(0.0);
                    out.row_mut(k).scaled_add(w, &t.value);
                }
            }
        }
        out
    }

    #[test]
    fn zero_value_is_identity() {
        let layer =
            ConstructiveLayer::plain(array![1.0], KeyAffine::new(2.0, -1.0), array![0.0]).unwrap();
        let x = array![[0.5], [-1.0], [3.0]];
        assert_eq!(layer.apply_rows(x.view()), x);
    }

    #[test]
    fn two_token_affine_formula() {
        // keys a(s) = s - 1, value v: the larger token sees both keys,
        // the smaller one only its own
        let v = -0.25;
        let layer =
            ConstructiveLayer::plain(array![1.0], KeyAffine::new(1.0, -1.0), array![v]).unwrap();
        let (x1, x2) = (0.0, 0.5);
        let out = layer.apply_rows(array![[x1], [x2]].view());
        // x1: relu(x1 - (x1 - 1)) + relu(x1 - (x2 - 1)) = 1 + 0.5
        assert_eq!(out[[0, 0]], x1 + v * 1.5);
        // x2: relu(1) + relu(x2 - x1 + 1) = 1 + 1.5
        assert_eq!(out[[1, 0]], x2 + v * 2.5);
    }

    #[test]
    fn matches_double_loop() {
        let eta = array![0.6, 0.8];
        let terms = vec![
            LayerTerm {
                shift: 0.3,
                value: array![1.0, -2.0],
            },
            LayerTerm {
                shift: -0.1,
                value: array![0.5, 0.25],
            },
        ];
        let layer = ConstructiveLayer::new(eta, KeyAffine::new(0.7, 0.2), terms).unwrap();
        let x = array![[0.1, 0.2], [1.0, -0.5], [-0.3, 0.9], [2.0, 2.0]];
        let got = layer.apply_rows(x.view());
        let want = naive(&layer, &x);
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_non_unit_direction() {
        assert!(ConstructiveLayer::plain(
            array![1.0, 1.0],
            KeyAffine::constant(0.0),
            array![0.0, 0.0]
        )
        .is_err());
    }

    #[test]
    fn lift_scales_direction() {
        let layer =
            ConstructiveLayer::plain(array![1.0], KeyAffine::new(1.0, 0.0), array![3.0]).unwrap();
        let lifted = layer.lift(&array![0.0, 1.0]).unwrap();
        assert_eq!(lifted.terms()[0].value, array![0.0, 3.0]);
    }
}
