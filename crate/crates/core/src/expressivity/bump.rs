use ndarray::Array1;

use super::layer::{ConstructiveLayer, KeyAffine, LayerTerm};
use crate::error::{Error, Result};

/// `(shift, weight)` pairs with
/// `phi(x) = sum weight * relu(x - x0 + shift)`, a tent of height 1 at `x0`
/// vanishing outside `(x0 - delta, x0 + delta)`.
pub fn bump_coefficients(delta: f64) -> Result<[(f64, f64); 3]> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "bump half-width must be > 0, got {delta}"
        )));
    }
    let w = 1.0 / delta;
    Ok([(delta, w), (-delta, w), (0.0, -2.0 * w)])
}

/// Evaluates the bump centred at `x0` with half-width `delta`.
pub fn bump_value(x0: f64, delta: f64, x: f64) -> Result<f64> {
    let coeffs = bump_coefficients(delta)?;
    Ok(coeffs.iter().map(|&(c, w)| w * (x - x0 + c).max(0.0)).sum())
}

/// Layer moving every token whose score lies in `(x0 - delta, x0 + delta)`
/// by `phi(score) * displacement`, for sequences of `n` tokens.
///
/// The key map is the constant `x0`, so each of the `n` keys contributes
/// the same amount and the values carry a `1/n` factor.
pub fn bump_layer(
    direction: &Array1<f64>,
    x0: f64,
    delta: f64,
    displacement: &Array1<f64>,
    n: usize,
) -> Result<ConstructiveLayer> {
    let coeffs = bump_coefficients(delta)?;
    let base = displacement * (coeffs[0].1 / n as f64);
    // the centre weight is exactly -2 times the outer ones
    let terms = vec![
        LayerTerm {
            shift: coeffs[0].0,
            value: base.clone(),
        },
        LayerTerm {
            shift: coeffs[1].0,
            value: base.clone(),
        },
        LayerTerm {
            shift: coeffs[2].0,
            value: &base * -2.0,
        },
    ];
    ConstructiveLayer::new(direction.clone(), KeyAffine::constant(x0), terms)
}
