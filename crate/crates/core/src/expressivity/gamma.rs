use ndarray::{Array1, ArrayView1, Axis};

use crate::error::{Error, Result};
use crate::kernel::pointwise_mlp;
use crate::types::{check_finite, Mlp, TokenSequence};

/// Parameters `(a, b, c, v)` of the scalar map `gamma`.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaParams {
    pub a: Array1<f64>,
    pub b: f64,
    pub c: f64,
    pub v: f64,
}

/// `<x,a> + b + (1/n) sum_j v relu(<x,a> - <y_j,a> + c)` over the tokens `y_j`.
pub fn gamma_lambda(
    x: ArrayView1<'_, f64>,
    tokens: &TokenSequence,
    params: &GammaParams,
) -> Result<f64> {
    check(x, tokens, params)?;
    let sx = x.dot(&params.a);
    let scores = tokens.view().dot(&params.a);
    let sum: f64 = scores.iter().map(|&sy| (sx - sy + params.c).max(0.0)).sum();
    Ok(sx + params.b + params.v * sum / tokens.n() as f64)
}

fn check(x: ArrayView1<'_, f64>, tokens: &TokenSequence, params: &GammaParams) -> Result<()> {
    if x.len() != params.a.len() || tokens.d() != params.a.len() {
        return Err(Error::shape(format!(
            "point has dimension {}, tokens {}, direction {}",
            x.len(),
            tokens.d(),
            params.a.len()
        )));
    }
    check_finite(x.iter().copied(), "point")
}

/// One-dimensional unnormalized mean-field ReLU attention with parameters
/// `(a_q, b_q, a_k, b_k, a_v, b_v)`:
///
/// ```text
/// z + (1/n) sum_j (a_v z_j + b_v) relu(a_q z + b_q - a_k z_j - b_k)
/// ```
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanFieldHead {
    pub a_q: f64,
    pub b_q: f64,
    pub a_k: f64,
    pub b_k: f64,
    pub a_v: f64,
    pub b_v: f64,
}

impl MeanFieldHead {
    pub fn new(theta: [f64; 6]) -> Self {
        let [a_q, b_q, a_k, b_k, a_v, b_v] = theta;
        Self {
            a_q,
            b_q,
            a_k,
            b_k,
            a_v,
            b_v,
        }
    }

    /// Evaluates the head at `z` against the empirical measure of `zs`.
    pub fn apply(&self, z: f64, zs: &[f64]) -> f64 {
        let q = self.a_q * z + self.b_q;
        let sum: f64 = zs
            .iter()
            .map(|&y| (self.a_v * y + self.b_v) * (q - self.a_k * y - self.b_k).max(0.0))
            .sum();
        z + sum / zs.len() as f64
    }
}

/// `gamma` evaluated as a scalar affine perceptron followed by a mean-field
/// head with `theta = (1, c, 1, 0, 0, v)`, both applied to the query and to
/// every token.
pub fn gamma_lambda_composed(
    x: ArrayView1<'_, f64>,
    tokens: &TokenSequence,
    params: &GammaParams,
) -> Result<f64> {
    check(x, tokens, params)?;
    let perceptron = Mlp::affine_scalar(params.a.view(), params.b);
    let query = TokenSequence::new(x.to_owned().insert_axis(Axis(0)))?;
    let z = pointwise_mlp(&query, &perceptron)?.data()[[0, 0]];
    let zs = pointwise_mlp(tokens, &perceptron)?
        .data()
        .column(0)
        .to_vec();
    let head = MeanFieldHead::new([1.0, params.c, 1.0, 0.0, 0.0, params.v]);
    Ok(head.apply(z, &zs))
}
