//! Random instances for tests, benchmarks and the CLI.
//!
//! Tokens are standard normal; weight matrices have `N(0, 1/d)` entries so
//! that mapped tokens stay at unit scale.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::types::{Affine, HeadParams, Mlp, Projection, ProjectionKind, TokenSequence};

fn normal_matrix<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    scale: f64,
    rng: &mut R,
) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

fn normal_vector<R: Rng + ?Sized>(len: usize, scale: f64, rng: &mut R) -> Array1<f64> {
    Array1::from_shape_simple_fn(len, || {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

fn weight_scale(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

/// `n x d` standard normal tokens.
pub fn random_sequence<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> TokenSequence {
    TokenSequence::new(normal_matrix(n, d, 1.0, rng))
        .expect("random tokens are finite and nonempty")
}

pub fn random_affine<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Affine {
    Affine {
        matrix: normal_matrix(d, d, weight_scale(d), rng),
        bias: normal_vector(d, 0.1, rng),
    }
}

/// Projection with `heads` outputs.
pub fn random_projection<R: Rng + ?Sized>(
    d: usize,
    kind: ProjectionKind,
    heads: usize,
    rng: &mut R,
) -> Projection {
    let s = weight_scale(d);
    match kind {
        ProjectionKind::Linear => Projection::Linear {
            weight: normal_matrix(heads, d, s, rng),
            bias: normal_vector(heads, 0.1, rng),
        },
        ProjectionKind::Mlp1 => Projection::Mlp1 {
            hidden_weight: normal_matrix(d, d, s, rng),
            hidden_bias: normal_vector(d, 0.1, rng),
            output_weight: normal_matrix(heads, d, s, rng),
            output_bias: normal_vector(heads, 0.1, rng),
        },
    }
}

/// One head reading output `slot` of a fresh `heads`-output projection.
pub fn random_head<R: Rng + ?Sized>(
    d: usize,
    kind: ProjectionKind,
    heads: usize,
    slot: usize,
    rng: &mut R,
) -> HeadParams {
    HeadParams {
        query: random_affine(d, rng),
        key: random_affine(d, rng),
        value: random_affine(d, rng),
        mixer: normal_matrix(d, d, weight_scale(d), rng),
        projection: random_projection(d, kind, heads, rng),
        slot,
    }
}

/// `h` heads sharing one `h`-output projection, head `i` reading output `i`.
pub fn random_heads<R: Rng + ?Sized>(
    d: usize,
    h: usize,
    kind: ProjectionKind,
    rng: &mut R,
) -> Vec<HeadParams> {
    let projection = random_projection(d, kind, h, rng);
    (0..h)
        .map(|slot| HeadParams {
            query: random_affine(d, rng),
            key: random_affine(d, rng),
            value: random_affine(d, rng),
            mixer: normal_matrix(d, d, weight_scale(d), rng),
            projection: projection.clone(),
            slot,
        })
        .collect()
}

pub fn random_mlp<R: Rng + ?Sized>(d_in: usize, hidden: usize, d_out: usize, rng: &mut R) -> Mlp {
    Mlp {
        hidden_weight: normal_matrix(hidden, d_in, weight_scale(d_in), rng),
        hidden_bias: normal_vector(hidden, 0.1, rng),
        output_weight: normal_matrix(d_out, hidden, weight_scale(hidden), rng),
        output_bias: normal_vector(d_out, 0.1, rng),
    }
}

/// Uniformly random permutation of `0..n`.
pub fn random_permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm
}
