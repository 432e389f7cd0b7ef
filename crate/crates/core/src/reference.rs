//! Quadratic-time reference implementations.
//!
//! These are literal double loops over query/key pairs and serve as ground
//! truth for the sorted evaluation in [`crate::kernel`]. They recompute the
//! projections with plain scalar loops instead of sharing code with the fast
//! path.

use ndarray::{Array1, Array2};

use crate::ddouble::ExactSum;
use crate::error::Result;
use crate::real::{relu, Real};
use crate::types::{Affine, HeadParams, KernelConfig, Projection, TokenSequence, Variant};

fn affine_row<T: Real>(map: &Affine<T>, x: &[T]) -> Vec<T> {
    (0..map.output_dim())
        .map(|r| {
            let mut acc = map.bias[r];
            for (c, &xc) in x.iter().enumerate() {
                acc += map.matrix[[r, c]] * xc;
            }
            acc
        })
        .collect()
}

fn score_of<T: Real>(proj: &Projection<T>, u: &[T], head: usize) -> T {
    match proj {
        Projection::Linear { weight, bias } => {
            let mut s = bias[head];
            for (c, &uc) in u.iter().enumerate() {
                s += weight[[head, c]] * uc;
            }
            s
        }
        Projection::Mlp1 {
            hidden_weight,
            hidden_bias,
            output_weight,
            output_bias,
        } => {
            let mut s = output_bias[head];
            for h in 0..hidden_weight.nrows() {
                let mut pre = hidden_bias[h];
                for (c, &uc) in u.iter().enumerate() {
                    pre += hidden_weight[[h, c]] * uc;
                }
                s += output_weight[[head, h]] * relu(pre);
            }
            s
        }
    }
}

/// Scores, value rows, recomputed token by token.
fn naive_parts<T: Real>(
    seq: &TokenSequence<T>,
    head: &HeadParams<T>,
) -> (Vec<T>, Vec<T>, Vec<Vec<T>>) {
    let rows: Vec<Vec<T>> = seq.data().outer_iter().map(|r| r.to_vec()).collect();
    let q = rows
        .iter()
        .map(|x| score_of(&head.projection, &affine_row(&head.query, x), head.slot))
        .collect();
    let k = rows
        .iter()
        .map(|x| score_of(&head.projection, &affine_row(&head.key, x), head.slot))
        .collect();
    let v = rows.iter().map(|x| affine_row(&head.value, x)).collect();
    (q, k, v)
}

fn to_array<T: Real>(rows: Vec<Vec<T>>, d: usize) -> Array2<T> {
    let n = rows.len();
    Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).expect("rectangular rows")
}

/// Standard softmax attention with max-subtracted logits `<Q x_i, K x_j>`.
pub fn softmax_attention_naive<T: Real>(
    seq: &TokenSequence<T>,
    head: &HeadParams<T>,
) -> Result<Array2<T>> {
    head.validate(seq.d())?;
    let rows: Vec<Vec<T>> = seq.data().outer_iter().map(|r| r.to_vec()).collect();
    let qs: Vec<Vec<T>> = rows.iter().map(|x| affine_row(&head.query, x)).collect();
    let ks: Vec<Vec<T>> = rows.iter().map(|x| affine_row(&head.key, x)).collect();
    let vs: Vec<Vec<T>> = rows.iter().map(|x| affine_row(&head.value, x)).collect();
    let d = seq.d();
    let mut out = Vec::with_capacity(rows.len());
    for q in &qs {
        let logits: Vec<T> = ks
            .iter()
            .map(|k| q.iter().zip(k).fold(T::zero(), |acc, (&a, &b)| acc + a * b))
            .collect();
        let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let weights: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
        let total: T = weights.iter().copied().sum();
        let mut acc = vec![T::zero(); d];
        for (w, v) in weights.iter().zip(&vs) {
            for (a, &vc) in acc.iter_mut().zip(v) {
                *a += *w / total * vc;
            }
        }
        out.push(acc);
    }
    Ok(to_array(out, d))
}

/// Double-loop ReLU attention with the same denominator floor and optional
/// value centering as the sliced kernel.
pub fn relu_attention_naive<T: Real>(
    seq: &TokenSequence<T>,
    head: &HeadParams<T>,
    cfg: &KernelConfig,
) -> Result<Array2<T>> {
    cfg.validate::<T>()?;
    head.validate(seq.d())?;
    let (q, k, mut v) = naive_parts(seq, head);
    let n = seq.n();
    let d = seq.d();
    if cfg.centering {
        let nt = T::from_usize(n).unwrap();
        for c in 0..d {
            let mean = v.iter().map(|row| row[c]).sum::<T>() / nt;
            for row in &mut v {
                row[c] -= mean;
            }
        }
    }
    let eps = T::from_f64_lossy(cfg.epsilon);
    let mut out = vec![vec![T::zero(); d]; n];
    for i in 0..n {
        let mut norm = T::zero();
        for &kl in &k {
            norm += (q[i] - kl).abs();
        }
        for j in 0..n {
            let w = relu(q[i] - k[j]) / (norm + eps);
            for c in 0..d {
                out[i][c] += w * v[j][c];
            }
        }
    }
    Ok(to_array(out, d))
}

/// Double-loop bump attention `(1/n) sum_j relu(1 - |q_i - k_j| / b) V x_j`.
pub fn bump_attention_naive<T: Real>(
    seq: &TokenSequence<T>,
    head: &HeadParams<T>,
    cfg: &KernelConfig,
) -> Result<Array2<T>> {
    crate::kernel::check_bump(seq, head, cfg)?;
    let (q, k, v) = naive_parts(seq, head);
    let n = seq.n();
    let d = seq.d();
    let b = T::from_f64_lossy(cfg.bandwidth);
    let nt = T::from_usize(n).unwrap();
    let mut out = vec![vec![T::zero(); d]; n];
    for i in 0..n {
        for j in 0..n {
            let w = relu(T::one() - (q[i] - k[j]).abs() / b) / nt;
            for c in 0..d {
                out[i][c] += w * v[j][c];
            }
        }
    }
    Ok(to_array(out, d))
}

/// `out_i = sum_j relu(t_i - (s_j + shift)) v_j` by direct summation.
pub fn relu_convolution_naive<T: Real>(
    targets: &[T],
    sources: &[T],
    values: &Array2<T>,
    shift: T,
) -> Array2<T> {
    let d = values.ncols();
    let mut out = Array2::zeros((targets.len(), d));
    for (i, &t) in targets.iter().enumerate() {
        for (j, &s) in sources.iter().enumerate() {
            let w = relu(t - (s + shift));
            for c in 0..d {
                out[[i, c]] += w * values[[j, c]];
            }
        }
    }
    out
}

/// Bump attention written as three naive relu convolutions with key shifts
/// `-b`, `+b` and `0`, combined with weights `1, 1, -2` and scaled by `1/(n b)`.
///
/// Every term `w * (q_i - k_j - shift) * v_j` is split into exact products and
/// summed without rounding, so the result is the decomposition evaluated
/// exactly and rounded once. Plain floating-point sums would leave rounding
/// noise where the three convolutions cancel.
pub fn bump_three_relu_naive<T: Real>(
    seq: &TokenSequence<T>,
    head: &HeadParams<T>,
    cfg: &KernelConfig,
) -> Result<Array2<T>> {
    crate::kernel::check_bump(seq, head, cfg)?;
    let (q, k, v) = naive_parts(seq, head);
    let f = |x: T| x.to_f64_lossy();
    let b = f(T::from_f64_lossy(cfg.bandwidth));
    let terms = [(-b, 1.0), (b, 1.0), (0.0, -2.0)];
    let (n, d) = (seq.n(), seq.d());
    let mut out = Array2::zeros((n, d));
    let mut sums = vec![ExactSum::new(); d];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = ExactSum::new());
        for j in 0..n {
            let parts = [f(q[i]), -f(k[j])];
            for &(shift, weight) in &terms {
                let mut arg = ExactSum::new();
                parts.iter().for_each(|&x| arg.add(x));
                arg.add(-shift);
                if arg.signum() <= 0.0 {
                    continue;
                }
                for (s, &vc) in sums.iter_mut().zip(&v[j]) {
                    // weight is 1 or -2, so weight * vc is exact
                    let wv = weight * f(vc);
                    s.add_product(parts[0], wv);
                    s.add_product(parts[1], wv);
                    s.add_product(-shift, wv);
                }
            }
        }
        let scale = n as f64 * b;
        for (c, s) in sums.iter().enumerate() {
            out[[i, c]] = T::from_f64_lossy(s.value() / scale);
        }
    }
    Ok(out)
}

/// Residual multi-head layer over the naive heads.
pub fn multi_head_layer_naive<T: Real>(
    seq: &TokenSequence<T>,
    heads: &[HeadParams<T>],
    cfg: &KernelConfig,
    variant: Variant,
) -> Result<Array2<T>> {
    let mut out = seq.data().clone();
    for head in heads {
        let h = match variant {
            Variant::Relu => relu_attention_naive(seq, head, cfg)?,
            Variant::Bump => bump_attention_naive(seq, head, cfg)?,
        };
        for i in 0..seq.n() {
            for r in 0..seq.d() {
                let mut acc = T::zero();
                for c in 0..seq.d() {
                    acc += head.mixer[[r, c]] * h[[i, c]];
                }
                out[[i, r]] += acc;
            }
        }
    }
    Ok(out)
}

/// Query and key scores computed by the scalar loops above.
pub fn naive_scores<T: Real>(
    seq: &TokenSequence<T>,
    head: &HeadParams<T>,
) -> (Array1<T>, Array1<T>) {
    let (q, k, _) = naive_parts(seq, head);
    (Array1::from(q), Array1::from(k))
}

/// Maximum absolute difference scaled by the largest reference entry; zero
/// when both arrays vanish.
pub fn relative_error<T: Real>(got: &Array2<T>, reference: &Array2<T>) -> f64 {
    assert_eq!(
        got.dim(),
        reference.dim(),
        "arrays must have the same shape"
    );
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (&a, &b) in got.iter().zip(reference.iter()) {
        diff = diff.max((a.to_f64_lossy() - b.to_f64_lossy()).abs());
        scale = scale.max(b.to_f64_lossy().abs());
    }
    if diff == 0.0 {
        0.0
    } else if scale == 0.0 {
        f64::INFINITY
    } else {
        diff / scale
    }
}
