//! Analytic backward passes for the sliced kernels.
//!
//! For `L = <U, out>` the gradient with respect to the scores reuses the
//! forward sort: sums over keys below a query come from the forward scan,
//! sums over queries above a key from the same ordering with the roles of
//! keys and queries exchanged. The score gradients are then pushed through
//! the projection and the affine maps.
//!
//! The kernels are piecewise smooth; at `relu(0)` the derivative is taken
//! to be 0. Backward passes refuse inputs whose query and key scores are
//! closer than [`DEFAULT_MIN_SCORE_GAP`].

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::{
    attention_forward, bump_terms, check_bump, project_scores, relu_forward_parts, value_vectors,
    WindowSums,
};
use crate::real::{relu, Real};
use crate::types::{
    check_finite, Affine, HeadParams, KernelConfig, Projection, TokenSequence, Variant,
};

/// Smallest query/key score separation accepted by the backward passes.
pub const DEFAULT_MIN_SCORE_GAP: f64 = 1e-6;

/// Gradient of `<U, head(x)>` with respect to every input of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle<T = f64> {
    pub d_tokens: Array2<T>,
    pub d_query: Affine<T>,
    pub d_key: Affine<T>,
    pub d_value: Affine<T>,
    /// Zero for a lone head; filled by [`multi_head_backward`].
    pub d_mixer: Array2<T>,
    pub d_projection: Projection<T>,
}

impl<T: Real> GradBundle<T> {
    pub fn zeros(n: usize, head: &HeadParams<T>) -> Self {
        let d = head.dim();
        Self {
            d_tokens: Array2::zeros((n, d)),
            d_query: Affine::zeros(d),
            d_key: Affine::zeros(d),
            d_value: Affine::zeros(d),
            d_mixer: Array2::zeros((d, d)),
            d_projection: head.projection.zeros_like(),
        }
    }

    /// All entries in the order of [`flatten_inputs`].
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        out.extend(self.d_tokens.iter().copied());
        push_head_parts(
            &mut out,
            &self.d_query,
            &self.d_key,
            &self.d_value,
            &self.d_projection,
            &self.d_mixer,
        );
        out
    }

    pub fn max_abs(&self) -> T {
        self.flatten()
            .into_iter()
            .fold(T::zero(), |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|x| x.is_finite())
    }
}

fn push_affine<T: Real>(out: &mut Vec<T>, a: &Affine<T>) {
    out.extend(a.matrix.iter().copied());
    out.extend(a.bias.iter().copied());
}

fn push_projection<T: Real>(out: &mut Vec<T>, p: &Projection<T>) {
    match p {
        Projection::Linear { weight, bias } => {
            out.extend(weight.iter().copied());
            out.extend(bias.iter().copied());
        }
        Projection::Mlp1 {
            hidden_weight,
            hidden_bias,
            output_weight,
            output_bias,
        } => {
            out.extend(hidden_weight.iter().copied());
            out.extend(hidden_bias.iter().copied());
            out.extend(output_weight.iter().copied());
            out.extend(output_bias.iter().copied());
        }
    }
}

fn push_head_parts<T: Real>(
    out: &mut Vec<T>,
    q: &Affine<T>,
    k: &Affine<T>,
    v: &Affine<T>,
    p: &Projection<T>,
    w: &Array2<T>,
) {
    push_affine(out, q);
    push_affine(out, k);
    push_affine(out, v);
    push_projection(out, p);
    out.extend(w.iter().copied());
}

/// Tokens, then `Q`, `K`, `V` (matrix then bias), the projection and the mixer.
pub fn flatten_inputs<T: Real>(seq: &TokenSequence<T>, head: &HeadParams<T>) -> Vec<T> {
    let mut out: Vec<T> = seq.data().iter().copied().collect();
    push_head_parts(
        &mut out,
        &head.query,
        &head.key,
        &head.value,
        &head.projection,
        &head.mixer,
    );
    out
}

/// Inverse of [`flatten_inputs`], using `seq` and `head` for the shapes.
pub fn unflatten_inputs<T: Real>(
    seq: &TokenSequence<T>,
    head: &HeadParams<T>,
    flat: &[T],
) -> Result<(TokenSequence<T>, HeadParams<T>)> {
    let expected = flatten_inputs(seq, head).len();
    if flat.len() != expected {
        return Err(Error::shape(format!(
            "expected {expected} flattened inputs, got {}",
            flat.len()
        )));
    }
    let mut cur = Cursor { rest: flat };
    let tokens = cur.matrix(seq.data());
    let query = cur.affine(&head.query);
    let key = cur.affine(&head.key);
    let value = cur.affine(&head.value);
    let projection = match &head.projection {
        Projection::Linear { weight, bias } => Projection::Linear {
            weight: cur.matrix(weight),
            bias: cur.vector(bias),
        },
        Projection::Mlp1 {
            hidden_weight,
            hidden_bias,
            output_weight,
            output_bias,
        } => Projection::Mlp1 {
            hidden_weight: cur.matrix(hidden_weight),
            hidden_bias: cur.vector(hidden_bias),
            output_weight: cur.matrix(output_weight),
            output_bias: cur.vector(output_bias),
        },
    };
    let mixer = cur.matrix(&head.mixer);
    let seq = TokenSequence::new(tokens)?;
    Ok((
        seq,
        HeadParams {
            query,
            key,
            value,
            mixer,
            projection,
            slot: head.slot,
        },
    ))
}

struct Cursor<'a, T> {
    rest: &'a [T],
}

impl<T: Real> Cursor<'_, T> {
    fn take(&mut self, len: usize) -> Vec<T> {
        let (head, tail) = self.rest.split_at(len);
        self.rest = tail;
        head.to_vec()
    }

    fn matrix(&mut self, like: &Array2<T>) -> Array2<T> {
        Array2::from_shape_vec(like.raw_dim(), self.take(like.len())).expect("length checked")
    }

    fn vector(&mut self, like: &Array1<T>) -> Array1<T> {
        Array1::from(self.take(like.len()))
    }

    fn affine(&mut self, like: &Affine<T>) -> Affine<T> {
        Affine {
            matrix: self.matrix(&like.matrix),
            bias: self.vector(&like.bias),
        }
    }
}

/// Closest query/key pair over the shifted key copies `k_j + shift`:
/// `(query, key, |q - k - shift|)`.
pub fn closest_score_pair<T: Real>(
    query_scores: &[T],
    key_scores: &[T],
    shifts: &[T],
) -> Option<(usize, usize, f64)> {
    let mut keys: Vec<(f64, usize)> = shifts
        .iter()
        .flat_map(|&sh| {
            key_scores
                .iter()
                .enumerate()
                .map(move |(j, &k)| ((k + sh).to_f64_lossy(), j))
        })
        .collect();
    keys.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best: Option<(usize, usize, f64)> = None;
    for (i, &q) in query_scores.iter().enumerate() {
        let q = q.to_f64_lossy();
        let pos = keys.partition_point(|&(k, _)| k < q);
        for &(k, j) in keys[pos.saturating_sub(1)..(pos + 1).min(keys.len())].iter() {
            let gap = (q - k).abs();
            if best.map_or(true, |(_, _, g)| gap < g) {
                best = Some((i, j, gap));
            }
        }
    }
    best
}

/// Errors with the offending pair when some query and shifted key are
/// closer than `min_gap`; otherwise returns the smallest gap.
pub fn check_score_gap<T: Real>(
    query_scores: &[T],
    key_scores: &[T],
    shifts: &[T],
    min_gap: f64,
) -> Result<f64> {
    match closest_score_pair(query_scores, key_scores, shifts) {
        Some((query, key, gap)) if gap < min_gap => Err(Error::ScoreTie {
            query,
            key,
            gap,
            min_gap,
        }),
        Some((_, _, gap)) => Ok(gap),
        None => Ok(f64::INFINITY),
    }
}

fn check_upstream<T: Real>(seq: &TokenSequence<T>, upstream: ArrayView2<'_, T>) -> Result<()> {
    if upstream.dim() != (seq.n(), seq.d()) {
        return Err(Error::shape(format!(
            "upstream gradient is {:?}, output is {:?}",
            upstream.dim(),
            (seq.n(), seq.d())
        )));
    }
    check_finite(upstream.iter().copied(), "upstream gradient")
}

/// Gradients of `L` with respect to the query scores, key scores and the
/// value rows entering the kernel.
struct KernelGrads<T> {
    d_query_scores: Array1<T>,
    d_key_scores: Array1<T>,
    d_values: Array2<T>,
}

fn row_dot<T: Real>(a: ArrayView2<'_, T>, b: ArrayView2<'_, T>) -> Array1<T> {
    a.outer_iter()
        .zip(b.outer_iter())
        .map(|(x, y)| x.dot(&y))
        .collect()
}

fn center_rows<T: Real>(mut a: Array2<T>) -> Array2<T> {
    if let Some(mean) = a.mean_axis(Axis(0)) {
        a -= &mean;
    }
    a
}

/// Backward pass of a sliced ReLU head for `L = <upstream, out>`.
pub fn relu_attention_backward<T: Real>(
    seq: &TokenSequence<T>,
    head: &HeadParams<T>,
    cfg: &KernelConfig,
    upstream: ArrayView2<'_, T>,
) -> Result<GradBundle<T>> {
    let grads = relu_kernel_grads(seq, head, cfg, upstream)?;
    Ok(assemble(seq, head, grads))
}

fn relu_kernel_grads<T: Real>(
    seq: &TokenSequence<T>,
    head: &HeadParams<T>,
    cfg: &KernelConfig,
    upstream: ArrayView2<'_, T>,
) -> Result<KernelGrads<T>> {
    check_upstream(seq, upstream)?;
    let fw = relu_forward_parts(seq, head, cfg)?;
    check_score_gap(
        fw.query_scores.as_slice().unwrap(),
        fw.key_scores.as_slice().unwrap(),
        &[T::zero()],
        DEFAULT_MIN_SCORE_GAP,
    )?;
    let n = seq.n();
    let d = seq.d();

    // c_i = U_i / D_i and f_i = <c_i, out_i>
    let mut c = upstream.to_owned();
    for (mut row, &den) in c.outer_iter_mut().zip(fw.denominator.iter()) {
        row /= den;
    }
    let f = row_dot(c.view(), fw.output.view());

    let d_query_scores: Array1<T> = (0..n)
        .map(|i| {
            let side = T::from_usize(fw.unit.count_below[i]).unwrap()
                - T::from_usize(fw.unit.count_above[i]).unwrap();
            c.row(i).dot(&fw.numerator.step.row(i)) - f[i] * side
        })
        .collect();

    let transposed = fw.plan.transposed();
    let mut carried = Array2::<T>::zeros((n, d + 1));
    carried.slice_mut(s![.., ..d]).assign(&c);
    carried.column_mut(d).assign(&f);
    let above = transposed.convolve_above(carried.view());
    let f_col = f.view().insert_axis(Axis(1));
    let below_f = transposed.convolve(f_col).step;

    let d_gamma = above.relu.slice(s![.., ..d]).to_owned();
    let d_key_scores: Array1<T> = (0..n)
        .map(|j| {
            -fw.gamma.row(j).dot(&above.step.slice(s![j, ..d])) + above.step[[j, d]]
                - below_f[[j, 0]]
        })
        .collect();

    let d_values = if cfg.centering {
        center_rows(d_gamma)
    } else {
        d_gamma
    };
    Ok(KernelGrads {
        d_query_scores,
        d_key_scores,
        d_values,
    })
}

/// Backward pass of a sliced bump head for `L = <upstream, out>`.
pub fn bump_attention_backward<T: Real>(
    seq: &TokenSequence<T>,
    head: &HeadParams<T>,
    cfg: &KernelConfig,
    upstream: ArrayView2<'_, T>,
) -> Result<GradBundle<T>> {
    check_upstream(seq, upstream)?;
    check_bump(seq, head, cfg)?;
    let query_scores = project_scores(seq, &head.query, &head.projection, head.slot)?;
    let key_scores = project_scores(seq, &head.key, &head.projection, head.slot)?;
    let values = value_vectors(seq, &head.value, false);
    let b = T::from_f64_lossy(cfg.bandwidth);
    let terms = bump_terms(b);
    let shifts: Vec<T> = terms.iter().map(|&(sh, _)| sh).collect();
    let queries = query_scores.as_slice().unwrap();
    check_score_gap(
        queries,
        key_scores.as_slice().unwrap(),
        &shifts,
        DEFAULT_MIN_SCORE_GAP,
    )?;

    let scale = T::one() / (T::from_usize(seq.n()).unwrap() * b);
    let keys = key_scores.as_slice().unwrap();
    // the tent is symmetric, so the same window sums serve queries reading
    // values and keys reading the upstream gradient
    let (_, toward_keys) = WindowSums::new(keys, values.view()).apply(queries, b);
    let (d_values, toward_queries) = WindowSums::new(queries, upstream).apply(keys, b);
    let d_values = d_values * scale;
    let d_query_scores = row_dot(upstream, toward_keys.view()) * scale;
    let d_key_scores = row_dot(values.view(), toward_queries.view()) * scale;
    Ok(assemble(
        seq,
        head,
        KernelGrads {
            d_query_scores,
            d_key_scores,
            d_values,
        },
    ))
}

/// Dispatches on `variant`.
pub fn attention_backward<T: Real>(
    seq: &TokenSequence<T>,
    head: &HeadParams<T>,
    cfg: &KernelConfig,
    variant: Variant,
    upstream: ArrayView2<'_, T>,
) -> Result<GradBundle<T>> {
    match variant {
        Variant::Relu => relu_attention_backward(seq, head, cfg, upstream),
        Variant::Bump => bump_attention_backward(seq, head, cfg, upstream),
    }
}

/// Pushes kernel-level gradients through the projection and affine maps.
fn assemble<T: Real>(
    seq: &TokenSequence<T>,
    head: &HeadParams<T>,
    g: KernelGrads<T>,
) -> GradBundle<T> {
    let mut out = GradBundle::zeros(seq.n(), head);
    let x = seq.view();
    score_backward(
        &head.query,
        &head.projection,
        head.slot,
        x,
        &g.d_query_scores,
        &mut out.d_query,
        &mut out.d_projection,
        &mut out.d_tokens,
    );
    score_backward(
        &head.key,
        &head.projection,
        head.slot,
        x,
        &g.d_key_scores,
        &mut out.d_key,
        &mut out.d_projection,
        &mut out.d_tokens,
    );
    affine_backward(
        &head.value,
        x,
        g.d_values.view(),
        &mut out.d_value,
        &mut out.d_tokens,
    );
    out
}

#[allow(clippy::too_many_arguments)]
fn score_backward<T: Real>(
    map: &Affine<T>,
    proj: &Projection<T>,
    slot: usize,
    x: ArrayView2<'_, T>,
    d_scores: &Array1<T>,
    d_map: &mut Affine<T>,
    d_proj: &mut Projection<T>,
    d_tokens: &mut Array2<T>,
) {
    let u = map.apply_rows(x);
    let d_scores_col = d_scores.view().insert_axis(Axis(1));
    let du = match (proj, d_proj) {
        (
            Projection::Linear { weight, .. },
            Projection::Linear {
                weight: dw,
                bias: db,
            },
        ) => {
            let mut row = dw.row_mut(slot);
            row += &u.t().dot(d_scores);
            db[slot] += d_scores.sum();
            d_scores_col.dot(&weight.slice(s![slot..slot + 1, ..]))
        }
        (
            Projection::Mlp1 {
                hidden_weight,
                hidden_bias,
                output_weight,
                ..
            },
            Projection::Mlp1 {
                hidden_weight: dhw,
                hidden_bias: dhb,
                output_weight: dow,
                output_bias: dob,
            },
        ) => {
            let mut pre = u.dot(&hidden_weight.t());
            pre += hidden_bias;
            let act = pre.mapv(relu);
            let mut row = dow.row_mut(slot);
            row += &act.t().dot(d_scores);
            dob[slot] += d_scores.sum();
            let w2 = output_weight.row(slot);
            let mut d_pre = pre;
            for (mut r, &ds) in d_pre.outer_iter_mut().zip(d_scores.iter()) {
                for (p, &w) in r.iter_mut().zip(w2.iter()) {
                    *p = if *p > T::zero() { ds * w } else { T::zero() };
                }
            }
            *dhw += &d_pre.t().dot(&u);
            *dhb += &d_pre.sum_axis(Axis(0));
            d_pre.dot(hidden_weight)
        }
        _ => unreachable!("gradient projection mirrors the forward projection"),
    };
    affine_backward(map, x, du.view(), d_map, d_tokens);
}

fn affine_backward<T: Real>(
    map: &Affine<T>,
    x: ArrayView2<'_, T>,
    du: ArrayView2<'_, T>,
    d_map: &mut Affine<T>,
    d_tokens: &mut Array2<T>,
) {
    d_map.matrix += &du.t().dot(&x);
    d_map.bias += &du.sum_axis(Axis(0));
    *d_tokens += &du.dot(&map.matrix);
}

/// Gradient of `<U, multi_head_layer(x)>`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadGrad<T = f64> {
    /// Total token gradient, residual path included.
    pub d_tokens: Array2<T>,
    /// Per-head parameter gradients; `d_tokens` of each holds that head's share.
    pub heads: Vec<GradBundle<T>>,
}

pub fn multi_head_backward<T: Real>(
    seq: &TokenSequence<T>,
    heads: &[HeadParams<T>],
    cfg: &KernelConfig,
    variant: Variant,
    upstream: ArrayView2<'_, T>,
) -> Result<MultiHeadGrad<T>> {
    check_upstream(seq, upstream)?;
    let bundles: Vec<GradBundle<T>> = heads
        .par_iter()
        .map(|head| {
            let out = attention_forward(seq, head, cfg, variant)?;
            let local = upstream.dot(&head.mixer);
            let mut bundle = attention_backward(seq, head, cfg, variant, local.view())?;
            bundle.d_mixer = upstream.t().dot(&out);
            Ok(bundle)
        })
        .collect::<Result<_>>()?;
    let mut d_tokens = upstream.to_owned();
    for b in &bundles {
        d_tokens += &b.d_tokens;
    }
    Ok(MultiHeadGrad {
        d_tokens,
        heads: bundles,
    })
}

fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn step<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        T::zero()
    }
}

/// Quadratic-time backward pass of the ReLU head, written pair by pair.
pub fn relu_attention_backward_naive<T: Real>(
    seq: &TokenSequence<T>,
    head: &HeadParams<T>,
    cfg: &KernelConfig,
    upstream: ArrayView2<'_, T>,
) -> Result<GradBundle<T>> {
    check_upstream(seq, upstream)?;
    cfg.validate::<T>()?;
    head.validate(seq.d())?;
    let q = project_scores(seq, &head.query, &head.projection, head.slot)?;
    let k = project_scores(seq, &head.key, &head.projection, head.slot)?;
    let gamma = value_vectors(seq, &head.value, cfg.centering);
    let n = seq.n();
    let d = seq.d();
    let eps = T::from_f64_lossy(cfg.epsilon);

    let mut d_q = Array1::<T>::zeros(n);
    let mut d_k = Array1::<T>::zeros(n);
    let mut d_gamma = Array2::<T>::zeros((n, d));
    for i in 0..n {
        let den = (0..n).fold(T::zero(), |acc, l| acc + (q[i] - k[l]).abs()) + eps;
        let mut out = vec![T::zero(); d];
        for j in 0..n {
            let w = relu(q[i] - k[j]) / den;
            for (o, &g) in out.iter_mut().zip(gamma.row(j)) {
                *o += w * g;
            }
        }
        let c: Vec<T> = upstream.row(i).iter().map(|&u| u / den).collect();
        let f = c
            .iter()
            .zip(&out)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        for j in 0..n {
            let diff = q[i] - k[j];
            let cg = c
                .iter()
                .zip(gamma.row(j))
                .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
            d_q[i] += step(diff) * cg - f * sign(diff);
            d_k[j] += -step(diff) * cg + f * sign(diff);
            let r = relu(diff);
            for (dg, &cc) in d_gamma.row_mut(j).iter_mut().zip(&c) {
                *dg += r * cc;
            }
        }
    }
    let d_values = if cfg.centering {
        center_rows(d_gamma)
    } else {
        d_gamma
    };
    Ok(assemble(
        seq,
        head,
        KernelGrads {
            d_query_scores: d_q,
            d_key_scores: d_k,
            d_values,
        },
    ))
}

/// Quadratic-time backward pass of the bump head.
pub fn bump_attention_backward_naive<T: Real>(
    seq: &TokenSequence<T>,
    head: &HeadParams<T>,
    cfg: &KernelConfig,
    upstream: ArrayView2<'_, T>,
) -> Result<GradBundle<T>> {
    check_upstream(seq, upstream)?;
    check_bump(seq, head, cfg)?;
    let q = project_scores(seq, &head.query, &head.projection, head.slot)?;
    let k = project_scores(seq, &head.key, &head.projection, head.slot)?;
    let values = value_vectors(seq, &head.value, false);
    let n = seq.n();
    let b = T::from_f64_lossy(cfg.bandwidth);
    let nt = T::from_usize(n).unwrap();

    let mut d_q = Array1::<T>::zeros(n);
    let mut d_k = Array1::<T>::zeros(n);
    let mut d_values = Array2::<T>::zeros((n, seq.d()));
    for i in 0..n {
        for j in 0..n {
            let diff = q[i] - k[j];
            let weight = relu(T::one() - diff.abs() / b) / nt;
            // derivative of relu(1 - |t|/b) is -sign(t)/b inside the support
            let slope = if diff.abs() < b {
                -sign(diff) / (b * nt)
            } else {
                T::zero()
            };
            let uv = upstream.row(i).dot(&values.row(j));
            d_q[i] += slope * uv;
            d_k[j] -= slope * uv;
            let mut row = d_values.row_mut(j);
            row.scaled_add(weight, &upstream.row(i));
        }
    }
    Ok(assemble(
        seq,
        head,
        KernelGrads {
            d_query_scores: d_q,
            d_key_scores: d_k,
            d_values,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::{random_head, random_sequence};
    use crate::types::ProjectionKind;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn upstream(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(rng))
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    fn max_abs(a: &[f64]) -> f64 {
        a.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    #[test]
    fn zero_upstream_gives_zero_bundle() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let seq = random_sequence(12, 4, &mut r);
        let head = random_head(4, ProjectionKind::Mlp1, 1, 0, &mut r);
        let up = Array2::zeros((12, 4));
        let g = relu_attention_backward(&seq, &head, &KernelConfig::relu(), up.view()).unwrap();
        assert_eq!(g, GradBundle::zeros(12, &head));

        let lin = random_head(4, ProjectionKind::Linear, 1, 0, &mut r);
        let g = bump_attention_backward(&seq, &lin, &KernelConfig::bump(0.5), up.view()).unwrap();
        assert_eq!(g, GradBundle::zeros(12, &lin));
    }

    #[test]
    fn zero_value_map_has_no_value_path() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let seq = random_sequence(9, 3, &mut r);
        let mut head = random_head(3, ProjectionKind::Linear, 1, 0, &mut r);
        head.value = Affine::zeros(3);
        let up = upstream(9, 3, &mut r);
        let cfg = KernelConfig::relu().with_centering(false);
        let g = relu_attention_backward(&seq, &head, &cfg, up.view()).unwrap();
        // the output is identically zero, so nothing but dV survives
        assert!(g.d_tokens.iter().all(|&x| x == 0.0));
        assert!(g.d_query.matrix.iter().all(|&x| x == 0.0));
        assert!(g.d_key.matrix.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn sliced_matches_naive_relu_backward() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for (n, d, kind, centering) in [
            (1, 1, ProjectionKind::Linear, true),
            (7, 3, ProjectionKind::Mlp1, true),
            (33, 5, ProjectionKind::Linear, false),
            (64, 8, ProjectionKind::Mlp1, false),
        ] {
            let seq = random_sequence(n, d, &mut r);
            let head = random_head(d, kind, 2, 1, &mut r);
            let up = upstream(n, d, &mut r);
            let cfg = KernelConfig::relu().with_centering(centering);
            let fast = relu_attention_backward(&seq, &head, &cfg, up.view())
                .unwrap()
                .flatten();
            let slow = relu_attention_backward_naive(&seq, &head, &cfg, up.view())
                .unwrap()
                .flatten();
            assert!(
                max_diff(&fast, &slow) <= 1e-10 * max_abs(&slow).max(1.0),
                "n={n}"
            );
        }
    }

    #[test]
    fn sliced_matches_naive_bump_backward() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        for (n, d, b) in [(1, 2, 0.5), (10, 3, 0.3), (50, 4, 1.5)] {
            let seq = random_sequence(n, d, &mut r);
            let head = random_head(d, ProjectionKind::Linear, 1, 0, &mut r);
            let up = upstream(n, d, &mut r);
            let cfg = KernelConfig::bump(b);
            let fast = bump_attention_backward(&seq, &head, &cfg, up.view())
                .unwrap()
                .flatten();
            let slow = bump_attention_backward_naive(&seq, &head, &cfg, up.view())
                .unwrap()
                .flatten();
            assert!(
                max_diff(&fast, &slow) <= 1e-10 * max_abs(&slow).max(1.0),
                "n={n}"
            );
        }
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let seq = random_sequence(20, 4, &mut r);
        let head = random_head(4, ProjectionKind::Mlp1, 1, 0, &mut r);
        let up = upstream(20, 4, &mut r);
        let cfg = KernelConfig::relu();
        let alpha = -2.75;
        let g1 = relu_attention_backward(&seq, &head, &cfg, up.view())
            .unwrap()
            .flatten();
        let scaled = &up * alpha;
        let g2 = relu_attention_backward(&seq, &head, &cfg, scaled.view())
            .unwrap()
            .flatten();
        let want: Vec<f64> = g1.iter().map(|x| x * alpha).collect();
        assert!(max_diff(&g2, &want) <= 1e-12 * max_abs(&want).max(1.0));
    }

    #[test]
    fn ties_are_reported() {
        // identical query and key maps put every query on its own key
        let seq = TokenSequence::<f64>::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let head = HeadParams::identity(1, Projection::linear(array![1.0], 0.0));
        let up = Array2::ones((2, 1));
        let err =
            relu_attention_backward(&seq, &head, &KernelConfig::relu(), up.view()).unwrap_err();
        assert!(matches!(err, Error::ScoreTie { gap, .. } if gap == 0.0));
    }

    #[test]
    fn bump_ties_include_shifted_keys() {
        let q = [0.5f64];
        let k = [0.0f64];
        assert!(check_score_gap(&q, &k, &[0.0], 1e-6).is_ok());
        let (_, _, gap) = closest_score_pair(&q, &k, &[-0.5, 0.0, 0.5]).unwrap();
        assert_eq!(gap, 0.0);
    }

    #[test]
    fn bump_flat_region_has_zero_gradient() {
        let seq =
            TokenSequence::<f64>::from_rows(&[vec![0.0, 1.0], vec![5.0, -1.0], vec![10.0, 2.0]])
                .unwrap();
        let mut head = HeadParams::identity(2, Projection::linear(array![1.0, 0.0], 0.0));
        head.key = Affine::new(Array2::eye(2), array![2.5, 0.0]).unwrap();
        let up = Array2::ones((3, 2));
        let g = bump_attention_backward(&seq, &head, &KernelConfig::bump(1.0), up.view()).unwrap();
        assert!(g.flatten().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn isolated_token_has_no_value_gradient() {
        // token 0 has the highest key score and the lowest query score, so it
        // neither receives nor gives attention weight
        let seq =
            TokenSequence::<f64>::from_rows(&[vec![-5.0, 1.0], vec![0.0, 2.0], vec![1.0, -1.0]])
                .unwrap();
        let mut head = HeadParams::identity(2, Projection::linear(array![1.0, 0.0], 0.0));
        head.key = Affine::new(-Array2::<f64>::eye(2), array![0.3, 0.0]).unwrap();
        let cfg = KernelConfig::relu().with_centering(false);
        let up = Array2::from_elem((3, 2), 0.7);
        let g = relu_kernel_grads(&seq, &head, &cfg, up.view()).unwrap();
        assert!(g.d_values.row(0).iter().all(|&x| x == 0.0));
        assert!(g.d_values.row(1).iter().any(|&x| x != 0.0));
    }

    #[test]
    fn flatten_roundtrip() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let seq = random_sequence(5, 3, &mut r);
        let head = random_head(3, ProjectionKind::Mlp1, 2, 1, &mut r);
        let flat = flatten_inputs(&seq, &head);
        let (s2, h2) = unflatten_inputs(&seq, &head, &flat).unwrap();
        assert_eq!(s2, seq);
        assert_eq!(h2, head);
        assert_eq!(flat.len(), GradBundle::zeros(5, &head).flatten().len());
    }

    #[test]
    fn multi_head_gradient_of_zero_mixers() {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let seq = random_sequence(6, 3, &mut r);
        let mut heads: Vec<_> = (0..2)
            .map(|h| random_head(3, ProjectionKind::Linear, 2, h, &mut r))
            .collect();
        for h in &mut heads {
            h.mixer = Array2::zeros((3, 3));
        }
        let up = upstream(6, 3, &mut r);
        let g = multi_head_backward(
            &seq,
            &heads,
            &KernelConfig::relu(),
            Variant::Relu,
            up.view(),
        )
        .unwrap();
        assert_eq!(g.d_tokens, up);
        for (b, h) in g.heads.iter().zip(&heads) {
            let out =
                crate::kernel::relu_attention_forward(&seq, h, &KernelConfig::relu()).unwrap();
            assert_eq!(b.d_mixer, up.t().dot(&out));
        }
    }
}
