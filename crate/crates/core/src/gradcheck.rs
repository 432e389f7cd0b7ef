//! Central finite-difference verification of analytic gradients.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::ddouble::DoubleDouble as Dd;
use crate::error::{Error, Result};
use crate::grad::{attention_backward, closest_score_pair, flatten_inputs, unflatten_inputs};
use crate::random::{random_head, random_sequence};
use crate::reference::{bump_attention_naive, naive_scores, relu_attention_naive};
use crate::types::{
    Affine, HeadParams, KernelConfig, Projection, ProjectionKind, TokenSequence, Variant,
};

/// A scalar function of a flat parameter vector.
pub trait Objective {
    fn dim(&self) -> usize;

    fn value(&self, x: &[f64]) -> Result<f64>;

    /// `value(plus) - value(minus)`. Objectives that can evaluate in higher
    /// precision override this so the difference is not swamped by the
    /// rounding of the two values.
    fn difference(&self, plus: &[f64], minus: &[f64]) -> Result<f64> {
        Ok(self.value(plus)? - self.value(minus)?)
    }

    /// Whether `a` and `b` lie on the same smooth piece. Differences across
    /// a kink are not comparable with a derivative.
    fn same_piece(&self, _a: &[f64], _b: &[f64]) -> bool {
        true
    }

    /// Distance to the nearest kink in score space, if the objective has any.
    fn min_gap(&self, _x: &[f64]) -> f64 {
        f64::INFINITY
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Coordinates to compare; all of them when this is at least the dimension.
    pub directions: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            directions: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub step_size: f64,
    pub min_score_gap: f64,
    pub checked: usize,
    /// Coordinates dropped because a perturbation crossed a kink.
    pub skipped: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_difference(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `objective` at `point`.
///
/// Coordinates are drawn at random without replacement. A coordinate whose
/// perturbation leaves the smooth piece of `point` is skipped and another
/// one is drawn in its place.
pub fn finite_difference_check<O: Objective + ?Sized>(
    objective: &O,
    point: &[f64],
    analytic: &[f64],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let dim = objective.dim();
    if !(cfg.step > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "finite-difference step must be > 0, got {}",
            cfg.step
        )));
    }
    if point.len() != dim || analytic.len() != dim {
        return Err(Error::shape(format!(
            "objective has {dim} coordinates, point has {} and gradient {}",
            point.len(),
            analytic.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let order: Vec<usize> = if cfg.directions >= dim {
        (0..dim).collect()
    } else {
        sample(&mut rng, dim, dim).into_vec()
    };
    let wanted = cfg.directions.min(dim);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coordinate: 0,
        step_size: cfg.step,
        min_score_gap: objective.min_gap(point),
        checked: 0,
        skipped: 0,
    };
    let mut plus = point.to_vec();
    let mut minus = point.to_vec();
    for &coord in &order {
        if report.checked == wanted {
            break;
        }
        plus[coord] = point[coord] + cfg.step;
        minus[coord] = point[coord] - cfg.step;
        let smooth = objective.same_piece(point, &plus) && objective.same_piece(point, &minus);
        if smooth {
            // the realised step, not 2h: x + h and x - h are rounded
            let width = plus[coord] - minus[coord];
            let numeric = objective.difference(&plus, &minus)? / width;
            let err = relative_difference(analytic[coord], numeric);
            if err > report.max_rel_error || report.checked == 0 {
                report.max_rel_error = err;
                report.worst_coordinate = coord;
            }
            report.checked += 1;
        } else {
            report.skipped += 1;
        }
        plus[coord] = point[coord];
        minus[coord] = point[coord];
    }
    Ok(report)
}

/// `L(x) = <U, head(x)>` evaluated with the quadratic reference kernels, as
/// a function of the flattened tokens and head parameters.
#[derive(Debug, Clone)]
pub struct HeadObjective {
    pub seq: TokenSequence,
    pub head: HeadParams,
    pub cfg: KernelConfig,
    pub variant: Variant,
    pub upstream: Array2<f64>,
}

impl HeadObjective {
    pub fn new(
        seq: TokenSequence,
        head: HeadParams,
        cfg: KernelConfig,
        variant: Variant,
        upstream: Array2<f64>,
    ) -> Result<Self> {
        if upstream.dim() != (seq.n(), seq.d()) {
            return Err(Error::shape(format!(
                "upstream gradient is {:?}, output is {:?}",
                upstream.dim(),
                (seq.n(), seq.d())
            )));
        }
        Ok(Self {
            seq,
            head,
            cfg,
            variant,
            upstream,
        })
    }

    pub fn point(&self) -> Vec<f64> {
        flatten_inputs(&self.seq, &self.head)
    }

    /// Gradient from the sliced backward pass, in the order of [`Self::point`].
    pub fn analytic(&self) -> Result<Vec<f64>> {
        attention_backward(
            &self.seq,
            &self.head,
            &self.cfg,
            self.variant,
            self.upstream.view(),
        )
        .map(|g| g.flatten())
    }

    fn unpack(&self, x: &[f64]) -> Result<(TokenSequence, HeadParams)> {
        unflatten_inputs(&self.seq, &self.head, x)
    }

    fn shifts(&self) -> Vec<f64> {
        match self.variant {
            Variant::Relu => vec![0.0],
            Variant::Bump => vec![-self.cfg.bandwidth, 0.0, self.cfg.bandwidth],
        }
    }

    /// Sign pattern of every score difference and of every hidden unit of
    /// the projection.
    fn signature(&self, x: &[f64]) -> Option<Vec<bool>> {
        let (seq, head) = self.unpack(x).ok()?;
        let (q, k) = naive_scores(&seq, &head);
        let mut sig = Vec::new();
        for sh in self.shifts() {
            for &qi in &q {
                for &kj in &k {
                    sig.push(qi - kj - sh > 0.0);
                }
            }
        }
        sig.extend(hidden_preactivations(&seq, &head).iter().map(|&h| h > 0.0));
        Some(sig)
    }
}

impl HeadObjective {
    /// The reference kernel transcribed in double-double arithmetic.
    fn extended_value(&self, x: &[f64]) -> Result<Dd> {
        let (seq, head) = self.unpack(x)?;
        let n = seq.n();
        let d = seq.d();
        let rows: Vec<Vec<Dd>> = seq
            .data()
            .outer_iter()
            .map(|r| r.iter().map(|&v| Dd::from(v)).collect())
            .collect();
        let q: Vec<Dd> = rows
            .iter()
            .map(|x| dd_score(&head.projection, &dd_affine(&head.query, x), head.slot))
            .collect();
        let k: Vec<Dd> = rows
            .iter()
            .map(|x| dd_score(&head.projection, &dd_affine(&head.key, x), head.slot))
            .collect();
        let mut v: Vec<Vec<Dd>> = rows.iter().map(|x| dd_affine(&head.value, x)).collect();
        let nd = Dd::from(n);

        let weight: Box<dyn Fn(usize, usize) -> Dd> = match self.variant {
            Variant::Relu => {
                if self.cfg.centering {
                    for c in 0..d {
                        let mean = v.iter().map(|r| r[c]).sum::<Dd>() / nd;
                        for r in &mut v {
                            r[c] -= mean;
                        }
                    }
                }
                let eps = Dd::from(self.cfg.epsilon);
                let norms: Vec<Dd> = q
                    .iter()
                    .map(|&qi| k.iter().map(|&kl| (qi - kl).abs()).sum::<Dd>() + eps)
                    .collect();
                Box::new(move |i, j| (q[i] - k[j]).relu() / norms[i])
            }
            Variant::Bump => {
                let b = Dd::from(self.cfg.bandwidth);
                Box::new(move |i, j| (Dd::from(1.0) - (q[i] - k[j]).abs() / b).relu() / nd)
            }
        };
        let mut total = Dd::ZERO;
        for i in 0..n {
            for (j, vj) in v.iter().enumerate() {
                let w = weight(i, j);
                for (c, &vjc) in vj.iter().enumerate() {
                    total += Dd::from(self.upstream[[i, c]]) * (w * vjc);
                }
            }
        }
        Ok(total)
    }
}

fn dd_affine(map: &Affine, x: &[Dd]) -> Vec<Dd> {
    (0..map.output_dim())
        .map(|r| {
            x.iter()
                .enumerate()
                .fold(Dd::from(map.bias[r]), |acc, (c, &xc)| {
                    acc + Dd::from(map.matrix[[r, c]]) * xc
                })
        })
        .collect()
}

fn dd_score(proj: &Projection, u: &[Dd], head: usize) -> Dd {
    let dot = |w: ndarray::ArrayView1<'_, f64>, x: &[Dd], init: f64| {
        w.iter()
            .zip(x)
            .fold(Dd::from(init), |acc, (&wc, &xc)| acc + Dd::from(wc) * xc)
    };
    match proj {
        Projection::Linear { weight, bias } => dot(weight.row(head), u, bias[head]),
        Projection::Mlp1 {
            hidden_weight,
            hidden_bias,
            output_weight,
            output_bias,
        } => {
            let hidden: Vec<Dd> = (0..hidden_weight.nrows())
                .map(|h| dot(hidden_weight.row(h), u, hidden_bias[h]).relu())
                .collect();
            dot(output_weight.row(head), &hidden, output_bias[head])
        }
    }
}

/// Hidden pre-activations of an MLP projection at every mapped query and
/// key; empty for a linear projection.
pub fn hidden_preactivations(seq: &TokenSequence, head: &HeadParams) -> Vec<f64> {
    let Projection::Mlp1 {
        hidden_weight,
        hidden_bias,
        ..
    } = &head.projection
    else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for map in [&head.query, &head.key] {
        let u = map.apply_rows(seq.view());
        let mut pre = u.dot(&hidden_weight.t());
        pre += hidden_bias;
        out.extend(pre.iter().copied());
    }
    out
}

impl Objective for HeadObjective {
    fn dim(&self) -> usize {
        self.point().len()
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        let (seq, head) = self.unpack(x)?;
        let out = match self.variant {
            Variant::Relu => relu_attention_naive(&seq, &head, &self.cfg)?,
            Variant::Bump => bump_attention_naive(&seq, &head, &self.cfg)?,
        };
        Ok((&out * &self.upstream).sum())
    }

    fn difference(&self, plus: &[f64], minus: &[f64]) -> Result<f64> {
        let hi = self.extended_value(plus)?;
        let lo = self.extended_value(minus)?;
        Ok((hi - lo).to_f64())
    }

    fn same_piece(&self, a: &[f64], b: &[f64]) -> bool {
        match (self.signature(a), self.signature(b)) {
            (Some(sa), Some(sb)) => sa == sb,
            _ => false,
        }
    }

    fn min_gap(&self, x: &[f64]) -> f64 {
        let Ok((seq, head)) = self.unpack(x) else {
            return 0.0;
        };
        let (q, k) = naive_scores(&seq, &head);
        closest_score_pair(q.as_slice().unwrap(), k.as_slice().unwrap(), &self.shifts())
            .map_or(f64::INFINITY, |(_, _, gap)| gap)
    }
}

/// Runs the finite-difference check of one head against the reference
/// kernel. Errors if some score pair is closer than `min_gap`.
pub fn gradcheck_head(
    objective: &HeadObjective,
    min_gap: f64,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let point = objective.point();
    let gap = objective.min_gap(&point);
    if gap < min_gap {
        let (q, k) = naive_scores(&objective.seq, &objective.head);
        let (query, key, gap) = closest_score_pair(
            q.as_slice().unwrap(),
            k.as_slice().unwrap(),
            &objective.shifts(),
        )
        .expect("nonempty scores");
        return Err(Error::ScoreTie {
            query,
            key,
            gap,
            min_gap,
        });
    }
    let analytic = objective.analytic()?;
    finite_difference_check(objective, &point, &analytic, cfg)
}

/// Random head instance whose score pairs and hidden units all stay at
/// least `margin` away from their kinks. Gives up after 10 000 draws.
pub fn random_gradcheck_instance<R: Rng + ?Sized>(
    n: usize,
    d: usize,
    variant: Variant,
    kind: ProjectionKind,
    cfg: &KernelConfig,
    margin: f64,
    rng: &mut R,
) -> Result<HeadObjective> {
    const ATTEMPTS: usize = 10_000;
    for _ in 0..ATTEMPTS {
        let seq = random_sequence(n, d, rng);
        let head = random_head(d, kind, 1, 0, rng);
        let upstream = Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(rng));
        let obj = HeadObjective::new(seq, head, *cfg, variant, upstream)?;
        let hidden_ok = hidden_preactivations(&obj.seq, &obj.head)
            .iter()
            .all(|h| h.abs() >= margin);
        if hidden_ok && obj.min_gap(&obj.point()) >= margin {
            return Ok(obj);
        }
    }
    Err(Error::Degenerate(format!(
        "no instance with n={n}, d={d} kept all kinks {margin:e} away after {ATTEMPTS} draws"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Linear(Vec<f64>);

    impl Objective for Linear {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn value(&self, x: &[f64]) -> Result<f64> {
            Ok(self.0.iter().zip(x).map(|(c, x)| c * x).sum())
        }
    }

    struct Square(usize);

    impl Objective for Square {
        fn dim(&self) -> usize {
            self.0
        }
        fn value(&self, x: &[f64]) -> Result<f64> {
            Ok(x.iter().map(|v| v * v).sum())
        }
    }

    #[test]
    fn exact_for_linear_functions() {
        let c = vec![1.5, -2.0, 0.25, 7.0];
        let report = finite_difference_check(
            &Linear(c.clone()),
            &[0.3, -1.0, 2.0, 0.0],
            &c,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-9, "{report:?}");
        assert_eq!(report.checked, 4);
    }

    #[test]
    fn quadratic_at_origin() {
        let report = finite_difference_check(
            &Square(5),
            &[0.0; 5],
            &[0.0; 5],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-9);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let report = finite_difference_check(
            &Linear(vec![1.0, 2.0]),
            &[0.0, 0.0],
            &[1.0, 2.5],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error > 0.1);
        assert_eq!(report.worst_coordinate, 1);
    }

    #[test]
    fn rejects_nonpositive_step() {
        let cfg = GradCheckConfig {
            step: 0.0,
            ..Default::default()
        };
        assert!(finite_difference_check(&Square(1), &[0.0], &[0.0], &cfg).is_err());
    }

    #[test]
    fn sampled_coordinates_are_distinct() {
        let cfg = GradCheckConfig {
            directions: 3,
            ..Default::default()
        };
        let report = finite_difference_check(&Square(10), &[1.0; 10], &[2.0; 10], &cfg).unwrap();
        assert_eq!(report.checked, 3);
    }

    #[test]
    fn extended_value_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (variant, kind, cfg) in [
            (Variant::Relu, ProjectionKind::Mlp1, KernelConfig::relu()),
            (
                Variant::Relu,
                ProjectionKind::Linear,
                KernelConfig::relu().with_centering(false),
            ),
            (
                Variant::Bump,
                ProjectionKind::Linear,
                KernelConfig::bump(0.6),
            ),
        ] {
            let obj =
                random_gradcheck_instance(12, 3, variant, kind, &cfg, 1e-3, &mut rng).unwrap();
            let x = obj.point();
            let plain = obj.value(&x).unwrap();
            let extended = obj.extended_value(&x).unwrap().to_f64();
            assert!((plain - extended).abs() <= 1e-12 * plain.abs().max(1.0));
        }
    }

    #[test]
    fn relu_head_small_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cfg = KernelConfig::relu();
        let obj = random_gradcheck_instance(
            16,
            4,
            Variant::Relu,
            ProjectionKind::Mlp1,
            &cfg,
            1e-3,
            &mut rng,
        )
        .unwrap();
        let check = GradCheckConfig {
            directions: usize::MAX,
            ..Default::default()
        };
        let report = gradcheck_head(&obj, 1e-3, &check).unwrap();
        assert!(report.max_rel_error <= 1e-5, "{report:?}");
    }

    #[test]
    fn bump_head_small_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = KernelConfig::bump(0.8);
        let obj = random_gradcheck_instance(
            16,
            4,
            Variant::Bump,
            ProjectionKind::Linear,
            &cfg,
            1e-3,
            &mut rng,
        )
        .unwrap();
        let check = GradCheckConfig {
            directions: usize::MAX,
            ..Default::default()
        };
        let report = gradcheck_head(&obj, 1e-3, &check).unwrap();
        assert!(report.max_rel_error <= 1e-5, "{report:?}");
    }
}
