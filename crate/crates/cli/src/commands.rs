use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use sliced_attention::bench::{
    loglog_slope, median_series, run_bench, write_bench_csv, BenchImpl, BenchSpec,
};
use sliced_attention::diagnostics::{
    cpd_quadratic_form, kernel_heatmap, relu_energy_identity_check, Grid,
};
use sliced_attention::expressivity::{match_sequences, MatchOptions, PhaseCounts, SequenceGroup};
use sliced_attention::gradcheck::{
    gradcheck_head, random_gradcheck_instance, GradCheckConfig, GradCheckReport,
};
use sliced_attention::random::{random_heads, random_sequence};
use sliced_attention::{
    attention_forward, io, Dtype, Error, HeadParams, KernelConfig, Projection, ProjectionKind,
    Real, Result, TokenSequence, Variant,
};

use crate::{
    BenchArgs, CommonArgs, CpdArgs, ExpressivityArgs, Failure, ForwardArgs, GradcheckArgs,
    HeatmapArgs, KernelArgs, ProjectionArg, PropertyFailure,
};

/// Error from a checking command: either it could not run or a check failed.
pub enum CheckError {
    Library(Error),
    Failed(PropertyFailure),
}

impl From<Error> for CheckError {
    fn from(e: Error) -> Self {
        CheckError::Library(e)
    }
}

impl CheckError {
    pub fn tagged(self, name: &'static str) -> Failure {
        match self {
            CheckError::Library(e) => Failure::Library(name, e),
            CheckError::Failed(f) => Failure::Property(name, f),
        }
    }
}

pub const GRAD_TOLERANCE: f64 = 1e-5;
pub const GRAD_MIN_GAP: f64 = 1e-3;
pub const CPD_TOLERANCE: f64 = 1e-12;
pub const MATCH_TOLERANCE: f64 = 1e-6;

fn kernel_config(k: &KernelArgs) -> KernelConfig {
    let variant = Variant::from(k.variant);
    let mut cfg = KernelConfig::for_variant(variant)
        .with_dtype(k.dtype.into())
        .with_bandwidth(k.bandwidth);
    if variant == Variant::Relu {
        cfg = cfg.with_centering(!k.no_centering);
    }
    if let Some(e) = k.epsilon {
        cfg = cfg.with_epsilon(e);
    }
    cfg
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads == 0 {
        return Err(Error::InvalidParameter(
            "--threads must be at least 1".into(),
        ));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn emit(output: Option<&Path>, text: &str) -> Result<()> {
    match output {
        Some(path) => std::fs::write(path, text)
            .map_err(|e| Error::Internal(format!("{}: {e}", path.display()))),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Error::Internal(format!("stdout: {e}"))),
    }
}

fn emit_report<T: Serialize>(common: &CommonArgs, report: &T) -> Result<()> {
    let text =
        serde_json::to_string_pretty(report).map_err(|e| Error::Internal(e.to_string()))? + "\n";
    emit(common.output.as_deref(), &text)
}

fn mixed_heads<T: Real>(
    seq: &TokenSequence,
    heads: &[HeadParams],
    cfg: &KernelConfig,
    variant: Variant,
    residual: bool,
) -> Result<Array2<f64>> {
    let seq_t: TokenSequence<T> = seq.cast();
    let mut out: Array2<T> = if residual {
        seq_t.data().clone()
    } else {
        Array2::zeros((seq.n(), seq.d()))
    };
    for head in heads {
        let head_t: HeadParams<T> = head.cast();
        out += &attention_forward(&seq_t, &head_t, cfg, variant)?.dot(&head_t.mixer.t());
    }
    Ok(out.mapv(|x| x.to_f64_lossy()))
}

pub fn forward(a: ForwardArgs) -> Result<()> {
    let seq = io::read_tokens(&a.input)?;
    let heads = match &a.params {
        Some(path) => io::read_params(path, seq.d())?,
        None => {
            if a.heads == 0 {
                return Err(Error::InvalidParameter("--heads must be at least 1".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(a.common.seed);
            random_heads(seq.d(), a.heads, ProjectionKind::Linear, &mut rng)
        }
    };
    let cfg = kernel_config(&a.kernel);
    let variant = Variant::from(a.kernel.variant);
    let out = with_pool(a.common.threads, || match cfg.dtype {
        Dtype::F32 => mixed_heads::<f32>(&seq, &heads, &cfg, variant, a.residual),
        Dtype::F64 => mixed_heads::<f64>(&seq, &heads, &cfg, variant, a.residual),
    })??;
    let out = TokenSequence::new(out)?;
    match &a.common.output {
        Some(path) => io::write_tokens(path, &out),
        None => emit(None, &(io::tokens_to_json(&out) + "\n")),
    }
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let variant = Variant::from(a.kernel.variant);
    let impls = if a.impls.is_empty() {
        let sliced = match variant {
            Variant::Relu => BenchImpl::SlicedRelu,
            Variant::Bump => BenchImpl::SlicedBump,
        };
        vec![sliced, BenchImpl::NaiveRelu]
    } else {
        a.impls
            .iter()
            .map(|s| s.parse())
            .collect::<Result<Vec<_>>>()?
    };
    let spec = BenchSpec {
        n_grid: a.n_grid,
        d: a.d,
        heads: a.heads,
        impls: impls.clone(),
        reps: a.reps,
        dtype: a.kernel.dtype.into(),
        epsilon: a.kernel.epsilon,
        centering: !a.kernel.no_centering,
        bandwidth: a.kernel.bandwidth,
        seed: a.common.seed,
        force_naive: a.force_naive,
        ..Default::default()
    };
    let outcome = with_pool(a.common.threads, || run_bench(&spec))??;
    for (n, which) in &outcome.skipped {
        eprintln!(
            "skipped {which} at n = {n}: above the quadratic cap, pass --force-naive to run it"
        );
    }
    for g in &outcome.gates {
        eprintln!(
            "gate {} n = {} on {} tokens: relative error {:e}",
            g.implementation, g.n, g.tokens, g.rel_error
        );
    }
    for r in &outcome.records {
        eprintln!(
            "{} n = {} median {:.4} ms over {} reps on {} thread(s)",
            r.implementation, r.n, r.median_ms, r.reps, r.threads
        );
    }
    for which in impls {
        let series = median_series(&outcome.records, which);
        if let Ok(slope) = loglog_slope(&series) {
            eprintln!("{which}: log-log slope {slope:.3}");
        }
    }
    let mut buf = Vec::new();
    write_bench_csv(&outcome.records, &mut buf)?;
    emit(
        a.common.output.as_deref(),
        std::str::from_utf8(&buf).expect("ASCII CSV"),
    )
}

#[derive(Serialize)]
struct GradcheckSummary {
    pass: bool,
    variant: Variant,
    tolerance: f64,
    min_score_gap_required: f64,
    instances: usize,
    max_rel_error: f64,
    worst_instance: usize,
    reports: Vec<GradCheckReport>,
}

pub fn gradcheck(a: GradcheckArgs) -> std::result::Result<(), CheckError> {
    let cfg = kernel_config(&a.kernel);
    if cfg.dtype != Dtype::F64 {
        return Err(Error::Unsupported("gradient checks run in f64 only".into()).into());
    }
    if a.instances == 0 {
        return Err(Error::InvalidParameter("--instances must be at least 1".into()).into());
    }
    let variant = Variant::from(a.kernel.variant);
    let kind = match a.projection {
        ProjectionArg::Linear => ProjectionKind::Linear,
        ProjectionArg::Mlp1 => ProjectionKind::Mlp1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.common.seed);
    let mut reports = Vec::with_capacity(a.instances);
    for i in 0..a.instances {
        let obj = random_gradcheck_instance(a.n, a.d, variant, kind, &cfg, GRAD_MIN_GAP, &mut rng)?;
        let fd = GradCheckConfig {
            step: a.step,
            directions: usize::MAX,
            seed: a.common.seed.wrapping_add(i as u64),
        };
        reports.push(with_pool(a.common.threads, || {
            gradcheck_head(&obj, GRAD_MIN_GAP, &fd)
        })??);
    }
    let (worst_instance, max_rel_error) =
        reports
            .iter()
            .map(|r| r.max_rel_error)
            .enumerate()
            .fold(
                (0, 0.0),
                |best, (i, e)| if e > best.1 { (i, e) } else { best },
            );
    let pass = max_rel_error <= GRAD_TOLERANCE;
    let summary = GradcheckSummary {
        pass,
        variant,
        tolerance: GRAD_TOLERANCE,
        min_score_gap_required: GRAD_MIN_GAP,
        instances: a.instances,
        max_rel_error,
        worst_instance,
        reports,
    };
    emit_report(&a.common, &summary)?;
    if pass {
        Ok(())
    } else {
        Err(CheckError::Failed(PropertyFailure(format!(
            "relative error {max_rel_error:e} exceeds {GRAD_TOLERANCE:e} on instance {worst_instance}"
        ))))
    }
}

#[derive(Serialize)]
struct CpdSummary {
    pass: bool,
    trials: usize,
    points: usize,
    zero_weights_value: f64,
    min_form: f64,
    min_normalized_form: f64,
    max_form_mismatch: f64,
    identity_pairs: usize,
    identity_max_deviation: f64,
}

pub fn cpd(a: CpdArgs) -> std::result::Result<(), CheckError> {
    if a.trials == 0 || a.n < 2 {
        return Err(Error::InvalidParameter(
            "need at least one trial of at least two points".into(),
        )
        .into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.common.seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let zero = cpd_quadratic_form(
        &(0..a.n).map(|i| i as f64).collect::<Vec<_>>(),
        &vec![0.0; a.n],
    )?;
    let (mut min_form, mut min_normalized, mut mismatch) = (f64::INFINITY, f64::INFINITY, 0.0f64);
    for _ in 0..a.trials {
        let x: Vec<f64> = (0..a.n).map(|_| normal(&mut rng)).collect();
        let raw: Vec<f64> = (0..a.n).map(|_| normal(&mut rng)).collect();
        let mean = raw.iter().sum::<f64>() / a.n as f64;
        let gamma: Vec<f64> = raw.iter().map(|g| g - mean).collect();
        let norm2: f64 = gamma.iter().map(|g| g * g).sum();
        let form = cpd_quadratic_form(&x, &gamma)?;
        min_form = min_form.min(form.relu_form);
        min_normalized = min_normalized.min(form.relu_form / norm2);
        mismatch = mismatch.max((form.relu_form - form.energy_form).abs());
    }
    let pairs: Vec<(f64, f64)> = (0..a.pairs)
        .map(|_| {
            let s = 10f64.powf(12.0 * normal(&mut rng).tanh());
            (s * normal(&mut rng), s * normal(&mut rng))
        })
        .collect();
    let deviation = relu_energy_identity_check(&pairs);
    let pass = zero.relu_form == 0.0
        && min_form >= -CPD_TOLERANCE
        && min_normalized > CPD_TOLERANCE
        && mismatch <= CPD_TOLERANCE
        && deviation == 0.0;
    emit_report(
        &a.common,
        &CpdSummary {
            pass,
            trials: a.trials,
            points: a.n,
            zero_weights_value: zero.relu_form,
            min_form,
            min_normalized_form: min_normalized,
            max_form_mismatch: mismatch,
            identity_pairs: a.pairs,
            identity_max_deviation: deviation,
        },
    )?;
    if pass {
        Ok(())
    } else {
        Err(CheckError::Failed(PropertyFailure(format!(
            "min form {min_form:e}, min normalized form {min_normalized:e}, mismatch {mismatch:e}, identity deviation {deviation:e}"
        ))))
    }
}

#[derive(Serialize)]
struct ExpressivitySummary {
    pass: bool,
    p: usize,
    n: usize,
    d: usize,
    layers: usize,
    bound: usize,
    phase_counts: PhaseCounts,
    max_error: f64,
    tolerance: f64,
    delta: Option<f64>,
    threshold: Option<f64>,
    direction: Option<Vec<f64>>,
}

pub fn expressivity(a: ExpressivityArgs) -> std::result::Result<(), CheckError> {
    if a.p == 0 || a.n == 0 {
        return Err(Error::InvalidParameter("--p and --n must be positive".into()).into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.common.seed);
    let group = |rng: &mut ChaCha8Rng| {
        SequenceGroup::new((0..a.p).map(|_| random_sequence(a.n, a.d, rng)).collect())
    };
    let sources = group(&mut rng)?;
    let targets = group(&mut rng)?;
    let opts = MatchOptions {
        seed: a.common.seed,
        ..Default::default()
    };
    let plan = match_sequences(&sources, &targets, opts)?;
    let reached = with_pool(a.common.threads, || plan.apply(&sources))??;
    let max_error = reached.max_abs_diff(&targets)?;
    let pass = plan.layers.len() <= plan.bound && max_error <= MATCH_TOLERANCE;
    emit_report(
        &a.common,
        &ExpressivitySummary {
            pass,
            p: a.p,
            n: a.n,
            d: a.d,
            layers: plan.layers.len(),
            bound: plan.bound,
            phase_counts: plan.phase_counts,
            max_error,
            tolerance: MATCH_TOLERANCE,
            delta: plan.delta,
            threshold: plan.threshold,
            direction: plan.direction.as_ref().map(|e| e.to_vec()),
        },
    )?;
    if pass {
        Ok(())
    } else {
        Err(CheckError::Failed(PropertyFailure(format!(
            "{} layers (bound {}), max error {max_error:e}",
            plan.layers.len(),
            plan.bound
        ))))
    }
}

pub fn heatmap(a: HeatmapArgs) -> Result<()> {
    let (projection, slot) = match &a.params {
        Some(path) => {
            let head = io::read_params(path, 2)?.swap_remove(0);
            (head.projection, head.slot)
        }
        None => {
            if a.direction.len() != 2 {
                return Err(Error::Shape(format!(
                    "--direction needs 2 entries, got {}",
                    a.direction.len()
                )));
            }
            (
                Projection::linear(Array1::from(a.direction.clone()), 0.0),
                0,
            )
        }
    };
    let query: [f64; 2] = a
        .query
        .as_slice()
        .try_into()
        .map_err(|_| Error::Shape(format!("--query needs 2 entries, got {}", a.query.len())))?;
    if !(a.half_width > 0.0) {
        return Err(Error::InvalidParameter(
            "--half-width must be positive".into(),
        ));
    }
    let grid = Grid::square(a.half_width, a.points);
    let map = kernel_heatmap(
        &projection,
        slot,
        query,
        &grid,
        a.kernel.variant.into(),
        a.kernel.bandwidth,
    )?;
    let mut buf = Vec::new();
    map.write_csv(&mut buf)?;
    emit(
        a.common.output.as_deref(),
        std::str::from_utf8(&buf).expect("ASCII CSV"),
    )
}
