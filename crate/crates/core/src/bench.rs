//! Wall-clock scaling benchmarks of the sliced and quadratic kernels.

use std::fmt;
use std::hint::black_box;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernel::multi_head_layer;
use crate::random::{random_heads, random_sequence};
use crate::real::{Dtype, Real};
use crate::reference::{multi_head_layer_naive, relative_error, softmax_attention_naive};
use crate::types::{HeadParams, KernelConfig, ProjectionKind, TokenSequence, Variant};

/// Column order of the benchmark CSV.
pub const BENCH_CSV_HEADER: &str = "n,d,heads,impl,dtype,mean_ms,std_ms,reps";

/// Largest `n` at which quadratic kernels run unless forced.
pub const DEFAULT_NAIVE_CAP: usize = 1 << 13;

/// Tokens fed to the correctness gate when `n` is larger.
pub const GATE_TOKENS: usize = 2048;

pub const GATE_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BenchImpl {
    SlicedRelu,
    NaiveRelu,
    NaiveSoftmax,
    SlicedBump,
}

impl BenchImpl {
    pub const ALL: [BenchImpl; 4] = [
        BenchImpl::SlicedRelu,
        BenchImpl::NaiveRelu,
        BenchImpl::NaiveSoftmax,
        BenchImpl::SlicedBump,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BenchImpl::SlicedRelu => "sliced_relu",
            BenchImpl::NaiveRelu => "naive_relu",
            BenchImpl::NaiveSoftmax => "naive_softmax",
            BenchImpl::SlicedBump => "sliced_bump",
        }
    }

    pub fn is_quadratic(self) -> bool {
        matches!(self, BenchImpl::NaiveRelu | BenchImpl::NaiveSoftmax)
    }
}

impl fmt::Display for BenchImpl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BenchImpl {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|i| i.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown benchmark implementation {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub n: usize,
    pub d: usize,
    pub heads: usize,
    pub implementation: BenchImpl,
    pub dtype: Dtype,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub median_ms: f64,
    pub reps: usize,
    pub threads: usize,
}

#[derive(Debug, Clone)]
pub struct BenchSpec {
    pub n_grid: Vec<usize>,
    pub d: usize,
    pub heads: usize,
    pub impls: Vec<BenchImpl>,
    pub reps: usize,
    pub warmup: usize,
    pub dtype: Dtype,
    pub epsilon: Option<f64>,
    pub centering: bool,
    pub bandwidth: f64,
    pub seed: u64,
    pub naive_cap: usize,
    pub force_naive: bool,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            n_grid: (10..=14).map(|k| 1 << k).collect(),
            d: 16,
            heads: 1,
            impls: vec![BenchImpl::SlicedRelu],
            reps: 5,
            warmup: 1,
            dtype: Dtype::F64,
            epsilon: None,
            centering: true,
            bandwidth: 1.0,
            seed: 0,
            naive_cap: DEFAULT_NAIVE_CAP,
            force_naive: false,
        }
    }
}

impl BenchSpec {
    fn relu_config(&self, dtype: Dtype) -> KernelConfig {
        let cfg = KernelConfig::relu()
            .with_dtype(dtype)
            .with_centering(self.centering);
        match self.epsilon {
            Some(e) => cfg.with_epsilon(e),
            None => cfg,
        }
    }

    fn bump_config(&self, dtype: Dtype) -> KernelConfig {
        KernelConfig::bump(self.bandwidth).with_dtype(dtype)
    }

    fn validate(&self) -> Result<()> {
        if self.reps < 3 {
            return Err(Error::InvalidParameter(format!(
                "at least 3 repetitions needed, got {}",
                self.reps
            )));
        }
        if self.n_grid.is_empty() || self.n_grid.contains(&0) {
            return Err(Error::InvalidParameter(
                "n grid must be nonempty and positive".into(),
            ));
        }
        if self.d == 0 || self.heads == 0 {
            return Err(Error::InvalidParameter(
                "d and heads must be positive".into(),
            ));
        }
        self.relu_config(Dtype::F64).validate::<f64>()?;
        self.bump_config(Dtype::F64).validate::<f64>()
    }
}

/// Gate result for one `(n, impl)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct GateCheck {
    pub n: usize,
    pub implementation: BenchImpl,
    pub tokens: usize,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct BenchOutcome {
    pub records: Vec<BenchRecord>,
    pub gates: Vec<GateCheck>,
    /// Quadratic runs refused because `n` exceeded the cap.
    pub skipped: Vec<(usize, BenchImpl)>,
}

fn forward<T: Real>(
    which: BenchImpl,
    seq: &TokenSequence<T>,
    heads: &[HeadParams<T>],
    relu: &KernelConfig,
    bump: &KernelConfig,
) -> Result<Array2<T>> {
    match which {
        BenchImpl::SlicedRelu => {
            Ok(multi_head_layer(seq, heads, relu, Variant::Relu)?.into_inner())
        }
        BenchImpl::SlicedBump => {
            Ok(multi_head_layer(seq, heads, bump, Variant::Bump)?.into_inner())
        }
        BenchImpl::NaiveRelu => multi_head_layer_naive(seq, heads, relu, Variant::Relu),
        BenchImpl::NaiveSoftmax => {
            let mut out = seq.data().clone();
            for head in heads {
                out += &softmax_attention_naive(seq, head)?.dot(&head.mixer.t());
            }
            Ok(out)
        }
    }
}

/// Compares the sliced kernel with its oracle on the first
/// [`GATE_TOKENS`] tokens. Quadratic kernels are oracles themselves and
/// are not gated.
fn gate(
    which: BenchImpl,
    seq: &TokenSequence,
    heads: &[HeadParams],
    spec: &BenchSpec,
) -> Result<Option<GateCheck>> {
    let variant = match which {
        BenchImpl::SlicedRelu => Variant::Relu,
        BenchImpl::SlicedBump => Variant::Bump,
        _ => return Ok(None),
    };
    let m = seq.n().min(GATE_TOKENS);
    let sub = TokenSequence::new(seq.data().slice(s![..m, ..]).to_owned())?;
    let cfg = match variant {
        Variant::Relu => spec.relu_config(Dtype::F64),
        Variant::Bump => spec.bump_config(Dtype::F64),
    };
    let fast = multi_head_layer(&sub, heads, &cfg, variant)?.into_inner();
    let slow = multi_head_layer_naive(&sub, heads, &cfg, variant)?;
    Ok(Some(GateCheck {
        n: seq.n(),
        implementation: which,
        tokens: m,
        rel_error: relative_error(&fast, &slow),
    }))
}

fn summarize(times_ms: &mut [f64]) -> (f64, f64, f64) {
    let k = times_ms.len() as f64;
    let mean = times_ms.iter().sum::<f64>() / k;
    let var = times_ms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (k - 1.0).max(1.0);
    times_ms.sort_by(f64::total_cmp);
    let mid = times_ms.len() / 2;
    let median = if times_ms.len() % 2 == 1 {
        times_ms[mid]
    } else {
        0.5 * (times_ms[mid - 1] + times_ms[mid])
    };
    (mean, var.sqrt(), median)
}

fn time_runs<T: Real>(
    which: BenchImpl,
    seq: &TokenSequence,
    heads: &[HeadParams],
    spec: &BenchSpec,
) -> Result<Vec<f64>> {
    let seq_t: TokenSequence<T> = seq.cast();
    let heads_t: Vec<HeadParams<T>> = heads.iter().map(|h| h.cast()).collect();
    let relu = spec.relu_config(T::DTYPE);
    let bump = spec.bump_config(T::DTYPE);
    for _ in 0..spec.warmup {
        black_box(forward(which, &seq_t, &heads_t, &relu, &bump)?);
    }
    (0..spec.reps)
        .map(|_| {
            let start = Instant::now();
            let out = forward(which, &seq_t, &heads_t, &relu, &bump)?;
            let elapsed = start.elapsed();
            black_box(out);
            Ok(elapsed.as_secs_f64() * 1e3)
        })
        .collect()
}

/// Runs every implementation over the grid on the current rayon pool.
///
/// Inputs for each `n` come from a generator seeded with `seed` and `n`.
/// Each sliced implementation must pass its correctness gate before it is
/// timed; a failed gate aborts the run.
pub fn run_bench(spec: &BenchSpec) -> Result<BenchOutcome> {
    spec.validate()?;
    let threads = rayon::current_num_threads();
    let mut outcome = BenchOutcome::default();
    for &n in &spec.n_grid {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (n as u64).rotate_left(32));
        let seq = random_sequence(n, spec.d, &mut rng);
        let heads = random_heads(spec.d, spec.heads, ProjectionKind::Linear, &mut rng);
        for &which in &spec.impls {
            if which.is_quadratic() && n > spec.naive_cap && !spec.force_naive {
                outcome.skipped.push((n, which));
                continue;
            }
            if let Some(check) = gate(which, &seq, &heads, spec)? {
                if !(check.rel_error <= GATE_TOLERANCE) {
                    return Err(Error::Internal(format!(
                        "correctness gate failed for {which} at n = {n}: relative error {:e}",
                        check.rel_error
                    )));
                }
                outcome.gates.push(check);
            }
            let mut times = match spec.dtype {
                Dtype::F32 => time_runs::<f32>(which, &seq, &heads, spec)?,
                Dtype::F64 => time_runs::<f64>(which, &seq, &heads, spec)?,
            };
            let (mean_ms, std_ms, median_ms) = summarize(&mut times);
            outcome.records.push(BenchRecord {
                n,
                d: spec.d,
                heads: spec.heads,
                implementation: which,
                dtype: spec.dtype,
                mean_ms,
                std_ms,
                median_ms,
                reps: spec.reps,
                threads,
            });
        }
    }
    Ok(outcome)
}

/// Writes records under [`BENCH_CSV_HEADER`].
pub fn write_bench_csv<W: Write>(records: &[BenchRecord], out: W) -> Result<()> {
    let err = |e: csv::Error| Error::Internal(format!("writing benchmark CSV: {e}"));
    let mut w = csv::Writer::from_writer(out);
    w.write_record(BENCH_CSV_HEADER.split(',')).map_err(err)?;
    for r in records {
        w.write_record([
            r.n.to_string(),
            r.d.to_string(),
            r.heads.to_string(),
            r.implementation.to_string(),
            r.dtype.to_string(),
            format!("{:.6}", r.mean_ms),
            format!("{:.6}", r.std_ms),
            r.reps.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush()
        .map_err(|e| Error::Internal(format!("writing benchmark CSV: {e}")))
}

/// Least-squares slope of `log t` against `log n`.
pub fn loglog_slope(points: &[(usize, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::InvalidParameter(
            "a slope needs at least two points".into(),
        ));
    }
    if points.iter().any(|&(n, t)| n == 0 || !(t > 0.0)) {
        return Err(Error::InvalidParameter(
            "sizes and times must be positive".into(),
        ));
    }
    let xs: Vec<f64> = points.iter().map(|&(n, _)| (n as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, t)| t.ln()).collect();
    let k = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / k, ys.iter().sum::<f64>() / k);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidParameter("all sizes are equal".into()));
    }
    Ok(sxy / sxx)
}

/// Median time of each record of `which`, keyed by `n`.
pub fn median_series(records: &[BenchRecord], which: BenchImpl) -> Vec<(usize, f64)> {
    records
        .iter()
        .filter(|r| r.implementation == which)
        .map(|r| (r.n, r.median_ms))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(usize, f64)> = (4..10)
            .map(|k| (1usize << k, ((1u64 << k) as f64).powf(1.7)))
            .collect();
        assert!((loglog_slope(&pts).unwrap() - 1.7).abs() < 1e-12);
    }

    #[test]
    fn impl_names_roundtrip() {
        for i in BenchImpl::ALL {
            assert_eq!(i.as_str().parse::<BenchImpl>().unwrap(), i);
        }
        assert!("fast".parse::<BenchImpl>().is_err());
    }

    #[test]
    fn small_run_and_csv() {
        let spec = BenchSpec {
            n_grid: vec![16, 32],
            d: 3,
            heads: 2,
            impls: BenchImpl::ALL.to_vec(),
            reps: 3,
            ..Default::default()
        };
        let out = run_bench(&spec).unwrap();
        assert_eq!(out.records.len(), 8);
        assert_eq!(out.gates.len(), 4);
        assert!(out.records.iter().all(|r| r.mean_ms > 0.0 && r.reps == 3));
        let mut buf = Vec::new();
        write_bench_csv(&out.records, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), BENCH_CSV_HEADER);
        assert_eq!(text.lines().count(), 9);
    }

    #[test]
    fn naive_cap_skips() {
        let spec = BenchSpec {
            n_grid: vec![8, 64],
            d: 2,
            impls: vec![BenchImpl::NaiveRelu],
            reps: 3,
            naive_cap: 32,
            ..Default::default()
        };
        let out = run_bench(&spec).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.skipped, vec![(64, BenchImpl::NaiveRelu)]);
    }

    #[test]
    fn too_few_reps_rejected() {
        let spec = BenchSpec {
            reps: 2,
            ..Default::default()
        };
        assert!(matches!(run_bench(&spec), Err(Error::InvalidParameter(_))));
    }
}
