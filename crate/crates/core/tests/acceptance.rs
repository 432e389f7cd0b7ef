//! Acceptance checks. Each criterion prints one PASS or FAIL line with its
//! measured figure and wall time; the process exits nonzero if any fails.

use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sliced_attention::bench::{loglog_slope, median_series, run_bench, BenchImpl, BenchSpec};
use sliced_attention::diagnostics::{cpd_quadratic_form, relu_energy_identity_check};
use sliced_attention::expressivity::{
    disentangle_1d, gamma_lambda, gamma_lambda_composed, match_sequences, GammaParams,
    MatchOptions, SequenceGroup,
};
use sliced_attention::gradcheck::{gradcheck_head, random_gradcheck_instance, GradCheckConfig};
use sliced_attention::random::{random_head, random_heads, random_permutation, random_sequence};
use sliced_attention::reference::{bump_three_relu_naive, multi_head_layer_naive};
use sliced_attention::{
    bump_attention_forward, bump_attention_naive, multi_head_layer, relative_error,
    relu_attention_forward, relu_attention_naive, KernelConfig, ProjectionKind, Result, Variant,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn oracle_equivalence() -> Result<Outcome> {
    const NS: [usize; 8] = [1, 2, 3, 5, 16, 128, 1024, 4096];
    const DS: [usize; 4] = [1, 4, 16, 64];
    const HS: [usize; 3] = [1, 4, 8];
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for i in 0..200 {
        let n = NS[i % 8];
        let d = DS[(i / 8) % 4];
        let h = HS[(i / 32 + i) % 3];
        let centering = (i / 2) % 2 == 0;
        let kind = if i % 2 == 0 {
            ProjectionKind::Linear
        } else {
            ProjectionKind::Mlp1
        };
        let cfg = KernelConfig::relu().with_centering(centering);
        let seq = random_sequence(n, d, &mut rng);
        let heads = random_heads(d, h, kind, &mut rng);
        for head in &heads {
            let fast = relu_attention_forward(&seq, head, &cfg)?;
            let slow = relu_attention_naive(&seq, head, &cfg)?;
            worst = worst.max(relative_error(&fast, &slow));
        }
        // every head was already checked; the naive layer repeats their cost
        if n <= 1024 {
            let fast = multi_head_layer(&seq, &heads, &cfg, Variant::Relu)?;
            let slow = multi_head_layer_naive(&seq, &heads, &cfg, Variant::Relu)?;
            worst = worst.max(relative_error(fast.data(), &slow));
        }
    }
    Ok(Outcome {
        pass: worst <= 1e-10,
        detail: format!("max relative error {worst:.2e} over 200 instances (limit 1e-10)"),
    })
}

fn bump_equivalence() -> Result<Outcome> {
    const NS: [usize; 8] = [1, 2, 3, 5, 16, 64, 256, 1024];
    const DS: [usize; 3] = [1, 4, 16];
    const BS: [f64; 4] = [0.05, 0.3, 1.0, 3.0];
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut vs_naive, mut vs_three) = (0.0f64, 0.0f64);
    for i in 0..100 {
        let (n, d, b) = (NS[i % 8], DS[(i / 8) % 3], BS[(i / 3) % 4]);
        let cfg = KernelConfig::bump(b);
        let seq = random_sequence(n, d, &mut rng);
        let head = random_head(d, ProjectionKind::Linear, 1, 0, &mut rng);
        let fast = bump_attention_forward(&seq, &head, &cfg)?;
        vs_naive = vs_naive.max(relative_error(
            &fast,
            &bump_attention_naive(&seq, &head, &cfg)?,
        ));
        vs_three = vs_three.max(relative_error(
            &fast,
            &bump_three_relu_naive(&seq, &head, &cfg)?,
        ));
    }
    Ok(Outcome {
        pass: vs_naive <= 1e-10 && vs_three <= 1e-10,
        detail: format!(
            "max relative error {vs_naive:.2e} against the direct kernel, {vs_three:.2e} against three shifted relu sums (limit 1e-10)"
        ),
    })
}

fn complexity() -> Result<Outcome> {
    let sliced = BenchSpec {
        n_grid: (10..=18).map(|k| 1 << k).collect(),
        d: 4,
        heads: 1,
        impls: vec![BenchImpl::SlicedRelu],
        reps: 5,
        seed: 303,
        ..Default::default()
    };
    let naive = BenchSpec {
        n_grid: (8..=13).map(|k| 1 << k).collect(),
        impls: vec![BenchImpl::NaiveRelu],
        reps: 3,
        ..sliced.clone()
    };
    // run_bench refuses to time a sliced kernel whose gate fails
    let fast = run_bench(&sliced)?;
    let slow = run_bench(&naive)?;
    let gate = fast.gates.iter().map(|g| g.rel_error).fold(0.0, f64::max);
    let s_fast = loglog_slope(&median_series(&fast.records, BenchImpl::SlicedRelu))?;
    let s_slow = loglog_slope(&median_series(&slow.records, BenchImpl::NaiveRelu))?;
    Ok(Outcome {
        pass: s_fast <= 1.35 && s_slow >= 1.8,
        detail: format!(
            "sliced slope {s_fast:.3} over 2^10..2^18 (limit 1.35), naive slope {s_slow:.3} over 2^8..2^13 (limit 1.8), gate error {gate:.1e}"
        ),
    })
}

fn gradients() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = [0.0f64; 2];
    let (mut checked, mut skipped) = (0, 0);
    for i in 0..50 {
        let variant = if i % 2 == 0 {
            Variant::Relu
        } else {
            Variant::Bump
        };
        let n = rng.random_range(1..=32);
        let d = rng.random_range(1..=4);
        let (kind, cfg) = match variant {
            Variant::Relu => (
                if i % 4 == 0 {
                    ProjectionKind::Linear
                } else {
                    ProjectionKind::Mlp1
                },
                KernelConfig::relu().with_centering(i % 3 != 0),
            ),
            Variant::Bump => (
                ProjectionKind::Linear,
                KernelConfig::bump(rng.random_range(0.3..2.0)),
            ),
        };
        let obj = random_gradcheck_instance(n, d, variant, kind, &cfg, 1e-3, &mut rng)?;
        let fd = GradCheckConfig {
            step: 1e-5,
            directions: usize::MAX,
            seed: i as u64,
        };
        let report = gradcheck_head(&obj, 1e-3, &fd)?;
        let slot = usize::from(variant == Variant::Bump);
        worst[slot] = worst[slot].max(report.max_rel_error);
        checked += report.checked;
        skipped += report.skipped;
    }
    Ok(Outcome {
        pass: worst[0] <= 1e-5 && worst[1] <= 1e-5,
        detail: format!(
            "max relative error relu {:.2e}, bump {:.2e} (limit 1e-5); {checked} coordinates, {skipped} skipped at kinks",
            worst[0], worst[1]
        ),
    })
}

fn cpd() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let zero = cpd_quadratic_form(&[0.0, 1.0, 2.5], &[0.0; 3])?.relu_form;
    let (mut min_form, mut min_ratio, mut mismatch) = (f64::INFINITY, f64::INFINITY, 0.0f64);
    for _ in 0..1000 {
        let n = rng.random_range(2..=64);
        let x: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let raw: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let mean = raw.iter().sum::<f64>() / n as f64;
        let gamma: Vec<f64> = raw.iter().map(|g| g - mean).collect();
        let norm2: f64 = gamma.iter().map(|g| g * g).sum();
        let form = cpd_quadratic_form(&x, &gamma)?;
        min_form = min_form.min(form.relu_form);
        min_ratio = min_ratio.min(form.relu_form / norm2);
        mismatch = mismatch.max((form.relu_form - form.energy_form).abs());
    }
    Ok(Outcome {
        pass: zero == 0.0 && min_form >= -1e-12 && min_ratio > 1e-12 && mismatch <= 1e-12,
        detail: format!(
            "zero weights give {zero:e}; min form {min_form:.3e}, min form/|g|^2 {min_ratio:.3e}; max gap to energy form {mismatch:.1e} (limits -1e-12, 1e-12, 1e-12)"
        ),
    })
}

fn energy_identity() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let pairs: Vec<(f64, f64)> = (0..1_000_000)
        .map(|_| {
            let scale = 10f64.powf(rng.random_range(-30.0..30.0));
            (scale * normal(&mut rng), scale * normal(&mut rng))
        })
        .collect();
    let dev = relu_energy_identity_check(&pairs);
    Ok(Outcome {
        pass: dev == 0.0,
        detail: format!("max deviation {dev:e} over 10^6 pairs (required exactly 0)"),
    })
}

fn centering_invariance() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let cfg = KernelConfig::relu();
    let mut worst = 0.0f64;
    for i in 0..100 {
        let n = rng.random_range(1..=64);
        let d = rng.random_range(1..=8);
        let kind = if i % 2 == 0 {
            ProjectionKind::Linear
        } else {
            ProjectionKind::Mlp1
        };
        let seq = random_sequence(n, d, &mut rng);
        let head = random_head(d, kind, 1, 0, &mut rng);
        let mut shifted = head.clone();
        let offset = Array1::from_shape_simple_fn(d, || 5.0 * normal(&mut rng));
        shifted.value.bias += &offset;
        let a = relu_attention_forward(&seq, &head, &cfg)?;
        let b = relu_attention_forward(&seq, &shifted, &cfg)?;
        worst = worst.max(relative_error(&b, &a));
    }
    Ok(Outcome {
        pass: worst <= 1e-12,
        detail: format!("max relative change {worst:.2e} over 100 instances (limit 1e-12)"),
    })
}

fn disjoint(intervals: &[(f64, f64)]) -> bool {
    let mut iv = intervals.to_vec();
    iv.sort_by(|a, b| a.0.total_cmp(&b.0));
    iv.windows(2).all(|w| w[0].1 < w[1].0)
}

fn expressivity() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let (mut worst, mut over_bound, mut bad_disentangle, mut bad_splits, mut splits) =
        (0.0f64, 0, 0, 0, 0);
    let mut max_layers = (0, 1);
    for i in 0..100 {
        let p = rng.random_range(1..=4);
        let n = rng.random_range(1..=6);
        let d = rng.random_range(2..=3);
        let group = |rng: &mut ChaCha8Rng| {
            SequenceGroup::new((0..p).map(|_| random_sequence(n, d, rng)).collect())
        };
        let sources = group(&mut rng)?;
        let targets = group(&mut rng)?;
        let plan = match_sequences(
            &sources,
            &targets,
            MatchOptions {
                seed: i,
                ..Default::default()
            },
        )?;
        let err = plan.apply(&sources)?.max_abs_diff(&targets)?;
        worst = worst.max(err);
        if plan.layers.len() > plan.bound {
            over_bound += 1;
        }
        if plan.layers.len() * max_layers.1 > max_layers.0 * plan.bound {
            max_layers = (plan.layers.len(), plan.bound);
        }
        let eta = plan.direction.expect("random groups differ");
        let sep = disentangle_1d(&sources.project(&eta), plan.threshold.expect("threshold"))?;
        if sep.layers.len() > 2 * p - 1 || sep.intervals.len() != p || !disjoint(&sep.intervals) {
            bad_disentangle += 1;
        }
        splits += sep.split_checks.len();
        bad_splits += sep.split_checks.iter().filter(|c| !c.all()).count();
    }
    Ok(Outcome {
        pass: worst <= 1e-6 && over_bound == 0 && bad_disentangle == 0 && bad_splits == 0,
        detail: format!(
            "max error {worst:.2e} (limit 1e-6); {over_bound} plans over the layer bound (fullest {}/{}); {bad_disentangle} bad disentanglements; {bad_splits}/{splits} splits failing an inequality",
            max_layers.0, max_layers.1
        ),
    })
}

fn gamma_factorization() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let d = rng.random_range(1..=6);
        let n = rng.random_range(1..=32);
        let tokens = random_sequence(n, d, &mut rng);
        let x = Array1::from_shape_simple_fn(d, || normal(&mut rng));
        let params = GammaParams {
            a: Array1::from_shape_simple_fn(d, || normal(&mut rng)),
            b: normal(&mut rng),
            c: normal(&mut rng),
            v: normal(&mut rng),
        };
        let direct = gamma_lambda(x.view(), &tokens, &params)?;
        let composed = gamma_lambda_composed(x.view(), &tokens, &params)?;
        worst = worst.max((direct - composed).abs());
    }
    Ok(Outcome {
        pass: worst <= 1e-12,
        detail: format!("max difference {worst:.2e} over 1000 draws (limit 1e-12)"),
    })
}

fn equivariance() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut mismatched = 0;
    for i in 0..100 {
        let n = rng.random_range(1..=64);
        let d = rng.random_range(1..=8);
        let h = rng.random_range(1..=4);
        let (variant, kind, cfg) = match i % 3 {
            0 => (Variant::Relu, ProjectionKind::Linear, KernelConfig::relu()),
            1 => (
                Variant::Relu,
                ProjectionKind::Mlp1,
                KernelConfig::relu().with_centering(false),
            ),
            _ => (
                Variant::Bump,
                ProjectionKind::Linear,
                KernelConfig::bump(0.7),
            ),
        };
        let seq = random_sequence(n, d, &mut rng);
        let heads = random_heads(d, h, kind, &mut rng);
        let perm = random_permutation(n, &mut rng);
        let out = multi_head_layer(&seq, &heads, &cfg, variant)?;
        let out_perm = multi_head_layer(&seq.permuted(&perm), &heads, &cfg, variant)?;
        let expected: Array2<f64> = out.permuted(&perm).into_inner();
        if *out_perm.data() != expected {
            mismatched += 1;
        }
    }
    Ok(Outcome {
        pass: mismatched == 0,
        detail: format!("{mismatched} of 100 permuted outputs differ in any bit"),
    })
}

type Criterion = (&'static str, fn() -> Result<Outcome>, Duration);

fn main() {
    let criteria: [Criterion; 10] = [
        (
            "oracle equivalence",
            oracle_equivalence,
            Duration::from_secs(120),
        ),
        (
            "bump equivalence and three-relu decomposition",
            bump_equivalence,
            Duration::from_secs(60),
        ),
        ("complexity", complexity, Duration::from_secs(600)),
        ("gradients", gradients, Duration::from_secs(120)),
        (
            "conditional positive definiteness",
            cpd,
            Duration::from_secs(10),
        ),
        (
            "relu energy identity",
            energy_identity,
            Duration::from_secs(5),
        ),
        (
            "centering invariance",
            centering_invariance,
            Duration::from_secs(30),
        ),
        ("expressivity", expressivity, Duration::from_secs(300)),
        (
            "gamma factorization",
            gamma_factorization,
            Duration::from_secs(10),
        ),
        ("equivariance", equivariance, Duration::from_secs(30)),
    ];
    let mut failures = 0;
    for (name, check, budget) in criteria {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let (pass, detail) = match result {
            Ok(o) => (o.pass && elapsed <= budget, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failures += 1;
        }
        println!(
            "{} {name}: {detail} [{:.1} s, budget {} s]",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
