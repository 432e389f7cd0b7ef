use std::path::Path;
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sliced_attention::random::{random_heads, random_sequence};
use sliced_attention::reference::multi_head_layer_naive;
use sliced_attention::{io, relative_error, KernelConfig, ProjectionKind, Variant};
use tempfile::TempDir;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sliced-attn"));
    cmd.env_remove("SLICED_ATTN_SEED");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("JSON report on stdout")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn forward_matches_oracle() {
    let dir = TempDir::new().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let seq = random_sequence(40, 5, &mut rng);
    let heads = random_heads(5, 3, ProjectionKind::Mlp1, &mut rng);
    let (input, params, output) = (
        dir.path().join("x.json"),
        dir.path().join("p.json"),
        dir.path().join("y.json"),
    );
    io::write_tokens(&input, &seq).unwrap();
    io::write_params(&params, &heads).unwrap();
    let out = run(&[
        "forward",
        "--input",
        path(&input),
        "--params",
        path(&params),
        "--output",
        path(&output),
        "--residual",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let got = io::read_tokens(&output).unwrap();
    let want = multi_head_layer_naive(&seq, &heads, &KernelConfig::relu(), Variant::Relu).unwrap();
    assert!(relative_error(got.data(), &want) <= 1e-10);
}

#[test]
fn forward_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let input = dir.path().join("x.csv");
    io::write_tokens(&input, &random_sequence(30, 4, &mut rng)).unwrap();
    let mut files = Vec::new();
    for (i, threads) in ["1", "3"].iter().enumerate() {
        let output = dir.path().join(format!("y{i}.json"));
        let out = run(&[
            "forward",
            "--input",
            path(&input),
            "--heads",
            "4",
            "--seed",
            "9",
            "--threads",
            threads,
            "--output",
            path(&output),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        files.push(std::fs::read(&output).unwrap());
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("x.json");
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    io::write_tokens(&input, &random_sequence(6, 3, &mut rng)).unwrap();
    let flag = run(&["forward", "--input", path(&input), "--seed", "17"]);
    let env = bin()
        .args(["forward", "--input", path(&input)])
        .env("SLICED_ATTN_SEED", "17")
        .output()
        .unwrap();
    let other = run(&["forward", "--input", path(&input), "--seed", "18"]);
    assert_eq!(flag.stdout, env.stdout);
    assert_ne!(flag.stdout, other.stdout);
}

#[test]
fn single_token_gives_zero_rows() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("x.json");
    std::fs::write(&input, r#"{"n": 1, "d": 3, "data": [[0.5, -1.0, 2.0]]}"#).unwrap();
    let out = run(&["forward", "--input", path(&input)]);
    assert_eq!(code(&out), 0);
    let v: serde_json::Value = json(&out);
    assert_eq!(v["data"], serde_json::json!([[0.0, 0.0, 0.0]]));
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let garbage = dir.path().join("bad.json");
    std::fs::write(&garbage, "{ not json").unwrap();
    assert_eq!(code(&run(&["forward", "--input", path(&garbage)])), 2);

    let ragged = dir.path().join("ragged.csv");
    std::fs::write(&ragged, "1,2\n3\n").unwrap();
    assert_eq!(code(&run(&["forward", "--input", path(&ragged)])), 3);

    let tokens = dir.path().join("x.json");
    std::fs::write(&tokens, r#"{"n": 2, "d": 2, "data": [[0, 1], [1, 0]]}"#).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = dir.path().join("p.json");
    io::write_params(
        &params,
        &random_heads(3, 1, ProjectionKind::Linear, &mut rng),
    )
    .unwrap();
    assert_eq!(
        code(&run(&[
            "forward",
            "--input",
            path(&tokens),
            "--params",
            path(&params)
        ])),
        3
    );

    let huge = dir.path().join("huge.json");
    std::fs::write(&huge, r#"{"n": 2, "d": 1, "data": [[1e308], [-1e308]]}"#).unwrap();
    assert_eq!(code(&run(&["forward", "--input", path(&huge)])), 4);

    assert_eq!(
        code(&run(&[
            "forward",
            "--variant",
            "cosine",
            "--input",
            path(&tokens)
        ])),
        2
    );
}

#[test]
fn bench_writes_exact_header() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("bench.csv");
    let out = run(&[
        "bench",
        "--n-grid",
        "64,128",
        "--d",
        "4",
        "--reps",
        "3",
        "--impls",
        "sliced_relu,naive_relu,naive_softmax,sliced_bump",
        "--output",
        path(&csv),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("n,d,heads,impl,dtype,mean_ms,std_ms,reps")
    );
    assert_eq!(lines.count(), 8);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("median") && stderr.contains("thread"));
}

#[test]
fn bench_refuses_large_naive_runs() {
    let out = run(&[
        "bench",
        "--n-grid",
        "16384",
        "--impls",
        "naive_relu",
        "--reps",
        "3",
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force-naive"));
}

#[test]
fn cpd_report_passes() {
    let out = run(&["cpd", "--trials", "1000"]);
    assert_eq!(code(&out), 0);
    let r = json(&out);
    assert_eq!(r["pass"], true);
    assert!(r["min_form"].as_f64().unwrap() >= -1e-12);
    assert_eq!(r["zero_weights_value"].as_f64(), Some(0.0));
}

#[test]
fn expressivity_demo_within_bound() {
    let out = run(&["expressivity", "--p", "2", "--n", "3", "--d", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&out);
    assert!(r["layers"].as_u64().unwrap() <= 15);
    assert!(r["max_error"].as_f64().unwrap() <= 1e-6);
}

#[test]
fn expressivity_rejects_one_dimension() {
    assert_eq!(code(&run(&["expressivity", "--d", "1"])), 2);
}

#[test]
fn gradcheck_default_instance() {
    for variant in ["relu", "bump"] {
        let out = run(&["gradcheck", "--variant", variant]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        assert!(json(&out)["max_rel_error"].as_f64().unwrap() <= 1e-5);
    }
}

#[test]
fn heatmap_csv() {
    let out = run(&[
        "heatmap",
        "--variant",
        "bump",
        "--bandwidth",
        "0.5",
        "--points",
        "5",
    ]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x,y,weight"));
    assert_eq!(lines.count(), 25);
}
