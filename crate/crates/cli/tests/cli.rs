use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dit_compress::model::ModelConfig;
use dit_compress::plan_search::{validate_plan, CompressionPlan, PlanEntry, PlanMeta};
use dit_compress::sharing::Strategy;

const SMALL: &[&str] = &[
    "--layers",
    "4",
    "--steps",
    "8",
    "--seqlen",
    "64",
    "--heads",
    "2",
    "--head-dim",
    "8",
];

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dit-compress"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_with(cmd: &str, extra: &[&str], out: &Path) -> Output {
    let mut args = vec![cmd];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    args.extend_from_slice(&["--out", out.to_str().unwrap()]);
    run(&args)
}

fn small_config(seed: u64) -> ModelConfig {
    ModelConfig {
        num_layers: 4,
        num_steps: 8,
        seq_len: 64,
        num_heads: 2,
        head_dim: 8,
        mlp_ratio: 4,
        window: 8,
        guidance_scale: 4.0,
        seed,
    }
}

fn latent_values(path: &Path) -> Vec<f32> {
    let bytes = fs::read(path).unwrap();
    let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
    let header: serde_json::Value = serde_json::from_slice(&bytes[..nl]).unwrap();
    let shape: Vec<usize> = serde_json::from_value(header["shape"].clone()).unwrap();
    let body = &bytes[nl + 1..];
    assert_eq!(body.len(), shape.iter().product::<usize>() * 4);
    body.chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

#[test]
fn search_writes_a_valid_plan() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("runs/a");
    let o = run_with("search", &["--delta", "0.05", "--seed", "7"], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["plan.json", "cost.json", "heatmap.csv", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let plan =
        CompressionPlan::from_json(&fs::read_to_string(out.join("plan.json")).unwrap()).unwrap();
    assert!(validate_plan(&plan, &small_config(7)).is_ok());
    let heatmap = fs::read_to_string(out.join("heatmap.csv")).unwrap();
    assert_eq!(heatmap.lines().count(), 5);
    assert!(heatmap.starts_with("layer,0,1,2,3,4,5,6,7\n"));
}

#[test]
fn zero_delta_search_is_empty() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_with("search", &["--delta", "0"], dir.path());
    assert!(o.status.success());
    let plan: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("plan.json")).unwrap()).unwrap();
    assert_eq!(plan["entries"].as_array().unwrap().len(), 0);
}

#[test]
fn usage_errors_exit_two() {
    for args in [
        &["search", "--delta", "-1"][..],
        &["search", "--delta", "nan"],
        &["search", "--layers", "0"],
        &["generate"],
        &["generate", "--full", "--plan", "p.json"],
        &["frobnicate"],
    ] {
        assert_eq!(run(args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn generate_full_is_deterministic_and_matches_empty_plan() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, s, p) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("s"),
        dir.path().join("p"),
    );
    assert!(run_with("generate", &["--full", "--seed", "3"], &a)
        .status
        .success());
    assert!(run_with("generate", &["--full", "--seed", "3"], &b)
        .status
        .success());
    let la = fs::read(a.join("latent.bin")).unwrap();
    assert_eq!(la, fs::read(b.join("latent.bin")).unwrap());

    assert!(run_with("search", &["--delta", "0", "--seed", "3"], &s)
        .status
        .success());
    let plan = s.join("plan.json");
    assert!(run_with(
        "generate",
        &["--plan", plan.to_str().unwrap(), "--seed", "3"],
        &p
    )
    .status
    .success());
    assert_eq!(la, fs::read(p.join("latent.bin")).unwrap());
}

#[test]
fn refresh_every_step_plan_matches_full() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(0);
    let mut plan = CompressionPlan::new(PlanMeta {
        delta: 0.0,
        seed: 0,
        steps: cfg.num_steps,
        layers: cfg.num_layers,
        config_hash: None,
    });
    for t in 0..cfg.num_steps {
        for i in 0..cfg.num_layers {
            plan.set_entry(
                t,
                i,
                PlanEntry {
                    strategy: Strategy::Wars,
                    refresh: true,
                },
            );
        }
    }
    let plan_path = dir.path().join("wars.json");
    fs::write(&plan_path, plan.to_json().unwrap()).unwrap();
    let (full, wars) = (dir.path().join("full"), dir.path().join("wars"));
    assert!(run_with("generate", &["--full"], &full).status.success());
    assert!(
        run_with("generate", &["--plan", plan_path.to_str().unwrap()], &wars)
            .status
            .success()
    );
    let (a, b) = (
        latent_values(&full.join("latent.bin")),
        latent_values(&wars.join("latent.bin")),
    );
    let diff = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f32, f32::max);
    assert!(diff < 1e-5, "{diff}");
}

#[test]
fn mismatched_plan_lists_violations() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_with("search", &["--delta", "1e9"], dir.path())
        .status
        .success());
    let plan = dir.path().join("plan.json");
    let o = run(&[
        "generate",
        "--plan",
        plan.to_str().unwrap(),
        "--layers",
        "2",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.contains("plan has 4 layers, model config has 2"),
        "{err}"
    );
    assert!(err.contains("step 1 layer 3"), "{err}");
}

#[test]
fn cost_reports_fractions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig {
        num_steps: 10,
        ..small_config(0)
    };
    let mut plan = CompressionPlan::full_for(&cfg);
    let full_path = dir.path().join("full.json");
    fs::write(&full_path, plan.to_json().unwrap()).unwrap();
    let o = run(&["cost", "--plan", full_path.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("fraction: 1.0000"));

    for t in 1..10 {
        for i in 0..cfg.num_layers {
            plan.set(t, i, Strategy::Ast);
        }
    }
    let ast_path = dir.path().join("ast.json");
    fs::write(&ast_path, plan.to_json().unwrap()).unwrap();
    let o = run(&[
        "cost",
        "--plan",
        ast_path.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("fraction: 0.1000"), "{stdout}");
    assert!(stdout.lines().any(|l| l.starts_with("ast ")));
    assert!(dir.path().join("cost.json").exists());
}

#[test]
fn malformed_plans_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(
        &bad,
        r#"{"meta":{"delta":0,"seed":0,"steps":2,"layers":1},"entries":[{"step":1,"layer":0,"strategy":"sparkle"}]}"#,
    )
    .unwrap();
    let o = run(&["cost", "--plan", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.contains("sparkle") && err.contains("line 1 column"),
        "{err}"
    );

    let o = run(&[
        "cost",
        "--plan",
        dir.path().join("missing.json").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn analyze_writes_square_step_matrices() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "analyze",
        "--layers",
        "2",
        "--steps",
        "5",
        "--seqlen",
        "32",
        "--heads",
        "2",
        "--head-dim",
        "4",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success());
    for i in 0..2 {
        let step = fs::read_to_string(dir.path().join(format!("sim_step_layer{i}.csv"))).unwrap();
        let rows: Vec<Vec<f64>> = step
            .lines()
            .skip(1)
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows.len(), 5);
        for (r, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), 5);
            assert!((row[r] - 1.0).abs() <= 1e-6);
        }
        let cfg_csv = fs::read_to_string(dir.path().join(format!("sim_cfg_layer{i}.csv"))).unwrap();
        assert_eq!(cfg_csv.lines().count(), 2);
    }

    let one = dir.path().join("one");
    let o = run(&[
        "analyze",
        "--layers",
        "1",
        "--steps",
        "1",
        "--seqlen",
        "16",
        "--out",
        one.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert_eq!(
        fs::read_to_string(one.join("sim_step_layer0.csv")).unwrap(),
        "0\n1.000000\n"
    );
}
