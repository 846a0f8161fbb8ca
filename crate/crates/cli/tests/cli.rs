use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn geomlens(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geomlens"))
        .args(args)
        .env_remove("GEOMLENS_SEED")
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = geomlens(args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(text: &str) -> Value {
    serde_json::from_str(text).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn generate_matches_hand_computed_fixture() {
    let out = json(&run_ok(&[
        "generate",
        "--config",
        s(&fixture("two_by_two.json")),
    ]));
    let expected = [[0.3, 0.2], [0.2, 0.3]];
    for (x, row) in expected.iter().enumerate() {
        for (y, p) in row.iter().enumerate() {
            assert!((out["p_xy"][x][y].as_f64().unwrap() - p).abs() < 1e-15);
        }
    }
}

#[test]
fn zero_eps_generates_the_product_distribution() {
    let out = json(&run_ok(&[
        "generate",
        "--config",
        s(&fixture("log_4x3.json")),
        "--eps",
        "0",
    ]));
    let p: Vec<Vec<f64>> = serde_json::from_value(out["p_xy"].clone()).unwrap();
    let px: Vec<f64> = p.iter().map(|r| r.iter().sum()).collect();
    let py: Vec<f64> = (0..3).map(|y| p.iter().map(|r| r[y]).sum()).collect();
    for (x, row) in p.iter().enumerate() {
        for (y, v) in row.iter().enumerate() {
            assert!((v - px[x] * py[y]).abs() < 1e-15);
        }
    }
}

#[test]
fn analyze_matches_golden_files() {
    for name in ["two_by_two", "layered_6x4"] {
        let out = run_ok(&[
            "analyze",
            "--config",
            s(&fixture(&format!("{name}.json"))),
            "--dist",
            s(&fixture(&format!("{name}_dist.json"))),
        ]);
        let golden =
            std::fs::read_to_string(fixture(&format!("{name}_analysis.golden.json"))).unwrap();
        assert_eq!(out, golden, "{name} analysis drifted from the golden file");
    }
}

#[test]
fn golden_two_by_two_agrees_with_hand_values() {
    let text = std::fs::read_to_string(fixture("two_by_two_analysis.golden.json")).unwrap();
    let layer = &json(&text)["layers"][0];
    let b = &layer["bundle"]["b_mat"]["data"];
    let m = &layer["bundle"]["m_l"]["data"];
    let entry = 0.5f64.sqrt() * 0.1;
    for (y, x, sign) in [(0, 0, 1.0), (0, 1, -1.0), (1, 0, -1.0), (1, 1, 1.0)] {
        assert!((b[y][x].as_f64().unwrap() - sign * entry).abs() < 1e-12);
        assert!((m[y][x].as_f64().unwrap() - sign).abs() < 1e-12);
    }
    assert_eq!(layer["analysis"]["ey_bound"].as_f64().unwrap(), 0.0);
}

#[test]
fn zero_eps_analysis_is_trivial() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture("log_4x3.json");
    let dist = dir.path().join("dist.json");
    run_ok(&[
        "generate",
        "--config",
        s(&cfg),
        "--eps",
        "0",
        "--out",
        s(&dist),
    ]);
    let out = json(&run_ok(&[
        "analyze",
        "--config",
        s(&cfg),
        "--dist",
        s(&dist),
    ]));
    let layer = &out["layers"][0];
    for row in layer["bundle"]["b_tilde_mat"]["data"].as_array().unwrap() {
        for v in row.as_array().unwrap() {
            // the product table is stored as rounded text
            assert!(v.as_f64().unwrap().abs() <= 1e-15);
        }
    }
    assert!(layer["analysis"]["ey_bound"].as_f64().unwrap() <= 1e-30);
}

#[test]
fn exit_codes() {
    let cfg = fixture("two_by_two.json");
    let bad_eps = geomlens(&["generate", "--config", s(&cfg), "--eps", "1.5"]);
    assert_eq!(bad_eps.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad_eps.stderr).contains("too large"));

    let big_rank = geomlens(&[
        "analyze",
        "--config",
        s(&cfg),
        "--dist",
        s(&fixture("two_by_two_dist.json")),
        "--rank",
        "3",
    ]);
    assert_eq!(big_rank.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&big_rank.stderr).contains("rank 3 exceeds"));

    let dir = tempfile::tempdir().unwrap();
    let broken = write_config(dir.path(), r#"{"problem": {"nx": 3, "loss": "log"}}"#);
    assert_eq!(
        geomlens(&["generate", "--config", s(&broken)])
            .status
            .code(),
        Some(2)
    );
    let missing = geomlens(&["generate", "--config", s(&dir.path().join("nope.json"))]);
    assert_eq!(missing.status.code(), Some(2));

    // a strict residual gate that no instance can meet
    let strict = write_config(
        dir.path(),
        r#"{"problem": {"nx": 4, "ny": 3, "loss": "log"}, "seed": 1,
            "tolerances": {"residual_slope_min": 10.0}}"#,
    );
    let gated = geomlens(&["sweep", "--config", s(&strict)]);
    assert_eq!(gated.status.code(), Some(3));
    assert!(
        !gated.stdout.is_empty(),
        "report is written even when a gate fails"
    );

    let uncertified = geomlens(&[
        "certify-activation",
        "--activation",
        "leaky_relu:0.1",
        "--delta",
        "0.5",
    ]);
    assert_eq!(uncertified.status.code(), Some(3));
    let certified = geomlens(&["certify-activation", "--activation", "tanh"]);
    assert_eq!(certified.status.code(), Some(0));
    let unknown = geomlens(&["certify-activation", "--activation", "relu6"]);
    assert_eq!(unknown.status.code(), Some(2));
}

#[test]
fn sweep_passes_gates_on_both_losses() {
    for name in ["log_4x3.json", "l2_5x4.json"] {
        let out = json(&run_ok(&["sweep", "--config", s(&fixture(name))]));
        let slope = out["slopes"]["residual"].as_f64().unwrap();
        assert!(slope >= 2.5, "{name}: residual slope {slope}");
        let eps: Vec<f64> = out["rows"]
            .as_array()
            .unwrap()
            .iter()
            .map(|r| r["eps"].as_f64().unwrap())
            .collect();
        assert!(
            eps.windows(2).all(|w| w[0] > w[1]),
            "rows sorted by descending ε"
        );
        assert!(out["gates"]
            .as_array()
            .unwrap()
            .iter()
            .all(|g| g["passed"] == true));
        assert!(out["metadata"]["config_hash"].as_str().unwrap().len() == 64);
    }
}

#[test]
fn single_eps_sweep_has_no_slopes() {
    let out = json(&run_ok(&[
        "sweep",
        "--config",
        s(&fixture("log_4x3.json")),
        "--eps",
        "0.1",
    ]));
    assert!(out["slopes"]["residual"].is_null());
    assert!(out["slopes"]["bayes_spread"].is_null());
    assert_eq!(out["rows"].as_array().unwrap().len(), 1);
}

#[test]
fn outputs_are_deterministic() {
    let cfg = fixture("log_4x3.json");
    let dir = tempfile::tempdir().unwrap();
    let mut texts = Vec::new();
    for i in 0..2 {
        let csv = dir.path().join(format!("sweep{i}.csv"));
        let json_text = run_ok(&["sweep", "--config", s(&cfg), "--out-csv", s(&csv)]);
        texts.push((json_text, std::fs::read_to_string(&csv).unwrap()));
    }
    assert_eq!(texts[0], texts[1]);
    let a = run_ok(&["generate", "--config", s(&cfg), "--seed", "9"]);
    assert_eq!(a, run_ok(&["generate", "--config", s(&cfg), "--seed", "9"]));
    assert_ne!(
        a,
        run_ok(&["generate", "--config", s(&cfg), "--seed", "10"])
    );
}

#[test]
fn seed_precedence() {
    let cfg = fixture("log_4x3.json");
    let run_env = |args: &[&str], seed: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_geomlens"))
            .args(args)
            .env("GEOMLENS_SEED", seed)
            .output()
            .unwrap();
        assert!(out.status.success());
        String::from_utf8(out.stdout).unwrap()
    };
    let from_env = run_env(&["generate", "--config", s(&cfg)], "9");
    assert_eq!(
        from_env,
        run_ok(&["generate", "--config", s(&cfg), "--seed", "9"])
    );
    // the flag wins over the environment
    let flagged = run_env(&["generate", "--config", s(&cfg), "--seed", "1"], "9");
    assert_eq!(flagged, run_ok(&["generate", "--config", s(&cfg)]));
}

#[test]
fn csv_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("sweep.csv");
    run_ok(&[
        "sweep",
        "--config",
        s(&fixture("l2_5x4.json")),
        "--out-csv",
        s(&csv_path),
    ]);
    let text = std::fs::read_to_string(&csv_path).unwrap();
    let (first, body) = text.split_once('\n').unwrap();
    assert_eq!(first, "# geomlens-sweep v1");
    let mut reader = csv::Reader::from_reader(body.as_bytes());
    let header = reader.headers().unwrap().clone();
    assert_eq!(&header[0], "eps");
    let mut rows = 0;
    for record in reader.records() {
        let record = record.unwrap();
        assert_eq!(record.len(), header.len());
        for field in record.iter() {
            let value: f64 = field.parse().unwrap();
            assert_eq!(format!("{value:.16e}"), field);
        }
        rows += 1;
    }
    assert_eq!(rows, 4);
}

#[test]
fn train_compare_warm_start() {
    let cfg = fixture("log_4x3.json");
    let out = json(&run_ok(&[
        "train-compare",
        "--config",
        s(&cfg),
        "--eps",
        "0.05",
    ]));
    let ratio = out["ratio"].as_f64().unwrap();
    assert!((0.5..=2.0).contains(&ratio), "ratio {ratio}");
    assert!(out["max_decomposition_error"].as_f64().unwrap() <= 1e-12);

    let zero = json(&run_ok(&[
        "train-compare",
        "--config",
        s(&cfg),
        "--eps",
        "0",
    ]));
    assert!(zero["trained_excess_risk"].as_f64().unwrap().abs() <= 1e-10);
    assert!(zero["ratio"].is_null());
}

#[test]
fn train_compare_cold_start_is_report_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"problem": {"nx": 4, "ny": 3, "loss": "log"}, "eps": [0.05], "seed": 1,
            "train": {"init": "random", "steps": 200, "lr": 5.0, "checkpoint_every": 50}}"#,
    );
    let out = json(&run_ok(&["train-compare", "--config", s(&cfg)]));
    assert!(out["gates"].as_array().unwrap().is_empty());
    assert_eq!(out["init"], "random");
}
