//! End-to-end runs of every subcommand against the bundled models.

use std::path::PathBuf;
use std::process::{Command, Output};

fn model(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(format!("../../models/{name}.json"))
}

fn gfg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gfg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn validate_accepts_every_bundled_model() {
    for name in [
        "conjugate",
        "detached_pair",
        "discrete_mdp",
        "toy_slam",
        "slam_mdp",
        "two_collections",
    ] {
        let out = gfg(&["validate", model(name).to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{name}: {}", stdout(&out));
        assert!(stdout(&out).starts_with("valid:"));
    }
}

#[test]
fn validate_rejects_a_broken_model_with_exit_one() {
    let dir = std::env::temp_dir().join("gfg-cli-tests");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("cycle.json");
    std::fs::write(
        &path,
        r#"{
            "nodes": [
                {"name": "a", "kind": "latent", "distribution": "normal", "params": [{"node": "b"}, 1.0]},
                {"name": "b", "kind": "latent", "distribution": "normal", "params": [{"node": "a"}, 1.0]}
            ],
            "links": [{"from": "b", "to": "a"}, {"from": "a", "to": "b"}]
        }"#,
    )
    .unwrap();
    let out = gfg(&["validate", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("cycle"));
}

#[test]
fn missing_file_and_unknown_flag_are_runtime_errors() {
    let out = gfg(&["validate", "/nonexistent/model.json"]);
    assert_eq!(out.status.code(), Some(2));
    let out = gfg(&["factorize", model("conjugate").to_str().unwrap(), "--nonsense"]);
    assert_eq!(out.status.code(), Some(2), "unknown flags are rejected");
}

#[test]
fn factorize_prints_both_factorizations() {
    let out = gfg(&["factorize", model("detached_pair").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.contains("joint:"));
    assert!(text.contains("posterior:"));
    assert!(text.contains("˘z_a"), "frozen marker in {text}");

    let out = gfg(&["factorize", model("toy_slam").to_str().unwrap(), "--json", "--view", "nav.chain,nav.perception"]);
    assert_eq!(out.status.code(), Some(0));
    let doc: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!(doc.get("joint").is_some());
    assert!(doc.get("view:nav.chain,nav.perception").is_some());
}

#[test]
fn render_writes_dot() {
    let out = gfg(&["render", model("slam_mdp").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.starts_with("digraph gfg {"));
    assert!(text.contains("subgraph cluster_"));

    let dir = std::env::temp_dir().join("gfg-cli-tests");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("out.dot");
    let out = gfg(&["render", model("conjugate").to_str().unwrap(), "--out", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(std::fs::read_to_string(&path).unwrap().starts_with("digraph"));
}

#[test]
fn infer_svi_reports_are_reproducible() {
    let path = model("conjugate");
    let args = [
        "infer-svi",
        path.to_str().unwrap(),
        "--steps",
        "400",
        "--seed",
        "11",
        "--json",
    ];
    let a = gfg(&args);
    let b = gfg(&args);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(stdout(&a), stdout(&b), "same seed, byte-identical report");
    let doc: serde_json::Value = serde_json::from_str(&stdout(&a)).unwrap();
    assert_eq!(doc["seed"], 11);
    assert!(doc["posterior"]["z"]["mean"].is_number());
}

#[test]
fn infer_svi_runs_on_discrete_and_composed_models() {
    for name in ["discrete_mdp", "slam_mdp"] {
        let out = gfg(&[
            "infer-svi",
            model(name).to_str().unwrap(),
            "--steps",
            "150",
            "--mc-samples",
            "4",
            "--seed",
            "3",
        ]);
        assert_eq!(out.status.code(), Some(0), "{name}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(stdout(&out).contains("categorical("));
    }
}

#[test]
fn infer_smp_parallel_matches_serial_byte_for_byte() {
    for name in ["two_collections", "detached_pair", "toy_slam"] {
        let base = [
            model(name).to_str().unwrap().to_string(),
            "--sweeps".into(),
            "2".into(),
            "--steps".into(),
            "200".into(),
            "--seed".into(),
            "5".into(),
            "--json".into(),
        ];
        let mut serial_args = vec!["infer-smp".to_string()];
        serial_args.extend(base.iter().cloned());
        serial_args.extend(["--mode".to_string(), "serial".to_string()]);
        let mut parallel_args = vec!["infer-smp".to_string()];
        parallel_args.extend(base.iter().cloned());
        parallel_args.extend(["--mode".to_string(), "parallel".to_string()]);

        let serial = gfg(&serial_args.iter().map(|s| s.as_str()).collect::<Vec<_>>());
        let parallel = gfg(&parallel_args.iter().map(|s| s.as_str()).collect::<Vec<_>>());
        assert_eq!(serial.status.code(), Some(0), "{name}: {}", String::from_utf8_lossy(&serial.stderr));
        assert_eq!(parallel.status.code(), Some(0));
        let s: serde_json::Value = serde_json::from_str(&stdout(&serial)).unwrap();
        let p: serde_json::Value = serde_json::from_str(&stdout(&parallel)).unwrap();
        assert_eq!(s["collections"], p["collections"], "{name}: results must agree bitwise");
        assert_eq!(s["sweep_log"], p["sweep_log"], "{name}");
        assert_eq!(s["mode"], "serial");
        assert_eq!(p["mode"], "parallel");
    }
}

#[test]
fn oracle_covers_enumeration_and_conjugacy_or_rejects() {
    let out = gfg(&["oracle", model("discrete_mdp").to_str().unwrap(), "--json"]);
    assert_eq!(out.status.code(), Some(0));
    let doc: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(doc["method"], "enumeration");

    let out = gfg(&["oracle", model("conjugate").to_str().unwrap(), "--json"]);
    assert_eq!(out.status.code(), Some(0));
    let doc: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(doc["method"], "conjugate");
    let mean = doc["posterior"]["z"]["mean"].as_f64().unwrap();
    assert!((mean - 1.0).abs() < 1e-9);

    // Continuous non-conjugate model: not eligible.
    let out = gfg(&["oracle", model("detached_pair").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn saved_reports_rerender_as_text() {
    let dir = std::env::temp_dir().join("gfg-cli-tests");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("fit.json");
    let out = gfg(&[
        "infer-svi",
        model("conjugate").to_str().unwrap(),
        "--steps",
        "200",
        "--seed",
        "2",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let rerendered = gfg(&["report", path.to_str().unwrap()]);
    assert_eq!(rerendered.status.code(), Some(0));
    assert_eq!(stdout(&out), stdout(&rerendered), "text and re-rendered text agree");

    let smp_path = dir.join("smp.json");
    let out = gfg(&[
        "infer-smp",
        model("two_collections").to_str().unwrap(),
        "--sweeps",
        "2",
        "--steps",
        "150",
        "--out",
        smp_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let rerendered = gfg(&["report", smp_path.to_str().unwrap()]);
    assert_eq!(rerendered.status.code(), Some(0));
    assert!(stdout(&rerendered).contains("message passing"));
}
