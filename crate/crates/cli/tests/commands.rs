use std::process::{Command, Output};

fn asymmkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asymmkit"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn analyze_reports_totals() {
    let o = asymmkit(&[
        "analyze",
        "--arch",
        "asymmnet-l",
        "--multiplier",
        "1.0",
        "--input",
        "224",
    ]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("total: 216.9M MAdds"));
    let o = asymmkit(&["analyze", "--arch", "asymmnet-s", "--multiplier", "0.35"]);
    assert!(stdout(&o).contains("total: 15.2M MAdds"));
}

#[test]
fn analyze_struct_is_json() {
    let o = asymmkit(&["analyze", "--arch", "mbv3-s", "--format", "struct"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["name"], "mbv3-s");
    assert!(v["total_madds"].as_u64().unwrap() > 50_000_000);
}

#[test]
fn dumped_spec_analyzes_identically() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.spec");
    let path = path.to_str().unwrap();
    assert!(asymmkit(&[
        "dump-spec",
        "--arch",
        "pruned-l",
        "--multiplier",
        "0.75",
        "--out",
        path
    ])
    .status
    .success());
    let from_file = asymmkit(&["analyze", "--spec", path]);
    let builtin = asymmkit(&["analyze", "--arch", "pruned-l", "--multiplier", "0.75"]);
    assert_eq!(stdout(&from_file), stdout(&builtin));
    let again = asymmkit(&["dump-spec", "--arch", "pruned-l", "--multiplier", "0.75"]);
    assert_eq!(stdout(&again), std::fs::read_to_string(path).unwrap());
}

#[test]
fn compare_sweeps_rates() {
    let o = asymmkit(&["compare", "--archs", "asymmnet-l", "--rate", "0,1,2"]);
    let text = stdout(&o);
    for m in ["216.6", "216.9", "217.3"] {
        assert!(text.contains(m), "{text}");
    }
    let o = asymmkit(&[
        "compare",
        "--archs",
        "asymmnet-s",
        "--rate",
        "0,1,2",
        "--format",
        "struct",
    ]);
    let rows: Vec<serde_json::Value> = serde_json::from_slice(&o.stdout).unwrap();
    let params: Vec<f64> = rows
        .iter()
        .map(|r| r["params"].as_f64().unwrap() / 1e6)
        .collect();
    assert_eq!(params.len(), 3);
    assert!(params.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(rows[0]["multiplier"], 1.0);
}

#[test]
fn gradcheck_target_passes() {
    let o = asymmkit(&["gradcheck", "--target", "asymm-block", "--seed", "7"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("PASS"));
}

#[test]
fn exit_codes() {
    assert_eq!(
        asymmkit(&["analyze", "--arch", "resnet"]).status.code(),
        Some(1)
    );
    assert_eq!(asymmkit(&["analyze"]).status.code(), Some(1));
    assert_eq!(
        asymmkit(&["gradcheck", "--target", "nope"]).status.code(),
        Some(1)
    );
    assert_eq!(
        asymmkit(&["analyze", "--arch", "mbv1", "--multiplier", "-1"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(asymmkit(&["--help"]).status.code(), Some(0));
    let o = Command::new(env!("CARGO_BIN_EXE_asymmkit"))
        .args(["analyze", "--arch", "mbv1"])
        .env("ASYMMKIT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn diverging_training_is_a_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("hot.toml");
    std::fs::write(
        &cfg,
        "lr = 1e30\nwarmup_epochs = 0\nepochs = 2\nbatch_size = 4\n",
    )
    .unwrap();
    let o = asymmkit(&[
        "train",
        "--arch",
        "mbv1",
        "--multiplier",
        "0.25",
        "--input",
        "32",
        "--data",
        "synthetic:8",
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn output_is_deterministic_and_thread_independent() {
    let run = |threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_asymmkit"))
            .args([
                "train",
                "--arch",
                "asymmnet-s",
                "--multiplier",
                "0.35",
                "--data",
                "synthetic:8",
                "--epochs",
                "1",
            ])
            .env("ASYMMKIT_THREADS", threads)
            .output()
            .unwrap()
    };
    let (a, b) = (run("1"), run("3"));
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert!(!a.stdout.is_empty());
}
