use std::fs;
use std::process::Command;

fn reflectrec() -> Command {
    Command::new(env!("CARGO_BIN_EXE_reflectrec"))
}

#[test]
fn synth_then_staged_run_with_mock_backend() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let out = reflectrec().args(["synth", "--users", "15", "--out"]).arg(&data).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let config = dir.path().join("run.toml");
    fs::write(
        &config,
        format!(
            "[data]\ncatalog = {:?}\ninteractions = {:?}\n[memory]\nrounds = 1\n[bandit]\nsteps = 640\n[llm]\nscenario = \"contextual\"\n",
            data.join("catalog.jsonl"),
            data.join("interactions.jsonl")
        ),
    )
    .unwrap();
    let base = |cmd: &str| {
        let mut c = reflectrec();
        c.arg("--config").arg(&config).args(["--backend", "mock", "--seed", "4", "--run-dir"]).arg(&run).arg(cmd);
        c
    };

    let out = base("train-cf").output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("needs ingest"));

    for stage in ["ingest", "split", "train-cf", "cluster", "predict-offline", "reflect", "score"] {
        let out = base(stage).output().unwrap();
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = base("run").output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(!stderr.contains("ran score") && stderr.contains("ran iterate"), "{stderr}");
    let csv = fs::read_to_string(run.join("report.csv")).unwrap();
    assert!(csv.starts_with("mode,users,excluded,fallbacks,HR@1"));
    assert_eq!(csv.lines().count(), 9);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["seeds"]["master"], 4);
}

#[test]
fn rejects_unknown_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "[memory]\nroundz = 2\n").unwrap();
    let out = reflectrec().arg("--config").arg(&config).arg("show-config").output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("roundz"));
}
