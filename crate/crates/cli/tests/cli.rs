use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_softcbm"))
}

fn mnist_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist01")
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn gen_umnist_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        run(&["gen-umnist", "--mnist-dir", p(&mnist_dir()), "--n", "100", "--p", "5", "--delta", "0", "--seed", "7", "--out", p(out)]);
    }
    for f in ["dataset.jsonl", "planes.scl", "meta.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let cfg = read_json(&a.join("config.json"));
    assert_eq!(cfg["command"], "gen-umnist");
    assert_eq!(cfg["seed"], 7);
    assert_eq!(cfg["args"]["n"], 100);
    assert!(cfg["version"].is_string());
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, json!({"mnist_dir": p(&mnist_dir()), "n": 30, "p": 3, "delta": 0.4}).to_string()).unwrap();
    let out = dir.path().join("ds");
    run(&["gen-umnist", "--config", p(&cfg), "--p", "2", "--out", p(&out)]);
    let meta = read_json(&out.join("meta.json"));
    assert_eq!(meta["generator"]["config"]["p"], 2);
    assert_eq!(meta["generator"]["config"]["n"], 30);
    assert_eq!(meta["generator"]["config"]["delta"], 0.4);
    let resolved = read_json(&out.join("config.json"));
    assert_eq!(resolved["args"]["p"], 2);
    assert_eq!(resolved["args"]["delta"], 0.4);
}

#[test]
fn failures_print_one_json_line_and_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["train", "--data", "/nonexistent", "--out", p(dir.path())],
        vec!["gen-toy", "--n", "notanumber", "--out", p(dir.path())],
        vec!["frobnicate"],
        vec!["eval-curve", "--model", "/nonexistent.scl", "--data", "/nonexistent", "--out", p(dir.path())],
    ] {
        let out = bin().args(&args).output().unwrap();
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        let stderr = String::from_utf8(out.stderr).unwrap();
        let lines: Vec<&str> = stderr.lines().collect();
        assert_eq!(lines.len(), 1, "{stderr}");
        let v: Value = serde_json::from_str(lines[0]).unwrap();
        assert!(v["error"].is_string() && v["message"].is_string());
    }
}

/// Toy dataset plus a trained CBM, shared by the evaluation tests.
fn toy_run(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("toy");
    run(&["gen-toy", "--n", "400", "--seed", "3", "--out", p(&data)]);
    let models = dir.join("models");
    run(&[
        "train", "--data", p(&data), "--variant", "cbm", "--alpha", "1.0", "--epochs", "30", "--batch-size", "64", "--lr", "0.005",
        "--seed", "1", "--out", p(&models),
    ]);
    (data, models.join("model.scl"))
}

#[test]
fn train_intervene_and_evaluate_on_toy_data() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model) = toy_run(dir.path());
    let sidecar = read_json(&model.with_extension("json"));
    assert_eq!(sidecar["config"]["alpha"], 1.0);
    assert_eq!(sidecar["config"]["variant"], "cbm");
    assert_eq!(sidecar["provenance"]["labels"], "truth");
    assert!(!sidecar["history"]["epochs"].as_array().unwrap().is_empty());

    let mut aucs = Vec::new();
    for policy in ["random", "skyline"] {
        let out = dir.path().join(format!("curve-{policy}"));
        run(&[
            "eval-curve", "--model", p(&model), "--data", p(&data), "--policy", policy, "--granularity", "group", "--limit", "200",
            "--out", p(&out),
        ]);
        let c = read_json(&out.join("curve.json"));
        assert_eq!(c["accuracies"].as_array().unwrap().len(), 5);
        aucs.push(c["auc"].as_f64().unwrap());
        assert!(out.join("curve.csv").exists() && out.join("config.json").exists());
    }
    assert!(aucs[1] >= aucs[0], "skyline {} < random {}", aucs[1], aucs[0]);

    for source in ["truth", "noised", "coarse", "population"] {
        let out = dir.path().join(format!("traces-{source}"));
        run(&[
            "intervene", "--model", p(&model), "--data", p(&data), "--source", source, "--delta", "0.3", "--mode", "narrow",
            "--limit", "10", "--out", p(&out),
        ]);
        let csv = std::fs::read_to_string(out.join("traces.csv")).unwrap();
        assert!(csv.starts_with("sample_id,step,unit_id,predicted_class,p_true,correct\n"));
        assert_eq!(csv.lines().count(), 1 + 10 * 15);
    }

    let export = dir.path().join("all.csv");
    run(&["export", "--runs", p(&dir.path().join("curve-random")), p(&dir.path().join("curve-skyline")), "--out", p(&export)]);
    assert_eq!(std::fs::read_to_string(&export).unwrap().lines().count(), 1 + 2 * 5);

    let anns = dir.path().join("anns.jsonl");
    std::fs::write(
        &anns,
        [
            json!({"annotator_id": "u", "stimulus_id": "t000000", "group_id": "size", "mass": {"small": 70, "large": 30}}),
            json!({"record_id": "x", "annotation": {"annotator_id": "u", "stimulus_id": "t000001", "group_id": "size", "mass": {"medium": 100}}, "received_at_ms": 0}),
        ]
        .iter()
        .map(|v| v.to_string() + "\n")
        .collect::<String>(),
    )
    .unwrap();
    let cal = dir.path().join("cal");
    run(&["eval-calibration", "--model", p(&model), "--data", p(&data), "--annotations", p(&anns), "--out", p(&cal)]);
    let summary = read_json(&cal.join("calibration.json"));
    assert!(summary["concept_ece"].as_f64().unwrap() <= 1.0);
    assert_eq!(summary["annotation_stats"]["n_annotations"], 2);
    assert!(summary["annotation_ece"].is_number());
    let el = dir.path().join("elicited");
    run(&["intervene", "--model", p(&model), "--data", p(&data), "--source", "elicited", "--annotations", p(&anns), "--limit", "2", "--granularity", "group", "--out", p(&el)]);
}

#[test]
fn coarse_label_training_records_rho() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("toy");
    run(&["gen-toy", "--n", "60", "--out", p(&data)]);
    let out = dir.path().join("m");
    run(&["train", "--data", p(&data), "--variant", "cem", "--labels", "coarse", "--probably-rho", "0.8", "--epochs", "2", "--out", p(&out), "--name", "soft"]);
    let sidecar = read_json(&out.join("soft.json"));
    assert_eq!(sidecar["provenance"]["probably_rho"], 0.8);
    assert_eq!(sidecar["config"]["variant"], "cem");
}

struct Server(std::process::Child, u16);

impl Server {
    fn start(models: &Path, stimuli: &Path, log: &Path) -> Self {
        let mut child = bin()
            .args(["serve", "--port", "0", "--models-dir", p(models), "--stimuli-dir", p(stimuli), "--log-path", p(log), "--cors-origin", "*"])
            .stdout(Stdio::piped())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let port = serde_json::from_str::<Value>(&line).unwrap()["listening"].as_u64().unwrap() as u16;
        Server(child, port)
    }

    fn url(&self, path: &str) -> String {
        format!("http://127.0.0.1:{}{path}", self.1)
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn served_annotations_survive_kill_and_restart() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("toy");
    run(&["gen-toy", "--n", "30", "--out", p(&data)]);
    let models = dir.path().join("models");
    run(&["train", "--data", p(&data), "--epochs", "1", "--out", p(&models), "--name", "tiny"]);
    let log = dir.path().join("log").join("annotations.jsonl");

    let post = |srv: &Server, i: u32| {
        let body = json!({
            "record_id": format!("00000000-0000-4000-8000-{i:012}"),
            "annotation": {"annotator_id": "u", "stimulus_id": format!("t{:06}", i % 30), "group_id": "size", "mass": {"small": 70, "large": 30}},
        });
        ureq::post(&srv.url("/api/annotations")).send_json(body).unwrap().into_json::<Value>().unwrap()
    };

    let srv = Server::start(&models, &data, &log);
    for i in 0..25 {
        assert_eq!(post(&srv, i)["duplicate"], false);
    }
    let models_list: Value = ureq::get(&srv.url("/api/models")).call().unwrap().into_json().unwrap();
    assert_eq!(models_list[0]["id"], "tiny");
    drop(srv); // SIGKILL

    let lines = std::fs::read_to_string(&log).unwrap();
    assert_eq!(lines.lines().count(), 25);
    let srv = Server::start(&models, &data, &log);
    assert_eq!(post(&srv, 3)["duplicate"], true);
    assert_eq!(post(&srv, 99)["duplicate"], false);
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 26);

    let resp: Value = ureq::post(&srv.url("/api/intervene"))
        .send_json(json!({"model_id": "tiny", "sample_id": "t000004", "group_id": "size", "masses": {"small": 100}}))
        .unwrap()
        .into_json()
        .unwrap();
    assert_eq!(resp["interventions"]["size::small"], 1.0);
    let err = ureq::get(&srv.url("/api/stimuli/missing/image")).call().unwrap_err();
    assert!(matches!(err, ureq::Error::Status(404, _)));
}
