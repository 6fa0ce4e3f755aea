use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_qprepair");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn error_line(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    assert_eq!(text.trim().lines().count(), 1, "{text}");
    serde_json::from_str(text.trim()).unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn assert_schema(name: &str, path: &Path) {
    let schema = json(&Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("../core/schemas/{name}.schema.json")));
    let validator = jsonschema::validator_for(&schema).unwrap();
    let instance = json(path);
    let errors: Vec<String> = validator.iter_errors(&instance).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{name}: {errors:#?}");
}

#[test]
fn default_paths_chain_the_whole_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--seed", "33", "synth"]);
    ok(d, &["gsn-ft"]);
    ok(d, &["repair"]);
    ok(d, &["certify"]);
    ok(d, &["stress", "--n-mc", "50"]);
    ok(d, &["proximity"]);
    let gsn = ok(d, &["gsn", "--bundle", "out/repaired"]);
    let printed: serde_json::Value = serde_json::from_slice(&gsn.stdout).unwrap();
    assert_eq!(printed, json(&d.join("out/gsn.json")));
    ok(d, &["sweep", "--ranks", "1,2"]);

    let out = d.join("out");
    for (schema, file) in [
        ("gsn_ft_trace", "gsn_ft_trace.json"),
        ("repair_trace", "repair_trace.json"),
        ("certificate", "certificate.json"),
        ("stress", "stress.json"),
        ("proximity", "proximity.json"),
        ("sweep", "sweep.json"),
        ("manifest", "problem/manifest.json"),
        ("manifest", "aux/manifest.json"),
        ("manifest", "tuned/manifest.json"),
        ("manifest", "repaired/manifest.json"),
    ] {
        assert_schema(schema, &out.join(file));
    }
    let cert = json(&out.join("certificate.json"));
    assert!(cert["repair"].as_array().unwrap().iter().all(|e| e["meets_gamma_s"] == true));
    for name in ["synth", "gsn-ft", "repair", "certify", "stress", "proximity", "gsn", "sweep"] {
        assert!(out.join(format!("run_config.{name}.json")).exists(), "{name}");
    }
}

#[test]
fn thread_count_does_not_change_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth"]);
    ok(d, &["repair", "--bundle", "out/problem"]);
    ok(d, &["certify"]);
    ok(d, &["--threads", "1", "stress", "--n-mc", "200"]);
    let single = fs::read(d.join("out/stress.json")).unwrap();
    ok(d, &["--threads", "3", "stress", "--n-mc", "200"]);
    assert_eq!(fs::read(d.join("out/stress.json")).unwrap(), single);
}

#[test]
fn bad_arguments_exit_2_with_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["repair", "--rank", "0"][..],
        &["repair", "--no-such-flag"],
        &["stress", "--multipliers", "5,1"],
        &["sweep"],
        &["synth", "--classes", "1"],
    ] {
        let out = run(dir.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        let line = error_line(&out);
        assert_eq!(line["code"], 2);
        assert!(line["message"].as_str().is_some_and(|m| !m.is_empty()));
    }
    assert!(!dir.path().join("out").exists(), "flags are checked before anything is written");
}

#[test]
fn unconverged_repair_exits_4_and_certify_refuses() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth"]);
    let out = run(d, &["repair", "--bundle", "out/problem", "--max-iters", "1"]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_line(&out)["code"], 4);
    assert_eq!(json(&d.join("out/repair_trace.json"))["converged"], false);

    let out = run(d, &["certify"]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_line(&out)["code"], 4);
    assert!(!d.join("out/certificate.json").exists());
}

#[test]
fn unreadable_inputs_are_invalid_input() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["certify"]);
    assert_eq!(out.status.code(), Some(2));
    let line = error_line(&out);
    assert_eq!(line["error"], "invalid-input");
    assert!(line["message"].as_str().unwrap().contains("out/repaired"));
}

#[test]
fn aux_overlapping_the_bundle_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth"]);
    let aux = qprepair::load(&d.join("out/aux")).unwrap().samples("aux").unwrap();
    let mut problem = qprepair::load(&d.join("out/problem")).unwrap();
    problem.put_samples("eval", &aux[..2], aux[0].v.len(), qprepair::DType::F64);
    qprepair::save(&problem, &d.join("overlap")).unwrap();

    let out = run(d, &["gsn-ft", "--bundle", "overlap"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out)["message"].as_str().unwrap().contains(&aux[0].id));
    assert!(!d.join("out/tuned").exists());
}

#[test]
fn help_exits_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["--help"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("repair"));
}
