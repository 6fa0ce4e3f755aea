use std::path::PathBuf;

use qprepair::bundle::report_json;
use qprepair::{
    certify, generate, gsn_ft, proximity_bands, repair, stress_test, DType, GsnFtConfig,
    RepairHyper, SynthConfig, TensorBundle, DEFAULT_MULTIPLIERS,
};
use serde::Serialize;

fn schema(name: &str) -> serde_json::Value {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "schemas", &format!("{name}.schema.json")]
        .iter()
        .collect();
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn assert_valid_json(name: &str, instance: &serde_json::Value) {
    let validator = jsonschema::validator_for(&schema(name)).unwrap();
    let errors: Vec<String> = validator.iter_errors(instance).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errors.is_empty(), "{name}: {errors:#?}");
}

fn assert_valid<T: Serialize>(name: &str, report: &T) {
    let text = report_json(report).unwrap();
    assert_valid_json(name, &serde_json::from_str(&text).unwrap());
}

#[test]
fn every_report_kind_matches_its_schema() {
    let p = generate(&SynthConfig { seed: 33, ..Default::default() }).unwrap();
    let (tuned, ft) = gsn_ft(&p.model, &p.aux, &GsnFtConfig::default()).unwrap();
    assert_valid("gsn_ft_trace", &ft);

    let remain: Vec<_> = p
        .remain
        .iter()
        .filter(|s| tuned.predict(&s.v).unwrap() == s.label)
        .cloned()
        .collect();
    let hyper = RepairHyper::default();
    let out = repair(&tuned, &p.repair, &remain, &hyper).unwrap();
    assert_valid("repair_trace", &out.trace);

    let cert = certify(&out.model, &p.repair, &remain, &hyper, &out.trace).unwrap();
    assert_valid("certificate", &cert);

    let stress = stress_test(&out.model, &p.repair, &cert, &DEFAULT_MULTIPLIERS, 50, 0).unwrap();
    assert_valid("stress", &stress);

    let prox = proximity_bands(&out.model, &p.eval, &p.repair, &cert, &[1.0, 5.0, 20.0]).unwrap();
    assert_valid("proximity", &prox);

    let mut b = TensorBundle::with_model(&out.model, DType::F64);
    b.put_samples("repair", &p.repair, p.model.d_in(), DType::F32);
    let (manifest, _) = b.encode().unwrap();
    assert_valid_json("manifest", &serde_json::from_slice(&manifest).unwrap());
}

#[test]
fn infeasible_trace_matches_schema() {
    use qprepair::{ActivationKind, DenseMatrix, Error, HeadModel, Sample};
    let b_c1 = 1.01f64.tanh() - 0.505f64.tanh();
    let m = HeadModel::new(
        DenseMatrix::from_rows(&[vec![1.0], vec![0.5]]).unwrap(),
        vec![0.0, 0.0],
        DenseMatrix::identity(2),
        vec![0.0, b_c1],
        ActivationKind::Tanh,
    )
    .unwrap();
    let remain = vec![Sample::new("p0", vec![1.0], 1), Sample::new("p1", vec![1.02], 0)];
    let fix = vec![Sample::new("r0", vec![3.0], 0)];
    let hyper = RepairHyper { rank: 1, ..Default::default() };
    match repair(&m, &fix, &remain, &hyper) {
        Err(Error::InfeasibleRepair { trace, .. }) => assert_valid("repair_trace", &trace),
        other => panic!("expected infeasibility, got {other:?}"),
    }
}

#[test]
fn schemas_reject_missing_keys() {
    let validator = jsonschema::validator_for(&schema("certificate")).unwrap();
    assert!(!validator.is_valid(&serde_json::json!({ "lipschitz": 1.0 })));
    let validator = jsonschema::validator_for(&schema("manifest")).unwrap();
    let bad = serde_json::json!({
        "format_version": "1.0",
        "tensors": [{ "name": "W", "dtype": "f16", "shape": [1], "offset": 0, "length": 2 }]
    });
    assert!(!validator.is_valid(&bad));
}
