use nhtb::config::{preset, ExperimentConfig, PRESETS};
use nhtb::estimator::Context;
use nhtb::Error;

const BASE: &str = r#"{
  "measure": { "kind": "cantor", "ratio": 0.25, "depth": 3, "dim": 1 },
  "kernel": { "name": "cauchy" },
  "goodness": { "alpha": 1, "d": 1, "r": 3 }
}"#;

fn err_path(text: &str) -> (String, String) {
    match ExperimentConfig::from_json(text) {
        Err(Error::Config { path, message }) => (path, message),
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn presets_parse_and_round_trip() {
    for name in PRESETS {
        let cfg = preset(name).unwrap();
        let again = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg.to_json(), again.to_json());
    }
    assert!(preset("nope").is_err());
}

#[test]
fn reference_preset_has_expected_size() {
    let ctx = Context::build(&preset("cantor-cauchy").unwrap()).unwrap();
    assert_eq!(ctx.m.len(), 4096);
    assert_eq!(ctx.tf.num_levels(), 12);
}

#[test]
fn defaults_fill_in() {
    let cfg = ExperimentConfig::from_json(BASE).unwrap();
    assert_eq!(cfg.p, 2.0);
    assert_eq!(cfg.goodness.max_excess, 40);
    assert!(cfg.output.cells_csv);
}

#[test]
fn r_constraint_violation_is_reported() {
    let (path, msg) = err_path(&BASE.replace(r#""r": 3"#, r#""r": 1"#));
    assert_eq!(path, "goodness.r");
    assert!(msg.contains("2^(r(1-gamma)) >= 4 lambda"), "{msg}");
}

#[test]
fn unknown_and_mistyped_fields_carry_paths() {
    let (path, _) = err_path(&BASE.replace(r#""depth": 3"#, r#""depth": 3, "extra": 1"#));
    assert!(path.starts_with("measure"), "{path}");
    // Tagged variants are buffered by serde, so the path stops at the variant.
    let (path, msg) = err_path(&BASE.replace(r#""ratio": 0.25"#, r#""ratio": "x""#));
    assert_eq!(path, "measure");
    assert!(msg.contains("invalid type"), "{msg}");
    let (path, _) = err_path(&BASE.replace(r#""r": 3"#, r#""r": "x""#));
    assert_eq!(path, "goodness.r");
    let (path, _) = err_path(&BASE.replace("}\n}", "},\n \"p\": 0.5\n}"));
    assert_eq!(path, "p");
}

#[test]
fn build_time_errors_carry_paths() {
    let mut cfg = ExperimentConfig::from_json(BASE).unwrap();
    cfg.truncation_eps = Some(10.0);
    match Context::build(&cfg) {
        Err(Error::Config { path, .. }) => assert_eq!(path, "truncation_eps"),
        Err(e) => panic!("{e}"),
        Ok(_) => panic!("accepted"),
    }
    let mut cfg = ExperimentConfig::from_json(BASE).unwrap();
    cfg.window.top = Some(-20);
    assert!(matches!(Context::build(&cfg), Err(Error::Config { path, .. }) if path == "window.top"));
    let mut cfg = ExperimentConfig::from_json(BASE).unwrap();
    cfg.goodness.max_excess = 64;
    assert!(matches!(Context::build(&cfg), Err(Error::Config { path, .. }) if path == "goodness.max_excess"));
}
