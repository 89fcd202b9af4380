use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sipcond"));
    cmd.env_remove("SIPCOND_OUTPUT_DIR");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn schema(name: &str) -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(name);
    let value: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    jsonschema::validator_for(&value).expect("schema compiles")
}

fn assert_valid(validator: &jsonschema::Validator, instance: &Value) {
    let errors: Vec<String> = validator.iter_errors(instance).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}\n{instance}");
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn read_lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn write_config(dir: &Path, name: &str, config: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    path
}

fn minimal(out: &Path) -> Value {
    json!({
        "n": 8, "l": 8, "d": 1e-4, "k": 1,
        "condensates": [[0, 8]],
        "t_end": 0.1,
        "master_seed": 3,
        "output_dir": out,
    })
}

#[test]
fn simulate_minimal_emits_trace_events() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), "run.json", &minimal(&out));
    let res = run(bin().arg("simulate").arg("--config").arg(&cfg));
    assert!(res.status.success(), "{}", stderr(&res));

    let lines = read_lines(&out.join("events.jsonl"));
    assert!(!lines.is_empty());
    let line_schema = schema("events-line.v1.json");
    for line in &lines {
        assert_valid(&line_schema, line);
        assert!(line.get("t_trace").is_some(), "raw events are off by default");
    }
    let summary = read_json(&out.join("summary.json"));
    assert_valid(&schema("summary.v1.json"), &summary);
    assert_eq!(summary["config"]["d"], json!(1e-4));
}

#[test]
fn record_events_adds_raw_lines() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let mut config = minimal(&out);
    config["t_end"] = json!(0.01);
    let cfg = write_config(tmp.path(), "run.json", &config);
    let res = run(bin().arg("simulate").arg("--config").arg(&cfg).arg("--record-events"));
    assert!(res.status.success(), "{}", stderr(&res));
    let lines = read_lines(&out.join("events.jsonl"));
    let raw = lines.iter().filter(|l| l.get("from").is_some()).count();
    assert!(raw > 0);
    let line_schema = schema("events-line.v1.json");
    let mut last = 0.0;
    for line in &lines {
        assert_valid(&line_schema, line);
        let t = line.get("t").or_else(|| line.get("t_raw")).and_then(Value::as_f64).unwrap();
        assert!(t >= last);
        last = t;
    }
}

#[test]
fn adjacent_condensates_exit_2() {
    let tmp = TempDir::new().unwrap();
    let config = json!({
        "n": 8, "l": 8, "d": 1e-4, "k": 2,
        "condensates": [[0, 4], [1, 4]],
        "t_end": 0.1,
        "output_dir": tmp.path().join("out"),
    });
    let cfg = write_config(tmp.path(), "bad.json", &config);
    let res = run(bin().arg("simulate").arg("--config").arg(&cfg));
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).contains("isolation constraint"), "{}", stderr(&res));
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn malformed_and_missing_configs() {
    let tmp = TempDir::new().unwrap();
    let mut config = minimal(&tmp.path().join("out"));
    config["colour"] = json!("blue");
    let cfg = write_config(tmp.path(), "unknown.json", &config);
    assert_eq!(run(bin().arg("simulate").arg("--config").arg(&cfg)).status.code(), Some(2));

    let mut config = minimal(&tmp.path().join("out"));
    config["condensates"] = json!([[0, 7]]);
    let cfg = write_config(tmp.path(), "mass.json", &config);
    assert_eq!(run(bin().arg("simulate").arg("--config").arg(&cfg)).status.code(), Some(2));

    let missing = tmp.path().join("nope.json");
    assert_eq!(run(bin().arg("simulate").arg("--config").arg(&missing)).status.code(), Some(3));
}

#[test]
fn unwritable_output_is_an_io_error() {
    let tmp = TempDir::new().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let cfg = write_config(tmp.path(), "run.json", &minimal(&blocker.join("sub")));
    assert_eq!(run(bin().arg("simulate").arg("--config").arg(&cfg)).status.code(), Some(3));
}

#[test]
fn repeated_seed_gives_identical_files() {
    let tmp = TempDir::new().unwrap();
    let mut config = minimal(&tmp.path().join("unused"));
    config["replicas"] = json!(3);
    config["probes"] = json!([0.02, 0.05]);
    let cfg = write_config(tmp.path(), "run.json", &config);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        let res = run(bin()
            .arg("simulate")
            .arg("--config")
            .arg(&cfg)
            .arg("--seed")
            .arg("77")
            .arg("--out")
            .arg(dir));
        assert!(res.status.success(), "{}", stderr(&res));
    }
    assert_eq!(fs::read(a.join("events.jsonl")).unwrap(), fs::read(b.join("events.jsonl")).unwrap());
    let sa = read_json(&a.join("summary.json"));
    let mut sb = read_json(&b.join("summary.json"));
    sb["config"]["output_dir"] = sa["config"]["output_dir"].clone();
    assert_eq!(sa, sb);
    assert_eq!(sa["config"]["master_seed"], json!(77));
}

#[test]
fn summary_reruns_byte_for_byte() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let mut config = minimal(&out);
    config.as_object_mut().unwrap().remove("d");
    config["d_rule"] = json!({ "c": 1.0, "alpha": 4.0 });
    config["replicas"] = json!(2);
    let cfg = write_config(tmp.path(), "run.json", &config);
    assert!(run(bin().arg("simulate").arg("--config").arg(&cfg)).status.success());
    let events = fs::read(out.join("events.jsonl")).unwrap();
    let summary = fs::read(out.join("summary.json")).unwrap();
    let saved = write_config(tmp.path(), "saved.json", &serde_json::from_slice(&summary).unwrap());

    let res = run(bin().arg("simulate").arg("--config").arg(&saved));
    assert!(res.status.success(), "{}", stderr(&res));
    assert_eq!(fs::read(out.join("events.jsonl")).unwrap(), events);
    assert_eq!(fs::read(out.join("summary.json")).unwrap(), summary);
}

#[test]
fn output_dir_env_override() {
    let tmp = TempDir::new().unwrap();
    let configured = tmp.path().join("configured");
    let overridden = tmp.path().join("overridden");
    let cfg = write_config(tmp.path(), "run.json", &minimal(&configured));
    let res = run(bin()
        .env("SIPCOND_OUTPUT_DIR", &overridden)
        .arg("simulate")
        .arg("--config")
        .arg(&cfg));
    assert!(res.status.success(), "{}", stderr(&res));
    assert!(overridden.join("summary.json").exists());
    assert!(!configured.exists());
}

fn cbm_config(tmp: &Path, k: usize, condensates: Value, extra: Value) -> PathBuf {
    let mut config = json!({
        "n": 32, "l": 32, "d": 1e-7, "k": k,
        "condensates": condensates,
        "t_end": 2.0,
        "master_seed": 5,
        "output_dir": tmp.join("out"),
    });
    for (key, v) in extra.as_object().unwrap() {
        config[key] = v.clone();
    }
    write_config(tmp, "cbm.json", &config)
}

#[test]
fn cbm_single_point_never_coalesces() {
    let tmp = TempDir::new().unwrap();
    let cfg = cbm_config(tmp.path(), 1, json!([[0, 32]]), json!({ "replicas": 20, "probes": [0.5] }));
    let res = run(bin().arg("cbm").arg("--config").arg(&cfg));
    assert!(res.status.success(), "{}", stderr(&res));
    let out = tmp.path().join("out");
    let path_schema = schema("cbm-path.v1.json");
    let lines = read_lines(&out.join("paths.jsonl"));
    assert_eq!(lines.len(), 20);
    for line in &lines {
        assert_valid(&path_schema, line);
        assert_eq!(line["coalescences"], json!([]));
    }
    let summary = read_json(&out.join("summary.json"));
    assert_valid(&schema("summary.v1.json"), &summary);
    assert_eq!(summary["coalesced"], json!(0));
    assert_eq!(summary["first_coalescence"], Value::Null);
}

#[test]
fn cbm_pair_mean_matches_exit_law() {
    let tmp = TempDir::new().unwrap();
    let cfg = cbm_config(
        tmp.path(),
        2,
        json!([[0, 16], [16, 16]]),
        json!({ "replicas": 10000, "u0": [0.0, 0.5], "rho": 1.0, "dt": 1e-4 }),
    );
    let res = run(bin().arg("cbm").arg("--config").arg(&cfg));
    assert!(res.status.success(), "{}", stderr(&res));
    let summary = read_json(&tmp.path().join("out").join("summary.json"));
    assert_valid(&schema("summary.v1.json"), &summary);
    assert_eq!(summary["coalesced"], json!(10000));
    let mean = summary["first_coalescence"]["mean"].as_f64().unwrap();
    let se = summary["first_coalescence"]["stderr"].as_f64().unwrap();
    assert_eq!(summary["pair_exit_law"]["mean_time"], json!(0.0625));
    assert!((mean - 0.0625).abs() < 3.0 * se + 2e-4, "mean {mean} ± {se}");
}

#[test]
fn cbm_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let cfg = cbm_config(tmp.path(), 2, json!([[0, 16], [16, 16]]), json!({ "replicas": 50, "probes": [0.01] }));
    let out = tmp.path().join("out");
    assert!(run(bin().arg("cbm").arg("--config").arg(&cfg)).status.success());
    let first = fs::read(out.join("paths.jsonl")).unwrap();
    assert!(run(bin().arg("cbm").arg("--config").arg(&cfg)).status.success());
    assert_eq!(fs::read(out.join("paths.jsonl")).unwrap(), first);
}

fn bd_exact(args: &[&str]) -> Value {
    let res = run(bin().arg("bd-exact").args(args));
    assert!(res.status.success(), "{}", stderr(&res));
    let value: Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_valid(&schema("bd-exact.v1.json"), &value);
    value
}

#[test]
fn bd_exact_values() {
    let inner = bd_exact(&["--m", "2", "--variant", "inner"]);
    assert!((inner["p"].as_f64().unwrap() - 0.5).abs() < 1e-12);

    let edge = bd_exact(&["--m", "2", "--variant", "edge", "--d", "0.01"]);
    assert!((edge["p"].as_f64().unwrap() - 1.01 / 2.03).abs() < 1e-12);

    let top = bd_exact(&["--m", "16", "--i", "16"]);
    assert_eq!(top["p"], json!(1.0));
}

#[test]
fn bd_exact_rejects_bad_ranges() {
    for args in [
        vec!["--m", "2", "--i", "3"],
        vec!["--m", "4", "--d", "-1"],
        vec!["--m", "4", "--theta", "0"],
    ] {
        let res = run(bin().arg("bd-exact").args(&args));
        assert_eq!(res.status.code(), Some(2), "{args:?}: {}", stderr(&res));
    }
}

fn verify(tmp: &Path, args: &[&str]) -> Output {
    run(bin().arg("verify").arg("--out").arg(tmp).args(args))
}

#[test]
fn verify_detailed_balance_passes() {
    let tmp = TempDir::new().unwrap();
    let res = verify(tmp.path(), &["--which", "detailed-balance", "--seed", "11"]);
    assert!(res.status.success(), "{}", stderr(&res));
    let report = read_json(&tmp.path().join("report.json"));
    assert_valid(&schema("report.v1.json"), &report);
    assert_eq!(report["passed"], json!(true));
    assert_eq!(report["seed"], json!(11));
    let check = &report["report"]["checks"][0];
    assert!(check["value"].as_f64().unwrap() <= check["threshold"].as_f64().unwrap());
}

#[test]
fn verify_bd_oracle_reduced_passes() {
    let tmp = TempDir::new().unwrap();
    let config = json!({ "verify": { "bd_oracle": { "walks": 20000, "m_grid": [2, 8], "bounds_max_m": 64 } } });
    let cfg = write_config(tmp.path(), "verify.json", &config);
    let res = verify(tmp.path(), &["--which", "bd-oracle", "--config", cfg.to_str().unwrap()]);
    assert!(res.status.success(), "{}", stderr(&res));
    let report = read_json(&tmp.path().join("report.json"));
    assert_valid(&schema("report.v1.json"), &report);
    assert!(report["report"]["checks"].as_array().unwrap().len() > 1);
}

#[test]
fn verify_theorem4_with_too_few_replicas_exits_2() {
    let tmp = TempDir::new().unwrap();
    let res = verify(tmp.path(), &["--which", "theorem4", "--replicas", "10"]);
    assert_eq!(res.status.code(), Some(2), "{}", stderr(&res));
    assert!(stderr(&res).contains("insufficient data"), "{}", stderr(&res));
}

#[test]
fn verify_unknown_suite_exits_2() {
    let tmp = TempDir::new().unwrap();
    let res = verify(tmp.path(), &["--which", "theorem9"]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn config_schema_accepts_examples() {
    let validator = schema("run-config.v1.json");
    assert_valid(&validator, &minimal(Path::new("out")));
    let mut rule = minimal(Path::new("out"));
    rule.as_object_mut().unwrap().remove("d");
    rule["d_rule"] = json!({ "c": 2.0, "alpha": 3.5 });
    assert_valid(&validator, &rule);
    let mut neither = rule.clone();
    neither.as_object_mut().unwrap().remove("d_rule");
    assert!(!validator.is_valid(&neither));
}
