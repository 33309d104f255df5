use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_survey-audit"));
    c.env("SOURCE_DATE_EPOCH", "1700000000");
    for (k, _) in std::env::vars() {
        if k.starts_with("SURVEY_AUDIT_") {
            c.env_remove(k);
        }
    }
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn")
}

const QN: &str = r#"{"name":"mini","questions":[
 {"id":"SEX","text":"What is this person's sex?","kind":"nominal",
  "answers":[{"code":"1","text":"Male"},{"code":"2","text":"Female"}]},
 {"id":"MIL","text":"Has this person ever served on active duty?","kind":"nominal",
  "answers":[{"code":"1","text":"Now on active duty"},{"code":"2","text":"On active duty in the past"},{"code":"3","text":"Never served"}]},
 {"id":"HICOV","text":"Is this person covered by any health insurance?","kind":"nominal",
  "answers":[{"code":"1","text":"Yes"},{"code":"2","text":"No"}]}]}"#;

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        std::fs::write(dir.path().join("qn.json"), QN).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }

    fn spec(&self, name: &str, spec: Value) -> String {
        std::fs::write(self.path(name), spec.to_string()).unwrap();
        self.s(name)
    }

    fn read_csv(&self, name: &str) -> Vec<Vec<String>> {
        let mut r = csv::Reader::from_path(self.path(name)).unwrap();
        r.records().map(|x| x.unwrap().iter().map(str::to_string).collect()).collect()
    }
}

fn sidecar(dir: &Path, command: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{command}.json"))).unwrap()).unwrap()
}

#[test]
fn survey_entropy_of_point_mass_and_uniform() {
    let f = Fixture::new();
    let spec = f.spec("spec.json", json!({"content": {"SEX": [60.0, 0.0], "MIL": [0.0, 0.0, 0.0], "HICOV": [0.0, 0.0]}}));
    let out = run(&["survey", "--questionnaire", &f.s("qn.json"), "--synthetic-spec", &spec, "--output-dir", &f.s("o")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = f.read_csv("o/survey.csv");
    let h: Vec<f64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(h[0].abs() < 1e-9, "{}", h[0]);
    assert!((h[1] - 1.0).abs() < 1e-12);
    assert!((h[2] - 1.0).abs() < 1e-12);
    let side = sidecar(&f.path("o"), "survey");
    assert_eq!(side["outputs"].as_array().unwrap().len(), 1);
    assert_eq!(side["seed"], 0);
}

#[test]
fn missing_question_scores_give_partial_exit() {
    let f = Fixture::new();
    let spec = f.spec("spec.json", json!({"content": {"SEX": [0.2, 0.0]}, "zero_default": false}));
    let out = run(&["survey", "--questionnaire", &f.s("qn.json"), "--synthetic-spec", &spec, "--output-dir", &f.s("o")]);
    assert_eq!(out.status.code(), Some(2));
    let side = sidecar(&f.path("o"), "survey");
    let failed: Vec<&str> = side["failed_questions"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(failed, ["MIL", "HICOV"]);
    let rows = f.read_csv("o/survey.csv");
    assert_eq!(rows[0][3], "ok");
    assert!(rows[1][3].starts_with("error"));
}

#[test]
fn fatal_errors_exit_one() {
    let f = Fixture::new();
    let out = run(&["survey", "--questionnaire", &f.s("absent.json"), "--output-dir", &f.s("o")]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["--config", &f.s("qn.json"), "survey"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_file_and_environment_precedence() {
    let f = Fixture::new();
    std::fs::write(f.path("cfg.json"), json!({"questionnaire": f.s("qn.json"), "seed": 7, "output_dir": f.s("from_file")}).to_string()).unwrap();
    let out = bin()
        .args(["--config", &f.s("cfg.json"), "survey", "--seed", "9"])
        .env("SURVEY_AUDIT_SEED", "11")
        .env("SURVEY_AUDIT_OUTPUT_DIR", f.s("from_env"))
        .env("SURVEY_AUDIT_STYLE", "chat")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let side = sidecar(&f.path("from_file"), "survey");
    assert_eq!(side["seed"], 9);
    assert_eq!(side["settings"]["style"], "chat");
    assert!(!f.path("from_env").exists());
}

#[test]
fn generated_halves_are_indistinguishable() {
    let f = Fixture::new();
    let spec = f.spec("spec.json", json!({"content": {"SEX": [0.4, 0.0], "MIL": [-1.0, 0.3, 1.2], "HICOV": [1.0, 0.0]}}));
    let out = run(&[
        "generate", "--questionnaire", &f.s("qn.json"), "--synthetic-spec", &spec, "--n", "2000", "--seed", "4",
        "--output-dir", &f.s("g"),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!f.path("g/generated.partial.csv").exists());
    let text = std::fs::read_to_string(f.path("g/generated.csv")).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    let body: Vec<&str> = lines.collect();
    assert_eq!(body.len(), 2000);
    let (a, b) = body.split_at(1000);
    std::fs::write(f.path("a.csv"), format!("{header}\n{}\n", a.join("\n"))).unwrap();
    std::fs::write(f.path("b.csv"), format!("{header}\n{}\n", b.join("\n"))).unwrap();
    let out = run(&[
        "discriminate", "--synthetic", &f.s("a.csv"), "--reference", &f.s("b.csv"), "--seeds", "10", "--trees", "50",
        "--output-dir", &f.s("d"),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(f.path("d/discriminator.json")).unwrap()).unwrap();
    let acc = report["mean_accuracy"].as_f64().unwrap();
    assert!((acc - 0.5).abs() < 0.05, "{acc}");
    assert_eq!(report["n_seeds"], 10);
    assert_eq!(f.read_csv("d/discriminator_seeds.csv").len(), 10);
    let side = sidecar(&f.path("g"), "generate");
    assert_eq!(side["outputs"].as_array().unwrap().len(), 1);
}

#[test]
fn uniform_model_is_closest_to_itself_but_not_to_skewed_reference() {
    let f = Fixture::new();
    let mut csv = String::from("SEX,MIL,HICOV,SUBGROUP\n");
    for i in 0..300 {
        let g = ["north", "south", "east"][i % 3];
        let mil = if i % 10 == 0 { "2" } else { "3" };
        let hicov = if i % 7 == 0 { "2" } else { "1" };
        csv.push_str(&format!("{},{mil},{hicov},{g}\n", 1 + i % 2));
    }
    std::fs::write(f.path("ref.csv"), csv).unwrap();
    let spec = f.spec("spec.json", json!({"zero_default": true}));
    let out = run(&[
        "align", "--questionnaire", &f.s("qn.json"), "--synthetic-spec", &spec, "--reference", &f.s("ref.csv"),
        "--raw", "--output-dir", &f.s("o"), "--plot-data",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = f.read_csv("o/alignment_summary.csv");
    let (uniform, others): (Vec<_>, Vec<_>) = rows.iter().partition(|r| r[2] == "uniform");
    let u: f64 = uniform[0][3].parse().unwrap();
    assert!(u.abs() < 1e-6, "{u}");
    assert!(others.iter().all(|r| r[3].parse::<f64>().unwrap() > u));
    for name in ["alignment_per_question.csv", "alignment.json", "entropy_alignment.csv", "align.json"] {
        assert!(f.path("o").join(name).exists(), "{name}");
    }
}

#[test]
fn every_artifact_is_listed_in_a_sidecar() {
    let f = Fixture::new();
    let spec = f.spec("spec.json", json!({"content": {"SEX": [0.2, 0.0]}, "label_bonus": {"A": 0.5}, "zero_default": true}));
    let o = f.s("o");
    let common = ["--questionnaire", &f.s("qn.json"), "--synthetic-spec", &spec, "--output-dir", &o];
    for (cmd, extra) in [
        ("survey", vec!["--plot-data"]),
        ("adjust", vec!["--bias-samples", "200", "--plot-data", "--dump-prompts"]),
        ("dump-prompts", vec![]),
    ] {
        let out = bin().arg(cmd).args(common).args(&extra).output().unwrap();
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let mut listed = std::collections::BTreeSet::new();
    for side in ["survey", "adjust", "dump-prompts"] {
        let v = sidecar(&f.path("o"), side);
        assert_eq!(v["timestamp"], 1_700_000_000);
        for p in v["outputs"].as_array().unwrap() {
            let name = p.as_str().unwrap();
            assert!(f.path("o").join(name).exists(), "{name}");
            listed.insert(name.to_string());
        }
        listed.insert(format!("{side}.json"));
    }
    let present: std::collections::BTreeSet<String> = std::fs::read_dir(f.path("o"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(present, listed);
}
