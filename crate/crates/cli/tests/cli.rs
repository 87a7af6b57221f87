//! Runs the binary end to end on a small synthetic cohort and checks every
//! JSON artifact against the shipped schemas.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn higine(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_higine")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = higine(args);
    assert!(out.status.success(), "higine {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn schema(name: &str) -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(name);
    let value: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    jsonschema::validator_for(&value).unwrap()
}

fn assert_valid(schema_name: &str, file: &Path) {
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(file).unwrap()).unwrap();
    let v = schema(schema_name);
    let errors: Vec<String> = v.iter_errors(&doc).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errors.is_empty(), "{} violates {schema_name}: {errors:?}", file.display());
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Self { dir: tempfile::tempdir().unwrap() };
        ok(&["synth", "--out", &ws.path("data"), "--n-patients", "16", "--cells-min", "40", "--cells-max", "50", "--seed", "4", "--stage-signal", "0.5"]);
        ws
    }

    fn path(&self, rel: &str) -> String {
        self.dir.path().join(rel).to_string_lossy().into_owned()
    }

    fn file(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }
}

#[test]
fn full_workflow_emits_schema_valid_artifacts() {
    let ws = Workspace::new();
    let config = ws.path("data/run.toml");
    let cohort = ws.path("data/cohort.toml");

    ok(&["ingest", "--cohort", &cohort, "--out", &ws.path("summary.json")]);
    assert_valid("cohort_summary.schema.json", &ws.file("summary.json"));

    ok(&["build-graphs", "--config", &config, "--out", &ws.path("graphs/all.hgd")]);
    let graphs = higine::graph_builder::read_graphs(&ws.file("graphs/all.hgd")).unwrap();
    assert!(graphs.iter().any(|g| g.tag.ends_with("/core")));

    ok(&["cv", "--config", &config, "--k", "2", "--epochs", "2", "--fuse-stage", "--out", &ws.path("cv")]);
    assert_valid("metrics.schema.json", &ws.file("cv/metrics.json"));
    assert_valid("run_manifest.schema.json", &ws.file("cv/run_manifest.json"));
    for fold in 0..2 {
        assert_valid("fold_manifest.schema.json", &ws.file(&format!("cv/fold_{fold}/fold_manifest.json")));
    }
    let metrics: Value = serde_json::from_str(&std::fs::read_to_string(ws.file("cv/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["folds"], 2);
    assert_eq!(metrics["arms"][0]["arm"], "E+Hi+CS");

    // Scoring the held-out patients from checkpoints reproduces the cv predictions.
    ok(&[
        "predict", "--config", &config, "--k", "2", "--epochs", "2", "--fold-dir", &ws.path("cv/fold_1"), "--test-only", "--out", &ws.path("pred/fold1.csv"),
    ]);
    let again = higine::pipeline::read_predictions(&ws.file("pred/fold1.csv")).unwrap();
    let cv_rows = higine::pipeline::read_predictions(&ws.file("cv/predictions.csv")).unwrap();
    assert!(!again.is_empty());
    for row in &again {
        let orig = cv_rows.iter().find(|r| r.patient_id == row.patient_id).unwrap();
        assert_eq!(orig.fold, Some(1));
        assert!((orig.prob_short - row.prob_short).abs() < 1e-12, "{} {} {}", row.patient_id, orig.prob_short, row.prob_short);
    }

    // A mismatched configuration is refused.
    let wrong = higine(&["predict", "--config", &config, "--k", "3", "--fold-dir", &ws.path("cv/fold_1"), "--out", &ws.path("pred/x.csv")]);
    assert_eq!(wrong.status.code(), Some(2));

    ok(&["train", "--config", &config, "--k", "2", "--epochs", "2", "--fold", "0", "--out", &ws.path("train")]);
    assert_valid("metrics.schema.json", &ws.file("train/metrics.json"));
    assert!(ws.file("train/fold_0/core_model.ckpt").exists());

    ok(&["cv", "--config", &config, "--k", "2", "--epochs", "1", "--ablation", "--out", &ws.path("ablation")]);
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(ws.file("ablation/metrics.json")).unwrap()).unwrap();
    let arms: Vec<&str> = doc["arms"].as_array().unwrap().iter().map(|a| a["arm"].as_str().unwrap()).collect();
    assert_eq!(arms, ["GIN", "E", "Hi", "E+Hi", "E+Hi+CS"]);
    assert!(ws.file("ablation/E_Hi_CS/fold_0/fold_manifest.json").exists());

    for method in ["label", "stage", "logreg", "svc"] {
        let out = ws.path(&format!("baseline_{method}"));
        ok(&["baseline", "--config", &config, "--k", "2", "--method", method, "--out", &out]);
        assert_valid("metrics.schema.json", &ws.file(&format!("baseline_{method}/metrics.json")));
    }

    ok(&["km", "--predictions", &ws.path("cv/predictions.csv"), "--svg", "--out", &ws.path("km")]);
    assert_valid("km.schema.json", &ws.file("km/km.json"));
    assert_valid("run_manifest.schema.json", &ws.file("km/run_manifest.json"));
    let csv = std::fs::read_to_string(ws.file("km/km.csv")).unwrap();
    assert!(csv.starts_with("group,time,survival,at_risk,events,censored\n"));
    assert!(std::fs::read_to_string(ws.file("km/km.svg")).unwrap().contains("</svg>"));
}

#[test]
fn grad_check_report_is_schema_valid() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gc/report.json");
    let o = ok(&["grad-check", "--graphs", "3", "--out", &out.to_string_lossy()]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("passed"));
    assert_valid("grad_check.schema.json", &out);
    assert_valid("run_manifest.schema.json", &dir.path().join("gc/run_manifest.json"));
}

#[test]
fn exit_codes_classify_failures() {
    let dir = tempfile::tempdir().unwrap();
    let p = |rel: &str| dir.path().join(rel).to_string_lossy().into_owned();

    // Unknown flag and bad values are configuration errors.
    assert_eq!(higine(&["cv", "--bogus"]).status.code(), Some(2));
    assert_eq!(higine(&["baseline", "--cohort", "x.toml", "--method", "forest", "--out", &p("o")]).status.code(), Some(2));
    assert_eq!(higine(&["synth", "--out", &p("s"), "--mixing", "1.5"]).status.code(), Some(2));

    std::fs::write(p("bad.toml"), "label_threshold_days = 10\nnot_a_field = 1\n").unwrap();
    assert_eq!(higine(&["ingest", "--cohort", &p("bad.toml")]).status.code(), Some(2));

    // Missing or malformed data files are data errors.
    std::fs::write(
        p("cohort.toml"),
        "label_threshold_days = 10\ncells_path = \"cells.csv\"\nclinical_path = \"clinical.csv\"\n[cells]\nfeatures = [\"m\"]\n",
    )
    .unwrap();
    assert_eq!(higine(&["ingest", "--cohort", &p("cohort.toml")]).status.code(), Some(3));
    std::fs::write(p("cells.csv"), "patient_id,core_id,x,y,m\np1,c1,0,oops,1\n").unwrap();
    std::fs::write(p("clinical.csv"), "patient_id,follow_up_days,event,stage\np1,5,1,I\n").unwrap();
    assert_eq!(higine(&["ingest", "--cohort", &p("cohort.toml")]).status.code(), Some(3));
    std::fs::write(p("preds.csv"), "patient_id,prob_short,follow_up_days,event\na,2.0,1,1\n").unwrap();
    assert_eq!(higine(&["km", "--predictions", &p("preds.csv"), "--out", &p("km")]).status.code(), Some(3));

    // Complete separation makes the hazard ratio diverge: a numeric failure,
    // with the curves still written.
    std::fs::write(p("sep.csv"), "patient_id,prob_short,follow_up_days,event\na,0.9,1,1\nb,0.9,2,1\nc,0.1,5,0\nd,0.1,6,0\n").unwrap();
    assert_eq!(higine(&["km", "--predictions", &p("sep.csv"), "--out", &p("km2")]).status.code(), Some(4));
    assert!(dir.path().join("km2/km.csv").exists());
    assert_valid("km.schema.json", &dir.path().join("km2/km.json"));
}
