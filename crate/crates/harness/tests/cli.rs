use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use hybrid_harness::metrics::{strip_timing, Metrics, DISTILL_BATCH_SCHEMA, METRICS_SCHEMA, PREFERENCE_PAIR_SCHEMA};
use jsonschema::JSONSchema;
use serde_json::Value;

fn config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.toml")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hybridctl"))
        .arg("--config")
        .arg(config())
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn schema(text: &str) -> JSONSchema {
    JSONSchema::compile(&serde_json::from_str(text).unwrap()).unwrap()
}

fn assert_valid(s: &JSONSchema, v: &Value) {
    if let Err(errors) = s.validate(v) {
        let msgs: Vec<String> = errors.map(|e| e.to_string()).collect();
        panic!("schema violations: {msgs:?}\n{v}");
    }
}

fn metrics(dir: &Path) -> Value {
    let v: Value = serde_json::from_slice(&std::fs::read(dir.join("metrics.json")).unwrap()).unwrap();
    assert_valid(&schema(METRICS_SCHEMA), &v);
    v
}

fn jsonl(path: &Path, s: &str) -> usize {
    let s = schema(s);
    let text = std::fs::read_to_string(path).unwrap();
    for line in text.lines() {
        assert_valid(&s, &serde_json::from_str(line).unwrap());
    }
    text.lines().count()
}

struct Fixture {
    root: PathBuf,
}

impl Fixture {
    fn dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn model(&self, name: &str) -> String {
        self.dir(name).join("model").display().to_string()
    }
}

/// Teacher and 50% hybrid shared by the tests below.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = std::env::temp_dir().join(format!("hybridctl-cli-{}", std::process::id()));
        let f = Fixture { root };
        ok(&["teacher-train", "--out", f.dir("teacher").to_str().unwrap()]);
        ok(&[
            "convert",
            "--teacher",
            &f.model("teacher"),
            "--fraction",
            "0.5",
            "--out",
            f.dir("hybrid").to_str().unwrap(),
        ]);
        f
    })
}

#[test]
fn unknown_subcommand_and_flag_fail_with_usage() {
    for args in [&["frobnicate"][..], &["teacher-train", "--out", "x", "--bogus"], &[]] {
        let out = run(args);
        assert!(!out.status.success());
        assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"), "{args:?}");
    }
}

#[test]
fn teacher_and_convert_records() {
    let f = fixture();
    let t = metrics(&f.dir("teacher"));
    assert_eq!(t["command"], "teacher-train");
    assert!(t["results"]["final_loss"].as_f64().unwrap() < t["results"]["initial_loss"].as_f64().unwrap());
    let h = metrics(&f.dir("hybrid"));
    assert_eq!(h["results"]["attention_fraction"], 0.5);
    assert_eq!(h["results"]["layer_kinds"], serde_json::json!(["attention", "ssm"]));
}

#[test]
fn all_attention_conversion_keeps_ppl() {
    let f = fixture();
    let full = f.dir("full");
    ok(&[
        "convert",
        "--teacher",
        &f.model("teacher"),
        "--fraction",
        "1",
        "--out",
        full.to_str().unwrap(),
    ]);
    let a = f.dir("eval-teacher");
    let b = f.dir("eval-full");
    ok(&["eval-ppl", "--model", &f.model("teacher"), "--out", a.to_str().unwrap()]);
    ok(&[
        "eval-ppl",
        "--model",
        &f.model("full"),
        "--teacher",
        &f.model("teacher"),
        "--out",
        b.to_str().unwrap(),
    ]);
    let (ma, mb) = (metrics(&a), metrics(&b));
    assert_eq!(ma["results"]["ppl"], mb["results"]["ppl"]);
    assert_eq!(mb["results"]["ratio"], 1.0);
    assert_eq!(std::fs::read(a.join("nll.txt")).unwrap(), std::fs::read(b.join("nll.txt")).unwrap());
}

#[test]
fn generate_is_deterministic() {
    let f = fixture();
    let out = f.dir("gen");
    let args = [
        "generate",
        "--model",
        &f.model("teacher"),
        "--prompt",
        "the cat ",
        "--max-tokens",
        "20",
        "--out",
        out.to_str().unwrap(),
    ];
    let first = ok(&args);
    assert_eq!(first, ok(&args));
    assert!(first.starts_with("the cat "));
    let sampled = [
        "generate",
        "--model",
        &f.model("teacher"),
        "--prompt",
        "a ",
        "--temperature",
        "0.8",
        "--out",
        out.to_str().unwrap(),
    ];
    assert_eq!(ok(&sampled), ok(&sampled));
    assert!(!run(&[
        "generate",
        "--model",
        &f.model("teacher"),
        "--prompt",
        "a",
        "--greedy",
        "--temperature",
        "1",
        "--out",
        "x"
    ])
    .status
    .success());
}

#[test]
fn spec_bench_record() {
    let f = fixture();
    let out = f.dir("bench");
    ok(&[
        "spec-bench",
        "--verifier",
        &f.model("teacher"),
        "--draft",
        &f.model("hybrid"),
        "--k",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    let m = metrics(&out);
    let r = &m["results"];
    let mean = r["mean_gen_tokens"].as_f64().unwrap();
    assert!((1.0..=4.0).contains(&mean), "{mean}");
    assert_eq!(r["K"], 3);
    assert_eq!(r["exact"], true);
}

#[test]
fn distill_stages_and_jsonl() {
    let f = fixture();
    let kd = f.dir("kd");
    ok(&[
        "distill",
        "--teacher",
        &f.model("teacher"),
        "--student",
        &f.model("hybrid"),
        "--out",
        kd.to_str().unwrap(),
    ]);
    let m = metrics(&kd);
    assert_eq!(m["results"]["stage"], "kd");
    assert_eq!(jsonl(&kd.join("batches.jsonl"), DISTILL_BATCH_SCHEMA), 6);

    let again = f.dir("kd-from-labels");
    let labels = kd.join("batches.jsonl");
    ok(&[
        "distill",
        "--teacher",
        &f.model("teacher"),
        "--student",
        &f.model("hybrid"),
        "--labels",
        labels.to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
    ]);
    assert_eq!(strip_timing(&metrics(&again)), strip_timing(&m));

    let sft = f.dir("sft");
    ok(&[
        "distill",
        "--stage",
        "sft",
        "--teacher",
        &f.model("teacher"),
        "--student",
        &kd.join("model").display().to_string(),
        "--out",
        sft.to_str().unwrap(),
    ]);
    let manifest: Value = serde_json::from_slice(&std::fs::read(sft.join("model/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["provenance"], serde_json::json!(["teacher-train", "convert", "kd", "sft"]));

    let dpo = f.dir("dpo");
    ok(&[
        "dpo",
        "--teacher",
        &f.model("teacher"),
        "--student",
        &sft.join("model").display().to_string(),
        "--out",
        dpo.to_str().unwrap(),
    ]);
    assert_eq!(metrics(&dpo)["results"]["pairs"], 6);
    assert_eq!(jsonl(&dpo.join("pairs.jsonl"), PREFERENCE_PAIR_SCHEMA), 6);
}

#[test]
fn reruns_reproduce_metrics() {
    let f = fixture();
    let out = f.dir("teacher-again");
    ok(&["teacher-train", "--out", out.to_str().unwrap()]);
    let a = Metrics::read(&f.dir("teacher").join("metrics.json")).unwrap();
    let b = Metrics::read(&out.join("metrics.json")).unwrap();
    assert_eq!(
        strip_timing(&serde_json::to_value(&a).unwrap()),
        strip_timing(&serde_json::to_value(&b).unwrap())
    );

    let seeded = f.dir("teacher-seed");
    ok(&["teacher-train", "--seed", "8", "--out", seeded.to_str().unwrap()]);
    let c = Metrics::read(&seeded.join("metrics.json")).unwrap();
    assert_eq!(c.seed, 8);
    assert_ne!(c.results["final_loss"], a.results["final_loss"]);
}

#[test]
fn ablate_reports_every_claim() {
    let f = fixture();
    let out = f.dir("ablate");
    ok(&[
        "ablate",
        "--kind",
        "init,freeze",
        "--kind",
        "no-mamba",
        "--out",
        out.to_str().unwrap(),
    ]);
    let m = metrics(&out);
    let comps = m["results"]["comparisons"].as_array().unwrap();
    assert_eq!(comps.len(), 3);
    for c in comps {
        assert_eq!(c["per_seed"].as_array().unwrap().len(), 1);
    }
}

#[test]
fn bad_config_is_rejected() {
    let dir = std::env::temp_dir().join(format!("hybridctl-badcfg-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = dir.join("bad.toml");
    std::fs::write(&cfg, "[model]\nwidth = 3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_hybridctl"))
        .args(["--config", cfg.to_str().unwrap(), "teacher-train", "--out", dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("width"));
}
