use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use scaleprop::format::ModelFile;
use scaleprop::transformer::{FloatModel, ModelConfig};
use scaleprop::{RationalTensor, ScaleGranularity};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_scaleprop"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    /// A seeded FP32 model, its quantized file and one input.
    fn new() -> Self {
        let w = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        ok(&["init", "--out", &w.s("model.spq"), "--seed", "7", "--input-out", &w.s("x.spq")]);
        ok(&["quantize", &w.s("model.spq"), "--out", &w.s("q.spq")]);
        w
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }
}

/// Non-comment report lines split into columns.
fn rows(stdout: &str) -> Vec<Vec<String>> {
    stdout
        .lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .map(|l| l.split('\t').map(String::from).collect())
        .collect()
}

fn metric(stdout: &str, tag: &str, name: &str) -> f64 {
    rows(stdout)
        .into_iter()
        .find(|r| r[0] == tag && r[2] == name)
        .unwrap_or_else(|| panic!("no {tag}/{name} in {stdout}"))[3]
        .parse()
        .unwrap()
}

fn size(p: &Path) -> f64 {
    std::fs::metadata(p).unwrap().len() as f64
}

#[test]
fn requantizing_a_dequantized_model_is_bit_identical() {
    let w = Workspace::new();
    ok(&["dequantize", &w.s("q.spq"), "--out", &w.s("d.spq")]);
    ok(&["quantize", &w.s("d.spq"), "--out", &w.s("q2.spq")]);
    assert_eq!(std::fs::read(w.path("q.spq")).unwrap(), std::fs::read(w.path("q2.spq")).unwrap());
}

#[test]
fn zero_weights_quantize_to_zero_payload_with_unit_scale() {
    let w = Workspace::new();
    let mut model = FloatModel::random(ModelConfig::default(), 3).unwrap();
    let shape = model.layers[0].w1.shape().to_vec();
    model.layers[0].w1 = RationalTensor::zeros(shape).unwrap();
    ModelFile::from_float(&model, ScaleGranularity::PerRow)
        .write(w.path("zero.spq"))
        .unwrap();
    ok(&["quantize", &w.s("zero.spq"), "--out", &w.s("zq.spq")]);
    let t = ModelFile::read(w.path("zq.spq")).unwrap().scaled("layers.0.ffn.w1").unwrap();
    assert!(t.payload().iter().all(|&x| x == 0));
    assert!(t.scale().values().iter().all(|&s| s == 1.0));
}

#[test]
fn storage_report_matches_file_sizes() {
    let w = Workspace::new();
    let out = ok(&["quantize", &w.s("model.spq"), "--out", &w.s("q3.spq")]);
    let fp32 = metric(&out, "storage", "fp32_bytes");
    let int = metric(&out, "storage", "int_payload_bytes") + metric(&out, "storage", "scale_bytes");
    assert_eq!(fp32, size(&w.path("model.spq")));
    assert_eq!(int, size(&w.path("q3.spq")));
    let ratio = metric(&out, "storage", "ratio");
    assert!((3.4..4.0).contains(&ratio), "{ratio}");
}

#[test]
fn inference_is_deterministic_pure_and_shape_preserving() {
    let w = Workspace::new();
    let audit = ok(&["infer", &w.s("q.spq"), &w.s("x.spq"), "--out", &w.s("y1.spq"), "--audit", "-"]);
    ok(&["infer", &w.s("q.spq"), &w.s("x.spq"), "--out", &w.s("y2.spq")]);
    assert_eq!(std::fs::read(w.path("y1.spq")).unwrap(), std::fs::read(w.path("y2.spq")).unwrap());

    let records = rows(&audit);
    assert!(!records.is_empty());
    for r in &records {
        let payload_float = r[1] == "payload" && (r[0].starts_with("f32_") || r[0] == "dequantize");
        assert!(!payload_float, "{r:?}");
    }
    let x = ModelFile::read(w.path("x.spq")).unwrap().first_tensor().unwrap();
    let y = ModelFile::read(w.path("y1.spq")).unwrap().first_tensor().unwrap();
    assert_eq!(x.shape(), y.shape());

    ok(&["infer", &w.s("q.spq"), &w.s("x.spq"), "--out", &w.s("l.spq"), "--logits", "--dequantize-output"]);
    let logits = ModelFile::read(w.path("l.spq")).unwrap();
    assert!(!logits.is_integer());
    assert_eq!(logits.first_tensor().unwrap().shape(), &[x.shape()[0], 64]);
}

#[test]
fn default_compare_reports_each_module_and_layer_once() {
    let w = Workspace::new();
    let out = ok(&["compare", &w.s("q.spq"), &w.s("x.spq")]);
    let rows = rows(&out);
    assert_eq!(rows.len(), 2 + 4 * 2);
    let mut keys: Vec<(String, String)> = rows.iter().map(|r| (r[0].clone(), r[1].clone())).collect();
    keys.sort();
    keys.dedup();
    assert_eq!(keys.len(), rows.len());
    assert!(rows.iter().all(|r| r[2] == "mse" && r[3].parse::<f64>().unwrap() >= 0.0));
}

#[test]
fn fifteen_bit_sweep_is_near_zero() {
    let w = Workspace::new();
    let out = ok(&[
        "compare", &w.s("q.spq"), &w.s("x.spq"), "--reference", &w.s("model.spq"), "--sweep-bits", "15..15",
    ]);
    assert!(metric(&out, "sweep", "relative") < 1e-6);
}

#[test]
fn ablating_nothing_loses_nothing() {
    let w = Workspace::new();
    let out = ok(&["compare", &w.s("q.spq"), &w.s("x.spq"), "--ablate", "none", "--json", &w.s("r.json")]);
    assert_eq!(metric(&out, "ablate", "mse"), 0.0);
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(w.path("r.json")).unwrap()).unwrap();
    assert_eq!(doc["ablation"]["mse"], 0.0);
}

#[test]
fn report_estimates_a_bounded_speedup() {
    let w = Workspace::new();
    let out = ok(&["report", &w.s("q.spq"), &w.s("x.spq"), "--fp32", &w.s("model.spq"), "--steps", "2"]);
    let est = metric(&out, "speedup", "estimate");
    assert!((1.0..=6.0).contains(&est), "{est}");
    assert!(metric(&out, "storage", "ratio") >= 3.4);
}

#[test]
fn exit_codes_distinguish_validation_from_io() {
    let w = Workspace::new();
    let code = |args: &[&str]| run(args).status.code().unwrap();
    assert_eq!(code(&["quantize", &w.s("model.spq"), "--out", &w.s("bad.spq"), "--precision", "16"]), 2);
    assert_eq!(code(&["infer", &w.s("model.spq"), &w.s("x.spq"), "--out", &w.s("y.spq")]), 2);
    assert_eq!(code(&["compare", &w.s("q.spq"), &w.s("x.spq"), "--sweep-bits", "9..3"]), 2);
    assert_eq!(code(&["infer", &w.s("q.spq"), &w.s("missing.spq"), "--out", &w.s("y.spq")]), 3);
    assert_eq!(code(&["frobnicate"]), 2);
    std::fs::write(w.path("junk.spq"), b"not a model").unwrap();
    assert_eq!(code(&["quantize", &w.s("junk.spq"), "--out", &w.s("o.spq")]), 2);
}
