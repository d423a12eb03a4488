use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ssm-circuits"))
}

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/testdata/toy_ioi.safetensors")
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn results(dir: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join("manifest.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["results"].clone()
}

#[test]
fn gen_data_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = run(
            tmp.path(),
            &["gen-data", "--seed", "7", "--count", "80", "--out", out],
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for file in ["pairs.jsonl", "manifest.json"] {
        let a = std::fs::read(tmp.path().join("a").join(file)).unwrap();
        let b = std::fs::read(tmp.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs");
    }
    let lines = std::fs::read_to_string(tmp.path().join("a/pairs.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 80);
}

#[test]
fn bad_config_field_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("bad.toml"), "[dataset]\ncuont = 10\n").unwrap();
    let o = run(tmp.path(), &["gen-data", "--config", "bad.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cuont"));

    let o = run(tmp.path(), &["gen-data", "--corruptions", "9"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dataset.corruptions"));
}

#[test]
fn missing_checkpoint_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["eap", "--model", "missing.safetensors"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("not found"));
}

#[test]
fn unreachable_target_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let model = fixture();
    let o = run(
        tmp.path(),
        &[
            "eap",
            "--model",
            model.to_str().unwrap(),
            "--count",
            "8",
            "--target",
            "5",
        ],
    );
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn eap_finds_a_small_circuit_and_report_indexes_it() {
    let tmp = tempfile::tempdir().unwrap();
    let model = fixture();
    let o = run(
        tmp.path(),
        &[
            "eap",
            "--model",
            model.to_str().unwrap(),
            "--count",
            "48",
            "--target",
            "0.85",
            "--out",
            "runs/eap",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = results(&tmp.path().join("runs/eap"));
    let kept = r["kept"].as_u64().unwrap();
    let removable = r["removable"].as_u64().unwrap();
    assert!(kept < removable, "kept {kept} removable {removable}");
    let achieved = r["achieved_metric"].as_f64().unwrap();
    let clean = r["clean_metric"].as_f64().unwrap();
    assert!(achieved >= 0.85 * clean, "{achieved} < 0.85 * {clean}");
    for f in ["attribution.csv", "circuit.json", "circuit.dot"] {
        assert!(tmp.path().join("runs/eap").join(f).exists(), "{f}");
    }

    let o = run(tmp.path(), &["report", "runs"]);
    assert!(o.status.success());
    let index = std::fs::read_to_string(tmp.path().join("runs/index.md")).unwrap();
    assert!(index.contains("(eap/manifest.json)"));
    assert!(index.contains("(eap/circuit.dot)"));
}

#[test]
fn acdc_recovers_the_planted_shift() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(
        tmp.path(),
        &[
            "acdc",
            "--model",
            "planted",
            "--corruptions",
            "4,5",
            "--metric",
            "logit_diff",
            "--count",
            "48",
            "--out",
            "acdc",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = results(&tmp.path().join("acdc"));
    let mut kept: Vec<String> = r["kept_edges"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e.as_str().unwrap().to_string())
        .collect();
    kept.sort();
    assert_eq!(
        kept,
        [
            "embed->layer2.input",
            "layer2->output",
            "layer2.conv->layer2.ssm",
            "layer2.input->layer2.conv[-1]"
        ]
    );
}
