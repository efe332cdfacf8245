use std::path::Path;
use std::process::Command;

use serde_json::Value;

struct Run {
    code: i32,
    stdout: Value,
    stderr: String,
}

fn onconet(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_onconet"))
        .args(args)
        .output()
        .expect("binary runs");
    let stdout = String::from_utf8_lossy(&out.stdout);
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: serde_json::from_str(&stdout).unwrap_or(Value::Null),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn ok(args: &[&str]) -> Value {
    let r = onconet(args);
    assert_eq!(r.code, 0, "{args:?}: {}", r.stderr);
    r.stdout
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_phantom(out: &Path, n: usize, seed: u64) -> Value {
    ok(&[
        "phantom",
        "--n-patients",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "--slices",
        "6",
        "--ct-size",
        "32",
        "--pet-size",
        "16",
        "--out",
        s(out),
    ])
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                v.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    v.sort();
    v
}

#[test]
fn full_workflow_on_a_small_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    small_phantom(&data, 9, 1);

    let manifest = tmp.path().join("pairs.csv");
    let label = ok(&["label", "--reports", s(&data.join("reports")), "--out", s(&manifest)]);
    assert_eq!(label["n_pairs"], 9);
    assert_eq!(label["class_counts"]["progression"], 3);

    let exams = data.join("exams");
    let train = ok(&[
        "train", "--manifest", s(&manifest), "--exams", s(&exams), "--out", s(&run), "--tiny", "--grid", "16",
        "--epochs", "2", "--lr", "1e-3", "--val-fraction", "0.34",
    ]);
    assert!(train["epochs_run"].as_u64().unwrap() >= 1, "{train}");
    let ckpt = run.join("model.safetensors");
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count() as u64, train["epochs_run"].as_u64().unwrap());

    let eval = ok(&[
        "eval", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--exams", s(&exams), "--out", s(&run),
        "--n-bootstrap", "50",
    ]);
    assert!(eval["auroc_macro"].is_number(), "{eval}");
    assert!(eval["ci_95"].is_object());
    let eval_json: Value = serde_json::from_slice(&std::fs::read(run.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval_json["n_pairs"], 9);
    let mut preds = csv::Reader::from_path(run.join("predictions.csv")).unwrap();
    assert_eq!(
        preds.headers().unwrap(),
        vec!["pair_id", "true_label", "predicted", "p_progression", "p_resolution", "p_stable"]
    );
    assert_eq!(preds.records().count(), 9);
    let mut roc = csv::Reader::from_path(run.join("roc.csv")).unwrap();
    assert_eq!(roc.headers().unwrap(), vec!["class", "fpr", "tpr"]);
    let classes: std::collections::BTreeSet<String> = roc.records().map(|r| r.unwrap()[0].to_string()).collect();
    assert_eq!(classes.into_iter().collect::<Vec<_>>(), ["micro", "progression", "resolution", "stable"]);

    let flip = ok(&[
        "flip-eval", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--exams", s(&exams), "--out", s(&run),
        "--n-bootstrap", "20",
    ]);
    assert!(flip["delta_auroc_macro"].is_number(), "{flip}");

    let agree = ok(&[
        "agreement", "--predictions", s(&run.join("predictions.csv")), "--deauville", s(&data.join("deauville.csv")),
        "--out", s(&run),
    ]);
    assert!(agree["kappa_1"].is_number(), "{agree}");
    assert!(run.join("agreement.json").is_file());

    let sal = ok(&[
        "saliency", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--exams", s(&exams), "--out", s(&run),
        "--pet",
    ]);
    let pairs = sal["pairs"].as_array().unwrap();
    assert_eq!(pairs.len(), 9);
    for p in pairs {
        for member in ["baseline", "followup"] {
            let file = p[member]["file"].as_str().unwrap();
            assert!(Path::new(file).is_file(), "{file}");
            let img = image::open(file).unwrap();
            assert_eq!((img.width(), img.height()), (16, 16));
            assert!(Path::new(p[member]["pet_file"].as_str().unwrap()).is_file());
        }
    }

    let eval_path = run.join("eval.json");
    let spec = format!("thorax={}", s(&eval_path));
    let report = ok(&["report", "--eval", &spec, "--out", s(&run)]);
    let fig = report["figures"][0]["file"].as_str().unwrap();
    let img = image::open(fig).unwrap();
    assert_eq!((img.width(), img.height()), (640, 640));
}

#[test]
fn eval_is_deterministic_under_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_phantom(&data, 6, 2);
    let manifest = tmp.path().join("pairs.csv");
    ok(&["label", "--reports", s(&data.join("reports")), "--out", s(&manifest)]);
    let exams = data.join("exams");
    let run = tmp.path().join("run");
    ok(&[
        "train", "--manifest", s(&manifest), "--exams", s(&exams), "--out", s(&run), "--tiny", "--grid", "16",
        "--epochs", "1", "--val-fraction", "0.34",
    ]);
    let ckpt = run.join("model.safetensors");
    let eval = |out: &Path| {
        ok(&[
            "eval", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--exams", s(&exams), "--out", s(out),
            "--n-bootstrap", "40", "--seed", "9",
        ]);
        std::fs::read(out.join("eval.json")).unwrap()
    };
    assert_eq!(eval(&tmp.path().join("e1")), eval(&tmp.path().join("e2")));
}

#[test]
fn phantom_output_is_byte_identical_under_seed() {
    let tmp = tempfile::tempdir().unwrap();
    small_phantom(&tmp.path().join("a"), 3, 5);
    small_phantom(&tmp.path().join("b"), 3, 5);
    small_phantom(&tmp.path().join("c"), 3, 6);
    let a = files(&tmp.path().join("a"));
    assert!(!a.is_empty());
    assert_eq!(a, files(&tmp.path().join("b")));
    assert_ne!(a, files(&tmp.path().join("c")));
}

#[test]
fn single_patient_dataset_labels_one_pair() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = small_phantom(&data, 1, 0);
    assert_eq!(out["n_patients"], 1);
    let label = ok(&[
        "label",
        "--reports",
        s(&data.join("reports")),
        "--out",
        s(&tmp.path().join("pairs.csv")),
    ]);
    assert_eq!(label["n_pairs"], 1);
}

#[test]
fn phantom_refuses_a_non_empty_directory_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_phantom(&data, 1, 0);
    std::fs::write(data.join("notes.txt"), "keep me").unwrap();
    let r = onconet(&["phantom", "--n-patients", "1", "--slices", "6", "--ct-size", "32", "--pet-size", "16", "--out", s(&data)]);
    assert_eq!(r.code, 2, "{}", r.stderr);
    let err: Value = serde_json::from_str(r.stderr.lines().last().unwrap()).unwrap();
    assert_eq!(err["exit_code"], 2);
    ok(&[
        "phantom", "--n-patients", "1", "--slices", "6", "--ct-size", "32", "--pet-size", "16", "--out", s(&data),
        "--force",
    ]);
    assert_eq!(std::fs::read_to_string(data.join("notes.txt")).unwrap(), "keep me");
}

#[test]
fn empty_report_directory_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let r = onconet(&["label", "--reports", s(tmp.path()), "--out", s(&tmp.path().join("m.csv"))]);
    assert_eq!(r.code, 3, "{}", r.stderr);
    assert!(r.stdout.is_null());
}

#[test]
fn missing_inputs_and_bad_options_are_configuration_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let r = onconet(&["label", "--reports", s(&tmp.path().join("nope")), "--out", s(&tmp.path().join("m.csv"))]);
    assert_eq!(r.code, 2);
    let r = onconet(&["label", "--reports", s(tmp.path()), "--region", "pelvis", "--out", s(&tmp.path().join("m.csv"))]);
    assert_eq!(r.code, 2);
    let r = onconet(&["eval", "--checkpoint", "x.safetensors", "--manifest", "m.csv", "--exams", "e", "--out", "o"]);
    assert_eq!(r.code, 2);
}

#[test]
fn unreadable_report_names_are_skipped_with_a_warning() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_phantom(&data, 2, 3);
    let pdir = std::fs::read_dir(data.join("reports")).unwrap().next().unwrap().unwrap().path();
    std::fs::write(pdir.join("notadate_X.txt"), "nothing").unwrap();
    let r = onconet(&["label", "--reports", s(&data.join("reports")), "--out", s(&tmp.path().join("m.csv"))]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(r.stdout["n_skipped"], 1);
    assert_eq!(r.stdout["n_pairs"], 2);
    assert!(r.stderr.contains("skipped report"));
}
