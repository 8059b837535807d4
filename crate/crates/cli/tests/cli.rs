use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use supersam::io::checkpoint;
use supersam::io::dataset::{image_path, read_dataset};
use supersam::io::netpbm::{quantize, read_pgm, read_ppm};
use supersam::io::report::parse_history;
use supersam::metrics::{classification_report, MetricsReport};
use supersam::split::stratified_split;
use supersam::synth::{generate_dataset, SynthConfig};
use supersam::train::{evaluate, examples};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_supersam"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = run(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.json");
    fs::write(&path, body).unwrap();
    path
}

const QUICK: &str = r#"{"synth": {"n_samples": 200}, "train": {"max_epochs": 2, "batch_size": 16, "learning_rate": 0.001}}"#;

fn all_files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_counts_force_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&["gen", "--out", "a", "--n-samples", "100", "--seed", "3"], d);
    let ppms = fs::read_dir(d.join("a/images")).unwrap().count();
    let lines = fs::read_to_string(d.join("a/labels.jsonl")).unwrap().lines().count();
    assert_eq!((ppms, lines), (100, 100));

    let again = run(&["gen", "--out", "a", "--n-samples", "100", "--seed", "3"], d);
    assert!(!again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));

    let first = all_files(&d.join("a"));
    ok(&["gen", "--out", "a", "--n-samples", "100", "--seed", "3", "--force"], d);
    assert_eq!(all_files(&d.join("a")), first);
    ok(&["gen", "--out", "b", "--n-samples", "100", "--seed", "3"], d);
    assert_eq!(all_files(&d.join("b")), first);
}

#[test]
fn ppm_reload_matches_generator_within_quantization() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["gen", "--out", "data", "--n-samples", "20", "--seed", "8"], tmp.path());
    let config = SynthConfig {
        n_samples: 20,
        seed: 8,
        ..SynthConfig::default()
    };
    for s in generate_dataset(&config).unwrap() {
        let loaded = read_ppm(&image_path(&tmp.path().join("data"), s.id)).unwrap();
        assert!(loaded.max_abs_diff(&s.image) <= 1.0 / 255.0);
    }
}

#[test]
fn train_eval_infer_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = write_config(d, QUICK);
    let cfg = cfg.to_str().unwrap();
    ok(&["--config", cfg, "gen", "--out", "data"], d);

    let stdout = ok(&["--config", cfg, "train", "--data", "data", "--out", "ck/plain.json", "--variant", "plain"], d);
    let history = parse_history(&fs::read_to_string(d.join("ck/history.csv")).unwrap()).unwrap();
    assert_eq!(history.len(), 2);
    assert!(d.join("ck/plain.bin").exists());

    // Reload and re-evaluate the validation split: same accuracy as printed.
    let (model, manifest) = checkpoint::load(&d.join("ck/plain.json")).unwrap();
    let (_, samples) = read_dataset(&d.join("data")).unwrap();
    let split = stratified_split(&samples, |s| s.label, manifest.split_ratios.unwrap(), manifest.train_config.seed).unwrap();
    let val = examples(&split.val, &manifest.ppe);
    let acc = evaluate(&model, &val, &manifest.train_config).unwrap().accuracy;
    assert_eq!(acc, manifest.metrics["val_accuracy"]);
    assert!(stdout.trim_end().ends_with(&format!("validation accuracy {acc}")), "{stdout}");

    ok(&["eval", "--checkpoint", "ck/plain.json", "--data", "data", "--out", "rep/plain.json"], d);
    let json: MetricsReport = serde_json::from_slice(&fs::read(d.join("rep/plain.json")).unwrap()).unwrap();
    let csv = fs::read_to_string(d.join("rep/plain.csv")).unwrap();
    let row: Vec<f64> = csv.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(row, json.csv_values().to_vec());

    let image = image_path(&d.join("data"), 0);
    let image = image.to_str().unwrap();
    let refused = run(&["infer", "--checkpoint", "ck/plain.json", image, "--emit-mask", "m.pgm"], d);
    assert!(!refused.status.success());
    assert!(String::from_utf8_lossy(&refused.stderr).contains("plain"));

    ok(&["--config", cfg, "train", "--data", "data", "--out", "ck/sup.json", "--variant", "super_sam"], d);
    let out = ok(&["infer", "--checkpoint", "ck/sup.json", image, "--emit-mask", "m.pgm"], d);
    assert!(out.starts_with("label "));
    let (w, h, pixels) = read_pgm(&d.join("m.pgm")).unwrap();
    assert_eq!((w, h), (8, 8));
    let (model, _) = checkpoint::load(&d.join("ck/sup.json")).unwrap();
    let pred = model.classify_crop(&read_ppm(Path::new(image)).unwrap()).unwrap();
    let expected: Vec<u8> = pred.mask.unwrap().values.iter().map(|&v| quantize(v)).collect();
    assert_eq!(pixels, expected);
    assert!(out.contains(&format!("confidence {}", pred.probability)));
}

#[test]
fn eval_rejects_missing_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["gen", "--out", "data", "--n-samples", "20"], tmp.path());
    let out = run(&["eval", "--checkpoint", "nope.json", "--data", "data", "--out", "r.json"], tmp.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.json"));
}

#[test]
fn lambda_one_reproduces_sam_history() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = write_config(d, QUICK);
    let cfg = cfg.to_str().unwrap();
    ok(&["--config", cfg, "gen", "--out", "data"], d);
    ok(&["--config", cfg, "train", "--data", "data", "--out", "sam/m.json", "--variant", "sam"], d);
    ok(
        &["--config", cfg, "train", "--data", "data", "--out", "sup/m.json", "--variant", "super_sam", "--lambda", "1.0"],
        d,
    );
    assert_eq!(fs::read(d.join("sam/history.csv")).unwrap(), fs::read(d.join("sup/history.csv")).unwrap());
    assert_eq!(fs::read(d.join("sam/m.bin")).unwrap(), fs::read(d.join("sup/m.bin")).unwrap());
}

#[test]
fn malformed_label_line_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&["gen", "--out", "data", "--n-samples", "20"], d);
    let labels = d.join("data/labels.jsonl");
    let text = fs::read_to_string(&labels).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[4] = "{not json".into();
    fs::write(&labels, lines.join("\n") + "\n").unwrap();
    let out = run(&["train", "--data", "data", "--out", "m.json"], d);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("labels.jsonl:5"), "{err}");
}

#[test]
fn config_typos_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"train": {"lamda": 0.5}}"#);
    let out = run(&["--config", cfg.to_str().unwrap(), "gen", "--out", "x"], tmp.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("lamda"));
}

#[test]
fn grad_check_exit_codes_and_listing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["grad-check"], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    for layer in supersam::gradsuite::LAYERS {
        assert!(text.lines().any(|l| l == layer), "{layer} not listed");
    }
    assert!(text.trim_end().ends_with("PASS"));

    let bad = run(&["grad-check", "--corrupt", "broadcast_mul"], tmp.path());
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8(bad.stdout).unwrap().trim_end().ends_with("FAIL"));
}

#[test]
fn report_arithmetic() {
    let labels: Vec<u8> = (0..40).map(|i| u8::from(i % 4 == 0)).collect();
    let perfect = classification_report(&labels, &labels).unwrap();
    assert!(perfect.csv_values().iter().all(|&v| v == 1.0));
    let constant = classification_report(&[1; 40], &labels).unwrap();
    assert_eq!(constant.accuracy, 0.25);
}
