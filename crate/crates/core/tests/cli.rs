//! End-to-end checks of the installed binary: run real subcommands in
//! scratch directories and inspect exit codes, stdout, and files.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_f2at"))
        .args(args)
        .output()
        .expect("binary should launch")
}

fn fresh_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("f2at-it-{name}"));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

/// Small-but-real training flags shared by the expensive tests.
const TINY: &[&str] = &[
    "--dataset", "synth", "--n", "24", "--eval-n", "8", "--side", "8", "--classes", "2",
    "--epochs", "1", "--batch-size", "8", "--steps", "2", "--probe-size", "4",
    "--probe-steps", "1", "--seed", "5",
];

fn train_into(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out-dir", dir.to_str().unwrap()];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn mi_verify_passes_and_reports_residuals() {
    let dir = fresh_dir("miverify");
    let out = run(&[
        "mi-verify",
        "--trials",
        "20",
        "--seed",
        "3",
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("lemma1-source-entropy"), "{stdout}");
    assert!(stdout.contains("theorem2-pattern-sufficiency"), "{stdout}");

    let report = read(&dir.join("mi_verify.jsonl"));
    let mut identity_lines = 0;
    for line in report.lines() {
        let v: serde_json::Value = serde_json::from_str(line).expect("each line is JSON");
        if let Some(residual) = v.get("max_residual") {
            identity_lines += 1;
            assert!(
                residual.as_f64().unwrap() <= 1e-12,
                "identity {} out of tolerance: {line}",
                v["identity"]
            );
        }
    }
    assert!(identity_lines >= 6, "expected all identity lines, got {identity_lines}");
}

#[test]
fn manifest_replay_reproduces_training_byte_for_byte() {
    let first = fresh_dir("replay-first");
    let out = train_into(&first, &[]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let second = fresh_dir("replay-second");
    let manifest = first.join("manifest.txt");
    let out = run(&[
        "train",
        "--config",
        manifest.to_str().unwrap(),
        "--out-dir",
        second.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    assert_eq!(
        read(&first.join("metrics.jsonl")),
        read(&second.join("metrics.jsonl")),
        "metrics must replay byte for byte"
    );
    assert_eq!(
        fs::read(first.join("checkpoint.f2at")).unwrap(),
        fs::read(second.join("checkpoint.f2at")).unwrap(),
        "checkpoints must replay byte for byte"
    );
}

#[test]
fn sat_method_equals_zero_weight_training() {
    let sat = fresh_dir("method-sat");
    let out = train_into(&sat, &["--method", "sat"]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let zeroed = fresh_dir("method-zeroed");
    let out = train_into(&zeroed, &["--method", "f2at", "--alpha", "0", "--gamma", "0"]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    assert_eq!(
        read(&sat.join("metrics.jsonl")),
        read(&zeroed.join("metrics.jsonl"))
    );
    assert_eq!(
        fs::read(sat.join("checkpoint.f2at")).unwrap(),
        fs::read(zeroed.join("checkpoint.f2at")).unwrap()
    );
}

#[test]
fn slice_splits_a_saturated_image_into_known_patterns() {
    let dir = fresh_dir("slice");
    let input = dir.join("image.txt");
    fs::write(&input, "8 1 2 2\n255 255\n255 255\n").unwrap();
    let out = run(&[
        "slice",
        "--k",
        "2",
        "--input",
        input.to_str().unwrap(),
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        read(&dir.join("patterns.txt")),
        "8 2 1 2 2\n192 192\n192 192\n63 63\n63 63\n"
    );
    let manifest = read(&dir.join("manifest.txt"));
    assert!(manifest.contains("subcommand = slice"), "{manifest}");
}

#[test]
fn bad_tokens_fail_fast_and_name_the_problem() {
    let out = run(&["transmogrify"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("transmogrify"));

    let out = run(&["train", "--bogus-flag", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus-flag"));

    let out = run(&["attack", "--dataset", "synth"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));

    let out = run(&["train", "--epsilon", "1/0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epsilon"));
}

#[test]
fn attack_eval_and_report_consume_a_trained_checkpoint() {
    let dir = fresh_dir("consume");
    let out = train_into(&dir, &[]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let ckpt = dir.join("checkpoint.f2at");
    // Data flags plus seed, so every subcommand regenerates the exact
    // synthetic eval split the checkpoint was trained against.
    let data_args: Vec<&str> = TINY[..10].iter().copied().chain(["--seed", "5"]).collect();

    let attack_dir = fresh_dir("consume-attack");
    let mut args = vec![
        "attack",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--attack",
        "pgd",
        "--steps",
        "2",
        "--out-dir",
        attack_dir.to_str().unwrap(),
    ];
    args.extend_from_slice(&data_args);
    let out = run(&args);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let csv = read(&attack_dir.join("attack.csv"));
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("index,true_label,clean_prediction,adversarial_prediction,linf_distance")
    );
    assert_eq!(lines.count(), 8, "one row per evaluation example");
    assert!(String::from_utf8_lossy(&out.stdout).contains("robust accuracy"));

    let eval_dir = fresh_dir("consume-eval");
    let mut args = vec![
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--steps",
        "2",
        "--out-dir",
        eval_dir.to_str().unwrap(),
    ];
    args.extend_from_slice(&data_args);
    let out = run(&args);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let csv = read(&eval_dir.join("eval.csv"));
    assert!(csv.starts_with("checkpoint,clean_acc,fgsm_acc,pgd_acc,mifgsm_acc\n"));
    assert!(csv.lines().nth(1).unwrap().starts_with("checkpoint,"));

    let report_dir = fresh_dir("consume-report");
    let mut args = vec![
        "report",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--steps",
        "2",
        "--out-dir",
        report_dir.to_str().unwrap(),
    ];
    args.extend_from_slice(&data_args);
    let out = run(&args);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    for name in ["class_frequency.csv", "confidence_histogram.csv", "margins.csv"] {
        let csv = read(&report_dir.join(name));
        assert!(csv.contains("clean"), "{name} should tabulate the clean variant");
        assert!(csv.contains("pgd"), "{name} should tabulate attack variants");
    }
}
