use std::path::Path;
use std::process::{Command, Output};

fn usm(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_usm")).args(args).output().unwrap();
    assert!(out.status.success(), "usm {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn rf_report_machine_line() {
    let line = stdout(&usm(&["rf-report", "--machine"]));
    assert!(line.contains("frames=8192"), "{line}");
    assert!(line.contains("seconds=327.680"), "{line}");
    let line = stdout(&usm(&["rf-report", "--machine", "-p", "local:1:1", "-l", "4"]));
    assert!(line.contains("width=9"), "{line}");
}

#[test]
fn synth_finetune_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let s = |p: &Path| p.display().to_string();
    usm(&["synth", "-o", &s(d), "-n", "6", "--seed", "3", "--prefix", "train"]);
    let config = d.join("ft.cfg");
    std::fs::write(
        &config,
        format!(
            "seed = 1\nmodel.layers = 1\nmodel.dim = 16\nmodel.heads = 2\nbatch_size = 2\nsteps = 3\ndata.train = {}\nout = {}\n",
            s(&d.join("train.tsv")),
            s(&d.join("run"))
        ),
    )
    .unwrap();
    usm(&["finetune", "-c", &s(&config), "--quiet"]);
    let report = stdout(&usm(&["eval", "-c", &s(&d.join("run").join("checkpoint")), "-m", &s(&d.join("train.tsv"))]));
    assert!(report.lines().any(|l| l.starts_with("pooled\tutterances=6")), "{report}");
}

#[test]
fn bad_override_is_rejected() {
    let out = Command::new(env!("CARGO_BIN_EXE_usm"))
        .args(["finetune", "-c", "/nonexistent.cfg", "-s", "steps"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
