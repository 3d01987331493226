use std::path::Path;
use std::process::{Command, Output};

fn sim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sim")).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pipeline_from_data_to_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&sim(&["gen-data", "--out", s(&data), "--n", "30", "--seed", "3"]));
    let manifest = std::fs::read_to_string(data.join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 31);

    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, "# small and fast\nchannels=8\ngru_dim=4\nK=3\nepochs=1\n").unwrap();
    let ckpt = dir.path().join("sim.ckpt");
    let out = ok(&sim(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&ckpt), "--reduced"]));
    assert!(out.contains("wrote"), "{out}");
    for suffix in ["", ".runlog.tsv", ".timing.tsv", ".cfg"] {
        assert!(Path::new(&format!("{}{suffix}", s(&ckpt))).exists(), "{suffix}");
    }
    let saved = std::fs::read_to_string(format!("{}.cfg", s(&ckpt))).unwrap();
    assert!(saved.contains("channels=8") && saved.contains("epochs=1"), "{saved}");

    let out = ok(&sim(&["probe", "--ckpt", s(&ckpt), "--data", s(&data), "--task", "vowel", "--layer", "2"]));
    assert!(out.starts_with("vowel probe on layer 2: train"), "{out}");

    let out = ok(&sim(&[
        "decode-train", "--ckpt", s(&ckpt), "--data", s(&data), "--layer", "3", "--epochs", "1",
    ]));
    assert!(out.contains("decoder for module 3"), "{out}");
    assert!(Path::new(&format!("{}.dec3", s(&ckpt))).exists());

    let report = dir.path().join("report");
    let out = ok(&sim(&[
        "report", "--ckpts", s(&ckpt), "--data", s(&data), "--out", s(&report), "--seeds", "1", "--pairs", "4",
    ]));
    assert!(out.contains("report written"), "{out}");
    let decoders = std::fs::read_to_string(report.join("decoders.tsv")).unwrap();
    assert!(decoders.lines().any(|l| l.starts_with("sim\t3\t")), "{decoders}");
    let delta = std::fs::read_to_string(report.join("delta.tsv")).unwrap();
    assert!(delta.lines().any(|l| l.starts_with("sim\t3\t8\t")), "{delta}");
}

#[test]
fn bad_inputs_exit_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = sim(&["probe", "--ckpt", "/nonexistent.ckpt", "--data", s(dir.path()), "--task", "vowel", "--layer", "1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));

    let out = sim(&["probe", "--ckpt", "x", "--data", "y", "--task", "consonant", "--layer", "1"]);
    assert!(!out.status.success());

    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "channels=8\nwidth=3\n").unwrap();
    let data = dir.path().join("data");
    ok(&sim(&["gen-data", "--out", s(&data), "--n", "10"]));
    let out = sim(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&dir.path().join("m.ckpt"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2") && err.contains("unknown key `width`"), "{err}");
}
