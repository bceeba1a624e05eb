use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 4

[vocab]
names = ["a", "b", "x"]

[prompt]
tokens = ["a"]
horizon = 3

[base_model]
kind = "random"
seed = 1

[potential]
kind = "logistic"
weights = { x = 2.0 }
bias = -3.0
beta = 2.0

[twist]
window = 3
hidden = 6

[smc]
k_train = 10
k_test = 6

[ctl]
k_pos = 8
k_neg = 8
steps = 20

[distill]
generations = 2
dataset_size = 100

[eval]
k_grid = [2, 6]
repeats = 3
efficiency_repeats = 3
kl_samples = 100
samples = 20
"#;

fn tsmc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsmc")).args(args).output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("cfg.toml");
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn resume_reproduces_later_generations() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let full = tmp.path().join("full");
    let o = tsmc(&["train", "--config", &cfg, "--out", full.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let resumed = tmp.path().join("resumed");
    let o = tsmc(&[
        "train",
        "--config",
        &cfg,
        "--out",
        resumed.to_str().unwrap(),
        "--resume-from",
        full.to_str().unwrap(),
        "--generation",
        "1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["model.txt", "twist.txt", "dataset.jsonl", "metrics.json", "ctl_trace.jsonl"] {
        let a = std::fs::read(full.join("gen_2").join(f)).unwrap();
        let b = std::fs::read(resumed.join("gen_2").join(f)).unwrap();
        assert!(a == b, "gen_2/{f} differs after resume");
    }
}

#[test]
fn sample_prints_one_row_per_particle() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let o = tsmc(&["sample", "--config", &cfg, "--particles", "4", "--runs", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "run\tparticle\tsequence\ttoxicity\tlog_z");
    assert_eq!(lines.len(), 9);
    assert!(lines[1..].iter().all(|l| l.split('\t').count() == 5));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let out = out.to_str().unwrap();

    let bad_key = write_config(tmp.path(), &format!("{SMALL}\n[extra]\nx = 1\n"));
    assert_eq!(tsmc(&["oracle", "--config", &bad_key, "--out", out]).status.code(), Some(2));

    let missing = tmp.path().join("nope.toml");
    assert_eq!(
        tsmc(&["oracle", "--config", missing.to_str().unwrap(), "--out", out]).status.code(),
        Some(2)
    );

    let huge = write_config(tmp.path(), &SMALL.replace("horizon = 3", "horizon = 60"));
    assert_eq!(tsmc(&["oracle", "--config", &huge, "--out", out]).status.code(), Some(3));

    let cfg = write_config(tmp.path(), SMALL);
    let empty = tmp.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let o = tsmc(&["eval", "--config", &cfg, "--out", out, "--artifacts", empty.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}
