use std::path::Path;
use std::process::{Command, Output};

fn attrib(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attrib")).args(args).output().expect("spawn attrib")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(attrib(&[]).status.code(), Some(1));
    assert_eq!(attrib(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(attrib(&["selftest", "--bogus"]).status.code(), Some(1));
    let help = attrib(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    for sub in ["gen", "train", "eval", "experiment", "mllm", "report", "selftest"] {
        assert!(stdout(&help).contains(sub), "help lists {sub}");
    }
}

#[test]
fn config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "version = 1\nkind = \"scaling\"\n[corpus.synth]\nper_cell = 4\n[split]\nsizes = [2]\ntest_per_class = 1\n[train]\nlr = -1.0\n").unwrap();
    let o = attrib(&["experiment", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train.lr"), "{}", stderr(&o));

    std::fs::write(&cfg, "version = 1\nkind = \"scaling\"\nsede = 3\n[corpus.synth]\nper_cell = 4\n").unwrap();
    let o = attrib(&["experiment", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("sede"), "{}", stderr(&o));

    let o = attrib(&["experiment", "--config", p(&dir.path().join("missing.toml"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gen_train_eval_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let o = attrib(&["gen", "--per-cell", "8", "--size", "32", "--models", "3", "--seed", "4", "--out", p(&corpus)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(corpus.join("manifest.jsonl").exists());

    let ckpt = dir.path().join("model.ckpt");
    let o = attrib(&[
        "train",
        "--corpus",
        p(&corpus),
        "--out",
        p(&ckpt),
        "--train-per-class",
        "5",
        "--test-per-class",
        "3",
        "--side",
        "16",
        "--epochs",
        "2",
        "--batch-size",
        "32",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(ckpt.exists());

    let eval_dir = dir.path().join("eval");
    let o = attrib(&["eval", "--checkpoint", p(&ckpt), "--corpus", p(&corpus), "--out", p(&eval_dir)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let printed = stdout(&o);
    let line = printed.lines().find(|l| l.starts_with("accuracy ")).expect("accuracy line");
    let written: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(eval_dir.join("confusion.json")).unwrap()).unwrap();
    let counts: Vec<Vec<u64>> = serde_json::from_value(written["confusion"]["counts"].clone()).unwrap();
    let trace: u64 = (0..counts.len()).map(|i| counts[i][i]).sum();
    let total: u64 = counts.iter().flatten().sum();
    assert_eq!(total, 9);
    assert!(line.contains(&format!("({trace} / {total})")), "{line}");
    assert!(line.contains(&format!("{:.4}", trace as f64 / total as f64)), "{line}");

    let cfg = dir.path().join("scaling.toml");
    std::fs::write(
        &cfg,
        "version = 1\nkind = \"scaling\"\nseed = 2\nshuffle_control = false\n\
         [corpus]\npath = \"corpus\"\n[split]\nsizes = [3, 5]\ntest_per_class = 3\n\
         [train]\nepochs = 1\nbatch_size = 32\n[arch]\nkind = \"conv_net\"\ninput_side = 16\nstage_channels = [4]\n",
    )
    .unwrap();
    let o = attrib(&["experiment", "--config", p(&cfg), "--out", p(&dir.path().join("runs"))]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let run = dir.path().join("runs/scaling-seed2");
    for f in ["results.json", "config.resolved.json", "run_info.json", "tables/scaling.csv", "figures/accuracy.svg", "figures/scaling.svg"] {
        assert!(run.join(f).exists(), "{f}");
    }

    let again = dir.path().join("again");
    let o = attrib(&["report", "--results", p(&run.join("results.json")), "--out", p(&again)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(again.join("tables/scaling.csv")).unwrap(),
        std::fs::read(run.join("tables/scaling.csv")).unwrap()
    );
}

#[test]
fn selftest_passes_and_reports_error() {
    let o = attrib(&["selftest", "--cases", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("max relative error"));
}
