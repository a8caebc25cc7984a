use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
[data]
target = "games"
kcore = 3

[data.synthetic]
users = 120
items_per_domain = 60
topics = 6
source_len = [5, 8]
target_len = [5, 8]

[schedule]
lr_min = 5e-4
lr_max = 5e-2

[encoder]
epochs = 2

[sft]
lr_grid = [3e-2]
epochs = 1

[run]
seeds = [0]
out = "run"
"#;

fn recpt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recpt")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, body).unwrap();
    p
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(recpt(&[]).status.code(), Some(2));
    assert_eq!(recpt(&["ingest"]).status.code(), Some(2));
    assert_eq!(recpt(&["eval", "--config", "nope.toml"]).status.code(), Some(2));
    assert_eq!(recpt(&["checkpoint", "inspect", "missing.bin"]).status.code(), Some(2));
}

#[test]
fn missing_input_file_exits_two_without_shards() {
    let dir = tempfile::tempdir().unwrap();
    let body = "[data]\ntarget = \"games\"\ntarget_path = \"absent.tsv\"\n[data.sources]\nbooks = \"books.tsv\"\n[run]\nout = \"run\"\n";
    std::fs::write(dir.path().join("books.tsv"), "u1\ti1\tbooks\t1\tA Book\n").unwrap();
    let cfg = config(dir.path(), body);
    let o = recpt(&["--config", cfg.to_str().unwrap(), "ingest"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!dir.path().join("run/ingest").exists());
}

#[test]
fn synth_then_stats() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = recpt(&["synth", "--out", out.to_str().unwrap(), "--users", "40", "--items-per-domain", "30"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let files: Vec<String> = stdout(&o).lines().map(String::from).collect();
    assert_eq!(files.len(), 3);
    let mut args = vec!["stats"];
    args.extend(files.iter().map(String::as_str));
    let o = recpt(&args);
    assert!(o.status.success());
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("dataset,users,items,interactions,sparsity"));
    assert_eq!(lines.count(), 3);
}

#[test]
fn staged_commands_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL);
    let c = cfg.to_str().unwrap();
    let run = dir.path().join("run");

    // SFT before its inputs exist is a user error.
    assert_eq!(recpt(&["--config", c, "sft"]).status.code(), Some(2));

    assert!(recpt(&["--config", c, "pipeline", "--stages", "ingest,mix"]).status.success());
    let o = recpt(&["--config", c, "pipeline", "--stages", "plan"]);
    assert!(o.status.success());
    let plan_files: Vec<String> = std::fs::read_dir(run.join("plan")).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    assert!(plan_files.iter().any(|f| f.ends_with(".csv")), "{plan_files:?}");
    assert!(!run.join("cpt").exists());

    // A fresh adapter needs no CPT checkpoint.
    let o = recpt(&["--config", c, "sft", "--from-scratch"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("seed 0 (scratch)"), "{}", stdout(&o));

    let o = recpt(&["--config", c, "pipeline"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("baseline: sft_only") && text.contains("manifest digest "), "{text}");

    let ckpt = run.join("cpt/seed_0/checkpoint.bin");
    let o = recpt(&["checkpoint", "inspect", ckpt.to_str().unwrap()]);
    assert!(o.status.success());
    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(recpt(&["checkpoint", "inspect", junk.to_str().unwrap()]).status.code(), Some(2));

    let a = run.join("eval/sft_only");
    let b = run.join("eval/cpt_sft");
    let o = recpt(&["report", a.to_str().unwrap(), b.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("cpt_sft vs base"));
    assert!(dir.path().join("comparison.csv").is_file());
    let same = recpt(&["report", a.to_str().unwrap(), a.to_str().unwrap()]);
    assert!(stdout(&same).contains("+0.00%"), "{}", stdout(&same));
}
