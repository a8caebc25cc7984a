//! Stage wiring, artifact handling and error classification on a small
//! synthetic corpus.

use std::path::{Path, PathBuf};

use recpt::model::{inspect_checkpoint, Recommender};
use recpt::pipeline::{file_digest, Arm, Pipeline, PipelineError, RunConfig, SftInit, Stage, MANIFEST_FILE};
use recpt::synth::{generate, write_tsv, SynthConfig};

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

[eval]
arms = ["cpt_sft", "sft_only", "cpt_only", "untrained"]

[run]
seeds = [0]
out = "run"
"#;

fn setup(toml: &str) -> (tempfile::TempDir, RunConfig) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, toml).unwrap();
    let cfg = RunConfig::load(&path).unwrap();
    (dir, cfg)
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap().flatten() {
            if e.path().is_dir() {
                stack.push(e.path());
            } else {
                out.push(e.path());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn relative_out_resolves_against_the_config_file() {
    let (dir, cfg) = setup(SMALL);
    assert_eq!(cfg.run.out, dir.path().join("run"));
}

#[test]
fn unknown_keys_and_bad_ranges_are_user_errors() {
    let err = RunConfig::from_toml(&SMALL.replace("kcore = 3", "kcore = 3\nkore = 4")).unwrap_err();
    assert!(err.is_user_error(), "{err}");
    let (_dir, mut cfg) = setup(SMALL);
    cfg.data.target = "music".into();
    let err = Pipeline::new(cfg).unwrap_err();
    assert!(matches!(err, PipelineError::Config(_)) && err.is_user_error());
}

#[test]
fn stages_refuse_to_run_without_their_inputs() {
    let (_dir, cfg) = setup(SMALL);
    let mut p = Pipeline::new(cfg).unwrap();
    match p.mix() {
        Err(PipelineError::MissingArtifact { stage, .. }) => assert_eq!(stage, Stage::Ingest),
        other => panic!("expected a missing artifact, got {other:?}"),
    }
    p.ingest().unwrap();
    p.mix().unwrap();
    assert!(matches!(p.cpt(0), Err(PipelineError::MissingArtifact { stage: Stage::Plan, .. })));
    let err = p.sft(0, SftInit::FromCpt).unwrap_err();
    assert!(err.is_user_error(), "{err}");
    assert!(matches!(p.report(), Err(PipelineError::MissingArtifact { stage: Stage::Eval, .. })));
}

#[test]
fn rerunning_a_stage_leaves_upstream_untouched_and_is_idempotent() {
    let (_dir, cfg) = setup(SMALL);
    let mut p = Pipeline::new(cfg).unwrap();
    p.run(&[Stage::Ingest, Stage::Mix, Stage::Plan], false).unwrap();
    let out = p.out_dir().to_path_buf();
    let digests = |sub: &str| -> Vec<(PathBuf, String)> {
        files(&out.join(sub)).into_iter().map(|f| (f.clone(), file_digest(&f).unwrap())).collect()
    };
    let ingest_before = digests("ingest");
    let mix_before = digests("mix");
    std::fs::remove_dir_all(out.join("mix")).unwrap();
    p.mix().unwrap();
    assert_eq!(digests("ingest"), ingest_before);
    assert_eq!(digests("mix"), mix_before);
    let digest = p.manifest().content_digest();
    p.plan().unwrap();
    assert_eq!(p.manifest().content_digest(), digest);
}

#[test]
fn a_failed_stage_leaves_no_partial_outputs() {
    let (_dir, cfg) = setup(SMALL);
    let mut p = Pipeline::new(cfg).unwrap();
    p.ingest().unwrap();
    let shard = p.out_dir().join("ingest/games.tsv");
    let mut text = std::fs::read_to_string(&shard).unwrap();
    text.push_str("u1\tg1\tgames\tnot-a-time\tBroken\n");
    std::fs::write(&shard, text).unwrap();
    assert!(p.mix().is_err());
    assert!(!p.out_dir().join("mix").exists() || files(&p.out_dir().join("mix")).is_empty());
    let stray: Vec<PathBuf> = files(p.out_dir()).into_iter().filter(|f| f.file_name().unwrap().to_string_lossy().starts_with(".tmp")).collect();
    assert!(stray.is_empty(), "{stray:?}");
}

#[test]
fn file_backed_runs_match_the_generated_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig { users: 120, items_per_domain: 60, topics: 6, source_len: (5, 8), target_len: (5, 8), ..SynthConfig::default() };
    write_tsv(&generate(&synth).unwrap(), &dir.path().join("data")).unwrap();
    let files_cfg = SMALL
        .replace(
            "[data.synthetic]\nusers = 120\nitems_per_domain = 60\ntopics = 6\nsource_len = [5, 8]\ntarget_len = [5, 8]\n",
            "target_path = \"data/games.tsv\"\n[data.sources]\nbooks = \"data/books.tsv\"\nmovies = \"data/movies.tsv\"\n",
        )
        .replace("out = \"run\"", "out = \"files\"");
    std::fs::write(dir.path().join("files.toml"), &files_cfg).unwrap();
    std::fs::write(dir.path().join("synth.toml"), SMALL.replace("out = \"run\"", "out = \"synth\"")).unwrap();
    let mut a = Pipeline::new(RunConfig::load(&dir.path().join("files.toml")).unwrap()).unwrap();
    let mut b = Pipeline::new(RunConfig::load(&dir.path().join("synth.toml")).unwrap()).unwrap();
    a.run(&[Stage::Ingest, Stage::Mix], false).unwrap();
    b.run(&[Stage::Ingest, Stage::Mix], false).unwrap();
    for rel in ["ingest/games.tsv", "ingest/books.tsv", "mix/target_split.json"] {
        assert_eq!(std::fs::read(a.out_dir().join(rel)).unwrap(), std::fs::read(b.out_dir().join(rel)).unwrap(), "{rel}");
    }
}

#[test]
fn full_run_produces_every_arm_and_a_report() {
    let (_dir, cfg) = setup(SMALL);
    let mut p = Pipeline::new(cfg).unwrap();
    p.run(&Stage::ALL, false).unwrap();
    let out = p.out_dir().to_path_buf();
    for arm in [Arm::CptSft, Arm::SftOnly, Arm::CptOnly, Arm::Untrained] {
        let csv = std::fs::read_to_string(out.join(format!("eval/{}/metrics.csv", arm.label()))).unwrap();
        assert!(csv.starts_with("dataset,subset,metric,k,seed,value\n"));
        assert!(csv.contains("games,all,hr,1,0,"));
    }
    let report = std::fs::read_to_string(out.join("report/comparison.txt")).unwrap();
    assert!(report.contains("baseline: sft_only"), "{report}");
    let ckpt = p.sft_checkpoint(0, SftInit::FromCpt);
    let header = inspect_checkpoint(&ckpt).unwrap();
    assert!(header.to_string().contains("encoder"), "{header}");
    let model = Recommender::load(&ckpt).unwrap();
    assert_eq!(model.to_bytes().unwrap(), std::fs::read(&ckpt).unwrap());
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join(MANIFEST_FILE)).unwrap()).unwrap();
    for key in ["ingest", "mix", "plan", "cpt/seed_0", "report"] {
        assert!(manifest["stages"].get(key).is_some(), "manifest lacks {key}");
    }
}

#[test]
fn cpt_learns_and_repeats_bit_for_bit() {
    let (_dir, cfg) = setup(SMALL);
    let mut p = Pipeline::new(cfg).unwrap();
    p.run(&[Stage::Ingest, Stage::Mix, Stage::Plan], false).unwrap();
    let report = p.cpt(0).unwrap();
    let (first, last) = report.progress(0.1).unwrap();
    assert!(last < first, "loss {first} -> {last}");
    let bytes = std::fs::read(p.cpt_checkpoint(0)).unwrap();
    p.cpt(0).unwrap();
    assert_eq!(std::fs::read(p.cpt_checkpoint(0)).unwrap(), bytes);
}
