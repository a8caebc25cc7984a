use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use recpt::corpus::{dataset_stats, ingest, RowFormat};
use recpt::model::inspect_checkpoint;
use recpt::pipeline::{compare_runs, read_metrics_csv, write_atomic, Arm, Pipeline, PipelineError, RunConfig, SftInit, Stage};
use recpt::synth::{generate, write_tsv, SynthConfig};

#[derive(Parser)]
#[command(name = "recpt", version, about = "Continual pre-training pipeline for sequential recommendation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Global {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Single seed; overrides `run.seeds`.
    #[arg(long, global = true, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seeds; overrides `run.seeds`.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output directory; overrides `run.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Negatives per slate; overrides `eval.negatives`.
    #[arg(long, global = true)]
    negatives: Option<usize>,
    /// Fine-tune from a fresh adapter instead of the CPT checkpoint.
    #[arg(long, global = true)]
    from_scratch: bool,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Filter raw interactions and write shards plus statistics.
    Ingest,
    /// Print dataset statistics for files, or for the run's ingested shards.
    Stats { files: Vec<PathBuf> },
    /// Build CPT windows and the downstream split.
    Mix,
    /// Derive the learning-rate schedule.
    Plan,
    /// Continual pre-training, one run per seed.
    Cpt,
    /// Fine-tuning on the downstream domain, one run per seed.
    Sft,
    /// Evaluate arms on the downstream test split.
    Eval {
        /// Arms to evaluate (default: `eval.arms`).
        #[arg(long, value_delimiter = ',')]
        arms: Option<Vec<String>>,
    },
    /// Compare evaluated runs. With directories, each must hold a
    /// metrics.csv; without, the configured run's arms are compared.
    Report { dirs: Vec<PathBuf> },
    /// Checkpoint utilities.
    Checkpoint {
        #[command(subcommand)]
        action: CheckpointCmd,
    },
    /// Run several stages in order (default: all).
    Pipeline {
        #[arg(long, value_delimiter = ',')]
        stages: Option<Vec<String>>,
    },
    /// Write a synthetic multi-domain corpus as TSV files.
    Synth {
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        items_per_domain: Option<usize>,
    },
}

#[derive(Subcommand)]
enum CheckpointCmd {
    /// Print a checkpoint header.
    Inspect { path: PathBuf },
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        let user = error.downcast_ref::<PipelineError>().is_some_and(PipelineError::is_user_error);
        Self { code: if user { 2 } else { 1 }, error }
    }
}

fn usage(error: anyhow::Error) -> Failure {
    Failure { code: 2, error }
}

fn load_config(g: &Global) -> Result<RunConfig, Failure> {
    let path = g.config.as_ref().ok_or_else(|| usage(anyhow!("--config is required for this command")))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = g.seed {
        cfg.run.seeds = vec![s];
    }
    if let Some(s) = &g.seeds {
        cfg.run.seeds = s.clone();
    }
    if let Some(o) = &g.out {
        cfg.run.out = o.clone();
    }
    if let Some(n) = g.negatives {
        cfg.eval.negatives = n;
    }
    Ok(cfg)
}

fn open(g: &Global) -> Result<Pipeline, Failure> {
    Ok(Pipeline::new(load_config(g)?)?)
}

fn print_stats(files: &[PathBuf]) -> Result<(), Failure> {
    println!("{}", recpt::corpus::DatasetStats::CSV_HEADER);
    for f in files {
        let file = std::fs::File::open(f).map_err(|e| usage(anyhow!("{}: {e}", f.display())))?;
        let ing = ingest(std::io::BufReader::new(file), &RowFormat::default()).with_context(|| f.display().to_string())?;
        for e in &ing.errors {
            eprintln!("{}: {e}", f.display());
        }
        let name = f.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
        println!("{}", dataset_stats(&ing.log).csv_row(name));
    }
    Ok(())
}

fn report_dirs(dirs: &[PathBuf], out: Option<&Path>) -> Result<(), Failure> {
    let mut runs = Vec::new();
    for d in dirs {
        let p = if d.is_dir() { d.join("metrics.csv") } else { d.clone() };
        if !p.is_file() {
            return Err(usage(anyhow!("{} has no metrics.csv", d.display())));
        }
        let name = d.file_name().and_then(|s| s.to_str()).unwrap_or("run").to_string();
        runs.push((name, read_metrics_csv(&p)?));
    }
    let cmp = compare_runs(&runs)?;
    if let Some(o) = out {
        write_atomic(&o.join("comparison.csv"), cmp.csv.as_bytes())?;
        write_atomic(&o.join("comparison.txt"), cmp.text.as_bytes())?;
    }
    print!("{}", cmp.text);
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let g = &cli.global;
    match cli.command {
        Command::Ingest => {
            let summary = open(g)?.ingest()?;
            println!("{}", recpt::corpus::DatasetStats::CSV_HEADER);
            for (name, s) in &summary.stats {
                println!("{}", s.csv_row(name));
            }
            if summary.row_errors > 0 {
                eprintln!("{} malformed rows skipped", summary.row_errors);
            }
        }
        Command::Stats { files } if !files.is_empty() => print_stats(&files)?,
        Command::Stats { .. } => {
            let p = open(g)?;
            let path = p.out_dir().join("ingest/stats.txt");
            let text = std::fs::read_to_string(&path).map_err(|_| {
                Failure::from(PipelineError::MissingArtifact { path: path.clone(), stage: Stage::Ingest })
            })?;
            print!("{text}");
        }
        Command::Mix => {
            let s = open(g)?.mix()?;
            println!(
                "domain windows {}, mixed windows {} ({} dropped), target users {} ({} excluded)",
                s.domain_windows, s.mixed_windows, s.dropped_mixed, s.target_users, s.target_excluded
            );
        }
        Command::Plan => {
            let mut p = open(g)?;
            p.plan()?;
            print!("{}", std::fs::read_to_string(p.out_dir().join("plan/schedule.txt"))?);
        }
        Command::Cpt => {
            let mut p = open(g)?;
            for seed in p.config().run.seeds.clone() {
                let r = p.cpt(seed)?;
                let progress = r.progress(0.1).map(|(a, b)| format!(", loss {a:.4} -> {b:.4}")).unwrap_or_default();
                println!("seed {seed}: {} steps{progress}", r.steps);
            }
        }
        Command::Sft => {
            let mut p = open(g)?;
            let init = if g.from_scratch { SftInit::Scratch } else { SftInit::FromCpt };
            for seed in p.config().run.seeds.clone() {
                let s = p.sft(seed, init)?;
                println!("seed {seed} ({}): lr {:e}, epoch {}, valid HR@1 {:.4}", init.dir(), s.lr, s.epoch, s.valid_hr1);
            }
        }
        Command::Eval { arms } => {
            let mut p = open(g)?;
            let arms = match arms {
                Some(names) => names
                    .iter()
                    .map(|n| Arm::parse(n).ok_or_else(|| usage(anyhow!("unknown arm `{n}`"))))
                    .collect::<Result<Vec<_>, _>>()?,
                None => p.config().eval.arms.clone(),
            };
            for arm in arms {
                let m = p.eval_arm(arm)?;
                print!("{}", m.summary(arm.label()));
            }
        }
        Command::Report { dirs } if !dirs.is_empty() => report_dirs(&dirs, g.out.as_deref())?,
        Command::Report { .. } => print!("{}", open(g)?.report()?.text),
        Command::Checkpoint { action: CheckpointCmd::Inspect { path } } => {
            if !path.is_file() {
                return Err(usage(anyhow!("{}: no such file", path.display())));
            }
            print!("{}", inspect_checkpoint(&path).map_err(usage_on_format)?);
        }
        Command::Pipeline { stages } => {
            let stages = match stages {
                Some(names) => names
                    .iter()
                    .map(|n| Stage::parse(n).ok_or_else(|| usage(anyhow!("unknown stage `{n}`"))))
                    .collect::<Result<Vec<_>, _>>()?,
                None => Stage::ALL.to_vec(),
            };
            let mut p = open(g)?;
            p.run(&stages, g.from_scratch)?;
            let report = p.out_dir().join("report/comparison.txt");
            if stages.contains(&Stage::Report) {
                print!("{}", std::fs::read_to_string(report)?);
            }
            println!("manifest digest {}", p.manifest().content_digest());
        }
        Command::Synth { users, items_per_domain } => {
            let out = g.out.clone().ok_or_else(|| usage(anyhow!("--out is required")))?;
            let mut cfg = SynthConfig::default();
            if let Some(s) = g.seed {
                cfg.seed = s;
            }
            if let Some(u) = users {
                cfg.users = u;
            }
            if let Some(n) = items_per_domain {
                cfg.items_per_domain = n;
            }
            let corpus = generate(&cfg).map_err(|e| usage(anyhow!(e)))?;
            for p in write_tsv(&corpus, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

/// A file that is not a checkpoint is the caller's mistake.
fn usage_on_format(e: recpt::model::ModelError) -> Failure {
    match e {
        recpt::model::ModelError::Io(_) => Failure::from(e),
        other => usage(other.into()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
