//! Config-driven stages from raw interactions to a comparison report.
//!
//! Output layout under the run directory:
//!
//! ```text
//! ingest/{domain}.tsv, stats.csv, stats.txt
//! mix/cpt_domain_NNNN.jsonl, cpt_mixed_NNNN.jsonl, target_split.json, summary.txt
//! plan/plan.toml, schedule.txt, lr_curve.csv
//! cpt/seed_N/checkpoint.bin, losses.csv
//! sft/seed_N/{from_cpt,scratch}/checkpoint.bin, trials.csv
//! eval/{arm}/metrics.csv, summary.txt, ordered_seed_N.jsonl
//! report/comparison.csv, comparison.txt
//! manifest.json
//! ```

mod config;
mod manifest;
mod report;

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{Arm, DataConfig, EvalConfig, RunConfig, RunSection, ScheduleConfig};
pub use manifest::{file_digest, sha256_hex, write_atomic, RunManifest, StageRecord, MANIFEST_FILE};
pub use report::{compare_runs, read_metrics_csv, Comparison};

use crate::corpus::{
    dataset_stats, ingest, kcore_filter, kcore_filter_scoped, write_log, CorpusError, DatasetStats, InteractionLog,
    KcoreScope, RowFormat, SplitDataset,
};
use crate::eval::{evaluate, ordered_generation, seed_average, EvalError, MetricReport, METRICS_CSV_HEADER};
use crate::mixer::{
    all_domain_sequences, build_mixed_sequences, read_window_shard, window_sequences, write_window_shards,
    BehaviorSequence, MixError, SequenceKind, SequenceWindow,
};
use crate::model::{
    cpt_run, pretrain_encoder, sft_run, ModelError, Optimizer, Passthrough, Recommender, SftSettings,
};
use crate::prompting::{materialize_windows, Catalog, PromptError, PromptMode, TrainingExample};
use crate::scheduler::{build_plan, lr_curve_csv, schedule_table, stage_stream, ScheduleError, SchedulePlan, StreamSettings};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing {path}; run the `{stage}` stage first")]
    MissingArtifact { path: PathBuf, stage: Stage },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corrupt artifact: {0}")]
    Corrupt(String),
    #[error("incompatible runs: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Mix(#[from] MixError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl PipelineError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    /// Errors caused by the invocation rather than by the tool.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Self::Config(_) | Self::MissingArtifact { .. } | Self::Incompatible(_) | Self::Prompt(PromptError::InsufficientCatalog { .. })
        )
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Mix,
    Plan,
    Cpt,
    Sft,
    Eval,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [Stage::Ingest, Stage::Mix, Stage::Plan, Stage::Cpt, Stage::Sft, Stage::Eval, Stage::Report];

    pub fn label(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Mix => "mix",
            Stage::Plan => "plan",
            Stage::Cpt => "cpt",
            Stage::Sft => "sft",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.label() == s)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

type SftData = (Vec<TrainingExample>, Vec<TrainingExample>, Vec<Vec<String>>);

/// SFT initialisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SftInit {
    FromCpt,
    Scratch,
}

impl SftInit {
    pub fn dir(self) -> &'static str {
        match self {
            SftInit::FromCpt => "from_cpt",
            SftInit::Scratch => "scratch",
        }
    }
}

const SALT_MIXED: u64 = 0x6d69_7865_6400_0001;
const SALT_SFT_TRAIN: u64 = 0x7366_7400_0000_0002;
const SALT_SFT_VALID: u64 = 0x7366_7400_0000_0003;
const SALT_TEST: u64 = 0x7465_7374_0000_0004;

#[derive(Debug, Clone, PartialEq)]
pub struct IngestSummary {
    pub stats: Vec<(String, DatasetStats)>,
    pub row_errors: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixSummary {
    pub domain_windows: usize,
    pub mixed_windows: usize,
    pub dropped_mixed: usize,
    pub target_users: usize,
    pub target_excluded: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftSummary {
    pub lr: f64,
    pub epoch: usize,
    pub valid_hr1: f64,
}

#[derive(Debug)]
pub struct Pipeline {
    config: RunConfig,
    out: PathBuf,
    manifest: RunManifest,
}

fn read_log(path: &Path, stage: Stage, format: &RowFormat) -> Result<InteractionLog> {
    if !path.is_file() {
        return Err(PipelineError::MissingArtifact { path: path.to_path_buf(), stage });
    }
    let file = File::open(path).map_err(|e| PipelineError::io(path, e))?;
    let ingested = ingest(BufReader::new(file), format)?;
    if !ingested.errors.is_empty() {
        return Err(PipelineError::Corrupt(format!("{}: {} malformed rows", path.display(), ingested.errors.len())));
    }
    Ok(ingested.log)
}

fn require(path: &Path, stage: Stage) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(PipelineError::MissingArtifact { path: path.to_path_buf(), stage })
    }
}

fn log_bytes(log: &InteractionLog, format: &RowFormat) -> Vec<u8> {
    let mut buf = Vec::new();
    write_log(log, &mut buf, format).expect("writing to memory cannot fail");
    buf
}

/// Target-domain histories cut at `len` and truncated to the window bounds.
fn target_window(user: &str, items: &[crate::mixer::BehaviorItem], target: &crate::mixer::BehaviorItem, domain: &str, max: usize) -> SequenceWindow {
    SequenceWindow {
        user_id: user.to_string(),
        index: items.len(),
        history: items[items.len().saturating_sub(max)..].to_vec(),
        target: target.clone(),
        source_kind: SequenceKind::DomainSpecific(domain.to_string()),
    }
}

impl Pipeline {
    /// Validates the config and opens (or creates) the run directory named
    /// by `run.out`.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let out = config.run.out.clone();
        std::fs::create_dir_all(&out).map_err(|e| PipelineError::io(&out, e))?;
        // The output location is not part of the run's content.
        let mut snapshot = config.clone();
        snapshot.run.out = PathBuf::from(".");
        let manifest = RunManifest::load_or_new(&out, &snapshot.to_toml())?;
        Ok(Self { config, out, manifest })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn rel(&self, path: &Path) -> String {
        let r = path.strip_prefix(&self.out).unwrap_or(path);
        r.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect::<Vec<_>>().join("/")
    }

    fn format(&self) -> RowFormat {
        RowFormat { delimiter: self.config.data.delimiter }
    }

    fn record(&mut self, key: String, inputs: &[PathBuf], outputs: &[PathBuf], started: Instant) -> Result<()> {
        let mut rec = StageRecord { wall_clock_ms: started.elapsed().as_millis() as u64, ..Default::default() };
        for p in inputs {
            rec.inputs.insert(self.rel(p), file_digest(p)?);
        }
        for p in outputs {
            rec.outputs.insert(self.rel(p), file_digest(p)?);
        }
        self.manifest.stages.insert(key, rec);
        self.manifest.save(&self.out)
    }

    fn write(&self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.path(rel);
        write_atomic(&p, bytes)?;
        Ok(p)
    }

    fn source_shard(&self, domain: &str) -> PathBuf {
        self.path(&format!("ingest/{domain}.tsv"))
    }

    fn target_shard(&self) -> PathBuf {
        self.path(&format!("ingest/{}.tsv", self.config.data.target))
    }

    /// Reads inputs, applies k-core filtering, writes shards and
    /// statistics. Nothing is written unless every input parses.
    pub fn ingest(&mut self) -> Result<IngestSummary> {
        let started = Instant::now();
        let cfg = self.config.data.clone();
        let format = self.format();
        let mut inputs = Vec::new();
        let mut row_errors = 0;
        let mut diagnostics = String::new();
        let (sources, target): (Vec<InteractionLog>, InteractionLog) = match &cfg.synthetic {
            Some(s) => {
                let corpus = crate::synth::generate(s).map_err(PipelineError::Config)?;
                let src = s.source_domains.iter().map(|d| corpus.logs[d].clone()).collect();
                (src, corpus.logs[&s.target_domain].clone())
            }
            None => {
                let mut read = |domain: &str, path: &Path| -> Result<InteractionLog> {
                    let file = File::open(path).map_err(|e| PipelineError::io(path, e))?;
                    let ing = ingest(BufReader::new(file), &format)?;
                    for e in &ing.errors {
                        log::warn!("{}: {e}", path.display());
                        let name = path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default();
                        diagnostics.push_str(&format!("{name}: {e}\n"));
                    }
                    row_errors += ing.errors.len();
                    let restricted = ing.log.restrict_to_domain(domain);
                    if restricted.len() != ing.log.len() {
                        log::warn!("{}: {} rows from other domains ignored", path.display(), ing.log.len() - restricted.len());
                    }
                    inputs.push(path.to_path_buf());
                    Ok(restricted)
                };
                let mut src = Vec::new();
                for (domain, path) in &cfg.sources {
                    src.push(read(domain, path)?);
                }
                let target_path = cfg.target_path.clone().expect("validated");
                let target = read(&cfg.target, &target_path)?;
                (src, target)
            }
        };
        let domains = self.config.source_domains();
        let merged = InteractionLog::merge(sources.iter());
        let filtered = kcore_filter_scoped(&merged, cfg.kcore, cfg.source_kcore_scope);
        let target_f = kcore_filter(&target, cfg.kcore);

        let mut stats = Vec::new();
        let mut pending: Vec<(String, Vec<u8>)> = Vec::new();
        for (domain, raw) in domains.iter().zip(&sources) {
            let shard = filtered.restrict_to_domain(domain);
            log::info!("{domain}: {} -> {} interactions after {}-core", raw.len(), shard.len(), cfg.kcore);
            stats.push((domain.clone(), dataset_stats(&shard)));
            pending.push((format!("ingest/{domain}.tsv"), log_bytes(&shard, &format)));
        }
        stats.push(("cpt_corpus".to_string(), dataset_stats(&filtered)));
        stats.push((cfg.target.clone(), dataset_stats(&target_f)));
        pending.push((format!("ingest/{}.tsv", cfg.target), log_bytes(&target_f, &format)));

        let mut csv = format!("{}\n", DatasetStats::CSV_HEADER);
        let mut txt = String::new();
        for (name, s) in &stats {
            csv.push_str(&s.csv_row(name));
            csv.push('\n');
            txt.push_str(&s.report(name));
            txt.push('\n');
        }
        let scope = match cfg.source_kcore_scope {
            KcoreScope::Global => "global",
            KcoreScope::PerDomain => "per_domain",
        };
        txt.push_str(&format!("kcore={}\nsource_kcore_scope={scope}\nrow_errors={row_errors}\n", cfg.kcore));
        txt.push_str(&diagnostics);
        pending.push(("ingest/stats.csv".into(), csv.into_bytes()));
        pending.push(("ingest/stats.txt".into(), txt.into_bytes()));

        let mut outputs = Vec::new();
        for (rel, bytes) in &pending {
            outputs.push(self.write(rel, bytes)?);
        }
        self.record("ingest".into(), &inputs, &outputs, started)?;
        Ok(IngestSummary { stats, row_errors })
    }

    fn source_logs(&self) -> Result<InteractionLog> {
        let format = self.format();
        let mut logs = Vec::new();
        for d in self.config.source_domains() {
            logs.push(read_log(&self.source_shard(&d), Stage::Ingest, &format)?);
        }
        Ok(InteractionLog::merge(logs.iter()))
    }

    fn source_shard_paths(&self) -> Vec<PathBuf> {
        self.config.source_domains().iter().map(|d| self.source_shard(d)).collect()
    }

    fn cpt_shards(&self, kind: &str) -> Result<Vec<PathBuf>> {
        let dir = self.path("mix");
        let prefix = format!("cpt_{kind}_");
        let mut out: Vec<PathBuf> = match std::fs::read_dir(&dir) {
            Ok(rd) => rd
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with(&prefix) && n.ends_with(".jsonl"))
                })
                .collect(),
            Err(_) => Vec::new(),
        };
        out.sort();
        if out.is_empty() {
            return Err(PipelineError::MissingArtifact { path: dir.join(format!("{prefix}0000.jsonl")), stage: Stage::Mix });
        }
        Ok(out)
    }

    fn read_windows(&self, kind: &str) -> Result<Vec<SequenceWindow>> {
        let mut out = Vec::new();
        for p in self.cpt_shards(kind)? {
            out.extend(read_window_shard(&p)?);
        }
        Ok(out)
    }

    /// Builds CPT windows and the downstream leave-one-out split.
    pub fn mix(&mut self) -> Result<MixSummary> {
        let started = Instant::now();
        let bounds = self.config.data.windows;
        let inputs: Vec<PathBuf> = self.source_shard_paths().into_iter().chain([self.target_shard()]).collect();
        let merged = self.source_logs()?;
        let target = read_log(&self.target_shard(), Stage::Ingest, &self.format())?;

        let ds = window_sequences(&all_domain_sequences(&merged), bounds)?;
        let mixed = window_sequences(&build_mixed_sequences(&merged), bounds)?;
        let split = crate::corpus::leave_one_out_split(&crate::corpus::build_user_sequences(&target));

        let dir = self.path("mix");
        std::fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
        for old in ["domain", "mixed"].iter().flat_map(|k| self.cpt_shards(k).unwrap_or_default()) {
            std::fs::remove_file(&old).map_err(|e| PipelineError::io(&old, e))?;
        }
        let mut outputs = write_window_shards(&ds.windows, &dir, "cpt", "domain", self.config.data.shard_size)?;
        outputs.extend(write_window_shards(&mixed.windows, &dir, "cpt", "mixed", self.config.data.shard_size)?);
        let split_json = serde_json::to_vec(&split).expect("split serializes");
        outputs.push(self.write("mix/target_split.json", &split_json)?);

        let mut summary = format!(
            "domain_windows={}\nmixed_windows={}\ndropped_mixed={}\n",
            ds.windows.len(),
            mixed.windows.len(),
            mixed.dropped_mixed
        );
        for (rule, n) in &mixed.dropped_by_rule {
            summary.push_str(&format!("dropped_rule_{}={n}\n", rule.rule_number()));
        }
        summary.push_str(&format!("target_users={}\ntarget_excluded={}\n", split.users.len(), split.excluded));
        outputs.push(self.write("mix/summary.txt", summary.as_bytes())?);
        self.record("mix".into(), &inputs, &outputs, started)?;
        Ok(MixSummary {
            domain_windows: ds.windows.len(),
            mixed_windows: mixed.windows.len(),
            dropped_mixed: mixed.dropped_mixed,
            target_users: split.users.len(),
            target_excluded: split.excluded,
        })
    }

    fn count_lines(paths: &[PathBuf]) -> Result<usize> {
        let mut n = 0;
        for p in paths {
            let text = std::fs::read_to_string(p).map_err(|e| PipelineError::io(p, e))?;
            n += text.lines().filter(|l| !l.trim().is_empty()).count();
        }
        Ok(n)
    }

    /// Derives the one-epoch schedule from the window counts.
    pub fn plan(&mut self) -> Result<SchedulePlan> {
        let started = Instant::now();
        let ds = self.cpt_shards("domain")?;
        let mixed = self.cpt_shards("mixed")?;
        let plan = build_plan(Self::count_lines(&ds)?, Self::count_lines(&mixed)?, &self.config.schedule.plan_settings())?;
        let plan_toml = toml::to_string(&plan).expect("plan serializes");
        let outputs = vec![
            self.write("plan/plan.toml", plan_toml.as_bytes())?,
            self.write("plan/schedule.txt", schedule_table(&plan).as_bytes())?,
            self.write("plan/lr_curve.csv", lr_curve_csv(&plan, self.config.schedule.curve).as_bytes())?,
        ];
        let inputs: Vec<PathBuf> = ds.into_iter().chain(mixed).collect();
        self.record("plan".into(), &inputs, &outputs, started)?;
        Ok(plan)
    }

    fn load_plan(&self) -> Result<SchedulePlan> {
        let p = self.path("plan/plan.toml");
        require(&p, Stage::Plan)?;
        let text = std::fs::read_to_string(&p).map_err(|e| PipelineError::io(&p, e))?;
        let plan: SchedulePlan = toml::from_str(&text).map_err(|e| PipelineError::Corrupt(format!("{}: {e}", p.display())))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn cpt_checkpoint(&self, seed: u64) -> PathBuf {
        self.path(&format!("cpt/seed_{seed}/checkpoint.bin"))
    }

    pub fn sft_checkpoint(&self, seed: u64, init: SftInit) -> PathBuf {
        self.path(&format!("sft/seed_{seed}/{}/checkpoint.bin", init.dir()))
    }

    /// One pass over the staged stream for `seed`.
    pub fn cpt(&mut self, seed: u64) -> Result<crate::model::CptReport> {
        let started = Instant::now();
        let plan = self.load_plan()?;
        let merged = self.source_logs()?;
        let ds_w = self.read_windows("domain")?;
        let mix_w = self.read_windows("mixed")?;
        let catalog = Catalog::from_log(&merged);
        let pools = merged.user_pools();
        let n = self.config.eval.negatives;
        let ds = materialize_windows(&ds_w, &catalog, &pools, n, seed)?;
        let mixed = materialize_windows(&mix_w, &catalog, &pools, n, seed ^ SALT_MIXED)?;
        let sched = &self.config.schedule;
        let settings = StreamSettings { batch_size: sched.batch_size, seed, curve: sched.curve, routing: sched.routing };
        let stream = stage_stream(ds, mixed, plan, &settings)?;
        let mut model = Recommender::new(self.config.model, seed)?;
        let mut opt = Optimizer::new(sched.momentum, sched.clip_norm);
        let report = cpt_run(&mut model, stream, &mut opt)?;
        if let Some((first, last)) = report.progress(0.1) {
            log::info!("cpt seed {seed}: mean loss first 10% {first:.4}, last 10% {last:.4}");
        }
        let ckpt = self.cpt_checkpoint(seed);
        model.save(&ckpt)?;
        let mut csv = String::from("step,lr,loss\n");
        for (i, (lr, loss)) in report.lrs.iter().zip(&report.losses).enumerate() {
            csv.push_str(&format!("{},{lr:.12e},{loss:.12e}\n", i + 1));
        }
        let losses = self.write(&format!("cpt/seed_{seed}/losses.csv"), csv.as_bytes())?;
        let mut inputs = self.source_shard_paths();
        inputs.extend(self.cpt_shards("domain")?);
        inputs.extend(self.cpt_shards("mixed")?);
        inputs.push(self.path("plan/plan.toml"));
        self.record(format!("cpt/seed_{seed}"), &inputs, &[ckpt, losses], started)?;
        Ok(report)
    }

    fn target_data(&self) -> Result<(InteractionLog, SplitDataset)> {
        let target = read_log(&self.target_shard(), Stage::Ingest, &self.format())?;
        let p = self.path("mix/target_split.json");
        require(&p, Stage::Mix)?;
        let bytes = std::fs::read(&p).map_err(|e| PipelineError::io(&p, e))?;
        let split = serde_json::from_slice(&bytes).map_err(|e| PipelineError::Corrupt(format!("{}: {e}", p.display())))?;
        Ok((target, split))
    }

    /// Train windows and validation examples over the target split, plus
    /// the train sequences' item ids.
    fn sft_examples(&self, seed: u64) -> Result<SftData> {
        let (target, split) = self.target_data()?;
        let bounds = self.config.data.windows;
        let domain = &self.config.data.target;
        let catalog = Catalog::from_log(&target);
        let pools = target.user_pools();
        let seqs: Vec<BehaviorSequence> = split
            .users
            .iter()
            .map(|(u, s)| BehaviorSequence { user_id: u.clone(), kind: SequenceKind::DomainSpecific(domain.clone()), items: s.train.clone() })
            .collect();
        let train_w = window_sequences(&seqs, bounds)?.windows;
        let valid_w: Vec<SequenceWindow> = split
            .users
            .iter()
            .filter(|(_, s)| s.valid_history().len() >= bounds.min_history)
            .map(|(u, s)| target_window(u, s.valid_history(), &s.valid, domain, bounds.max_history))
            .collect();
        let n = self.config.eval.negatives;
        let train = materialize_windows(&train_w, &catalog, &pools, n, seed ^ SALT_SFT_TRAIN)?;
        let valid = materialize_windows(&valid_w, &catalog, &pools, n, seed ^ SALT_SFT_VALID)?;
        let encoder_seqs = seqs.iter().map(|s| s.items.iter().map(|i| i.item_id.clone()).collect()).collect();
        Ok((train, valid, encoder_seqs))
    }

    /// Encoder pre-training on the target train split, then adapter
    /// fine-tuning with learning-rate search.
    pub fn sft(&mut self, seed: u64, init: SftInit) -> Result<SftSummary> {
        let started = Instant::now();
        let mut inputs = vec![self.target_shard(), self.path("mix/target_split.json")];
        let mut model = match init {
            SftInit::FromCpt => {
                let p = self.cpt_checkpoint(seed);
                require(&p, Stage::Cpt)?;
                inputs.push(p.clone());
                Recommender::load(&p)?
            }
            SftInit::Scratch => Recommender::new(self.config.model, seed)?,
        };
        if model.config() != &self.config.model {
            return Err(PipelineError::Config("checkpoint dimensions differ from [model]".into()));
        }
        let (train, valid, encoder_seqs) = self.sft_examples(seed)?;
        let enc = crate::model::EncoderPretrainSettings { seed: self.config.encoder.seed.wrapping_add(seed), ..self.config.encoder };
        let enc_losses = pretrain_encoder(&mut model, &encoder_seqs, &enc)?;
        if let (Some(a), Some(b)) = (enc_losses.first(), enc_losses.last()) {
            log::info!("encoder seed {seed}: next-item loss {a:.4} -> {b:.4}");
        }
        let settings = SftSettings { seed: self.config.sft.seed.wrapping_add(seed), ..self.config.sft.clone() };
        let outcome = sft_run(&model, &train, &valid, &settings)?;
        let ckpt = self.sft_checkpoint(seed, init);
        outcome.model.save(&ckpt)?;
        let mut csv = String::from("lr,epoch,valid_hr1,hybrid_fraction\n");
        for t in &outcome.trials {
            csv.push_str(&format!("{:e},{},{},{}\n", t.lr, t.epoch, t.valid_hr1, t.hybrid_fraction));
        }
        csv.push_str(&format!("# selected lr={:e} epoch={} valid_hr1={}\n", outcome.lr, outcome.epoch, outcome.valid_hr1));
        let trials = self.write(&format!("sft/seed_{seed}/{}/trials.csv", init.dir()), csv.as_bytes())?;
        self.record(format!("sft/seed_{seed}/{}", init.dir()), &inputs, &[ckpt, trials], started)?;
        Ok(SftSummary { lr: outcome.lr, epoch: outcome.epoch, valid_hr1: outcome.valid_hr1 })
    }

    /// Test examples: history is train plus validation, target is the
    /// held-out last item.
    fn test_examples(&self, seed: u64) -> Result<Vec<TrainingExample>> {
        let (target, split) = self.target_data()?;
        let bounds = self.config.data.windows;
        let catalog = Catalog::from_log(&target);
        let pools = target.user_pools();
        let windows: Vec<SequenceWindow> = split
            .users
            .iter()
            .filter_map(|(u, s)| {
                let h = s.test_history();
                (h.len() >= bounds.min_history)
                    .then(|| target_window(u, &h, &s.test, &self.config.data.target, bounds.max_history))
            })
            .collect();
        Ok(materialize_windows(&windows, &catalog, &pools, self.config.eval.negatives, seed ^ SALT_TEST)?)
    }

    fn arm_model(&self, arm: Arm, seed: u64, inputs: &mut Vec<PathBuf>) -> Result<(Recommender, PromptMode)> {
        let load = |p: PathBuf, stage: Stage, inputs: &mut Vec<PathBuf>| -> Result<Recommender> {
            require(&p, stage)?;
            inputs.push(p.clone());
            Ok(Recommender::load(&p)?)
        };
        Ok(match arm {
            Arm::CptSft => (load(self.sft_checkpoint(seed, SftInit::FromCpt), Stage::Sft, inputs)?, PromptMode::Hybrid),
            Arm::SftOnly => (load(self.sft_checkpoint(seed, SftInit::Scratch), Stage::Sft, inputs)?, PromptMode::Hybrid),
            Arm::CptOnly => (load(self.cpt_checkpoint(seed), Stage::Cpt, inputs)?, PromptMode::TextOnly),
            Arm::Untrained => (Recommender::new(self.config.model, seed)?, PromptMode::TextOnly),
        })
    }

    /// Per-seed metrics and their mean for one arm.
    pub fn eval_arm(&mut self, arm: Arm) -> Result<MetricReport> {
        let started = Instant::now();
        let mut inputs = vec![self.target_shard(), self.path("mix/target_split.json")];
        let mut per_seed = Vec::new();
        let mut outputs = Vec::new();
        let dataset = self.config.data.target.clone();
        for &seed in &self.config.run.seeds.clone() {
            let (model, mode) = self.arm_model(arm, seed, &mut inputs)?;
            let mode = if mode == PromptMode::Hybrid && !model.encoder_trained() { PromptMode::TextOnly } else { mode };
            let examples: Vec<TrainingExample> = self.test_examples(seed)?.into_iter().map(|e| e.with_mode(mode)).collect();
            let records = evaluate(&model, &examples, &mut Passthrough)?;
            per_seed.push(MetricReport::from_records(&records, seed, &self.config.eval.cutoffs)?);
            let mut lines = String::new();
            for ex in &examples {
                let ranked = ordered_generation(&model, ex, self.config.eval.depth)?;
                let row = serde_json::json!({ "user_id": ex.window.user_id, "target": ex.slate.target().item_id, "ranked": ranked });
                lines.push_str(&row.to_string());
                lines.push('\n');
            }
            outputs.push(self.write(&format!("eval/{}/ordered_seed_{seed}.jsonl", arm.label()), lines.as_bytes())?);
        }
        let mean = seed_average(&per_seed)?;
        let mut csv = format!("{METRICS_CSV_HEADER}\n");
        for r in &per_seed {
            csv.push_str(&r.csv_rows(&dataset));
        }
        if per_seed.len() > 1 {
            csv.push_str(&mean.csv_rows(&dataset));
        }
        outputs.push(self.write(&format!("eval/{}/metrics.csv", arm.label()), csv.as_bytes())?);
        let summary = mean.summary(&format!("{dataset} / {}", arm.label()));
        outputs.push(self.write(&format!("eval/{}/summary.txt", arm.label()), summary.as_bytes())?);
        inputs.sort();
        inputs.dedup();
        self.record(format!("eval/{}", arm.label()), &inputs, &outputs, started)?;
        Ok(mean)
    }

    pub fn eval(&mut self) -> Result<BTreeMap<Arm, MetricReport>> {
        let mut out = BTreeMap::new();
        for arm in self.config.eval.arms.clone() {
            out.insert(arm, self.eval_arm(arm)?);
        }
        Ok(out)
    }

    /// Side-by-side comparison of every evaluated arm. The SFT-only arm,
    /// when present, is the baseline for relative improvements.
    pub fn report(&mut self) -> Result<Comparison> {
        let started = Instant::now();
        let mut arms = self.config.eval.arms.clone();
        arms.sort_by_key(|a| (*a != Arm::SftOnly, *a));
        let mut runs = Vec::new();
        let mut inputs = Vec::new();
        for arm in arms {
            let p = self.path(&format!("eval/{}/metrics.csv", arm.label()));
            require(&p, Stage::Eval)?;
            runs.push((arm.label().to_string(), read_metrics_csv(&p)?));
            inputs.push(p);
        }
        let cmp = compare_runs(&runs)?;
        let outputs = vec![self.write("report/comparison.csv", cmp.csv.as_bytes())?, self.write("report/comparison.txt", cmp.text.as_bytes())?];
        self.record("report".into(), &inputs, &outputs, started)?;
        Ok(cmp)
    }

    /// Runs `stages` in dependency order over every configured seed.
    /// `from_scratch` restricts SFT to the fresh-adapter variant.
    pub fn run(&mut self, stages: &[Stage], from_scratch: bool) -> Result<()> {
        let mut stages = stages.to_vec();
        stages.sort();
        stages.dedup();
        let seeds = self.config.run.seeds.clone();
        for stage in stages {
            log::info!("stage {stage}");
            match stage {
                Stage::Ingest => {
                    self.ingest()?;
                }
                Stage::Mix => {
                    self.mix()?;
                }
                Stage::Plan => {
                    self.plan()?;
                }
                Stage::Cpt => {
                    for &s in &seeds {
                        self.cpt(s)?;
                    }
                }
                Stage::Sft => {
                    for &s in &seeds {
                        if from_scratch {
                            self.sft(s, SftInit::Scratch)?;
                        } else {
                            self.sft(s, SftInit::FromCpt)?;
                            if self.config.eval.arms.contains(&Arm::SftOnly) {
                                self.sft(s, SftInit::Scratch)?;
                            }
                        }
                    }
                }
                Stage::Eval => drop(self.eval()?),
                Stage::Report => drop(self.report()?),
            }
        }
        Ok(())
    }
}
