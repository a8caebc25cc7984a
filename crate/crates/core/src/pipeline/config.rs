//! TOML run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::corpus::KcoreScope;
use crate::eval::DEFAULT_CUTOFFS;
use crate::mixer::WindowBounds;
use crate::model::{EncoderPretrainSettings, ModelConfig, SftSettings};
use crate::prompting::DEFAULT_NEGATIVES;
use crate::scheduler::{DataRouting, LrCurve, PlanSettings};
use crate::synth::SynthConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Source-domain files for continual pre-training, keyed by domain.
    #[serde(default)]
    pub sources: BTreeMap<String, PathBuf>,
    /// Downstream domain name.
    pub target: String,
    /// Downstream file; required unless `synthetic` is set.
    #[serde(default)]
    pub target_path: Option<PathBuf>,
    /// Generate the corpus instead of reading files.
    #[serde(default)]
    pub synthetic: Option<SynthConfig>,
    #[serde(default = "default_k")]
    pub kcore: usize,
    /// Scope of the k-core filter over the source domains. The target is
    /// always filtered on its own.
    #[serde(default)]
    pub source_kcore_scope: KcoreScope,
    #[serde(default)]
    pub windows: WindowBounds,
    #[serde(default = "default_shard")]
    pub shard_size: usize,
    #[serde(default = "default_delim")]
    pub delimiter: char,
}

fn default_k() -> usize {
    3
}

fn default_shard() -> usize {
    10_000
}

fn default_delim() -> char {
    '\t'
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "d_lr_min")]
    pub lr_min: f64,
    #[serde(default = "d_lr_max")]
    pub lr_max: f64,
    #[serde(default = "d_warm")]
    pub warmup_frac: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub curve: LrCurve,
    #[serde(default)]
    pub routing: DataRouting,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_clip")]
    pub clip_norm: f64,
}

fn d_lr_min() -> f64 {
    PlanSettings::default().lr_min
}
fn d_lr_max() -> f64 {
    PlanSettings::default().lr_max
}
fn d_warm() -> f64 {
    PlanSettings::default().warmup_frac
}
fn d_batch() -> usize {
    PlanSettings::default().batch_size
}
fn d_momentum() -> f64 {
    0.9
}
fn d_clip() -> f64 {
    1.0
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        let p = PlanSettings::default();
        Self {
            lr_min: p.lr_min,
            lr_max: p.lr_max,
            warmup_frac: p.warmup_frac,
            batch_size: p.batch_size,
            curve: LrCurve::default(),
            routing: DataRouting::default(),
            momentum: d_momentum(),
            clip_norm: d_clip(),
        }
    }
}

impl ScheduleConfig {
    pub fn plan_settings(&self) -> PlanSettings {
        PlanSettings { lr_min: self.lr_min, lr_max: self.lr_max, warmup_frac: self.warmup_frac, batch_size: self.batch_size }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "d_neg")]
    pub negatives: usize,
    #[serde(default = "d_cut")]
    pub cutoffs: Vec<usize>,
    #[serde(default = "d_depth")]
    pub depth: usize,
    #[serde(default = "d_arms")]
    pub arms: Vec<Arm>,
}

fn d_neg() -> usize {
    DEFAULT_NEGATIVES
}
fn d_cut() -> Vec<usize> {
    DEFAULT_CUTOFFS.to_vec()
}
fn d_depth() -> usize {
    5
}
fn d_arms() -> Vec<Arm> {
    Arm::ALL.to_vec()
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { negatives: d_neg(), cutoffs: d_cut(), depth: d_depth(), arms: d_arms() }
    }
}

/// Which model an evaluation reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Continual pre-training, then fine-tuning.
    CptSft,
    /// Fine-tuning from a fresh adapter.
    SftOnly,
    /// The pre-trained checkpoint without fine-tuning, text-only prompts.
    CptOnly,
    /// A freshly initialised model, text-only prompts.
    Untrained,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::CptSft, Arm::SftOnly, Arm::CptOnly, Arm::Untrained];

    pub fn label(self) -> &'static str {
        match self {
            Arm::CptSft => "cpt_sft",
            Arm::SftOnly => "sft_only",
            Arm::CptOnly => "cpt_only",
            Arm::Untrained => "untrained",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.label() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "d_out")]
    pub out: PathBuf,
}

fn d_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3]
}
fn d_out() -> PathBuf {
    PathBuf::from("runs/default")
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seeds: d_seeds(), out: d_out() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub encoder: EncoderPretrainSettings,
    #[serde(default)]
    pub sft: SftSettings,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub run: RunSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Parses `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in self.data.sources.values_mut() {
            fix(p);
        }
        if let Some(p) = &mut self.data.target_path {
            fix(p);
        }
        fix(&mut self.run.out);
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Source domain names in order.
    pub fn source_domains(&self) -> Vec<String> {
        match &self.data.synthetic {
            Some(s) => s.source_domains.clone(),
            None => self.data.sources.keys().cloned().collect(),
        }
    }

    /// Checks ranges and, for file-backed data, that every path exists.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let err = |m: String| Err(PipelineError::Config(m));
        let d = &self.data;
        match &d.synthetic {
            Some(s) => {
                s.validate().map_err(PipelineError::Config)?;
                if s.target_domain != d.target {
                    return err(format!("data.target `{}` differs from synthetic target `{}`", d.target, s.target_domain));
                }
                if !d.sources.is_empty() || d.target_path.is_some() {
                    return err("data.synthetic cannot be combined with file paths".into());
                }
            }
            None => {
                if d.sources.is_empty() {
                    return err("data.sources is empty".into());
                }
                if d.sources.contains_key(&d.target) {
                    return err(format!("target domain `{}` is also a source domain", d.target));
                }
                let Some(target_path) = &d.target_path else {
                    return err("data.target_path is required without data.synthetic".into());
                };
                let missing: Vec<String> = d
                    .sources
                    .values()
                    .chain([target_path])
                    .filter(|p| !p.is_file())
                    .map(|p| p.display().to_string())
                    .collect();
                if !missing.is_empty() {
                    return err(format!("missing input file(s): {}", missing.join(", ")));
                }
            }
        }
        if d.kcore == 0 {
            return err("data.kcore must be at least 1".into());
        }
        d.windows.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if d.windows.max_history > self.model.max_len {
            return err(format!(
                "data.windows.max_history {} exceeds model.max_len {}",
                d.windows.max_history, self.model.max_len
            ));
        }
        let s = &self.schedule;
        if !(s.lr_min > 0.0 && s.lr_min <= s.lr_max && s.lr_max.is_finite()) {
            return err(format!("schedule needs 0 < lr_min <= lr_max, got {} and {}", s.lr_min, s.lr_max));
        }
        if !(s.warmup_frac > 0.0 && s.warmup_frac < 1.0) {
            return err(format!("schedule.warmup_frac {} not in (0, 1)", s.warmup_frac));
        }
        if s.batch_size == 0 || self.sft.batch_size == 0 {
            return err("batch sizes must be positive".into());
        }
        if !(0.0..1.0).contains(&s.momentum) || !(s.clip_norm > 0.0) {
            return err("schedule.momentum must be in [0, 1) and clip_norm positive".into());
        }
        self.model.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.sft.lr_grid.is_empty() || self.sft.lr_grid.iter().any(|lr| !(*lr > 0.0)) {
            return err("sft.lr_grid must hold positive learning rates".into());
        }
        if self.run.seeds.is_empty() {
            return err("run.seeds is empty".into());
        }
        let e = &self.eval;
        if e.negatives == 0 || e.cutoffs.is_empty() || e.cutoffs.contains(&0) {
            return err("eval needs negatives >= 1 and positive cutoffs".into());
        }
        if e.depth == 0 || e.depth > e.negatives + 1 {
            return err(format!("eval.depth {} must be in 1..={}", e.depth, e.negatives + 1));
        }
        Ok(())
    }
}
