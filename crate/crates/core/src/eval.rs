//! Ranking metrics, ValidRatio, ordered generation, sparsity subsets and
//! seed averaging.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{argmax, candidate_ref, EmissionChannel, ItemRef, Recommender};
use crate::prompting::{Candidate, CandidateSlate, TrainingExample};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("score at slate index {index} is not finite")]
    NonFinite { index: usize },
    #[error("target index {target} outside a slate of {len}")]
    TargetOutOfRange { target: usize, len: usize },
    #[error("no records to evaluate")]
    Empty,
    #[error("cutoff k must be at least 1")]
    BadCutoff,
    #[error("{generations} generations for {slates} slates")]
    LengthMismatch { generations: usize, slates: usize },
    #[error("depth {depth} exceeds slate size {size}")]
    Depth { depth: usize, size: usize },
    #[error("history length {0} outside [3, 10]")]
    HistoryLength(usize),
    #[error("metric key {0} is not shared by every report")]
    KeyMismatch(String),
}

/// 1-based position of the target when the slate is sorted by descending
/// score, ties going to the lower slate index.
pub fn rank_target(scores: &[f64], target: usize) -> Result<usize, EvalError> {
    if target >= scores.len() {
        return Err(EvalError::TargetOutOfRange { target, len: scores.len() });
    }
    if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
        return Err(EvalError::NonFinite { index });
    }
    let t = scores[target];
    let above = scores.iter().enumerate().filter(|&(j, &s)| s > t || (s == t && j < target)).count();
    Ok(above + 1)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub user_id: String,
    pub rank: usize,
    /// The generated title named a slate candidate.
    pub valid: bool,
    pub history_length: usize,
}

fn check(records: &[EvalRecord], k: usize) -> Result<(), EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    if k == 0 {
        return Err(EvalError::BadCutoff);
    }
    Ok(())
}

pub fn hr_at_k(records: &[EvalRecord], k: usize) -> Result<f64, EvalError> {
    check(records, k)?;
    Ok(records.iter().filter(|r| r.rank <= k).count() as f64 / records.len() as f64)
}

/// Single relevant item per record, so the ideal DCG is 1.
pub fn ndcg_at_k(records: &[EvalRecord], k: usize) -> Result<f64, EvalError> {
    check(records, k)?;
    let total: f64 = records.iter().filter(|r| r.rank <= k).map(|r| 1.0 / ((r.rank + 1) as f64).log2()).sum();
    Ok(total / records.len() as f64)
}

/// Trims and collapses internal whitespace runs to one space.
pub fn normalize_title(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn is_valid_generation(generation: &str, slate: &CandidateSlate) -> bool {
    let g = normalize_title(generation);
    slate.titles().any(|t| normalize_title(t) == g)
}

/// Fraction of generations that name a title in their slate, compared
/// case-sensitively after whitespace normalization.
pub fn valid_ratio(generations: &[String], slates: &[CandidateSlate]) -> Result<f64, EvalError> {
    if generations.len() != slates.len() {
        return Err(EvalError::LengthMismatch { generations: generations.len(), slates: slates.len() });
    }
    if generations.is_empty() {
        return Err(EvalError::Empty);
    }
    let ok = generations.iter().zip(slates).filter(|(g, s)| is_valid_generation(g, s)).count();
    Ok(ok as f64 / generations.len() as f64)
}

/// Anything that scores a subset of a slate for a given example.
pub trait SlateScorer {
    fn score(&self, example: &TrainingExample, candidates: &[Candidate]) -> Vec<f64>;
}

impl SlateScorer for Recommender {
    fn score(&self, example: &TrainingExample, candidates: &[Candidate]) -> Vec<f64> {
        let history: Vec<ItemRef<'_>> =
            example.window.history.iter().map(|i| ItemRef { item_id: &i.item_id, title: &i.title }).collect();
        let cands: Vec<ItemRef<'_>> = candidates.iter().map(candidate_ref).collect();
        self.score_candidates(&history, &cands, example.mode)
    }
}

/// Emits the argmax candidate, removes it, and repeats `depth` times.
/// Returns item ids in emission order.
pub fn ordered_generation<S: SlateScorer + ?Sized>(
    scorer: &S,
    example: &TrainingExample,
    depth: usize,
) -> Result<Vec<String>, EvalError> {
    let mut remaining = example.slate.candidates.clone();
    if depth > remaining.len() {
        return Err(EvalError::Depth { depth, size: remaining.len() });
    }
    let mut out = Vec::with_capacity(depth);
    for _ in 0..depth {
        let scores = scorer.score(example, &remaining);
        if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
            return Err(EvalError::NonFinite { index });
        }
        let best = argmax(&scores).expect("remaining is non-empty");
        out.push(remaining.remove(best).item_id);
    }
    Ok(out)
}

/// Scores `example`, ranks its target, and checks the generated title.
pub fn evaluate_example(model: &Recommender, example: &TrainingExample, channel: &mut dyn EmissionChannel) -> Result<EvalRecord, EvalError> {
    let scores = model.score_slate(example);
    let rank = rank_target(&scores, example.slate.target_index)?;
    let best = argmax(&scores).ok_or(EvalError::Empty)?;
    let generation = channel.emit(&example.slate.candidates[best].title);
    Ok(EvalRecord {
        user_id: example.window.user_id.clone(),
        rank,
        valid: is_valid_generation(&generation, &example.slate),
        history_length: example.window.history.len(),
    })
}

pub fn evaluate(model: &Recommender, examples: &[TrainingExample], channel: &mut dyn EmissionChannel) -> Result<Vec<EvalRecord>, EvalError> {
    examples.iter().map(|e| evaluate_example(model, e, channel)).collect()
}

/// History-length bands: sparse `[3,5)`, medium `[5,9)`, dense `[9,10]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Sparse,
    Medium,
    Dense,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::Sparse, Subset::Medium, Subset::Dense];

    pub fn of(history_length: usize) -> Result<Self, EvalError> {
        match history_length {
            3..=4 => Ok(Subset::Sparse),
            5..=8 => Ok(Subset::Medium),
            9..=10 => Ok(Subset::Dense),
            n => Err(EvalError::HistoryLength(n)),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Subset::Sparse => "sparse",
            Subset::Medium => "medium",
            Subset::Dense => "dense",
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SubsetPartition {
    pub sparse: Vec<EvalRecord>,
    pub medium: Vec<EvalRecord>,
    pub dense: Vec<EvalRecord>,
}

impl SubsetPartition {
    pub fn get(&self, subset: Subset) -> &[EvalRecord] {
        match subset {
            Subset::Sparse => &self.sparse,
            Subset::Medium => &self.medium,
            Subset::Dense => &self.dense,
        }
    }

    pub fn len(&self) -> usize {
        self.sparse.len() + self.medium.len() + self.dense.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn sparsity_subsets(records: &[EvalRecord]) -> Result<SubsetPartition, EvalError> {
    let mut out = SubsetPartition::default();
    for r in records {
        match Subset::of(r.history_length)? {
            Subset::Sparse => out.sparse.push(r.clone()),
            Subset::Medium => out.medium.push(r.clone()),
            Subset::Dense => out.dense.push(r.clone()),
        }
    }
    Ok(out)
}

/// `(subset, metric, k)`; `k` is 0 for metrics without a cutoff.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MetricKey {
    pub subset: String,
    pub metric: String,
    pub k: usize,
}

impl MetricKey {
    pub fn new(subset: &str, metric: &str, k: usize) -> Self {
        Self { subset: subset.to_string(), metric: metric.to_string(), k }
    }
}

impl fmt::Display for MetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.k == 0 {
            write!(f, "{}/{}", self.subset, self.metric)
        } else {
            write!(f, "{}/{}@{}", self.subset, self.metric, self.k)
        }
    }
}

pub const DEFAULT_CUTOFFS: [usize; 3] = [1, 3, 5];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub values: BTreeMap<MetricKey, f64>,
    pub seeds: Vec<u64>,
}

impl MetricReport {
    /// HR@k and NDCG@k for every cutoff, ValidRatio and record counts, over
    /// all records (`all`, record-weighted) and each non-empty subset.
    pub fn from_records(records: &[EvalRecord], seed: u64, cutoffs: &[usize]) -> Result<Self, EvalError> {
        if records.is_empty() {
            return Err(EvalError::Empty);
        }
        let parts = sparsity_subsets(records)?;
        let mut values = BTreeMap::new();
        let mut add = |name: &str, recs: &[EvalRecord]| -> Result<(), EvalError> {
            values.insert(MetricKey::new(name, "count", 0), recs.len() as f64);
            if recs.is_empty() {
                return Ok(());
            }
            for &k in cutoffs {
                values.insert(MetricKey::new(name, "hr", k), hr_at_k(recs, k)?);
                values.insert(MetricKey::new(name, "ndcg", k), ndcg_at_k(recs, k)?);
            }
            let valid = recs.iter().filter(|r| r.valid).count() as f64 / recs.len() as f64;
            values.insert(MetricKey::new(name, "valid_ratio", 0), valid);
            Ok(())
        };
        add("all", records)?;
        for s in Subset::ALL {
            add(s.label(), parts.get(s))?;
        }
        Ok(Self { values, seeds: vec![seed] })
    }

    pub fn get(&self, subset: &str, metric: &str, k: usize) -> Option<f64> {
        self.values.get(&MetricKey::new(subset, metric, k)).copied()
    }

    /// `dataset,subset,metric,k,seed,value` rows without a header. A report
    /// over several seeds is labelled `mean`.
    pub fn csv_rows(&self, dataset: &str) -> String {
        let seed = match self.seeds.as_slice() {
            [s] => s.to_string(),
            _ => "mean".to_string(),
        };
        let mut out = String::new();
        for (key, v) in &self.values {
            out.push_str(&format!("{dataset},{},{},{},{seed},{v}\n", key.subset, key.metric, key.k));
        }
        out
    }

    /// Plain-text table: one row per subset, one column per metric.
    pub fn summary(&self, title: &str) -> String {
        let mut columns: Vec<(String, usize)> =
            self.values.keys().filter(|k| k.metric != "count").map(|k| (k.metric.clone(), k.k)).collect();
        columns.sort();
        columns.dedup();
        let label = |(m, k): &(String, usize)| if *k == 0 { m.clone() } else { format!("{m}@{k}") };
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let mut out = format!("# {title}\n# seeds: {}\n# all = record-weighted over every test user\n", seeds.join(","));
        out.push_str(&format!("{:<8} {:>6}", "subset", "n"));
        for c in &columns {
            out.push_str(&format!(" {:>12}", label(c)));
        }
        out.push('\n');
        for subset in ["all", "sparse", "medium", "dense"] {
            let n = self.get(subset, "count", 0).unwrap_or(0.0);
            out.push_str(&format!("{subset:<8} {n:>6.0}"));
            for (m, k) in &columns {
                match self.get(subset, m, *k) {
                    Some(v) => out.push_str(&format!(" {v:>12.4}")),
                    None => out.push_str(&format!(" {:>12}", "-")),
                }
            }
            out.push('\n');
        }
        out
    }
}

pub const METRICS_CSV_HEADER: &str = "dataset,subset,metric,k,seed,value";

/// Mean of every key across reports; seed lists are concatenated.
pub fn seed_average(reports: &[MetricReport]) -> Result<MetricReport, EvalError> {
    let first = reports.first().ok_or(EvalError::Empty)?;
    for r in &reports[1..] {
        if let Some(k) = first.values.keys().find(|k| !r.values.contains_key(*k)) {
            return Err(EvalError::KeyMismatch(k.to_string()));
        }
        if let Some(k) = r.values.keys().find(|k| !first.values.contains_key(*k)) {
            return Err(EvalError::KeyMismatch(k.to_string()));
        }
    }
    let n = reports.len() as f64;
    let values = first
        .values
        .keys()
        .map(|k| (k.clone(), reports.iter().map(|r| r.values[k]).sum::<f64>() / n))
        .collect();
    let seeds = reports.iter().flat_map(|r| r.seeds.iter().copied()).collect();
    Ok(MetricReport { values, seeds })
}
