//! Domain-specific and all-domain mixed behavior sequences, the two mixed
//! sequence construction guidelines, and sliding-window extraction of
//! training instances.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::InteractionLog;

#[derive(Debug, Error)]
pub enum MixError {
    #[error("domain `{domain}` not in log; available domains: {}", available.join(", "))]
    UnknownDomain { domain: String, available: Vec<String> },
    #[error("invalid window bounds: min_history={min}, max_history={max} (need 1 <= min <= max)")]
    InvalidBounds { min: usize, max: usize },
    #[error("i/o error on window shard: {0}")]
    Io(#[from] io::Error),
    #[error("malformed window record at {path}:{line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// One element of a behavior sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BehaviorItem {
    pub item_id: String,
    pub domain: String,
    pub timestamp: u64,
    pub title: String,
}

impl BehaviorItem {
    /// Chronological order with the `(domain, item_id)` tie-break.
    pub fn chrono_cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.timestamp, &self.domain, &self.item_id).cmp(&(other.timestamp, &other.domain, &other.item_id))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "domain", rename_all = "snake_case")]
pub enum SequenceKind {
    DomainSpecific(String),
    Mixed,
}

impl SequenceKind {
    pub fn is_mixed(&self) -> bool {
        matches!(self, SequenceKind::Mixed)
    }

    /// Short label used in shard names.
    pub fn label(&self) -> &'static str {
        match self {
            SequenceKind::DomainSpecific(_) => "domain",
            SequenceKind::Mixed => "mixed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorSequence {
    pub user_id: String,
    pub kind: SequenceKind,
    pub items: Vec<BehaviorItem>,
}

impl BehaviorSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn domains(&self) -> BTreeSet<&str> {
        self.items.iter().map(|i| i.domain.as_str()).collect()
    }
}

/// A training instance cut from a sequence: up to `max_history` preceding
/// items and the item that follows them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceWindow {
    pub user_id: String,
    /// Position of the target inside its source sequence.
    pub index: usize,
    pub history: Vec<BehaviorItem>,
    pub target: BehaviorItem,
    pub source_kind: SequenceKind,
}

impl SequenceWindow {
    pub fn history_domains(&self) -> BTreeSet<&str> {
        self.history.iter().map(|i| i.domain.as_str()).collect()
    }
}

/// The two mixed-sequence construction rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Guideline {
    /// Rule 1: the target's domain already occurs in the history.
    TargetDomainSeen = 1,
    /// Rule 2: the history covers at least two domains.
    MultiDomainHistory = 2,
}

impl Guideline {
    pub fn rule_number(self) -> u8 {
        self as u8
    }
}

impl fmt::Display for Guideline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Guideline::TargetDomainSeen => write!(f, "rule 1: target domain must appear in history"),
            Guideline::MultiDomainHistory => write!(f, "rule 2: history must span at least two domains"),
        }
    }
}

/// Returns the violated guidelines; empty means the window is acceptable.
pub fn validate_window(window: &SequenceWindow) -> Vec<Guideline> {
    let domains = window.history_domains();
    let mut violations = Vec::new();
    if !domains.contains(window.target.domain.as_str()) {
        violations.push(Guideline::TargetDomainSeen);
    }
    if domains.len() < 2 {
        violations.push(Guideline::MultiDomainHistory);
    }
    violations
}

fn sorted_by_user(log: &InteractionLog, keep: impl Fn(&str) -> bool) -> BTreeMap<&str, Vec<BehaviorItem>> {
    let mut by_user: BTreeMap<&str, Vec<BehaviorItem>> = BTreeMap::new();
    for rec in log.interactions().iter().filter(|r| keep(&r.domain)) {
        by_user.entry(&rec.user_id).or_default().push(rec.to_behavior_item());
    }
    for items in by_user.values_mut() {
        items.sort_by(BehaviorItem::chrono_cmp);
    }
    by_user
}

/// One sequence per user active in `domain`, ordered by user id.
pub fn domain_sequences(log: &InteractionLog, domain: &str) -> Result<Vec<BehaviorSequence>, MixError> {
    if !log.domains().contains(domain) {
        return Err(MixError::UnknownDomain {
            domain: domain.to_string(),
            available: log.domains().iter().cloned().collect(),
        });
    }
    Ok(sorted_by_user(log, |d| d == domain)
        .into_iter()
        .map(|(user, items)| BehaviorSequence {
            user_id: user.to_string(),
            kind: SequenceKind::DomainSpecific(domain.to_string()),
            items,
        })
        .collect())
}

/// Domain-specific sequences for every domain in the log.
pub fn all_domain_sequences(log: &InteractionLog) -> Vec<BehaviorSequence> {
    log.domains()
        .iter()
        .flat_map(|d| domain_sequences(log, d).expect("domain comes from the log"))
        .collect()
}

/// Each user's behaviors from all domains merged chronologically. Users
/// active in a single domain produce nothing.
pub fn build_mixed_sequences(log: &InteractionLog) -> Vec<BehaviorSequence> {
    sorted_by_user(log, |_| true)
        .into_iter()
        .filter(|(_, items)| items.iter().map(|i| &i.domain).collect::<BTreeSet<_>>().len() >= 2)
        .map(|(user, items)| BehaviorSequence { user_id: user.to_string(), kind: SequenceKind::Mixed, items })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowBounds {
    pub min_history: usize,
    pub max_history: usize,
}

impl Default for WindowBounds {
    fn default() -> Self {
        Self { min_history: 3, max_history: 10 }
    }
}

impl WindowBounds {
    pub fn validate(&self) -> Result<(), MixError> {
        if self.min_history == 0 || self.max_history < self.min_history {
            return Err(MixError::InvalidBounds { min: self.min_history, max: self.max_history });
        }
        Ok(())
    }

    /// The most recent `max_history` items of `items`.
    pub fn truncate<'a>(&self, items: &'a [BehaviorItem]) -> &'a [BehaviorItem] {
        &items[items.len().saturating_sub(self.max_history)..]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WindowSet {
    pub windows: Vec<SequenceWindow>,
    /// Mixed windows rejected by [`validate_window`].
    pub dropped_mixed: usize,
    /// Of those, how many failed each rule (a window may fail both).
    pub dropped_by_rule: BTreeMap<Guideline, usize>,
}

/// Cuts every sequence into next-item windows: one per target position
/// with at least `min_history` items before it. Mixed windows that break a
/// guideline are dropped and counted.
pub fn window_sequences(sequences: &[BehaviorSequence], bounds: WindowBounds) -> Result<WindowSet, MixError> {
    bounds.validate()?;
    let mut out = WindowSet::default();
    for seq in sequences {
        for q in bounds.min_history..seq.items.len() {
            let window = SequenceWindow {
                user_id: seq.user_id.clone(),
                index: q,
                history: bounds.truncate(&seq.items[..q]).to_vec(),
                target: seq.items[q].clone(),
                source_kind: seq.kind.clone(),
            };
            if seq.kind.is_mixed() {
                let violations = validate_window(&window);
                if !violations.is_empty() {
                    out.dropped_mixed += 1;
                    for v in violations {
                        *out.dropped_by_rule.entry(v).or_default() += 1;
                    }
                    continue;
                }
            }
            out.windows.push(window);
        }
    }
    Ok(out)
}

/// `{corpus}_{kind}_{shard_index}.jsonl`
pub fn shard_name(corpus: &str, kind: &str, index: usize) -> String {
    format!("{corpus}_{kind}_{index:04}.jsonl")
}

/// Writes windows as JSON lines, `shard_size` per file. Returns the paths
/// written, in order. An empty window list still produces one empty shard.
pub fn write_window_shards(
    windows: &[SequenceWindow],
    dir: &Path,
    corpus: &str,
    kind: &str,
    shard_size: usize,
) -> Result<Vec<PathBuf>, MixError> {
    let shard_size = shard_size.max(1);
    let mut paths = Vec::new();
    let chunks: Vec<&[SequenceWindow]> =
        if windows.is_empty() { vec![&[]] } else { windows.chunks(shard_size).collect() };
    for (idx, chunk) in chunks.into_iter().enumerate() {
        let path = dir.join(shard_name(corpus, kind, idx));
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        {
            let mut w = BufWriter::new(tmp.as_file_mut());
            for window in chunk {
                serde_json::to_writer(&mut w, window).map_err(io::Error::from)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
        tmp.persist(&path).map_err(|e| e.error)?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn read_window_shard(path: &Path) -> Result<Vec<SequenceWindow>, MixError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let window = serde_json::from_str(&line).map_err(|source| MixError::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            source,
        })?;
        out.push(window);
    }
    Ok(out)
}
