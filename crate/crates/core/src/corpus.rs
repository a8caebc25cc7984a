//! Raw interaction logs and everything that happens to them before sequence
//! construction: parsing, k-core filtering, chronological ordering,
//! leave-one-out splitting and Table-style dataset statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mixer::{BehaviorItem, BehaviorSequence, SequenceKind};

/// Field names in their fixed on-disk order.
pub const FIELDS: [&str; 5] = ["user_id", "item_id", "domain", "timestamp", "title"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error while reading interactions: {0}")]
    Io(#[from] io::Error),
}

/// One implicit-feedback event.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub domain: String,
    /// Seconds since the epoch.
    pub timestamp: u64,
    pub title: String,
}

impl Interaction {
    /// Canonical ordering used for every log: user, then time, then the
    /// (domain, item) tie-break, then title.
    fn canonical_cmp(&self, other: &Self) -> std::cmp::Ordering {
        (&self.user_id, self.timestamp, &self.domain, &self.item_id, &self.title).cmp(&(
            &other.user_id,
            other.timestamp,
            &other.domain,
            &other.item_id,
            &other.title,
        ))
    }

    pub(crate) fn to_behavior_item(&self) -> BehaviorItem {
        BehaviorItem {
            item_id: self.item_id.clone(),
            domain: self.domain.clone(),
            timestamp: self.timestamp,
            title: self.title.clone(),
        }
    }
}

/// A deduplicated, canonically ordered collection of interactions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionLog {
    interactions: Vec<Interaction>,
    domains: BTreeSet<String>,
}

impl InteractionLog {
    /// Builds a log from arbitrary interactions. Exact `(user, item,
    /// timestamp)` duplicates collapse to one record; the survivor is the
    /// smallest by `(domain, title)` so the result does not depend on input
    /// order.
    pub fn from_interactions<I: IntoIterator<Item = Interaction>>(records: I) -> Self {
        let mut interactions: Vec<Interaction> = records.into_iter().collect();
        interactions.sort_by(|a, b| {
            (&a.user_id, &a.item_id, a.timestamp, &a.domain, &a.title).cmp(&(
                &b.user_id,
                &b.item_id,
                b.timestamp,
                &b.domain,
                &b.title,
            ))
        });
        interactions.dedup_by(|later, first| {
            later.user_id == first.user_id
                && later.item_id == first.item_id
                && later.timestamp == first.timestamp
        });
        interactions.sort_by(Interaction::canonical_cmp);
        let domains = interactions.iter().map(|i| i.domain.clone()).collect();
        Self { interactions, domains }
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn domains(&self) -> &BTreeSet<String> {
        &self.domains
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn users(&self) -> BTreeSet<&str> {
        self.interactions.iter().map(|i| i.user_id.as_str()).collect()
    }

    pub fn items(&self) -> BTreeSet<&str> {
        self.interactions.iter().map(|i| i.item_id.as_str()).collect()
    }

    /// The sub-log of a single domain (empty if the domain is absent).
    pub fn restrict_to_domain(&self, domain: &str) -> Self {
        Self::from_interactions(self.interactions.iter().filter(|i| i.domain == domain).cloned())
    }

    /// Union of several logs, deduplicated.
    pub fn merge<'a, I: IntoIterator<Item = &'a InteractionLog>>(logs: I) -> Self {
        Self::from_interactions(logs.into_iter().flat_map(|l| l.interactions.iter().cloned()))
    }

    /// Every item each user touched, keyed by user.
    pub fn user_pools(&self) -> HashMap<String, BTreeSet<String>> {
        let mut pools: HashMap<String, BTreeSet<String>> = HashMap::new();
        for i in &self.interactions {
            pools.entry(i.user_id.clone()).or_default().insert(i.item_id.clone());
        }
        pools
    }
}

/// Field delimiter for the line format. Tab by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowFormat {
    pub delimiter: char,
}

impl Default for RowFormat {
    fn default() -> Self {
        Self { delimiter: '\t' }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RowErrorKind {
    MissingField(&'static str),
    BadTimestamp(String),
    EmptyTitle,
    EmptyField(&'static str),
}

/// A rejected input row. `line` is 1-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowError {
    pub line: usize,
    pub kind: RowErrorKind,
}

impl fmt::Display for RowError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            RowErrorKind::MissingField(name) => write!(f, "line {}: missing field `{name}`", self.line),
            RowErrorKind::BadTimestamp(raw) => {
                write!(f, "line {}: timestamp `{raw}` is not a non-negative integer", self.line)
            }
            RowErrorKind::EmptyTitle => write!(f, "line {}: title is empty", self.line),
            RowErrorKind::EmptyField(name) => write!(f, "line {}: field `{name}` is empty", self.line),
        }
    }
}

/// Output of [`ingest`]: the clean log plus every rejected row.
#[derive(Debug, Clone, Default)]
pub struct Ingested {
    pub log: InteractionLog,
    pub errors: Vec<RowError>,
}

fn parse_row(line: &str, line_no: usize, format: &RowFormat) -> Result<Interaction, RowError> {
    let err = |kind| RowError { line: line_no, kind };
    // The title is last, so it may itself contain the delimiter.
    let mut fields = line.splitn(FIELDS.len(), format.delimiter);
    let mut next = |name: &'static str| fields.next().ok_or(err(RowErrorKind::MissingField(name)));
    let user_id = next("user_id")?.trim();
    let item_id = next("item_id")?.trim();
    let domain = next("domain")?.trim();
    let timestamp_raw = next("timestamp")?.trim();
    let title = next("title")?.trim();
    for (name, value) in [("user_id", user_id), ("item_id", item_id), ("domain", domain)] {
        if value.is_empty() {
            return Err(err(RowErrorKind::EmptyField(name)));
        }
    }
    if timestamp_raw.is_empty() {
        return Err(err(RowErrorKind::MissingField("timestamp")));
    }
    let timestamp = timestamp_raw
        .parse::<u64>()
        .map_err(|_| err(RowErrorKind::BadTimestamp(timestamp_raw.to_string())))?;
    if title.is_empty() {
        return Err(err(RowErrorKind::EmptyTitle));
    }
    Ok(Interaction {
        user_id: user_id.to_string(),
        item_id: item_id.to_string(),
        domain: domain.to_string(),
        timestamp,
        title: title.to_string(),
    })
}

/// Parses delimited rows into a log. Blank lines and a leading header row
/// are skipped; malformed rows are reported, not fatal.
pub fn ingest<R: BufRead>(reader: R, format: &RowFormat) -> Result<Ingested, CorpusError> {
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() {
            continue;
        }
        if records.is_empty() && errors.is_empty() && trimmed.split(format.delimiter).next() == Some(FIELDS[0]) {
            continue;
        }
        match parse_row(trimmed, line_no, format) {
            Ok(rec) => records.push(rec),
            Err(e) => errors.push(e),
        }
    }
    Ok(Ingested { log: InteractionLog::from_interactions(records), errors })
}

pub fn ingest_str(text: &str, format: &RowFormat) -> Ingested {
    ingest(text.as_bytes(), format).expect("reading from memory cannot fail")
}

/// Writes a log in the same line format [`ingest`] reads, with a header.
pub fn write_log<W: Write>(log: &InteractionLog, mut out: W, format: &RowFormat) -> io::Result<()> {
    let d = format.delimiter;
    writeln!(out, "{}", FIELDS.join(&d.to_string()))?;
    for i in log.interactions() {
        writeln!(out, "{}{d}{}{d}{}{d}{}{d}{}", i.user_id, i.item_id, i.domain, i.timestamp, i.title)?;
    }
    Ok(())
}

/// Iteratively removes users and items with fewer than `k` interactions
/// until none remain. The fixpoint is unique, so the removal order does not
/// matter.
pub fn kcore_filter(log: &InteractionLog, k: usize) -> InteractionLog {
    if k <= 1 || log.is_empty() {
        return log.clone();
    }
    let records = log.interactions();
    let mut user_ix: HashMap<&str, usize> = HashMap::new();
    let mut item_ix: HashMap<&str, usize> = HashMap::new();
    let mut by_user: Vec<Vec<usize>> = Vec::new();
    let mut by_item: Vec<Vec<usize>> = Vec::new();
    let mut owner = Vec::with_capacity(records.len());
    for (r, rec) in records.iter().enumerate() {
        let u = *user_ix.entry(&rec.user_id).or_insert_with(|| {
            by_user.push(Vec::new());
            by_user.len() - 1
        });
        let i = *item_ix.entry(&rec.item_id).or_insert_with(|| {
            by_item.push(Vec::new());
            by_item.len() - 1
        });
        by_user[u].push(r);
        by_item[i].push(r);
        owner.push((u, i));
    }
    let mut user_deg: Vec<usize> = by_user.iter().map(Vec::len).collect();
    let mut item_deg: Vec<usize> = by_item.iter().map(Vec::len).collect();
    let mut alive = vec![true; records.len()];

    #[derive(Clone, Copy)]
    enum Node {
        User(usize),
        Item(usize),
    }
    let mut queue: Vec<Node> = Vec::new();
    queue.extend((0..by_user.len()).filter(|&u| user_deg[u] < k).map(Node::User));
    queue.extend((0..by_item.len()).filter(|&i| item_deg[i] < k).map(Node::Item));

    while let Some(node) = queue.pop() {
        let edges = match node {
            Node::User(u) => &by_user[u],
            Node::Item(i) => &by_item[i],
        };
        for &r in edges {
            if !alive[r] {
                continue;
            }
            alive[r] = false;
            let (u, i) = owner[r];
            user_deg[u] -= 1;
            item_deg[i] -= 1;
            // Push exactly once: on the transition from k to k-1.
            if user_deg[u] == k - 1 {
                queue.push(Node::User(u));
            }
            if item_deg[i] == k - 1 {
                queue.push(Node::Item(i));
            }
        }
    }
    InteractionLog::from_interactions(
        records.iter().zip(alive).filter(|(_, keep)| *keep).map(|(rec, _)| rec.clone()),
    )
}

/// Where the k-core constraint is enforced.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KcoreScope {
    /// Each domain is filtered on its own, then the survivors are merged.
    PerDomain,
    /// The union of all domains is filtered as one graph.
    #[default]
    Global,
}

pub fn kcore_filter_scoped(log: &InteractionLog, k: usize, scope: KcoreScope) -> InteractionLog {
    match scope {
        KcoreScope::Global => kcore_filter(log, k),
        KcoreScope::PerDomain => {
            let parts: Vec<InteractionLog> = log
                .domains()
                .iter()
                .map(|d| kcore_filter(&log.restrict_to_domain(d), k))
                .collect();
            InteractionLog::merge(&parts)
        }
    }
}

/// Groups a log by user. Items are ordered by timestamp with ties broken by
/// `(domain, item_id)`. A user whose items span several domains gets a
/// [`SequenceKind::Mixed`] sequence.
pub fn build_user_sequences(log: &InteractionLog) -> BTreeMap<String, BehaviorSequence> {
    let mut grouped: BTreeMap<String, Vec<BehaviorItem>> = BTreeMap::new();
    for rec in log.interactions() {
        grouped.entry(rec.user_id.clone()).or_default().push(rec.to_behavior_item());
    }
    grouped
        .into_iter()
        .map(|(user, mut items)| {
            items.sort_by(BehaviorItem::chrono_cmp);
            let domains: BTreeSet<&str> = items.iter().map(|i| i.domain.as_str()).collect();
            let kind = if domains.len() == 1 {
                SequenceKind::DomainSpecific(items[0].domain.clone())
            } else {
                SequenceKind::Mixed
            };
            let seq = BehaviorSequence { user_id: user.clone(), kind, items };
            (user, seq)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSplit {
    pub train: Vec<BehaviorItem>,
    pub valid: BehaviorItem,
    pub test: BehaviorItem,
}

impl UserSplit {
    /// History visible when predicting the validation target.
    pub fn valid_history(&self) -> &[BehaviorItem] {
        &self.train
    }

    /// History visible when predicting the test target (train + valid).
    pub fn test_history(&self) -> Vec<BehaviorItem> {
        let mut h = self.train.clone();
        h.push(self.valid.clone());
        h
    }
}

/// Leave-one-out split keyed by user.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub users: BTreeMap<String, UserSplit>,
    /// Users dropped because their sequence had fewer than three items.
    pub excluded: usize,
}

pub const MIN_SPLIT_LEN: usize = 3;

/// Last item to test, penultimate to validation, the rest to train.
pub fn leave_one_out_split(sequences: &BTreeMap<String, BehaviorSequence>) -> SplitDataset {
    let mut out = SplitDataset::default();
    for (user, seq) in sequences {
        let n = seq.items.len();
        if n < MIN_SPLIT_LEN {
            log::warn!("user {user} has {n} interactions; excluded from leave-one-out split");
            out.excluded += 1;
            continue;
        }
        out.users.insert(
            user.clone(),
            UserSplit {
                train: seq.items[..n - 2].to_vec(),
                valid: seq.items[n - 2].clone(),
                test: seq.items[n - 1].clone(),
            },
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    /// `1 - interactions / (users * items)`, with repeats of a (user, item)
    /// pair counted once; `None` when either count is zero.
    pub sparsity: Option<f64>,
}

impl DatasetStats {
    pub fn from_counts(users: usize, items: usize, interactions: usize) -> Self {
        let cells = users as f64 * items as f64;
        let sparsity = (users > 0 && items > 0).then(|| 1.0 - interactions as f64 / cells);
        Self { users, items, interactions, sparsity }
    }

    /// Sparsity as a percentage rounded half-up to two decimals.
    pub fn sparsity_percent(&self) -> Option<f64> {
        self.sparsity.map(|s| round_half_up_2dp(s * 100.0))
    }

    pub fn sparsity_display(&self) -> String {
        match self.sparsity_percent() {
            Some(p) => format!("{p:.2}%"),
            None => "n/a".to_string(),
        }
    }

    /// `key=value` lines.
    pub fn report(&self, dataset: &str) -> String {
        format!(
            "dataset={dataset}\nusers={}\nitems={}\ninteractions={}\nsparsity={}\n",
            self.users,
            self.items,
            self.interactions,
            self.sparsity_display()
        )
    }

    pub const CSV_HEADER: &'static str = "dataset,users,items,interactions,sparsity";

    pub fn csv_row(&self, dataset: &str) -> String {
        let sparsity = self.sparsity_percent().map(|p| format!("{p:.2}")).unwrap_or_default();
        format!("{dataset},{},{},{},{sparsity}", self.users, self.items, self.interactions)
    }
}

fn round_half_up_2dp(x: f64) -> f64 {
    // The epsilon absorbs representation error on exact ...5 midpoints.
    ((x * 100.0) + 0.5 + 1e-9).floor() / 100.0
}

/// Counts every event, but a repeated (user, item) pair fills one cell of
/// the interaction matrix, so sparsity stays within `[0, 1]`.
pub fn dataset_stats(log: &InteractionLog) -> DatasetStats {
    let (users, items) = (log.users().len(), log.items().len());
    let cells: BTreeSet<(&str, &str)> = log.interactions.iter().map(|i| (i.user_id.as_str(), i.item_id.as_str())).collect();
    DatasetStats { interactions: log.len(), ..DatasetStats::from_counts(users, items, cells.len()) }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(u: &str, i: &str, d: &str, t: u64) -> Interaction {
        Interaction {
            user_id: u.into(),
            item_id: i.into(),
            domain: d.into(),
            timestamp: t,
            title: format!("title {i}"),
        }
    }

    #[test]
    fn empty_input_is_empty_log() {
        let got = ingest_str("", &RowFormat::default());
        assert!(got.log.is_empty());
        assert!(got.log.domains().is_empty());
        assert!(got.errors.is_empty());
    }

    #[test]
    fn missing_timestamp_reports_line() {
        let text = "u1\ti1\tA\t10\tAlpha\nu1\ti2\tA\t11\tBeta\nu2\ti1\tA\nu2\ti3\tB\t12\tGamma\n";
        let got = ingest_str(text, &RowFormat::default());
        assert_eq!(got.log.len(), 3);
        assert_eq!(got.errors, vec![RowError { line: 3, kind: RowErrorKind::MissingField("timestamp") }]);
    }

    #[test]
    fn rejects_negative_timestamp_and_blank_title() {
        let text = "u\ti\tA\t-4\tx\nu\ti\tA\t4\t   \n";
        let got = ingest_str(text, &RowFormat::default());
        assert!(got.log.is_empty());
        assert!(matches!(got.errors[0].kind, RowErrorKind::BadTimestamp(_)));
        assert_eq!(got.errors[1].kind, RowErrorKind::EmptyTitle);
    }

    #[test]
    fn header_is_skipped_and_custom_delimiter_works() {
        let text = "user_id|item_id|domain|timestamp|title\nu|i|A|1|One | Two\n";
        let got = ingest_str(text, &RowFormat { delimiter: '|' });
        assert_eq!(got.log.len(), 1);
        assert_eq!(got.log.interactions()[0].title, "One | Two");
    }

    #[test]
    fn duplicates_collapse_but_repeats_survive() {
        let log = InteractionLog::from_interactions(vec![
            rec("u", "i", "A", 1),
            rec("u", "i", "A", 1),
            rec("u", "i", "A", 2),
        ]);
        assert_eq!(log.len(), 2);
    }

    #[test]
    fn write_then_ingest_round_trips() {
        let log = InteractionLog::from_interactions(vec![rec("u", "i", "A", 1), rec("v", "j", "B", 3)]);
        let mut buf = Vec::new();
        write_log(&log, &mut buf, &RowFormat::default()).unwrap();
        let back = ingest(buf.as_slice(), &RowFormat::default()).unwrap();
        assert!(back.errors.is_empty());
        assert_eq!(back.log, log);
    }

    #[test]
    fn kcore_on_empty_and_complete_graphs() {
        assert!(kcore_filter(&InteractionLog::default(), 3).is_empty());
        let mut recs = Vec::new();
        for u in 0..4 {
            for i in 0..4 {
                recs.push(rec(&format!("u{u}"), &format!("i{i}"), "A", (u * 4 + i) as u64));
            }
        }
        let log = InteractionLog::from_interactions(recs);
        assert_eq!(kcore_filter(&log, 3), log);
    }

    #[test]
    fn kcore_cascades() {
        // u2 only has two items; removing it drops i2 below 3, which then
        // starves everyone else.
        let mut recs = Vec::new();
        for u in ["u0", "u1", "u2"] {
            for (t, i) in ["i0", "i1", "i2"].iter().enumerate() {
                if !(u == "u2" && *i == "i0") {
                    recs.push(rec(u, i, "A", t as u64));
                }
            }
        }
        let log = InteractionLog::from_interactions(recs);
        assert!(kcore_filter(&log, 3).is_empty());
    }

    #[test]
    fn per_domain_scope_filters_domains_independently() {
        let mut recs = Vec::new();
        for u in 0..3 {
            for i in 0..3 {
                recs.push(rec(&format!("u{u}"), &format!("a{i}"), "A", (u * 10 + i) as u64));
            }
            recs.push(rec(&format!("u{u}"), "b0", "B", 100 + u as u64));
        }
        let log = InteractionLog::from_interactions(recs);
        let per = kcore_filter_scoped(&log, 3, KcoreScope::PerDomain);
        assert_eq!(per.domains().iter().collect::<Vec<_>>(), vec!["A"]);
        let global = kcore_filter_scoped(&log, 3, KcoreScope::Global);
        assert_eq!(global.len(), 12);
    }

    #[test]
    fn sequences_sort_by_time_then_domain() {
        let log = InteractionLog::from_interactions(vec![
            rec("u", "x", "A", 5),
            rec("u", "y", "A", 1),
            rec("u", "z", "A", 3),
            rec("w", "b", "B", 7),
            rec("w", "a", "A", 7),
        ]);
        let seqs = build_user_sequences(&log);
        let order: Vec<&str> = seqs["u"].items.iter().map(|i| i.item_id.as_str()).collect();
        assert_eq!(order, ["y", "z", "x"]);
        let tie: Vec<&str> = seqs["w"].items.iter().map(|i| i.domain.as_str()).collect();
        assert_eq!(tie, ["A", "B"]);
        assert_eq!(seqs["w"].kind, SequenceKind::Mixed);
    }

    #[test]
    fn leave_one_out_definition_and_exclusion() {
        let log = InteractionLog::from_interactions(vec![
            rec("u", "a", "A", 1),
            rec("u", "b", "A", 2),
            rec("u", "c", "A", 3),
            rec("v", "a", "A", 1),
            rec("v", "b", "A", 2),
        ]);
        let split = leave_one_out_split(&build_user_sequences(&log));
        assert_eq!(split.excluded, 1);
        let u = &split.users["u"];
        assert_eq!(u.train.iter().map(|i| i.item_id.as_str()).collect::<Vec<_>>(), ["a"]);
        assert_eq!(u.valid.item_id, "b");
        assert_eq!(u.test.item_id, "c");
    }

    #[test]
    fn sparsity_values() {
        assert_eq!(DatasetStats::from_counts(4_564, 3_058, 30_302).sparsity_display(), "99.78%");
        assert_eq!(DatasetStats::from_counts(7_501, 3_547, 48_240).sparsity_display(), "99.82%");
        assert_eq!(DatasetStats::from_counts(1, 1, 1).sparsity_display(), "0.00%");
        assert_eq!(DatasetStats::from_counts(0, 5, 0).sparsity, None);
        assert_eq!(DatasetStats::from_counts(0, 5, 0).csv_row("x"), "x,0,5,0,");
    }

    #[test]
    fn half_up_rounding() {
        assert_eq!(round_half_up_2dp(12.345), 12.35);
        assert_eq!(round_half_up_2dp(12.344), 12.34);
    }
}
