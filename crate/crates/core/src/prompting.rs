//! Candidate slates and the unified next-item prompt.
//!
//! A slate holds the true next item plus `n_negatives` items the user never
//! touched, drawn from the target's own domain, in seeded random order. The
//! prompt lists history titles chronologically and candidate titles in slate
//! order:
//!
//! ```text
//! This user has bought {t_1}, ..., {t_m} in the previous. Please predict the
//! next item this user will buy. The item title candidates are {t_a}, ...,
//! {t_n}. Choose only one item from the candidates. The answer is
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::InteractionLog;
use crate::mixer::{BehaviorItem, SequenceWindow};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("item `{0}` is not in the catalog")]
    UnknownItem(String),
    #[error("domain `{domain}` has {available} eligible negatives, {needed} needed (short by {})", needed - available)]
    InsufficientCatalog { domain: String, needed: usize, available: usize },
    #[error("hybrid mode needs collaborative embeddings; train the collaborative encoder first")]
    EncoderMissing,
    #[error("prompt does not match the template: {0}")]
    Unparseable(String),
}

pub const DEFAULT_NEGATIVES: usize = 19;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Candidate {
    pub item_id: String,
    pub title: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSlate {
    pub candidates: Vec<Candidate>,
    pub target_index: usize,
}

impl CandidateSlate {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn target(&self) -> &Candidate {
        &self.candidates[self.target_index]
    }

    pub fn titles(&self) -> impl Iterator<Item = &str> {
        self.candidates.iter().map(|c| c.title.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct CatalogEntry {
    domain: String,
    title: String,
}

/// Per-domain item universe with display titles. Distinct items that share
/// a raw title are told apart by a numeric suffix, assigned in item-id
/// order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Catalog {
    by_domain: BTreeMap<String, Vec<String>>,
    entries: HashMap<String, CatalogEntry>,
    disambiguated: usize,
}

impl Catalog {
    pub fn from_log(log: &InteractionLog) -> Self {
        // First title per item in canonical log order wins.
        let mut raw: BTreeMap<&str, (&str, &str)> = BTreeMap::new();
        for rec in log.interactions() {
            raw.entry(&rec.item_id).or_insert((&rec.domain, &rec.title));
        }
        let mut by_title: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for (item, (_, title)) in &raw {
            by_title.entry(title).or_default().push(item);
        }
        let mut taken: BTreeSet<String> = by_title.keys().map(|t| t.to_string()).collect();
        let mut entries = HashMap::new();
        let mut by_domain: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut disambiguated = 0;
        for (title, items) in &by_title {
            for (n, item) in items.iter().enumerate() {
                let display = if n == 0 {
                    title.to_string()
                } else {
                    disambiguated += 1;
                    let mut suffix = n + 1;
                    loop {
                        let candidate = format!("{title} ({suffix})");
                        if taken.insert(candidate.clone()) {
                            break candidate;
                        }
                        suffix += 1;
                    }
                };
                let domain = raw[item].0.to_string();
                by_domain.entry(domain.clone()).or_default().push(item.to_string());
                entries.insert(item.to_string(), CatalogEntry { domain, title: display });
            }
        }
        for items in by_domain.values_mut() {
            items.sort();
        }
        Self { by_domain, entries, disambiguated }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn title(&self, item_id: &str) -> Option<&str> {
        self.entries.get(item_id).map(|e| e.title.as_str())
    }

    pub fn domain(&self, item_id: &str) -> Option<&str> {
        self.entries.get(item_id).map(|e| e.domain.as_str())
    }

    /// Item ids of one domain, sorted.
    pub fn domain_items(&self, domain: &str) -> &[String] {
        self.by_domain.get(domain).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Fraction of items whose title needed a disambiguating suffix.
    pub fn duplicate_title_rate(&self) -> f64 {
        if self.entries.is_empty() {
            0.0
        } else {
            self.disambiguated as f64 / self.entries.len() as f64
        }
    }

    /// Replaces raw titles in a window with display titles.
    pub fn canonicalize(&self, window: &mut SequenceWindow) {
        let fix = |item: &mut BehaviorItem| {
            if let Some(t) = self.title(&item.item_id) {
                item.title = t.to_string();
            }
        };
        window.history.iter_mut().for_each(fix);
        fix(&mut window.target);
    }
}

/// Stable 64-bit FNV-1a.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Per-example seed: `seed XOR hash(user_id, window index)`.
pub fn example_seed(seed: u64, user_id: &str, index: usize) -> u64 {
    let mut key = user_id.as_bytes().to_vec();
    key.push(0);
    key.extend_from_slice(&(index as u64).to_le_bytes());
    seed ^ stable_hash(&key)
}

/// Draws a slate for `target_id`: negatives uniformly without replacement
/// from the target's domain, excluding `user_pool` and the target, then the
/// whole slate shuffled.
pub fn sample_candidates(
    target_id: &str,
    user_pool: &BTreeSet<String>,
    catalog: &Catalog,
    n_negatives: usize,
    seed: u64,
) -> Result<CandidateSlate, PromptError> {
    let domain = catalog.domain(target_id).ok_or_else(|| PromptError::UnknownItem(target_id.to_string()))?;
    let eligible: Vec<&String> = catalog
        .domain_items(domain)
        .iter()
        .filter(|id| id.as_str() != target_id && !user_pool.contains(id.as_str()))
        .collect();
    if eligible.len() < n_negatives {
        return Err(PromptError::InsufficientCatalog {
            domain: domain.to_string(),
            needed: n_negatives,
            available: eligible.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<&str> = index::sample(&mut rng, eligible.len(), n_negatives)
        .into_iter()
        .map(|i| eligible[i].as_str())
        .collect();
    ids.push(target_id);
    ids.shuffle(&mut rng);
    let target_index = ids.iter().position(|id| *id == target_id).expect("target was pushed");
    let candidates = ids
        .into_iter()
        .map(|id| Candidate { item_id: id.to_string(), title: catalog.title(id).expect("catalog item").to_string() })
        .collect();
    Ok(CandidateSlate { candidates, target_index })
}

/// The fixed text around the two title lists. Only these pieces are ever
/// genericized; titles are inserted verbatim.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub history_intro: String,
    pub candidates_intro: String,
    pub closing: String,
    pub separator: String,
    pub quote: char,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            history_intro: "This user has bought ".into(),
            candidates_intro: " in the previous. Please predict the next item this user will buy. \
                               The item title candidates are "
                .into(),
            closing: ". Choose only one item from the candidates. The answer is ".into(),
            separator: ", ".into(),
            quote: '"',
        }
    }
}

impl PromptTemplate {
    fn needs_quoting(&self, title: &str) -> bool {
        let sep = self.separator.trim();
        title.contains(self.quote)
            || (!sep.is_empty() && title.contains(sep))
            || title.contains(self.candidates_intro.trim())
            || title.contains(self.closing.trim())
    }

    fn push_title(&self, out: &mut String, title: &str) {
        if self.needs_quoting(title) {
            let q = self.quote;
            out.push(q);
            for ch in title.chars() {
                if ch == q {
                    out.push(q);
                }
                out.push(ch);
            }
            out.push(q);
        } else {
            out.push_str(title);
        }
    }

    fn push_list<'a>(&self, out: &mut String, titles: impl Iterator<Item = &'a str>) {
        for (n, title) in titles.enumerate() {
            if n > 0 {
                out.push_str(&self.separator);
            }
            self.push_title(out, title);
        }
    }

    pub fn render(&self, window: &SequenceWindow, slate: &CandidateSlate) -> String {
        let mut out = String::with_capacity(256);
        out.push_str(&self.history_intro);
        self.push_list(&mut out, window.history.iter().map(|i| i.title.as_str()));
        out.push_str(&self.candidates_intro);
        self.push_list(&mut out, slate.titles());
        out.push_str(&self.closing);
        out
    }

    /// A copy with domain surface words in every scaffold piece replaced
    /// by "item".
    pub fn genericized(&self, lexicon: &DomainLexicon) -> Self {
        Self {
            history_intro: genericize_domain(&self.history_intro, lexicon),
            candidates_intro: genericize_domain(&self.candidates_intro, lexicon),
            closing: genericize_domain(&self.closing, lexicon),
            separator: self.separator.clone(),
            quote: self.quote,
        }
    }

    /// Reads one title list starting at `rest`; returns the titles and the
    /// remainder after `terminator`.
    fn parse_list<'a>(&self, mut rest: &'a str, terminator: &str) -> Result<(Vec<String>, &'a str), PromptError> {
        let mut titles = Vec::new();
        loop {
            if let Some(quoted) = rest.strip_prefix(self.quote) {
                let mut title = String::new();
                let mut chars = quoted.char_indices().peekable();
                let mut end = None;
                while let Some((i, ch)) = chars.next() {
                    if ch == self.quote {
                        if matches!(chars.peek(), Some((_, c)) if *c == self.quote) {
                            title.push(ch);
                            chars.next();
                        } else {
                            end = Some(i + ch.len_utf8());
                            break;
                        }
                    } else {
                        title.push(ch);
                    }
                }
                let end = end.ok_or_else(|| PromptError::Unparseable("unterminated quoted title".into()))?;
                titles.push(title);
                rest = &quoted[end..];
            } else {
                let sep = rest.find(self.separator.as_str());
                let term = rest.find(terminator);
                let cut = match (sep, term) {
                    (Some(s), Some(t)) => s.min(t),
                    (None, Some(t)) => t,
                    (Some(s), None) => s,
                    (None, None) => return Err(PromptError::Unparseable("missing list terminator".into())),
                };
                titles.push(rest[..cut].to_string());
                rest = &rest[cut..];
            }
            if let Some(after) = rest.strip_prefix(self.separator.as_str()) {
                rest = after;
            } else if let Some(after) = rest.strip_prefix(terminator) {
                return Ok((titles, after));
            } else {
                return Err(PromptError::Unparseable("expected separator or terminator".into()));
            }
        }
    }

    /// Recovers `(history titles, candidate titles)` from rendered text.
    pub fn parse(&self, prompt: &str) -> Result<(Vec<String>, Vec<String>), PromptError> {
        let rest = prompt
            .strip_prefix(self.history_intro.as_str())
            .ok_or_else(|| PromptError::Unparseable("missing history intro".into()))?;
        let (history, rest) = self.parse_list(rest, &self.candidates_intro)?;
        let (candidates, rest) = self.parse_list(rest, &self.closing)?;
        if !rest.is_empty() {
            return Err(PromptError::Unparseable("trailing text after closing".into()));
        }
        Ok((history, candidates))
    }
}

/// Renders with the default template.
pub fn render_prompt(window: &SequenceWindow, slate: &CandidateSlate) -> String {
    PromptTemplate::default().render(window, slate)
}

/// Surface words per domain, e.g. `movie -> [movie, film]`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainLexicon(pub BTreeMap<String, Vec<String>>);

impl DomainLexicon {
    /// Each domain's label doubles as its only surface word.
    pub fn from_labels<'a, I: IntoIterator<Item = &'a str>>(labels: I) -> Self {
        Self(labels.into_iter().map(|d| (d.to_string(), vec![d.to_string()])).collect())
    }

    fn words(&self) -> BTreeSet<&str> {
        self.0.values().flatten().map(String::as_str).filter(|w| !w.is_empty()).collect()
    }
}

/// Replaces whole-word domain surface words with "item". Meant for template
/// scaffolding, never for titles.
pub fn genericize_domain(text: &str, lexicon: &DomainLexicon) -> String {
    let words = lexicon.words();
    if words.is_empty() {
        return text.to_string();
    }
    // Longest first so "movies" wins over "movie".
    let mut alts: Vec<&str> = words.into_iter().collect();
    alts.sort_by_key(|w| std::cmp::Reverse(w.len()));
    let pattern = format!(r"\b(?:{})\b", alts.iter().map(|w| regex::escape(w)).collect::<Vec<_>>().join("|"));
    let re = Regex::new(&pattern).expect("escaped alternation is a valid regex");
    re.replace_all(text, "item").into_owned()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    TextOnly,
    Hybrid,
}

/// A window, its slate and the rendered prompt, ready for the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub window: SequenceWindow,
    pub slate: CandidateSlate,
    pub mode: PromptMode,
    pub prompt_text: String,
    /// History positions whose collaborative embedding is concatenated to
    /// the text embedding. Empty for text-only examples.
    pub hybrid_positions: Vec<usize>,
}

impl TrainingExample {
    /// Same example under another mode. The prompt text is unchanged.
    pub fn with_mode(&self, mode: PromptMode) -> Self {
        let hybrid_positions = match mode {
            PromptMode::TextOnly => Vec::new(),
            PromptMode::Hybrid => (0..self.window.history.len()).collect(),
        };
        Self { mode, hybrid_positions, ..self.clone() }
    }
}

/// Bundles a window and slate under `mode`. `encoder_ready` says whether a
/// trained collaborative encoder exists to back hybrid positions.
pub fn materialize(
    window: SequenceWindow,
    slate: CandidateSlate,
    mode: PromptMode,
    encoder_ready: bool,
) -> Result<TrainingExample, PromptError> {
    if mode == PromptMode::Hybrid && !encoder_ready {
        return Err(PromptError::EncoderMissing);
    }
    let prompt_text = render_prompt(&window, &slate);
    let hybrid_positions = match mode {
        PromptMode::TextOnly => Vec::new(),
        PromptMode::Hybrid => (0..window.history.len()).collect(),
    };
    Ok(TrainingExample { window, slate, mode, prompt_text, hybrid_positions })
}

/// Samples a slate for every window and renders text-only examples. Each
/// window gets its own seed from [`example_seed`].
pub fn materialize_windows(
    windows: &[SequenceWindow],
    catalog: &Catalog,
    pools: &HashMap<String, BTreeSet<String>>,
    n_negatives: usize,
    seed: u64,
) -> Result<Vec<TrainingExample>, PromptError> {
    let empty = BTreeSet::new();
    windows
        .iter()
        .map(|w| {
            let mut window = w.clone();
            catalog.canonicalize(&mut window);
            let pool = pools.get(&window.user_id).unwrap_or(&empty);
            let slate = sample_candidates(
                &window.target.item_id,
                pool,
                catalog,
                n_negatives,
                example_seed(seed, &window.user_id, window.index),
            )?;
            materialize(window, slate, PromptMode::TextOnly, false)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Interaction;
    use crate::mixer::SequenceKind;

    fn bi(id: &str, title: &str) -> BehaviorItem {
        BehaviorItem { item_id: id.into(), domain: "A".into(), timestamp: 1, title: title.into() }
    }

    fn win(titles: &[&str]) -> SequenceWindow {
        SequenceWindow {
            user_id: "u".into(),
            index: titles.len(),
            history: titles.iter().enumerate().map(|(i, t)| bi(&format!("h{i}"), t)).collect(),
            target: bi("t", "T"),
            source_kind: SequenceKind::DomainSpecific("A".into()),
        }
    }

    fn slate(titles: &[&str]) -> CandidateSlate {
        CandidateSlate {
            candidates: titles
                .iter()
                .enumerate()
                .map(|(i, t)| Candidate { item_id: format!("c{i}"), title: t.to_string() })
                .collect(),
            target_index: 0,
        }
    }

    fn catalog(n: usize) -> Catalog {
        let recs = (0..n).map(|i| Interaction {
            user_id: "u".into(),
            item_id: format!("i{i:02}"),
            domain: "A".into(),
            timestamp: i as u64,
            title: format!("Title {i}"),
        });
        Catalog::from_log(&InteractionLog::from_interactions(recs))
    }

    #[test]
    fn renders_the_exact_template() {
        let got = render_prompt(&win(&["X"]), &slate(&["Y", "X"]));
        assert_eq!(
            got,
            "This user has bought X in the previous. Please predict the next item this user will buy. \
             The item title candidates are Y, X. Choose only one item from the candidates. The answer is "
        );
    }

    #[test]
    fn comma_titles_are_quoted_and_parse_back() {
        let w = win(&["Crime, Punishment", "Plain"]);
        let s = slate(&["He said \"hi\"", "A, B, C", "Dr. No", "Ends with. Choose only one item"]);
        let text = render_prompt(&w, &s);
        assert!(text.contains("\"A, B, C\""));
        let (hist, cands) = PromptTemplate::default().parse(&text).unwrap();
        assert_eq!(hist, ["Crime, Punishment", "Plain"]);
        assert_eq!(cands, s.titles().collect::<Vec<_>>());
    }

    #[test]
    fn genericize_touches_scaffold_only() {
        let lex = DomainLexicon(BTreeMap::from([("movies".to_string(), vec!["movie".to_string()])]));
        assert_eq!(genericize_domain("predict the next movie", &lex), "predict the next item");
        assert_eq!(genericize_domain("moviegoer", &lex), "moviegoer");
        assert_eq!(genericize_domain("predict the next movie", &DomainLexicon::default()), "predict the next movie");

        let template = PromptTemplate {
            candidates_intro: " in the previous. Please predict the next movie this user will watch. \
                               The movie title candidates are "
                .into(),
            ..PromptTemplate::default()
        }
        .genericized(&lex);
        let text = template.render(&win(&["Old movie"]), &slate(&["Movie Maker Pro", "movie night"]));
        assert!(text.contains("Movie Maker Pro"));
        assert!(text.contains("movie night"));
        assert!(text.contains("Old movie"));
        assert!(text.contains("The item title candidates"));
    }

    #[test]
    fn full_eligible_set_is_used_when_exactly_enough() {
        let cat = catalog(20);
        let slate = sample_candidates("i05", &BTreeSet::from(["i05".to_string()]), &cat, 19, 7).unwrap();
        let mut ids: Vec<_> = slate.candidates.iter().map(|c| c.item_id.clone()).collect();
        ids.sort();
        assert_eq!(ids, cat.domain_items("A"));
        assert_eq!(slate.target().item_id, "i05");
        assert_eq!(slate.candidates.iter().filter(|c| c.item_id == "i05").count(), 1);
    }

    #[test]
    fn insufficient_catalog_reports_shortfall() {
        let cat = catalog(10);
        let err = sample_candidates("i00", &BTreeSet::new(), &cat, 19, 1).unwrap_err();
        assert_eq!(err, PromptError::InsufficientCatalog { domain: "A".into(), needed: 19, available: 9 });
        assert!(err.to_string().contains("short by 10"));
    }

    #[test]
    fn duplicate_titles_get_suffixes() {
        let recs = ["a", "b", "c"].map(|id| Interaction {
            user_id: "u".into(),
            item_id: id.into(),
            domain: "A".into(),
            timestamp: 0,
            title: "Same".into(),
        });
        let cat = Catalog::from_log(&InteractionLog::from_interactions(recs));
        assert_eq!(cat.title("a"), Some("Same"));
        assert_eq!(cat.title("b"), Some("Same (2)"));
        assert_eq!(cat.title("c"), Some("Same (3)"));
        assert!((cat.duplicate_title_rate() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn materialize_modes() {
        let w = win(&["a", "b", "c", "d", "e"]);
        let s = slate(&["x", "y"]);
        let text_only = materialize(w.clone(), s.clone(), PromptMode::TextOnly, false).unwrap();
        assert!(text_only.hybrid_positions.is_empty());
        assert_eq!(materialize(w.clone(), s.clone(), PromptMode::Hybrid, false), Err(PromptError::EncoderMissing));
        let hybrid = materialize(w, s, PromptMode::Hybrid, true).unwrap();
        assert_eq!(hybrid.hybrid_positions.len(), 5);
        assert_eq!(hybrid.prompt_text, text_only.prompt_text);
        assert_eq!(text_only.with_mode(PromptMode::Hybrid), hybrid);
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(stable_hash(b""), 0xcbf29ce484222325);
        assert_eq!(stable_hash(b"a"), 0xaf63dc4c8601ec8c);
    }
}
