//! Deterministic multi-domain interaction generator with planted
//! cross-domain preferences.
//!
//! Every item belongs to one latent topic, and topics own a small word list
//! shared by all domains, so titles of same-topic items overlap in words
//! across domains. Each user prefers a primary and a secondary topic in
//! every domain; most of their choices follow those topics and the rest are
//! uniform. A user's choices in one domain therefore predict their choices
//! in another, and the signal is visible both in titles and in
//! co-occurrence.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_log, Interaction, InteractionLog, RowFormat};

const TOPIC_WORDS: [&str; 60] = [
    "amber", "falcon", "harbor", "cinder", "meadow", "glacier", "lantern", "orchid", "thunder", "velvet", "canyon",
    "ember", "frost", "garnet", "hollow", "ivory", "jasper", "kettle", "lagoon", "marble", "nebula", "oasis", "pebble",
    "quartz", "raven", "saffron", "tundra", "umber", "willow", "zephyr", "anchor", "bramble", "comet", "dune", "echo",
    "fjord", "grove", "heron", "iris", "juniper", "kestrel", "lotus", "mesa", "nimbus", "onyx", "prairie", "quill",
    "reef", "summit", "tide", "vale", "wren", "yarrow", "aurora", "basalt", "cobalt", "delta", "fable", "granite",
    "horizon",
];

const ADJECTIVES: [&str; 12] = [
    "quiet", "bright", "lost", "hidden", "golden", "silent", "wild", "broken", "ancient", "distant", "secret", "final",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub users: usize,
    pub items_per_domain: usize,
    pub topics: usize,
    /// Domains that feed continual pre-training.
    pub source_domains: Vec<String>,
    /// Held-out downstream domain.
    pub target_domain: String,
    /// Inclusive range of interactions per user in each source domain.
    pub source_len: (usize, usize),
    /// Inclusive range of interactions per user in the target domain.
    pub target_len: (usize, usize),
    /// Probability that a choice follows the user's topics.
    pub topic_affinity: f64,
    /// Among topic-driven choices, the share going to the primary topic.
    pub primary_share: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users: 2000,
            items_per_domain: 500,
            topics: 20,
            source_domains: vec!["books".into(), "movies".into()],
            target_domain: "games".into(),
            source_len: (6, 14),
            target_len: (5, 12),
            topic_affinity: 0.75,
            primary_share: 0.7,
            seed: 2024,
        }
    }
}

impl SynthConfig {
    pub fn domains(&self) -> Vec<String> {
        let mut d = self.source_domains.clone();
        d.push(self.target_domain.clone());
        d
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.topics == 0 || self.topics * 3 > TOPIC_WORDS.len() {
            return Err(format!("topics must be in 1..={}", TOPIC_WORDS.len() / 3));
        }
        let domains: BTreeSet<&String> = self.source_domains.iter().chain([&self.target_domain]).collect();
        if domains.len() != self.source_domains.len() + 1 {
            return Err("domain names must be distinct".into());
        }
        for (lo, hi) in [self.source_len, self.target_len] {
            if lo == 0 || lo > hi || hi > self.items_per_domain {
                return Err(format!("length range ({lo}, {hi}) is invalid for {} items", self.items_per_domain));
            }
        }
        if !(0.0..=1.0).contains(&self.topic_affinity) || !(0.0..=1.0).contains(&self.primary_share) {
            return Err("probabilities must lie in [0, 1]".into());
        }
        Ok(())
    }
}

fn domain_noun(domain: &str) -> String {
    match domain {
        "books" => "Novel".into(),
        "movies" => "Film".into(),
        "games" => "Quest".into(),
        other => {
            let mut c = other.chars();
            c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
        }
    }
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
}

struct Domain {
    name: String,
    /// (item id, title) grouped by topic.
    by_topic: Vec<Vec<(String, String)>>,
    all: Vec<(String, String)>,
}

fn build_domain<R: Rng>(name: &str, cfg: &SynthConfig, rng: &mut R) -> Domain {
    let noun = domain_noun(name);
    let prefix: String = name.chars().take(2).collect();
    let mut by_topic = vec![Vec::new(); cfg.topics];
    let mut all = Vec::with_capacity(cfg.items_per_domain);
    for i in 0..cfg.items_per_domain {
        let topic = i % cfg.topics;
        let words = &TOPIC_WORDS[topic * 3..topic * 3 + 3];
        let a = rng.random_range(0..3);
        let b = (a + rng.random_range(1..3)) % 3;
        let adj = ADJECTIVES[rng.random_range(0..ADJECTIVES.len())];
        let title = format!("{} {} {} {} {}", capitalize(words[a]), capitalize(words[b]), capitalize(adj), noun, i + 1);
        let id = format!("{prefix}{:05}", i + 1);
        by_topic[topic].push((id.clone(), title.clone()));
        all.push((id, title));
    }
    Domain { name: name.to_string(), by_topic, all }
}

fn draw_items<R: Rng>(domain: &Domain, n: usize, topics: (usize, usize), cfg: &SynthConfig, rng: &mut R) -> Vec<(String, String)> {
    let mut chosen: Vec<(String, String)> = Vec::with_capacity(n);
    let mut seen = BTreeSet::new();
    while chosen.len() < n {
        let pool = if rng.random::<f64>() < cfg.topic_affinity {
            let t = if rng.random::<f64>() < cfg.primary_share { topics.0 } else { topics.1 };
            &domain.by_topic[t]
        } else {
            &domain.all
        };
        let pick = &pool[rng.random_range(0..pool.len())];
        if seen.insert(pick.0.clone()) {
            chosen.push(pick.clone());
        }
    }
    chosen
}

/// One interaction log per domain, keyed by domain name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthCorpus {
    pub logs: BTreeMap<String, InteractionLog>,
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus, String> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let names = cfg.domains();
    let domains: Vec<Domain> = names.iter().map(|n| build_domain(n, cfg, &mut rng)).collect();
    let mut rows: BTreeMap<String, Vec<Interaction>> = names.iter().map(|n| (n.clone(), Vec::new())).collect();
    for u in 0..cfg.users {
        let user_id = format!("u{:05}", u + 1);
        let primary = rng.random_range(0..cfg.topics);
        let secondary = if cfg.topics > 1 { (primary + rng.random_range(1..cfg.topics)) % cfg.topics } else { primary };
        let mut events: Vec<(usize, (String, String))> = Vec::new();
        for (d, domain) in domains.iter().enumerate() {
            let (lo, hi) = if domain.name == cfg.target_domain { cfg.target_len } else { cfg.source_len };
            let n = rng.random_range(lo..=hi);
            events.extend(draw_items(domain, n, (primary, secondary), cfg, &mut rng).into_iter().map(|it| (d, it)));
        }
        // Interleave domains in time, keeping each domain's draw order.
        let mut slots: Vec<usize> = events.iter().map(|(d, _)| *d).collect();
        slots.shuffle(&mut rng);
        let mut per_domain: Vec<std::collections::VecDeque<(String, String)>> = vec![Default::default(); domains.len()];
        for (d, it) in events {
            per_domain[d].push_back(it);
        }
        let base = 1_600_000_000u64 + rng.random_range(0..86_400u64);
        for (k, d) in slots.into_iter().enumerate() {
            let (item_id, title) = per_domain[d].pop_front().expect("one slot per event");
            rows.get_mut(&names[d]).expect("known domain").push(Interaction {
                user_id: user_id.clone(),
                item_id,
                domain: names[d].clone(),
                timestamp: base + 3_600 * k as u64,
                title,
            });
        }
    }
    Ok(SynthCorpus { logs: rows.into_iter().map(|(d, r)| (d, InteractionLog::from_interactions(r))).collect() })
}

/// Writes `{domain}.tsv` per domain into `dir` and returns the paths.
pub fn write_tsv(corpus: &SynthCorpus, dir: &Path) -> io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for (domain, log) in &corpus.logs {
        let path = dir.join(format!("{domain}.tsv"));
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        {
            let mut w = io::BufWriter::new(tmp.as_file_mut());
            write_log(log, &mut w, &RowFormat::default())?;
            w.flush()?;
        }
        tmp.persist(&path).map_err(|e| e.error)?;
        out.push(path);
    }
    Ok(out)
}
