//! Generators and brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recpt::corpus::{Interaction, InteractionLog};
use recpt::mixer::{BehaviorItem, SequenceKind, SequenceWindow};
use recpt::model::{ItemVocab, ModelConfig, Recommender};
use recpt::prompting::{materialize, Candidate, CandidateSlate, PromptMode, TrainingExample};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn event(user: usize, item: usize, domain: &str, ts: u64) -> Interaction {
    Interaction {
        user_id: format!("u{user}"),
        item_id: format!("{domain}{item}"),
        domain: domain.to_string(),
        timestamp: ts,
        title: format!("{domain} title {item}"),
    }
}

/// Bernoulli bipartite log: each (user, item) pair is present with
/// probability `density`.
pub fn random_bipartite(r: &mut impl Rng, users: usize, items: usize, density: f64) -> InteractionLog {
    let mut events = Vec::new();
    for u in 0..users {
        for i in 0..items {
            if r.random::<f64>() < density {
                events.push(event(u, i, "a", r.random_range(0..1000)));
            }
        }
    }
    InteractionLog::from_interactions(events)
}

/// Users with interleaved activity across `domains`; timestamps may
/// collide so the tie-break is exercised.
pub fn random_multi_domain(r: &mut impl Rng, users: usize, domains: &[&str], max_events: usize) -> InteractionLog {
    let mut events = Vec::new();
    for u in 0..users {
        let n = r.random_range(1..=max_events);
        for _ in 0..n {
            let d = domains[r.random_range(0..domains.len())];
            events.push(event(u, r.random_range(0..15), d, r.random_range(0..60)));
        }
    }
    InteractionLog::from_interactions(events)
}

/// Deletes any user or item below `k` until none remains. Returns the
/// surviving (user, item) pairs.
pub fn brute_kcore(log: &InteractionLog, k: usize) -> BTreeSet<(String, String)> {
    let mut rows: Vec<(String, String)> = log.interactions().iter().map(|e| (e.user_id.clone(), e.item_id.clone())).collect();
    loop {
        let mut users: BTreeMap<&str, usize> = BTreeMap::new();
        let mut items: BTreeMap<&str, usize> = BTreeMap::new();
        for (u, i) in &rows {
            *users.entry(u).or_default() += 1;
            *items.entry(i).or_default() += 1;
        }
        let bad_user: BTreeSet<String> = users.iter().filter(|(_, &c)| c < k).map(|(u, _)| u.to_string()).collect();
        let bad_item: BTreeSet<String> = items.iter().filter(|(_, &c)| c < k).map(|(i, _)| i.to_string()).collect();
        if bad_user.is_empty() && bad_item.is_empty() {
            break;
        }
        rows.retain(|(u, i)| !bad_user.contains(u) && !bad_item.contains(i));
    }
    rows.into_iter().collect()
}

pub fn pairs(log: &InteractionLog) -> BTreeSet<(String, String)> {
    log.interactions().iter().map(|e| (e.user_id.clone(), e.item_id.clone())).collect()
}

/// Rule check written against the raw definition.
pub fn independent_rules(history: &[BehaviorItem], target: &BehaviorItem) -> (bool, bool) {
    let mut seen: Vec<&str> = Vec::new();
    for h in history {
        if !seen.contains(&h.domain.as_str()) {
            seen.push(&h.domain);
        }
    }
    (seen.contains(&target.domain.as_str()), seen.len() >= 2)
}

/// Rank by sorting (score descending, index ascending) and locating the
/// target.
pub fn sort_rank(scores: &[f64], target: usize) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    order.iter().position(|&j| j == target).unwrap() + 1
}

pub fn item(i: usize) -> BehaviorItem {
    BehaviorItem { item_id: format!("i{i}"), domain: "d".into(), timestamp: i as u64, title: format!("word{} word{} thing", i % 7, i % 5) }
}

pub fn example(history: &[usize], cands: &[usize], target_index: usize, mode: PromptMode) -> TrainingExample {
    let window = SequenceWindow {
        user_id: "u".into(),
        index: history.len(),
        history: history.iter().map(|&i| item(i)).collect(),
        target: item(cands[target_index]),
        source_kind: SequenceKind::DomainSpecific("d".into()),
    };
    let slate = CandidateSlate {
        candidates: cands.iter().map(|&i| Candidate { item_id: format!("i{i}"), title: item(i).title }).collect(),
        target_index,
    };
    materialize(window, slate, mode, true).unwrap()
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig { text_dim: 6, hash_vocab: 32, collab_dim: 4, ffn_hidden: 5, max_len: 4, ..ModelConfig::default() }
}

/// Every parameter drawn uniformly from [-0.5, 0.5).
pub fn randomized(config: ModelConfig, n_items: usize, seed: u64) -> Recommender {
    let mut m = Recommender::new(config, seed).unwrap();
    m.reset_encoder(ItemVocab::new((0..n_items).map(|i| format!("i{i}"))), seed + 1);
    m.set_encoder_trained(true);
    let mut r = rng(seed + 2);
    for (_, t) in m.params.tensors_mut() {
        t.mapv_inplace(|_| r.random_range(-0.5..0.5));
    }
    m
}

/// Largest per-tensor relative error between analytic gradients and
/// central differences, as `||g - g_fd|| / ||max(|g|, |g_fd|)||`.
pub fn worst_gradient_error(m: &Recommender, ex: &TrainingExample, with_encoder: bool) -> (String, f64) {
    let (_, grad) = m.loss_and_grad(ex, with_encoder);
    let h = 1e-5;
    let mut worst = (String::new(), 0.0);
    for (name, g) in grad.tensors() {
        if !with_encoder && name.starts_with("encoder.") {
            continue;
        }
        let mut diff = 0.0;
        let mut norm = 0.0;
        for (idx, &analytic) in g.indexed_iter() {
            let shifted = |delta: f64| {
                let mut p = m.clone();
                for (n, t) in p.params.tensors_mut() {
                    if n == name {
                        t[idx] += delta;
                    }
                }
                p.loss(ex)
            };
            let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
            diff += (analytic - numeric).powi(2);
            norm += analytic.abs().max(numeric.abs()).powi(2);
        }
        if norm > 1e-20 {
            let rel = (diff / norm).sqrt();
            if rel > worst.1 {
                worst = (name, rel);
            }
        }
    }
    worst
}
