use super::*;
use crate::mixer::{BehaviorItem, SequenceKind, SequenceWindow};
use crate::prompting::{materialize, CandidateSlate};
use rand::Rng;

fn item(i: usize) -> BehaviorItem {
    BehaviorItem { item_id: format!("i{i}"), domain: "d".into(), timestamp: i as u64, title: format!("word{} word{} thing", i % 7, i % 5) }
}

fn example(history: &[usize], cands: &[usize], target_index: usize, mode: PromptMode) -> TrainingExample {
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

fn tiny_config() -> ModelConfig {
    ModelConfig { text_dim: 6, hash_vocab: 32, collab_dim: 4, ffn_hidden: 5, max_len: 4, ..ModelConfig::default() }
}

fn randomized(config: ModelConfig, n_items: usize, seed: u64) -> Recommender {
    let mut m = Recommender::new(config, seed).unwrap();
    m.reset_encoder(ItemVocab::new((0..n_items).map(|i| format!("i{i}"))), seed + 1);
    m.set_encoder_trained(true);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    for (_, t) in m.params.tensors_mut() {
        t.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    m
}

#[test]
fn untrained_scores_tie_and_loss_is_uniform() {
    let m = Recommender::new(ModelConfig::default(), 3).unwrap();
    let cands: Vec<usize> = (0..20).collect();
    let ex = example(&[30, 31, 32], &cands, 7, PromptMode::TextOnly);
    let scores = m.score_slate(&ex);
    assert!(scores.iter().all(|&s| s == scores[0]));
    assert!((m.loss(&ex) - 20f64.ln()).abs() < 1e-12);
    assert_eq!(m.generate(&ex, &mut Passthrough), ex.slate.candidates[0].title);
}

#[test]
fn text_only_collab_block_is_zero_and_width_is_stable() {
    let m = randomized(tiny_config(), 10, 1);
    let it = ItemRef { item_id: "i3", title: "word3 word3 thing" };
    let t = m.item_rep(it, PromptMode::TextOnly).unwrap();
    let h = m.item_rep(it, PromptMode::Hybrid).unwrap();
    assert_eq!(t.len(), h.len());
    assert!(t.slice(s![6..]).iter().all(|&x| x == 0.0));
    let cold = ItemRef { item_id: "nope", title: it.title };
    assert_eq!(m.item_rep(cold, PromptMode::Hybrid).unwrap(), t);
}

#[test]
fn encoder_is_causal() {
    let m = randomized(tiny_config(), 10, 2);
    let a = m.encode_collab(&["i1", "i2", "i3", "i4"]);
    let b = m.encode_collab(&["i1", "i2", "i9", "i7"]);
    assert_eq!(a.vectors.slice(s![..2, ..]), b.vectors.slice(s![..2, ..]));
    assert_ne!(a.vectors.row(2), b.vectors.row(2));
    let c = m.encode_collab(&["i1", "zz"]);
    assert_eq!(c.cold, 1);
}

#[test]
fn shuffled_slate_permutes_scores() {
    let m = randomized(tiny_config(), 30, 3);
    let cands: Vec<usize> = (0..20).collect();
    let ex = example(&[21, 22, 23], &cands, 0, PromptMode::Hybrid);
    let mut rev = cands.clone();
    rev.reverse();
    let ex2 = example(&[21, 22, 23], &rev, 19, PromptMode::Hybrid);
    let a = m.score_slate(&ex);
    let mut b = m.score_slate(&ex2);
    b.reverse();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
}

fn check_gradients(m: &Recommender, ex: &TrainingExample, with_encoder: bool) {
    let (_, grad) = m.loss_and_grad(ex, with_encoder);
    let h = 1e-5;
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
            assert!(rel < 1e-4, "{name}: relative error {rel}");
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    let m = randomized(tiny_config(), 12, 4);
    let ex = example(&[1, 2, 3], &[4, 5, 6, 1, 11], 2, PromptMode::Hybrid);
    check_gradients(&m, &ex, true);
    // Longer than max_len, with a cold candidate.
    let ex = example(&[1, 2, 3, 4, 5, 6], &[7, 8, 40, 9], 3, PromptMode::Hybrid);
    check_gradients(&m, &ex, true);
    let ex = example(&[1, 2, 3], &[4, 5, 6], 0, PromptMode::TextOnly);
    check_gradients(&m, &ex, false);
}

#[test]
fn overfitting_one_example_decreases_loss() {
    let mut m = Recommender::new(ModelConfig::default(), 5).unwrap();
    let cands: Vec<usize> = (0..20).collect();
    let ex = example(&[30, 31, 32], &cands, 4, PromptMode::TextOnly);
    let mut prev = f64::INFINITY;
    for _ in 0..60 {
        let loss = m.train_step(&ex, 0.05).unwrap();
        assert!(loss < prev);
        prev = loss;
    }
    assert!(matches!(m.train_step(&ex, 0.0), Err(ModelError::BadLearningRate(_))));
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let m = randomized(tiny_config(), 9, 6);
    let a = m.to_bytes().unwrap();
    let back = Recommender::from_bytes(&a).unwrap();
    assert_eq!(back.to_bytes().unwrap(), a);
    assert_eq!(back.vocab(), m.vocab());
    let mut bad = a.clone();
    bad[4] = 9;
    assert!(matches!(Recommender::from_bytes(&bad), Err(ModelError::VersionMismatch { found: 9, .. })));
    assert!(Recommender::from_bytes(&a[..a.len() - 1]).is_err());
}

#[test]
fn sft_with_zero_epochs_returns_init() {
    let m = randomized(tiny_config(), 30, 7);
    let cands: Vec<usize> = (0..20).collect();
    let ex = vec![example(&[21, 22, 23], &cands, 1, PromptMode::TextOnly)];
    let settings = SftSettings { epochs: 0, ..SftSettings::default() };
    let out = sft_run(&m, &ex, &ex, &settings).unwrap();
    assert_eq!(out.model, m);

    let fresh = Recommender::new(tiny_config(), 1).unwrap();
    assert!(matches!(sft_run(&fresh, &ex, &ex, &SftSettings::default()), Err(ModelError::EncoderMissing)));
}

#[test]
fn curriculum_starts_text_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        assert_eq!(curriculum_modes(50, &mut rng)[0], PromptMode::TextOnly);
    }
}

#[test]
fn encoder_pretraining_reduces_loss_and_keeps_text_frozen() {
    let mut m = Recommender::new(tiny_config(), 8).unwrap();
    let before = m.text_embedder().fingerprint();
    let seqs: Vec<Vec<String>> = (0..40).map(|u| (0..6).map(|k| format!("i{}", (u % 4) * 6 + k)).collect()).collect();
    let settings = EncoderPretrainSettings { epochs: 30, lr: 0.1, negatives: 5, batch_size: 8, seed: 1 };
    let losses = pretrain_encoder(&mut m, &seqs, &settings).unwrap();
    assert!(losses.last().unwrap() < &(losses[0] * 0.8), "{losses:?}");
    assert!(m.encoder_trained());
    assert_eq!(m.text_embedder().fingerprint(), before);
}
