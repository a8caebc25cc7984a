//! A compact trainable recommender with a hybrid item representation.
//!
//! Every item is represented as `[text ; collab]`, each block `text_dim`
//! wide. The text block comes from a frozen [`TextEmbedder`]. The collab
//! block is a learned projection of the item's collaborative vector: for
//! history items, the causal encoder's contextual output; for candidates,
//! the raw item embedding. Text-only examples use a zero collab block.
//!
//! A history is summarised as the mean of its item representations `g`,
//! mapped through the adapter `s = g M + b`, and candidate `j` is scored
//! `s . r_j`. Training minimises softmax cross-entropy of the true target
//! within the slate.
//!
//! Only the adapter (`M`, `b`, the projector) and, when enabled, the
//! collaborative encoder receive gradient updates.

mod checkpoint;
mod encoder;
mod text;
mod train;

use std::sync::Arc;

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{inspect_checkpoint, CheckpointHeader, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use encoder::{AttentionBlock, EncoderParams, ItemVocab};
pub use text::{tokenize, TextEmbedder};
pub use train::{
    cpt_run, curriculum_modes, pretrain_encoder, sft_run, CptReport, EncoderPretrainSettings, Optimizer, SftOutcome,
    SftSettings, SftTrial,
};

use crate::prompting::{Candidate, PromptMode, TrainingExample};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("item title is empty")]
    EmptyTitle,
    #[error("non-finite loss {loss} at step {step} (lr {lr}) on example {example}")]
    NonFinite { loss: f64, step: u64, lr: f64, example: String },
    #[error("learning rate must be positive, got {0}")]
    BadLearningRate(f64),
    #[error("hybrid prompts need a trained collaborative encoder; run encoder pre-training first")]
    EncoderMissing,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub text_dim: usize,
    pub hash_vocab: usize,
    pub text_seed: u64,
    pub collab_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            text_dim: 64,
            hash_vocab: 4096,
            text_seed: 0x5EED_7E47,
            collab_dim: 32,
            blocks: 1,
            heads: 2,
            ffn_hidden: 64,
            max_len: 10,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.text_dim == 0 || self.collab_dim == 0 || self.hash_vocab == 0 || self.max_len == 0 {
            return err("dimensions, vocabulary and max_len must be positive");
        }
        if self.heads == 0 || !self.collab_dim.is_multiple_of(self.heads) {
            return err("collab_dim must be a positive multiple of heads");
        }
        if self.ffn_hidden == 0 {
            return err("ffn_hidden must be positive");
        }
        Ok(())
    }

    /// Width of an item representation.
    pub fn rep_dim(&self) -> usize {
        2 * self.text_dim
    }
}

/// The trainable head: bilinear scorer, bias and collab projector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub scorer: Array2<f64>,
    pub bias: Array2<f64>,
    pub proj: Array2<f64>,
}

impl AdapterParams {
    /// Zero scorer and bias (every candidate ties), random projector.
    pub fn init<R: rand::Rng>(rng: &mut R, config: &ModelConfig) -> Self {
        let d = config.rep_dim();
        let normal = Normal::new(0.0, 1.0 / (config.collab_dim as f64).sqrt()).expect("positive std");
        Self {
            scorer: Array2::zeros((d, d)),
            bias: Array2::zeros((1, d)),
            proj: Array2::from_shape_simple_fn((config.collab_dim, config.text_dim), || normal.sample(rng)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            scorer: Array2::zeros(self.scorer.raw_dim()),
            bias: Array2::zeros(self.bias.raw_dim()),
            proj: Array2::zeros(self.proj.raw_dim()),
        }
    }
}

/// All trainable tensors, in checkpoint order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub adapter: AdapterParams,
    pub encoder: EncoderParams,
}

impl Params {
    pub fn zeros_like(&self) -> Self {
        Self { adapter: self.adapter.zeros_like(), encoder: self.encoder.zeros_like() }
    }

    pub fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = vec![
            ("adapter.scorer".to_string(), &self.adapter.scorer),
            ("adapter.bias".to_string(), &self.adapter.bias),
            ("adapter.proj".to_string(), &self.adapter.proj),
            ("encoder.item_emb".to_string(), &self.encoder.item_emb),
            ("encoder.pos_emb".to_string(), &self.encoder.pos_emb),
        ];
        for (i, block) in self.encoder.blocks.iter().enumerate() {
            out.extend(block.named().into_iter().map(|(n, t)| (format!("encoder.block{i}.{n}"), t)));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out = vec![
            ("adapter.scorer".to_string(), &mut self.adapter.scorer),
            ("adapter.bias".to_string(), &mut self.adapter.bias),
            ("adapter.proj".to_string(), &mut self.adapter.proj),
            ("encoder.item_emb".to_string(), &mut self.encoder.item_emb),
            ("encoder.pos_emb".to_string(), &mut self.encoder.pos_emb),
        ];
        for (i, block) in self.encoder.blocks.iter_mut().enumerate() {
            out.extend(block.named_mut().into_iter().map(|(n, t)| (format!("encoder.block{i}.{n}"), t)));
        }
        out
    }
}

/// Collaborative vectors for a history, plus how many ids were unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct CollabEncoding {
    pub vectors: Array2<f64>,
    pub cold: usize,
}

/// Forward values kept for the backward pass.
struct ScoreCache {
    hist_reps: Array2<f64>,
    cand_reps: Array2<f64>,
    pooled: Array1<f64>,
    summary: Array1<f64>,
    scores: Array1<f64>,
    hybrid: Option<HybridCache>,
}

struct HybridCache {
    encoded: encoder::EncoderCache,
    cand_rows: Vec<Option<usize>>,
    cand_collab: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct Recommender {
    config: ModelConfig,
    text: Arc<TextEmbedder>,
    pub params: Params,
    vocab: ItemVocab,
    encoder_trained: bool,
    step: u64,
    seed: u64,
}

impl PartialEq for Recommender {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.params == other.params
            && self.vocab == other.vocab
            && self.encoder_trained == other.encoder_trained
            && self.step == other.step
            && self.seed == other.seed
    }
}

/// The parts of a history or candidate item the scorer reads.
#[derive(Debug, Clone, Copy)]
pub struct ItemRef<'a> {
    pub item_id: &'a str,
    pub title: &'a str,
}

fn softmax(x: &Array1<f64>) -> Array1<f64> {
    let max = x.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = x.mapv(|v| (v - max).exp());
    let sum = e.sum();
    e / sum
}

fn log_sum_exp(x: &Array1<f64>) -> f64 {
    let max = x.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    max + x.mapv(|v| (v - max).exp()).sum().ln()
}

/// Index of the largest score; the lowest index wins ties.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some(b) if scores[b] >= s => {}
            _ => best = Some(i),
        }
    }
    best
}

impl Recommender {
    /// Fresh model: zero scorer, random projector, random encoder over an
    /// empty item vocabulary.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let text = Arc::new(TextEmbedder::new(config.text_dim, config.hash_vocab, config.text_seed));
        Ok(Self::with_embedder(config, text, seed))
    }

    /// Like [`Recommender::new`] but sharing an existing frozen embedder.
    pub fn with_embedder(config: ModelConfig, text: Arc<TextEmbedder>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let adapter = AdapterParams::init(&mut rng, &config);
        let encoder = EncoderParams::init(&mut rng, 0, config.collab_dim, config.max_len, config.blocks, config.ffn_hidden);
        Self {
            config,
            text,
            params: Params { adapter, encoder },
            vocab: ItemVocab::default(),
            encoder_trained: false,
            step: 0,
            seed,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn text_embedder(&self) -> &Arc<TextEmbedder> {
        &self.text
    }

    pub fn vocab(&self) -> &ItemVocab {
        &self.vocab
    }

    pub fn encoder_trained(&self) -> bool {
        self.encoder_trained
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Replaces the collaborative encoder with a freshly initialised one
    /// over `vocab`. The adapter is untouched.
    pub fn reset_encoder(&mut self, vocab: ItemVocab, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &self.config;
        self.params.encoder = EncoderParams::init(&mut rng, vocab.len(), c.collab_dim, c.max_len, c.blocks, c.ffn_hidden);
        self.vocab = vocab;
        self.encoder_trained = false;
    }

    /// Marks the encoder as usable for hybrid prompts.
    pub fn set_encoder_trained(&mut self, trained: bool) {
        self.encoder_trained = trained;
    }

    /// Keeps this model's encoder and vocabulary but takes `other`'s adapter.
    pub fn adopt_adapter(&mut self, other: &Recommender) {
        self.params.adapter = other.params.adapter.clone();
    }

    pub fn encode_text(&self, title: &str) -> Result<Array1<f64>, ModelError> {
        self.text.encode(title)
    }

    fn text_matrix<'a, I: ExactSizeIterator<Item = &'a str>>(&self, titles: I) -> Array2<f64> {
        let n = titles.len();
        let mut m = Array2::zeros((n, self.config.text_dim));
        for (i, t) in titles.enumerate() {
            // Titles are validated non-empty at ingestion.
            let v = self.text.encode(t).unwrap_or_else(|_| Array1::zeros(self.config.text_dim));
            m.row_mut(i).assign(&v);
        }
        m
    }

    /// Causal encoder outputs for a history. Only the last `max_len`
    /// positions are encoded; earlier ones get zero vectors. Unknown ids are
    /// fed as zero embeddings and counted.
    pub fn encode_collab(&self, item_ids: &[&str]) -> CollabEncoding {
        let (rows, offset) = self.history_rows(item_ids);
        let cold = rows.iter().filter(|r| r.is_none()).count();
        let cache = encoder::encoder_forward(&self.params.encoder, &rows, self.config.heads);
        let mut vectors = Array2::zeros((item_ids.len(), self.config.collab_dim));
        vectors.slice_mut(s![offset.., ..]).assign(&cache.out);
        CollabEncoding { vectors, cold }
    }

    fn history_rows(&self, item_ids: &[&str]) -> (Vec<Option<usize>>, usize) {
        let offset = item_ids.len().saturating_sub(self.config.max_len);
        (item_ids[offset..].iter().map(|id| self.vocab.get(id)).collect(), offset)
    }

    /// `[text ; projected collab]` for a candidate item. Text-only mode (or
    /// a cold item) leaves the collab block at zero.
    pub fn item_rep(&self, item: ItemRef<'_>, mode: PromptMode) -> Result<Array1<f64>, ModelError> {
        let t = self.text.encode(item.title)?;
        let collab = match mode {
            PromptMode::TextOnly => Array1::zeros(self.config.text_dim),
            PromptMode::Hybrid => self.params.encoder.item_vector(self.vocab.get(item.item_id)).dot(&self.params.adapter.proj),
        };
        Ok(concatenate(Axis(0), &[t.view(), collab.view()]).expect("equal-rank vectors"))
    }

    fn forward(&self, history: &[ItemRef<'_>], candidates: &[ItemRef<'_>], mode: PromptMode) -> ScoreCache {
        let dt = self.config.text_dim;
        let proj = &self.params.adapter.proj;
        let hist_text = self.text_matrix(history.iter().map(|i| i.title));
        let cand_text = self.text_matrix(candidates.iter().map(|i| i.title));
        let mut hist_collab = Array2::zeros((history.len(), dt));
        let mut cand_proj = Array2::zeros((candidates.len(), dt));
        let hybrid = match mode {
            PromptMode::TextOnly => None,
            PromptMode::Hybrid => {
                let ids: Vec<&str> = history.iter().map(|i| i.item_id).collect();
                let (rows, offset) = self.history_rows(&ids);
                let encoded = encoder::encoder_forward(&self.params.encoder, &rows, self.config.heads);
                hist_collab.slice_mut(s![offset.., ..]).assign(&encoded.out.dot(proj));
                let cand_rows: Vec<Option<usize>> = candidates.iter().map(|c| self.vocab.get(c.item_id)).collect();
                let mut cand_collab = Array2::zeros((candidates.len(), self.config.collab_dim));
                for (j, r) in cand_rows.iter().enumerate() {
                    cand_collab.row_mut(j).assign(&self.params.encoder.item_vector(*r));
                }
                cand_proj = cand_collab.dot(proj);
                Some(HybridCache { encoded, cand_rows, cand_collab })
            }
        };
        let hist_reps = concatenate(Axis(1), &[hist_text.view(), hist_collab.view()]).expect("same rows");
        let cand_reps = concatenate(Axis(1), &[cand_text.view(), cand_proj.view()]).expect("same rows");
        let pooled = hist_reps.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(self.config.rep_dim()));
        let summary = pooled.dot(&self.params.adapter.scorer) + self.params.adapter.bias.row(0);
        let scores = cand_reps.dot(&summary);
        ScoreCache { hist_reps, cand_reps, pooled, summary, scores, hybrid }
    }

    /// Gradient of the slate cross-entropy for `target`. Encoder gradients
    /// are only filled when `with_encoder` is set.
    fn backward(&self, cache: &ScoreCache, target: usize, with_encoder: bool, grad: &mut Params) {
        let dt = self.config.text_dim;
        let adapter = &self.params.adapter;
        let mut dscores = softmax(&cache.scores);
        dscores[target] -= 1.0;
        let dsummary = cache.cand_reps.t().dot(&dscores);
        let outer = |a: &Array1<f64>, b: &Array1<f64>| {
            a.view().insert_axis(Axis(1)).dot(&b.view().insert_axis(Axis(0)))
        };
        grad.adapter.scorer += &outer(&cache.pooled, &dsummary);
        {
            let mut gb = grad.adapter.bias.row_mut(0);
            gb += &dsummary;
        }
        let Some(hy) = &cache.hybrid else { return };

        let dpooled = adapter.scorer.dot(&dsummary);
        let m = cache.hist_reps.nrows() as f64;
        let dhist_collab_row = dpooled.slice(s![dt..]).to_owned() / m;
        let dcand_proj = outer(&dscores, &cache.summary.slice(s![dt..]).to_owned());
        let encoded_out = &hy.encoded.out;
        // Every history position receives the same pooled gradient.
        let n_enc = encoded_out.nrows();
        let dz_hist = Array2::from_shape_fn((n_enc, dt), |(_, j)| dhist_collab_row[j]);
        grad.adapter.proj += &encoded_out.t().dot(&dz_hist);
        grad.adapter.proj += &hy.cand_collab.t().dot(&dcand_proj);
        if !with_encoder {
            return;
        }
        let d_encoded = dz_hist.dot(&adapter.proj.t());
        encoder::encoder_backward(&self.params.encoder, &hy.encoded, &d_encoded, self.config.heads, &mut grad.encoder);
        let dcand_collab = dcand_proj.dot(&adapter.proj.t());
        for (j, r) in hy.cand_rows.iter().enumerate() {
            if let Some(r) = r {
                let mut g = grad.encoder.item_emb.row_mut(*r);
                g += &dcand_collab.row(j);
            }
        }
    }

    pub fn score_candidates(&self, history: &[ItemRef<'_>], candidates: &[ItemRef<'_>], mode: PromptMode) -> Vec<f64> {
        self.forward(history, candidates, mode).scores.to_vec()
    }

    /// One score per slate position, in slate order.
    pub fn score_slate(&self, example: &TrainingExample) -> Vec<f64> {
        let (history, candidates) = refs(example);
        self.score_candidates(&history, &candidates, example.mode)
    }

    /// Slate cross-entropy of the target and its gradient.
    pub fn loss_and_grad(&self, example: &TrainingExample, with_encoder: bool) -> (f64, Params) {
        let mut grad = self.params.zeros_like();
        let loss = self.accumulate_grad(example, with_encoder, &mut grad);
        (loss, grad)
    }

    pub(crate) fn accumulate_grad(&self, example: &TrainingExample, with_encoder: bool, grad: &mut Params) -> f64 {
        let (history, candidates) = refs(example);
        let cache = self.forward(&history, &candidates, example.mode);
        let target = example.slate.target_index;
        let loss = log_sum_exp(&cache.scores) - cache.scores[target];
        self.backward(&cache, target, with_encoder, grad);
        loss
    }

    pub fn loss(&self, example: &TrainingExample) -> f64 {
        let scores = Array1::from(self.score_slate(example));
        log_sum_exp(&scores) - scores[example.slate.target_index]
    }

    /// Title of the best-scoring candidate, passed through `channel`.
    pub fn generate(&self, example: &TrainingExample, channel: &mut dyn EmissionChannel) -> String {
        let scores = self.score_slate(example);
        let best = argmax(&scores).expect("slate is non-empty");
        channel.emit(&example.slate.candidates[best].title)
    }

    pub(crate) fn bump_step(&mut self, step: u64) {
        self.step = step;
    }
}

fn refs(example: &TrainingExample) -> (Vec<ItemRef<'_>>, Vec<ItemRef<'_>>) {
    let history = example.window.history.iter().map(|i| ItemRef { item_id: &i.item_id, title: &i.title }).collect();
    let candidates = example.slate.candidates.iter().map(candidate_ref).collect();
    (history, candidates)
}

pub(crate) fn candidate_ref(c: &Candidate) -> ItemRef<'_> {
    ItemRef { item_id: &c.item_id, title: &c.title }
}

/// Where generated text goes on its way out of the model. Test harnesses
/// substitute corrupting channels.
pub trait EmissionChannel {
    fn emit(&mut self, title: &str) -> String;
}

/// Emits titles unchanged.
#[derive(Debug, Default, Clone, Copy)]
pub struct Passthrough;

impl EmissionChannel for Passthrough {
    fn emit(&mut self, title: &str) -> String {
        title.to_string()
    }
}

#[cfg(test)]
mod tests;
