//! Optimizer, encoder pre-training, and the CPT and SFT loops.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoder::{encoder_backward, encoder_forward};
use super::{argmax, ItemVocab, ModelError, Params, Recommender};
use crate::prompting::{PromptMode, TrainingExample};
use crate::scheduler::{curriculum_p, CurriculumState, StageStream};

/// Momentum SGD with global gradient-norm clipping.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub momentum: f64,
    pub clip_norm: f64,
    velocity: Option<Params>,
}

impl Default for Optimizer {
    fn default() -> Self {
        Self::new(0.9, 1.0)
    }
}

fn is_encoder(name: &str) -> bool {
    name.starts_with("encoder.")
}

impl Optimizer {
    pub fn new(momentum: f64, clip_norm: f64) -> Self {
        Self { momentum, clip_norm, velocity: None }
    }

    /// Applies one update. Encoder tensors are touched only when
    /// `update_encoder` is set, adapter tensors only when `update_adapter` is.
    pub fn apply(&mut self, params: &mut Params, grad: &Params, lr: f64, update_adapter: bool, update_encoder: bool) {
        let selected = |name: &str| if is_encoder(name) { update_encoder } else { update_adapter };
        let norm_sq: f64 = grad
            .tensors()
            .into_iter()
            .filter(|(n, _)| selected(n))
            .map(|(_, t)| t.iter().map(|x| x * x).sum::<f64>())
            .sum();
        let norm = norm_sq.sqrt();
        let scale = if norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };
        let velocity = self.velocity.get_or_insert_with(|| params.zeros_like());
        let grads = grad.tensors();
        let vels = velocity.tensors_mut();
        let ps = params.tensors_mut();
        for (((name, p), (_, v)), (_, g)) in ps.into_iter().zip(vels).zip(grads) {
            if !selected(&name) {
                continue;
            }
            v.zip_mut_with(g, |v, &g| *v = self.momentum * *v + scale * g);
            p.scaled_add(-lr, v);
        }
    }
}

fn example_id(example: &TrainingExample) -> String {
    format!("{}#{}", example.window.user_id, example.window.index)
}

impl Recommender {
    /// One update on the averaged gradient of `batch`. Returns the mean
    /// pre-update loss.
    pub fn train_batch(
        &mut self,
        batch: &[&TrainingExample],
        lr: f64,
        optimizer: &mut Optimizer,
        train_encoder: bool,
    ) -> Result<f64, ModelError> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(ModelError::BadLearningRate(lr));
        }
        if batch.is_empty() {
            return Ok(0.0);
        }
        let mut grad = self.params.zeros_like();
        let mut total = 0.0;
        for ex in batch {
            let loss = self.accumulate_grad(ex, train_encoder, &mut grad);
            if !loss.is_finite() {
                return Err(ModelError::NonFinite { loss, step: self.step + 1, lr, example: example_id(ex) });
            }
            total += loss;
        }
        let n = batch.len() as f64;
        for (_, t) in grad.tensors_mut() {
            *t /= n;
        }
        optimizer.apply(&mut self.params, &grad, lr, true, train_encoder);
        self.step += 1;
        Ok(total / n)
    }

    /// Single-example update with a momentum-free, unclipped optimizer.
    pub fn train_step(&mut self, example: &TrainingExample, lr: f64) -> Result<f64, ModelError> {
        let mut opt = Optimizer::new(0.0, f64::INFINITY);
        self.train_batch(&[example], lr, &mut opt, false)
    }

    /// Hit@1 on `examples` with each example's own mode.
    pub fn hit_rate_at_1(&self, examples: &[TrainingExample]) -> f64 {
        if examples.is_empty() {
            return 0.0;
        }
        let hits = examples.iter().filter(|ex| argmax(&self.score_slate(ex)) == Some(ex.slate.target_index)).count();
        hits as f64 / examples.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderPretrainSettings {
    pub epochs: usize,
    pub lr: f64,
    pub negatives: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for EncoderPretrainSettings {
    fn default() -> Self {
        Self { epochs: 8, lr: 0.05, negatives: 16, batch_size: 16, seed: 7 }
    }
}

/// Next-item loss for one sequence: every position predicts its successor
/// against sampled negatives. Returns the summed loss.
fn next_item_grad<R: Rng>(
    model: &Recommender,
    rows: &[usize],
    negatives: usize,
    rng: &mut R,
    grad: &mut Params,
) -> f64 {
    let enc = &model.params.encoder;
    let n_items = enc.item_emb.nrows();
    let inputs: Vec<Option<usize>> = rows[..rows.len() - 1].iter().map(|&r| Some(r)).collect();
    let cache = encoder_forward(enc, &inputs, model.config.heads);
    let mut d_out = Array2::zeros(cache.out.raw_dim());
    let mut loss = 0.0;
    for (q, &target) in rows[1..].iter().enumerate() {
        let mut cands = vec![target];
        while cands.len() < negatives + 1 {
            let r = rng.random_range(0..n_items);
            if r != target {
                cands.push(r);
            }
        }
        let h = cache.out.row(q);
        let scores = Array1::from_iter(cands.iter().map(|&c| h.dot(&enc.item_emb.row(c))));
        let max = scores.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let exp = scores.mapv(|x| (x - max).exp());
        let z = exp.sum();
        loss += max + z.ln() - scores[0];
        let mut p = exp / z;
        p[0] -= 1.0;
        let mut dh = d_out.row_mut(q);
        for (j, &c) in cands.iter().enumerate() {
            dh.scaled_add(p[j], &enc.item_emb.row(c));
            let mut ge = grad.encoder.item_emb.row_mut(c);
            ge.scaled_add(p[j], &h);
        }
    }
    encoder_backward(enc, &cache, &d_out, model.config.heads, &mut grad.encoder);
    loss
}

/// Re-initialises the collaborative encoder over the items of `sequences`
/// and trains it with next-item prediction. Each sequence is an ordered
/// list of item ids; only the last `max_len + 1` are used. Returns the
/// mean loss per epoch.
pub fn pretrain_encoder(
    model: &mut Recommender,
    sequences: &[Vec<String>],
    settings: &EncoderPretrainSettings,
) -> Result<Vec<f64>, ModelError> {
    if !(settings.lr > 0.0) {
        return Err(ModelError::BadLearningRate(settings.lr));
    }
    let vocab = ItemVocab::new(sequences.iter().flatten().cloned());
    model.reset_encoder(vocab, settings.seed);
    let max_len = model.config.max_len;
    let seqs: Vec<Vec<usize>> = sequences
        .iter()
        .filter(|s| s.len() >= 2)
        .map(|s| {
            let tail = &s[s.len().saturating_sub(max_len + 1)..];
            tail.iter().map(|id| model.vocab.get(id).expect("id in vocab")).collect()
        })
        .collect();
    let n_items = model.vocab.len();
    let mut epoch_losses = Vec::with_capacity(settings.epochs);
    if seqs.is_empty() || n_items < 2 {
        model.set_encoder_trained(true);
        return Ok(epoch_losses);
    }
    let negatives = settings.negatives.min(n_items - 1).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut opt = Optimizer::default();
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    for _ in 0..settings.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(settings.batch_size.max(1)) {
            let mut grad = model.params.zeros_like();
            let mut positions = 0usize;
            for &i in chunk {
                total += next_item_grad(model, &seqs[i], negatives, &mut rng, &mut grad);
                positions += seqs[i].len() - 1;
            }
            count += positions;
            for (_, t) in grad.tensors_mut() {
                *t /= positions as f64;
            }
            opt.apply(&mut model.params, &grad, settings.lr, false, true);
        }
        let mean = total / count as f64;
        if !mean.is_finite() {
            return Err(ModelError::NonFinite { loss: mean, step: 0, lr: settings.lr, example: "encoder pre-training".into() });
        }
        epoch_losses.push(mean);
    }
    model.set_encoder_trained(true);
    Ok(epoch_losses)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CptReport {
    /// Mean batch loss per step, in step order.
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
    pub steps: u64,
}

impl CptReport {
    /// Mean loss over the first and last `frac` of steps.
    pub fn progress(&self, frac: f64) -> Option<(f64, f64)> {
        let n = ((self.losses.len() as f64 * frac).ceil() as usize).max(1);
        if self.losses.len() < 2 * n {
            return None;
        }
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        Some((mean(&self.losses[..n]), mean(&self.losses[self.losses.len() - n..])))
    }
}

/// Consumes `stream` once, one optimizer step per batch at the batch's
/// scheduled learning rate. CPT examples are text-only, so only the scorer
/// and bias move. On return the model's step counter equals the plan's
/// final step.
pub fn cpt_run(
    model: &mut Recommender,
    stream: StageStream<TrainingExample>,
    optimizer: &mut Optimizer,
) -> Result<CptReport, ModelError> {
    let end = stream.plan().anneal_end;
    let mut report = CptReport { losses: Vec::with_capacity(stream.len()), lrs: Vec::with_capacity(stream.len()), steps: 0 };
    for batch in stream {
        let refs: Vec<&TrainingExample> = batch.items.iter().collect();
        let loss = if batch.lr > 0.0 {
            model.step = batch.step - 1;
            model.train_batch(&refs, batch.lr, optimizer, false)?
        } else {
            // lr(0) is the only zero-rate step and never carries data, but a
            // zero-rate plan must still advance.
            refs.iter().map(|e| model.loss(e)).sum::<f64>() / refs.len() as f64
        };
        report.losses.push(loss);
        report.lrs.push(batch.lr);
        report.steps = batch.step;
    }
    model.bump_step(end);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftSettings {
    pub lr_grid: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Draw hybrid prompts with probability `tau / T` within each epoch.
    /// When off, every example stays text-only.
    pub curriculum: bool,
    /// Update the collaborative encoder too (it is frozen otherwise).
    pub train_encoder: bool,
    pub momentum: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for SftSettings {
    fn default() -> Self {
        Self {
            lr_grid: vec![6e-4, 3e-4, 1e-4],
            epochs: 3,
            batch_size: 1,
            curriculum: true,
            train_encoder: false,
            momentum: 0.9,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

/// One validation measurement during the search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftTrial {
    pub lr: f64,
    pub epoch: usize,
    pub valid_hr1: f64,
    pub hybrid_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct SftOutcome {
    pub model: Recommender,
    pub lr: f64,
    pub epoch: usize,
    pub valid_hr1: f64,
    pub trials: Vec<SftTrial>,
}

/// Modes for one epoch of `n` examples: position `tau` is hybrid with
/// probability `tau / n`.
pub fn curriculum_modes<R: Rng>(n: usize, rng: &mut R) -> Vec<PromptMode> {
    (0..n)
        .map(|tau| {
            let p = curriculum_p(CurriculumState::new(tau as u64, n as u64).expect("tau < n"));
            if rng.random::<f64>() < p {
                PromptMode::Hybrid
            } else {
                PromptMode::TextOnly
            }
        })
        .collect()
}

/// Fine-tunes a copy of `init` once per learning rate in the grid and keeps
/// the epoch with the best validation HR@1 (earliest on ties, first grid
/// entry across ties). The untrained epoch 0 is only a candidate when
/// `epochs == 0`, in which case `init` is returned unchanged.
///
/// Validation examples are scored in hybrid mode when curriculum training
/// is on, and text-only otherwise.
pub fn sft_run(
    init: &Recommender,
    train: &[TrainingExample],
    valid: &[TrainingExample],
    settings: &SftSettings,
) -> Result<SftOutcome, ModelError> {
    if settings.curriculum && !init.encoder_trained() {
        return Err(ModelError::EncoderMissing);
    }
    if let Some(&bad) = settings.lr_grid.iter().find(|lr| !(**lr > 0.0 && lr.is_finite())) {
        return Err(ModelError::BadLearningRate(bad));
    }
    let eval_mode = if settings.curriculum { PromptMode::Hybrid } else { PromptMode::TextOnly };
    let valid: Vec<TrainingExample> = valid.iter().map(|e| e.with_mode(eval_mode)).collect();
    if settings.epochs == 0 || settings.lr_grid.is_empty() {
        let hr = init.hit_rate_at_1(&valid);
        let trial = SftTrial { lr: 0.0, epoch: 0, valid_hr1: hr, hybrid_fraction: 0.0 };
        return Ok(SftOutcome { model: init.clone(), lr: 0.0, epoch: 0, valid_hr1: hr, trials: vec![trial] });
    }

    let mut best: Option<SftOutcome> = None;
    let mut trials = Vec::new();
    for &lr in &settings.lr_grid {
        let mut model = init.clone();
        let mut opt = Optimizer::new(settings.momentum, settings.clip_norm);
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 1..=settings.epochs {
            order.shuffle(&mut rng);
            let modes = if settings.curriculum {
                curriculum_modes(order.len(), &mut rng)
            } else {
                vec![PromptMode::TextOnly; order.len()]
            };
            let epoch_examples: Vec<TrainingExample> =
                order.iter().zip(&modes).map(|(&i, &m)| train[i].with_mode(m)).collect();
            for chunk in epoch_examples.chunks(settings.batch_size.max(1)) {
                let refs: Vec<&TrainingExample> = chunk.iter().collect();
                model.train_batch(&refs, lr, &mut opt, settings.train_encoder)?;
            }
            let hybrid = modes.iter().filter(|m| **m == PromptMode::Hybrid).count();
            let hr = model.hit_rate_at_1(&valid);
            let trial = SftTrial {
                lr,
                epoch,
                valid_hr1: hr,
                hybrid_fraction: if modes.is_empty() { 0.0 } else { hybrid as f64 / modes.len() as f64 },
            };
            log::info!("sft lr={lr:e} epoch={epoch} valid_hr1={hr:.4} hybrid={:.3}", trial.hybrid_fraction);
            trials.push(trial);
            if best.as_ref().is_none_or(|b| hr > b.valid_hr1) {
                best = Some(SftOutcome { model: model.clone(), lr, epoch, valid_hr1: hr, trials: Vec::new() });
            }
        }
    }
    let mut out = best.expect("non-empty grid and epochs");
    out.trials = trials;
    Ok(out)
}
