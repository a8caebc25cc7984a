//! Warmup-Stable-Annealing learning rates, the hybrid-prompt curriculum
//! probability, and phase-aware routing of training data.
//!
//! With phase ends `W <= S <= A` and bounds `lr_min <= lr_max`:
//!
//! ```text
//! lr(s) = lr_min + (s / W) (lr_max - lr_min)      s <= W
//!       = lr_max                                  W < s <= S
//!       = lr_min + f(s) (lr_max - lr_min)         S < s <= A
//! f(s)  = (1 + cos(pi (s - S) / (A - S))) / 2
//! ```
//!
//! Steps are optimizer updates. Warm-up and stable steps consume
//! domain-specific examples; annealing steps consume mixed examples.

use std::f64::consts::PI;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("invalid schedule plan: {0}")]
    InvalidPlan(String),
    #[error("step {step} is past the end of the schedule ({end})")]
    Exhausted { step: u64, end: u64 },
    #[error("invalid curriculum state: tau={tau}, total={total}")]
    InvalidCurriculum { tau: u64, total: u64 },
    #[error("{phase} data yields {available} steps but the plan reserves {planned}")]
    PhaseMismatch { phase: Phase, planned: u64, available: u64 },
}

/// Phase boundaries and learning-rate bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulePlan {
    pub warmup_end: u64,
    pub stable_end: u64,
    pub anneal_end: u64,
    pub lr_min: f64,
    pub lr_max: f64,
}

impl SchedulePlan {
    pub fn new(warmup_end: u64, stable_end: u64, anneal_end: u64, lr_min: f64, lr_max: f64) -> Result<Self, ScheduleError> {
        let plan = Self { warmup_end, stable_end, anneal_end, lr_min, lr_max };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        if !(self.warmup_end > 0 && self.warmup_end <= self.stable_end && self.stable_end <= self.anneal_end) {
            return Err(ScheduleError::InvalidPlan(format!(
                "need 0 < W <= S <= A, got W={}, S={}, A={}",
                self.warmup_end, self.stable_end, self.anneal_end
            )));
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return Err(ScheduleError::InvalidPlan(format!(
                "need 0 < lr_min <= lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        Ok(())
    }

    pub fn phase(&self, step: u64) -> Phase {
        if step <= self.warmup_end {
            Phase::Warmup
        } else if step <= self.stable_end {
            Phase::Stable
        } else {
            Phase::Annealing
        }
    }

    pub fn annealing_empty(&self) -> bool {
        self.anneal_end == self.stable_end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Stable,
    Annealing,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Warmup => "warmup",
            Phase::Stable => "stable",
            Phase::Annealing => "annealing",
        })
    }
}

/// Cosine decay from 1 at `S` to 0 at `A`. Callers keep `S < s <= A`;
/// outside that range the progress is clamped.
pub fn cosine_anneal_f(step: u64, stable_end: u64, anneal_end: u64) -> f64 {
    debug_assert!(stable_end < anneal_end);
    let span = (anneal_end - stable_end) as f64;
    let progress = ((step as f64 - stable_end as f64) / span).clamp(0.0, 1.0);
    0.5 * (1.0 + (PI * progress).cos())
}

/// The WSA learning rate at `step` (0 ..= A).
pub fn wsa_lr(step: u64, plan: &SchedulePlan) -> Result<f64, ScheduleError> {
    LrCurve::Wsa.lr(step, plan)
}

/// Learning-rate curves over a plan. `Wsa` is the main schedule; the other
/// two are ablation baselines.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrCurve {
    #[default]
    Wsa,
    /// No annealing: the rate stays at `lr_max` through the final step.
    WarmupStable,
    /// Warm-up, then a single cosine decay over `(W, A]` with no plateau.
    WarmupCosine,
}

impl LrCurve {
    pub fn lr(self, step: u64, plan: &SchedulePlan) -> Result<f64, ScheduleError> {
        let SchedulePlan { warmup_end: w, stable_end: s, anneal_end: a, lr_min, lr_max } = *plan;
        if step > a {
            return Err(ScheduleError::Exhausted { step, end: a });
        }
        let span = lr_max - lr_min;
        if step == w {
            // lr_min + span can miss lr_max by an ulp.
            return Ok(lr_max);
        }
        if step < w {
            return Ok(lr_min + (step as f64 / w as f64) * span);
        }
        Ok(match self {
            LrCurve::Wsa if step <= s => lr_max,
            LrCurve::Wsa => lr_min + cosine_anneal_f(step, s, a) * span,
            LrCurve::WarmupStable => lr_max,
            LrCurve::WarmupCosine => lr_min + cosine_anneal_f(step, w, a) * span,
        })
    }
}

/// Position within one epoch, for the text-only to hybrid curriculum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CurriculumState {
    tau: u64,
    total: u64,
}

impl CurriculumState {
    pub fn new(tau: u64, total: u64) -> Result<Self, ScheduleError> {
        if total == 0 || tau > total {
            return Err(ScheduleError::InvalidCurriculum { tau, total });
        }
        Ok(Self { tau, total })
    }

    pub fn tau(&self) -> u64 {
        self.tau
    }

    pub fn total(&self) -> u64 {
        self.total
    }
}

/// Probability of presenting a hybrid prompt: `tau / T`.
pub fn curriculum_p(state: CurriculumState) -> f64 {
    state.tau as f64 / state.total as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanSettings {
    pub lr_min: f64,
    pub lr_max: f64,
    /// Warm-up length as a fraction of the domain-specific examples.
    pub warmup_frac: f64,
    pub batch_size: usize,
}

impl Default for PlanSettings {
    fn default() -> Self {
        Self { lr_min: 5e-6, lr_max: 5e-4, warmup_frac: 0.05, batch_size: 1 }
    }
}

/// `ceil(x)` that does not round `50.000000000000004` up to 51.
fn ceil_tolerant(x: f64) -> u64 {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r as u64
    } else {
        x.ceil() as u64
    }
}

fn batches(n: usize, batch_size: usize) -> u64 {
    n.div_ceil(batch_size) as u64
}

/// Derives a one-epoch plan from example counts:
/// `W = ceil(frac * n_ds / b)`, `S = ceil(n_ds / b)`, `A = S + ceil(n_mix / b)`.
pub fn build_plan(n_domain_specific: usize, n_mixed: usize, settings: &PlanSettings) -> Result<SchedulePlan, ScheduleError> {
    if n_domain_specific == 0 {
        return Err(ScheduleError::InvalidPlan("no domain-specific examples".into()));
    }
    if settings.batch_size == 0 {
        return Err(ScheduleError::InvalidPlan("batch size must be positive".into()));
    }
    if !(settings.warmup_frac > 0.0 && settings.warmup_frac < 1.0) {
        return Err(ScheduleError::InvalidPlan(format!("warmup fraction {} not in (0, 1)", settings.warmup_frac)));
    }
    let warmup = ceil_tolerant(settings.warmup_frac * n_domain_specific as f64 / settings.batch_size as f64).max(1);
    let stable = batches(n_domain_specific, settings.batch_size);
    let anneal = stable + batches(n_mixed, settings.batch_size);
    if n_mixed == 0 {
        log::warn!("no mixed examples: the annealing phase is empty");
    }
    SchedulePlan::new(warmup, stable, anneal, settings.lr_min, settings.lr_max)
}

/// How examples are assigned to steps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataRouting {
    /// Domain-specific data in warm-up and stable, mixed data in annealing.
    #[default]
    Staged,
    /// Both pools shuffled together and spread over all steps.
    Indiscriminate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamSettings {
    pub batch_size: usize,
    pub seed: u64,
    pub curve: LrCurve,
    pub routing: DataRouting,
}

/// One optimizer step's worth of data.
#[derive(Debug, Clone, PartialEq)]
pub struct StageBatch<T> {
    /// 1-based step.
    pub step: u64,
    pub lr: f64,
    pub phase: Phase,
    pub items: Vec<T>,
}

/// Ordered single-pass iterator over the batches of a plan.
#[derive(Debug)]
pub struct StageStream<T> {
    plan: SchedulePlan,
    curve: LrCurve,
    batches: std::vec::IntoIter<Vec<T>>,
    step: u64,
}

impl<T> StageStream<T> {
    pub fn plan(&self) -> &SchedulePlan {
        &self.plan
    }
}

impl<T> Iterator for StageStream<T> {
    type Item = StageBatch<T>;

    fn next(&mut self) -> Option<Self::Item> {
        let items = self.batches.next()?;
        self.step += 1;
        let lr = self.curve.lr(self.step, &self.plan).expect("batch count validated against the plan");
        Some(StageBatch { step: self.step, lr, phase: self.plan.phase(self.step), items })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.batches.size_hint()
    }
}

impl<T> ExactSizeIterator for StageStream<T> {}

fn chunk<T>(items: Vec<T>, batch_size: usize) -> Vec<Vec<T>> {
    let mut out = Vec::with_capacity(items.len().div_ceil(batch_size));
    let mut iter = items.into_iter().peekable();
    while iter.peek().is_some() {
        out.push(iter.by_ref().take(batch_size).collect());
    }
    out
}

/// Shuffles each pool with `seed` and lays it out over the plan's steps.
/// Every input example is emitted exactly once.
pub fn stage_stream<T>(
    mut domain_examples: Vec<T>,
    mut mixed_examples: Vec<T>,
    plan: SchedulePlan,
    settings: &StreamSettings,
) -> Result<StageStream<T>, ScheduleError> {
    plan.validate()?;
    let b = settings.batch_size.max(1);
    let ds_steps = batches(domain_examples.len(), b);
    let mix_steps = batches(mixed_examples.len(), b);
    if ds_steps != plan.stable_end {
        return Err(ScheduleError::PhaseMismatch { phase: Phase::Stable, planned: plan.stable_end, available: ds_steps });
    }
    if mix_steps != plan.anneal_end - plan.stable_end {
        return Err(ScheduleError::PhaseMismatch {
            phase: Phase::Annealing,
            planned: plan.anneal_end - plan.stable_end,
            available: mix_steps,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let batches = match settings.routing {
        DataRouting::Staged => {
            domain_examples.shuffle(&mut rng);
            mixed_examples.shuffle(&mut rng);
            let mut out = chunk(domain_examples, b);
            out.extend(chunk(mixed_examples, b));
            out
        }
        DataRouting::Indiscriminate => {
            // Same batch sizes as the staged layout, pooled contents.
            let sizes: Vec<usize> = chunk((0..domain_examples.len()).collect::<Vec<_>>(), b)
                .into_iter()
                .chain(chunk((0..mixed_examples.len()).collect::<Vec<_>>(), b))
                .map(|c| c.len())
                .collect();
            let mut pooled = domain_examples;
            pooled.append(&mut mixed_examples);
            pooled.shuffle(&mut rng);
            let mut iter = pooled.into_iter();
            sizes.into_iter().map(|n| iter.by_ref().take(n).collect()).collect()
        }
    };
    Ok(StageStream { plan, curve: settings.curve, batches: batches.into_iter(), step: 0 })
}

/// `step,lr,phase` rows for steps `0..=A`, with a header.
pub fn lr_curve_csv(plan: &SchedulePlan, curve: LrCurve) -> String {
    let mut out = String::from("step,lr,phase\n");
    for step in 0..=plan.anneal_end {
        let lr = curve.lr(step, plan).expect("step within plan");
        out.push_str(&format!("{step},{lr:.12e},{}\n", plan.phase(step)));
    }
    out
}

/// Human-readable phase table.
pub fn schedule_table(plan: &SchedulePlan) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<10} {:>12} {:>12} {:>14} {:>14}\n", "phase", "first_step", "last_step", "lr_start", "lr_end"));
    let rows = [
        (Phase::Warmup, 0, plan.warmup_end),
        (Phase::Stable, plan.warmup_end + 1, plan.stable_end),
        (Phase::Annealing, plan.stable_end + 1, plan.anneal_end),
    ];
    for (phase, first, last) in rows {
        if first > last {
            out.push_str(&format!("{:<10} {:>12} {:>12} {:>14} {:>14}\n", phase, "-", "-", "-", "-"));
            continue;
        }
        let start = wsa_lr(first, plan).expect("in range");
        let end = wsa_lr(last, plan).expect("in range");
        out.push_str(&format!("{phase:<10} {first:>12} {last:>12} {start:>14.6e} {end:>14.6e}\n"));
    }
    out
}
