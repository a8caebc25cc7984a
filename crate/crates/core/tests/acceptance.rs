//! Acceptance suite. Prints one `criterion N: PASS|FAIL` line per
//! criterion and exits non-zero if any fails.
//!
//! Criteria 9 and 11 run the bundled synthetic pipeline end to end. Set
//! `RECPT_ACCEPTANCE_SKIP_PIPELINE=1` to skip them during development; they
//! are then reported as `SKIP`, which still counts as a failure.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::*;
use rand::Rng;
use recpt::corpus::{dataset_stats, kcore_filter, Interaction, InteractionLog};
use recpt::eval::{hr_at_k, ndcg_at_k, ordered_generation, rank_target, valid_ratio, EvalRecord, MetricReport, SlateScorer};
use recpt::mixer::{build_mixed_sequences, validate_window, window_sequences, WindowBounds};
use recpt::model::{curriculum_modes, EmissionChannel, Passthrough};
use recpt::pipeline::{Pipeline, RunConfig, Stage, MANIFEST_FILE};
use recpt::prompting::PromptMode;
use recpt::scheduler::{build_plan, wsa_lr, PlanSettings, SchedulePlan};

struct Outcome {
    pass: bool,
    detail: String,
}

fn pass_if(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn c1_boundaries() -> Outcome {
    let (lo, hi) = (5e-6, 5e-4);
    let plan = SchedulePlan::new(50, 1000, 1600, lo, hi).unwrap();
    let at = |s| wsa_lr(s, &plan).unwrap();
    let checks = [(0, lo), (50, hi), (1000, hi), (1600, lo), (1300, (lo + hi) / 2.0)];
    let worst = checks.iter().map(|&(s, want)| (at(s) - want).abs()).fold(0.0, f64::max);
    // The same boundaries from example counts with the default settings.
    let derived = build_plan(1000, 600, &PlanSettings::default()).unwrap();
    let same = derived == plan;
    pass_if(worst <= 1e-12 && same, format!("max boundary error {worst:.1e}, midpoint {:.10e}, plan from counts {}", at(1300), if same { "matches" } else { "differs" }))
}

/// Written directly from the piecewise definition.
fn reference_lr(s: u64, w: u64, st: u64, a: u64, lo: f64, hi: f64) -> f64 {
    if s <= w {
        lo + (hi - lo) * s as f64 / w as f64
    } else if s <= st {
        hi
    } else {
        let x = (s - st) as f64 / (a - st) as f64;
        lo + (hi - lo) * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
    }
}

fn c2_shape() -> Outcome {
    let mut r = rng(2);
    let mut worst = 0.0f64;
    let mut violations = 0;
    for _ in 0..100 {
        let w = r.random_range(1..200);
        let st = w + r.random_range(0..2000);
        let a = st + r.random_range(0..2000);
        let lo = 10f64.powf(r.random_range(-7.0..-4.0));
        let hi = lo * r.random_range(1.0..1000.0);
        let plan = SchedulePlan::new(w, st, a, lo, hi).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for s in 0..=a {
            let lr = wsa_lr(s, &plan).unwrap();
            worst = worst.max((lr - reference_lr(s, w, st, a, lo, hi)).abs());
            let ok = lr >= lo && lr <= hi
                && match s {
                    0 => true,
                    s if s <= w => lr >= prev,
                    s if s <= st => lr == hi,
                    _ => lr <= prev,
                };
            if !ok {
                violations += 1;
            }
            prev = lr;
        }
    }
    pass_if(violations == 0 && worst <= 1e-12, format!("{violations} shape violations, max deviation from reference {worst:.1e}"))
}

fn c3_curriculum() -> Outcome {
    let modes = curriculum_modes(10_000, &mut rng(3));
    let frac = modes.iter().filter(|&&m| m == PromptMode::Hybrid).count() as f64 / modes.len() as f64;
    pass_if((0.49..=0.51).contains(&frac), format!("hybrid fraction {frac:.4}"))
}

fn c4_kcore() -> Outcome {
    let mut r = rng(4);
    let (mut mismatches, mut not_idempotent) = (0, 0);
    for _ in 0..200 {
        let users = r.random_range(1..=30);
        let items = r.random_range(1..=30);
        let density = r.random_range(0.05..=0.5);
        let log = random_bipartite(&mut r, users, items, density);
        let once = kcore_filter(&log, 3);
        if pairs(&once) != brute_kcore(&log, 3) {
            mismatches += 1;
        }
        if kcore_filter(&once, 3) != once {
            not_idempotent += 1;
        }
    }
    pass_if(mismatches == 0 && not_idempotent == 0, format!("{mismatches} oracle mismatches, {not_idempotent} non-idempotent of 200"))
}

fn c5_guidelines() -> Outcome {
    let mut r = rng(5);
    let (mut emitted, mut failing, mut false_drops, mut missed, mut bad_seq) = (0, 0, 0, 0, 0);
    for _ in 0..500 {
        let users = r.random_range(1..12);
        let log = random_multi_domain(&mut r, users, &["a", "b", "c"], 25);
        let seqs = build_mixed_sequences(&log);
        for s in &seqs {
            let sorted = s.items.windows(2).all(|p| p[0].chrono_cmp(&p[1]).is_lt());
            if !sorted || s.domains().len() < 2 {
                bad_seq += 1;
            }
        }
        let set = window_sequences(&seqs, WindowBounds::default()).unwrap();
        emitted += set.windows.len();
        failing += set.windows.iter().filter(|w| !validate_window(w).is_empty() || independent_rules(&w.history, &w.target) != (true, true)).count();
        // Re-cut every prefix independently and count what should survive.
        let mut expected = 0usize;
        let mut expected_drops = 0usize;
        for s in &seqs {
            for q in 3..s.items.len() {
                let hist = &s.items[q.saturating_sub(10)..q];
                if independent_rules(hist, &s.items[q]) == (true, true) {
                    expected += 1;
                } else {
                    expected_drops += 1;
                }
            }
        }
        false_drops += set.dropped_mixed.saturating_sub(expected_drops);
        missed += expected.abs_diff(set.windows.len());
    }
    pass_if(
        failing == 0 && false_drops == 0 && missed == 0 && bad_seq == 0 && emitted > 0,
        format!("{emitted} mixed windows, {failing} failing a rule, {false_drops} false drops, {missed} count mismatches, {bad_seq} malformed sequences"),
    )
}

fn c6_metrics() -> Outcome {
    let mut r = rng(6);
    let mut worst = 0.0f64;
    let mut rank_errors = 0;
    let mut records = Vec::new();
    for i in 0..1000 {
        // Coarse scores on half the slates so ties occur.
        let scores: Vec<f64> = (0..20).map(|_| if i % 2 == 0 { r.random_range(0..5) as f64 } else { r.random::<f64>() }).collect();
        let target = r.random_range(0..20);
        let rank = rank_target(&scores, target).unwrap();
        if rank != sort_rank(&scores, target) {
            rank_errors += 1;
        }
        records.push(EvalRecord { user_id: format!("u{i}"), rank, valid: true, history_length: r.random_range(3..=10) });
    }
    for k in [1, 3, 5, 10, 20] {
        let hits: Vec<&EvalRecord> = records.iter().filter(|x| x.rank <= k).collect();
        let hr = hits.len() as f64 / records.len() as f64;
        let ndcg = hits.iter().map(|x| 1.0 / (x.rank as f64 + 1.0).log2()).sum::<f64>() / records.len() as f64;
        worst = worst.max((hr_at_k(&records, k).unwrap() - hr).abs()).max((ndcg_at_k(&records, k).unwrap() - ndcg).abs());
    }
    let report = MetricReport::from_records(&records, 0, &[1, 3, 5]).unwrap();
    let hr = |k| report.get("all", "hr", k).unwrap();
    let monotone = hr(1) <= hr(3) && hr(3) <= hr(5);
    let mut identity = 0.0f64;
    for metric in ["hr", "ndcg"] {
        for k in [1, 3, 5] {
            let (mut num, mut den) = (0.0, 0.0);
            for s in ["sparse", "medium", "dense"] {
                let n = report.get(s, "count", 0).unwrap();
                if n > 0.0 {
                    num += n * report.get(s, metric, k).unwrap();
                    den += n;
                }
            }
            identity = identity.max((num / den - report.get("all", metric, k).unwrap()).abs());
        }
    }
    let one = [EvalRecord { user_id: "u".into(), rank: 2, valid: true, history_length: 3 }];
    let spot = ndcg_at_k(&one, 5).unwrap();
    let spot_ok = (spot - 1.0 / 3f64.log2()).abs() <= 1e-12 && format!("{spot:.4}") == "0.6309";
    pass_if(
        rank_errors == 0 && worst <= 1e-12 && monotone && identity <= 1e-12 && spot_ok,
        format!("{rank_errors} rank mismatches, max metric error {worst:.1e}, monotone {monotone}, subset identity error {identity:.1e}, NDCG(rank 2) {spot:.4}"),
    )
}

/// A log with exactly the requested counts: interaction `n` pairs user
/// `n mod users` with item `n mod items` at a distinct timestamp.
fn exact_log(users: usize, items: usize, interactions: usize) -> InteractionLog {
    InteractionLog::from_interactions((0..interactions).map(|n| Interaction {
        user_id: format!("u{}", n % users),
        item_id: format!("i{}", n % items),
        domain: "d".into(),
        timestamp: n as u64,
        title: format!("item {}", n % items),
    }))
}

fn c7_sparsity() -> Outcome {
    let a = dataset_stats(&exact_log(4564, 3058, 30302));
    let b = dataset_stats(&exact_log(7501, 3547, 48240));
    let counts = (a.users, a.items, a.interactions, b.users, b.items, b.interactions) == (4564, 3058, 30302, 7501, 3547, 48240);
    let (da, db) = (a.sparsity_display(), b.sparsity_display());
    pass_if(counts && da == "99.78%" && db == "99.82%", format!("{da} and {db}, counts exact {counts}"))
}

fn c8_gradients() -> Outcome {
    let mut r = rng(8);
    let mut worst = (String::new(), 0.0f64);
    let mut covered = BTreeSet::new();
    for i in 0..20 {
        let m = randomized(tiny_config(), 14, 100 + i);
        let hist: Vec<usize> = (0..r.random_range(3..=6)).map(|_| r.random_range(0..14)).collect();
        let n = r.random_range(2..=8);
        // Index 20 is outside the item vocabulary, so some candidates are cold.
        let cands: Vec<usize> = (0..n).map(|_| r.random_range(0..=20)).collect();
        let ex = example(&hist, &cands, r.random_range(0..n), PromptMode::Hybrid);
        let (name, err) = worst_gradient_error(&m, &ex, true);
        let (_, grad) = m.loss_and_grad(&ex, true);
        for (name, g) in grad.tensors() {
            if g.iter().any(|&x| x != 0.0) {
                covered.insert(name.split('.').take(2).collect::<Vec<_>>().join("."));
            }
        }
        if err > worst.1 {
            worst = (name, err);
        }
    }
    let families = ["adapter.proj", "encoder.item_emb", "encoder.block"];
    let all_covered = families.iter().all(|f| covered.iter().any(|c| c.starts_with(f)));
    pass_if(worst.1 < 1e-4 && all_covered, format!("max relative error {:.2e} ({}), projector/attention/embedding gradients exercised {all_covered}", worst.1, worst.0))
}

/// Corrupts every `every`-th emission.
struct Corrupting {
    every: usize,
    n: usize,
}

impl EmissionChannel for Corrupting {
    fn emit(&mut self, title: &str) -> String {
        self.n += 1;
        if self.n.is_multiple_of(self.every) {
            format!("{title} (remastered)")
        } else {
            title.to_string()
        }
    }
}

fn c10_generation() -> Outcome {
    let mut r = rng(10);
    let (mut mismatched, mut malformed) = (0, 0);
    let mut examples = Vec::new();
    let mut models = Vec::new();
    for i in 0..1000 {
        let m = randomized(tiny_config(), 30, 1000 + i);
        let hist: Vec<usize> = (0..r.random_range(3..=10)).map(|_| r.random_range(0..30)).collect();
        let mut cands: Vec<usize> = (0..40).collect();
        for j in 0..20 {
            cands.swap(j, r.random_range(j..40));
        }
        cands.truncate(20);
        let mode = if i % 2 == 0 { PromptMode::Hybrid } else { PromptMode::TextOnly };
        let ex = example(&hist, &cands, r.random_range(0..20), mode);
        let got = ordered_generation(&m, &ex, 5).unwrap();
        let scores = m.score(&ex, &ex.slate.candidates);
        let mut order: Vec<usize> = (0..20).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let want: Vec<String> = order[..5].iter().map(|&j| ex.slate.candidates[j].item_id.clone()).collect();
        if got != want {
            mismatched += 1;
        }
        let distinct: BTreeSet<&String> = got.iter().collect();
        let in_slate = got.iter().all(|id| ex.slate.candidates.iter().any(|c| &c.item_id == id));
        if distinct.len() != 5 || !in_slate {
            malformed += 1;
        }
        examples.push(ex);
        models.push(m);
    }
    let slates: Vec<_> = examples.iter().map(|e| e.slate.clone()).collect();
    let argmax_gen: Vec<String> = models.iter().zip(&examples).map(|(m, e)| m.generate(e, &mut Passthrough)).collect();
    let mut channel = Corrupting { every: 10, n: 0 };
    let corrupted: Vec<String> = models.iter().zip(&examples).map(|(m, e)| m.generate(e, &mut channel)).collect();
    let clean = valid_ratio(&argmax_gen, &slates).unwrap();
    let dirty = valid_ratio(&corrupted, &slates).unwrap();
    pass_if(
        mismatched == 0 && malformed == 0 && clean == 1.0 && dirty == 0.9,
        format!("{mismatched} of 1000 differ from the sort oracle, {malformed} malformed, ValidRatio {clean} and {dirty}"),
    )
}

fn bundled_config(out: &Path) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.toml");
    let mut cfg = RunConfig::load(&path).expect("bundled config loads");
    cfg.run.out = out.to_path_buf();
    cfg
}

fn run_pipeline(out: &Path) -> Result<(Duration, String), String> {
    let started = Instant::now();
    let mut p = Pipeline::new(bundled_config(out)).map_err(|e| e.to_string())?;
    p.run(&Stage::ALL, false).map_err(|e| e.to_string())?;
    Ok((started.elapsed(), p.manifest().content_digest()))
}

/// `(arm, seed) -> all/hr@1` from an arm's metrics file.
fn per_seed_hr1(out: &Path, arm: &str) -> BTreeMap<u64, f64> {
    let text = std::fs::read_to_string(out.join(format!("eval/{arm}/metrics.csv"))).unwrap_or_default();
    text.lines()
        .skip(1)
        .filter_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f.len() == 6 && f[1] == "all" && f[2] == "hr" && f[3] == "1").then(|| Some((f[4].parse().ok()?, f[5].parse().ok()?)))?
        })
        .collect()
}

fn mean(v: &BTreeMap<u64, f64>) -> f64 {
    v.values().sum::<f64>() / v.len().max(1) as f64
}

fn c9_ordering(out: &Path, elapsed: Duration) -> Outcome {
    let a = per_seed_hr1(out, "cpt_sft");
    let b = per_seed_hr1(out, "sft_only");
    let c = per_seed_hr1(out, "cpt_only");
    let u = per_seed_hr1(out, "untrained");
    if [&a, &b, &c, &u].iter().any(|m| m.len() != 4) {
        return pass_if(false, "missing per-seed metrics");
    }
    let wins = a.iter().filter(|(s, v)| **v >= b[s]).count();
    let (ma, mb, mc, mu) = (mean(&a), mean(&b), mean(&c), mean(&u));
    let fast = elapsed < Duration::from_secs(600);
    pass_if(
        ma > mb && wins >= 3 && mc >= 2.0 * mu && fast,
        format!(
            "HR@1 cpt_sft {ma:.4} vs sft_only {mb:.4} (cpt_sft >= sft_only in {wins}/4 seeds), cpt_only {mc:.4} vs untrained {mu:.4} ({:.1}x), {:.0}s",
            mc / mu,
            elapsed.as_secs_f64()
        ),
    )
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

fn c11_reproducible(first: &Path, first_digest: &str, first_time: Duration, second: &Path) -> Outcome {
    let (t2, d2) = match run_pipeline(second) {
        Ok(x) => x,
        Err(e) => return pass_if(false, format!("second run failed: {e}")),
    };
    let checkpoints: Vec<PathBuf> =
        files_under(first).into_iter().filter(|p| p.file_name().is_some_and(|n| n == "checkpoint.bin")).collect();
    let differing = checkpoints
        .iter()
        .filter(|p| {
            let rel = p.strip_prefix(first).unwrap();
            std::fs::read(p).ok() != std::fs::read(second.join(rel)).ok()
        })
        .count();
    let m1 = std::fs::read_to_string(first.join(MANIFEST_FILE)).unwrap_or_default();
    let m2 = std::fs::read_to_string(second.join(MANIFEST_FILE)).unwrap_or_default();
    let total = first_time + t2;
    pass_if(
        first_digest == d2 && !m1.is_empty() && differing == 0 && !checkpoints.is_empty() && total < Duration::from_secs(1200),
        format!(
            "manifest digests {}, {differing} of {} checkpoints differ, manifest files {} bytes, {:.0}s total",
            if first_digest == d2 { "equal" } else { "differ" },
            checkpoints.len(),
            m1.len().max(m2.len()),
            total.as_secs_f64()
        ),
    )
}

fn report(n: u8, o: &Outcome, budget: Option<f64>, elapsed: Duration, failed: &mut Vec<u8>) {
    let over = budget.is_some_and(|b| elapsed.as_secs_f64() > b);
    let pass = o.pass && !over;
    let time = match budget {
        Some(b) => format!(" [{:.2}s, budget {b}s]", elapsed.as_secs_f64()),
        None => String::new(),
    };
    println!("criterion {n}: {} {}{time}", if pass { "PASS" } else { "FAIL" }, o.detail);
    if !pass {
        failed.push(n);
    }
}

type Criterion = (u8, fn() -> Outcome, f64);

fn main() {
    let mut failed = Vec::new();
    let fast: [Criterion; 8] = [
        (1, c1_boundaries, 1.0),
        (2, c2_shape, 5.0),
        (3, c3_curriculum, 1.0),
        (4, c4_kcore, 10.0),
        (5, c5_guidelines, 30.0),
        (6, c6_metrics, 5.0),
        (7, c7_sparsity, 5.0),
        (8, c8_gradients, 30.0),
    ];
    for (n, f, budget) in fast {
        let t = Instant::now();
        let o = f();
        report(n, &o, Some(budget), t.elapsed(), &mut failed);
    }

    let skip = std::env::var_os("RECPT_ACCEPTANCE_SKIP_PIPELINE").is_some();
    let dir = tempfile::tempdir().expect("temp dir");
    let (first, second) = (dir.path().join("first"), dir.path().join("second"));
    let first_run = if skip { Err("skipped".to_string()) } else { run_pipeline(&first) };
    match &first_run {
        _ if skip => {
            println!("criterion 9: SKIP pipeline criteria disabled by RECPT_ACCEPTANCE_SKIP_PIPELINE");
            failed.push(9);
        }
        // The runtime budget is checked inside.
        Ok((elapsed, _)) => report(9, &c9_ordering(&first, *elapsed), None, *elapsed, &mut failed),
        Err(e) => report(9, &pass_if(false, format!("pipeline error: {e}")), None, Duration::ZERO, &mut failed),
    }

    let t = Instant::now();
    let o = c10_generation();
    report(10, &o, Some(5.0), t.elapsed(), &mut failed);

    match &first_run {
        _ if skip => {
            println!("criterion 11: SKIP pipeline criteria disabled by RECPT_ACCEPTANCE_SKIP_PIPELINE");
            failed.push(11);
        }
        Ok((elapsed, digest)) => report(11, &c11_reproducible(&first, digest, *elapsed, &second), None, Duration::ZERO, &mut failed),
        Err(e) => report(11, &pass_if(false, format!("pipeline error: {e}")), None, Duration::ZERO, &mut failed),
    }

    if failed.is_empty() {
        println!("acceptance: all 11 criteria pass");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
