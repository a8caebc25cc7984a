//! Cross-run comparison tables.

use std::path::Path;

use super::PipelineError;
use crate::eval::{MetricKey, MetricReport, METRICS_CSV_HEADER};

/// Reads a metrics CSV. Rows labelled `mean` win when present; otherwise the
/// file must hold a single seed.
pub fn read_metrics_csv(path: &Path) -> Result<MetricReport, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    let bad = |line: usize, msg: &str| PipelineError::Corrupt(format!("{}:{line}: {msg}", path.display()));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == METRICS_CSV_HEADER => {}
        _ => return Err(bad(1, "missing metrics header")),
    }
    let mut by_seed: std::collections::BTreeMap<String, MetricReport> = Default::default();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad(i + 1, "expected 6 fields"));
        }
        let k: usize = f[3].parse().map_err(|_| bad(i + 1, "bad k"))?;
        let v: f64 = f[5].parse().map_err(|_| bad(i + 1, "bad value"))?;
        let r = by_seed.entry(f[4].to_string()).or_default();
        if let Ok(seed) = f[4].parse::<u64>() {
            if r.seeds.is_empty() {
                r.seeds.push(seed);
            }
        }
        r.values.insert(MetricKey::new(f[1], f[2], k), v);
    }
    if let Some(mut mean) = by_seed.remove("mean") {
        mean.seeds = by_seed.values().flat_map(|r| r.seeds.clone()).collect();
        return Ok(mean);
    }
    match by_seed.len() {
        1 => Ok(by_seed.into_values().next().expect("one entry")),
        0 => Err(bad(1, "no metric rows")),
        _ => Err(bad(1, "several seeds but no mean rows")),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub csv: String,
    pub text: String,
    /// Run names by descending `all/hr@1`, ties in input order.
    pub ordering: Vec<String>,
}

/// Relative change of `value` over `base`, as a signed percentage.
pub fn relative_improvement(base: f64, value: f64) -> Option<f64> {
    (base != 0.0).then(|| (value - base) / base * 100.0)
}

/// Side-by-side metrics. The first run is the baseline of every
/// improvement column.
pub fn compare_runs(runs: &[(String, MetricReport)]) -> Result<Comparison, PipelineError> {
    let (base_name, base) = runs.first().ok_or_else(|| PipelineError::Incompatible("no runs given".into()))?;
    for (name, r) in &runs[1..] {
        let a: Vec<&MetricKey> = base.values.keys().collect();
        let b: Vec<&MetricKey> = r.values.keys().collect();
        if a != b {
            let key = a.iter().find(|k| !r.values.contains_key(k)).or_else(|| b.iter().find(|k| !base.values.contains_key(k)));
            return Err(PipelineError::Incompatible(format!(
                "`{name}` and `{base_name}` disagree on metric {}",
                key.map(|k| k.to_string()).unwrap_or_default()
            )));
        }
    }
    let names: Vec<&str> = runs.iter().map(|(n, _)| n.as_str()).collect();
    let mut csv = String::from("subset,metric,k");
    for n in &names {
        csv.push_str(&format!(",{n}"));
    }
    for n in &names[1..] {
        csv.push_str(&format!(",{n}_vs_{base_name}_pct"));
    }
    csv.push('\n');

    let width = names.iter().map(|n| n.len()).max().unwrap_or(0).max(10);
    let mut text = format!("{:<22}", "metric");
    for n in &names {
        text.push_str(&format!(" {n:>width$}"));
    }
    for n in &names[1..] {
        text.push_str(&format!(" {:>width$}", format!("{n} vs base")));
    }
    text.push('\n');

    for key in base.values.keys().filter(|k| k.metric != "count") {
        csv.push_str(&format!("{},{},{}", key.subset, key.metric, key.k));
        text.push_str(&format!("{:<22}", key.to_string()));
        for (_, r) in runs {
            let v = r.values[key];
            csv.push_str(&format!(",{v}"));
            text.push_str(&format!(" {v:>width$.4}"));
        }
        for (_, r) in &runs[1..] {
            match relative_improvement(base.values[key], r.values[key]) {
                Some(p) => {
                    csv.push_str(&format!(",{p:.2}"));
                    text.push_str(&format!(" {:>width$}", format!("{p:+.2}%")));
                }
                None => {
                    csv.push(',');
                    text.push_str(&format!(" {:>width$}", "n/a"));
                }
            }
        }
        csv.push('\n');
        text.push('\n');
    }
    let hr1 = MetricKey::new("all", "hr", 1);
    let mut order: Vec<(usize, f64)> = runs.iter().enumerate().map(|(i, (_, r))| (i, r.values.get(&hr1).copied().unwrap_or(f64::NAN))).collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let ordering: Vec<String> = order.iter().map(|(i, _)| runs[*i].0.clone()).collect();
    text.push_str(&format!("\nordering by all/hr@1: {}\n", ordering.join(" > ")));
    text.push_str(&format!("baseline: {base_name}\n"));
    Ok(Comparison { csv, text, ordering })
}
