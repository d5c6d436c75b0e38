//! Bootstrap summaries, the Wilcoxon rank-sum test and Bonferroni
//! correction.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("no scores to resample")]
    EmptyScores,
    #[error("rank-sum test needs at least one observation per sample")]
    EmptyInput,
    #[error("reference model {0:?} has no scores")]
    MissingReference(String),
    #[error("model {model} has {found} scores, reference has {expected}")]
    InstanceSetMismatch { model: String, expected: usize, found: usize },
    #[error("invalid bootstrap config: {0}")]
    InvalidConfig(String),
    #[error("csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub sample_size: usize,
    pub repetitions: usize,
    pub seed: u64,
    pub ci_level: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            sample_size: 30,
            repetitions: 100,
            seed: 0,
            ci_level: 0.95,
        }
    }
}

impl BootstrapConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), StatsError> {
        if self.sample_size == 0 || self.repetitions == 0 {
            return Err(StatsError::InvalidConfig("sample_size and repetitions must be positive".into()));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(StatsError::InvalidConfig("ci_level must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub mean: f64,
    pub sd: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub replicate_means: Vec<f64>,
}

/// Resample index sets: `repetitions` rows of `sample_size` indices drawn
/// with replacement from `0..population`. Every model scored on the same
/// population sees the same rows.
pub fn resample_indices(population: usize, cfg: &BootstrapConfig) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.repetitions)
        .map(|_| (0..cfg.sample_size).map(|_| rng.gen_range(0..population)).collect())
        .collect()
}

/// Arithmetic mean; exact when every value is equal.
pub fn mean(xs: &[f64]) -> f64 {
    match xs.first() {
        Some(&first) if xs.iter().all(|&x| x == first) => first,
        _ => xs.iter().sum::<f64>() / xs.len() as f64,
    }
}

/// Sample standard deviation (n − 1 denominator); 0 for a single value.
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Percentile with linear interpolation between closest ranks.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn summarize(replicate_means: Vec<f64>, ci_level: f64) -> BootstrapSummary {
    let mut sorted = replicate_means.clone();
    sorted.sort_by(f64::total_cmp);
    let tail = (1.0 - ci_level) / 2.0;
    BootstrapSummary {
        mean: mean(&replicate_means),
        sd: sample_sd(&replicate_means),
        ci_low: percentile(&sorted, tail),
        ci_high: percentile(&sorted, 1.0 - tail),
        replicate_means,
    }
}

pub fn bootstrap(scores: &[f64], cfg: &BootstrapConfig) -> Result<BootstrapSummary, StatsError> {
    if scores.is_empty() {
        return Err(StatsError::EmptyScores);
    }
    cfg.validate()?;
    Ok(bootstrap_with(scores, &resample_indices(scores.len(), cfg), cfg.ci_level))
}

fn bootstrap_with(scores: &[f64], rows: &[Vec<usize>], ci_level: f64) -> BootstrapSummary {
    let means = rows
        .iter()
        .map(|row| mean(&row.iter().map(|&i| scores[i]).collect::<Vec<_>>()))
        .collect();
    summarize(means, ci_level)
}

/// Midranks of the pooled sample, plus tie-group sizes.
fn midranks(pooled: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&i, &j| pooled[i].total_cmp(&pooled[j]));
    let mut ranks = vec![0.0; pooled.len()];
    let mut ties = Vec::new();
    let mut k = 0;
    while k < order.len() {
        let mut end = k + 1;
        while end < order.len() && pooled[order[end]] == pooled[order[k]] {
            end += 1;
        }
        let rank = (k + 1 + end) as f64 / 2.0;
        for &idx in &order[k..end] {
            ranks[idx] = rank;
        }
        ties.push(end - k);
        k = end;
    }
    (ranks, ties)
}

pub const EXACT_MAX_TOTAL: usize = 12;

/// Number of `n`-subsets of `{1..=total}` for every possible rank sum.
fn rank_sum_counts(n: usize, total: usize) -> Vec<u64> {
    let max_sum = total * (total + 1) / 2;
    // ways[k][s]: k-subsets of the ranks seen so far summing to s
    let mut ways = vec![vec![0u64; max_sum + 1]; n + 1];
    ways[0][0] = 1;
    for r in 1..=total {
        for k in (1..=n.min(r)).rev() {
            for s in (r..=max_sum).rev() {
                ways[k][s] += ways[k - 1][s - r];
            }
        }
    }
    ways.swap_remove(n)
}

/// Two-sided Wilcoxon rank-sum (Mann–Whitney) p-value. Exact when the
/// pooled sample has at most 12 values and no ties; otherwise the normal
/// approximation with tie-corrected variance and continuity correction.
pub fn ranksum_test(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    let (n, m) = (a.len(), b.len());
    let total = n + m;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let w: f64 = ranks[..n].iter().sum();
    let has_ties = ties.iter().any(|&t| t > 1);

    if total <= EXACT_MAX_TOTAL && !has_ties {
        return Ok(exact_p(n, total, w.round() as usize));
    }
    Ok(normal_p(n, m, w, &ties))
}

/// Exact two-sided p for rank sum `w` of the first sample.
pub fn exact_p(n: usize, total: usize, w: usize) -> f64 {
    let counts = rank_sum_counts(n, total);
    let all: u64 = counts.iter().sum();
    let lower: u64 = counts[..=w.min(counts.len() - 1)].iter().sum();
    let upper: u64 = counts[w.min(counts.len())..].iter().sum();
    (2.0 * lower.min(upper) as f64 / all as f64).min(1.0)
}

/// Normal-approximation two-sided p for rank sum `w`.
pub fn normal_p(n: usize, m: usize, w: f64, ties: &[usize]) -> f64 {
    let (nf, mf) = (n as f64, m as f64);
    let big_n = nf + mf;
    let u = w - nf * (nf + 1.0) / 2.0;
    let mu = nf * mf / 2.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>();
    let var = nf * mf / 12.0 * ((big_n + 1.0) - tie_term / (big_n * (big_n - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((u - mu).abs() - 0.5).max(0.0) / var.sqrt();
    erfc(z / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

pub fn bonferroni(p_raw: f64, m: usize) -> f64 {
    (p_raw * m as f64).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Marker {
    #[default]
    None,
    Star,
    Dagger,
}

impl Marker {
    pub fn from_adjusted(p_adjusted: f64) -> Self {
        if p_adjusted < 0.0001 {
            Marker::Dagger
        } else if p_adjusted < 0.05 {
            Marker::Star
        } else {
            Marker::None
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Marker::None => "",
            Marker::Star => "*",
            Marker::Dagger => "†",
        }
    }
}

impl fmt::Display for Marker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub model_a: String,
    pub model_b: String,
    pub p_raw: f64,
    pub p_adjusted: f64,
    pub n_comparisons: usize,
    pub marker: Marker,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelComparison {
    pub reference: String,
    pub summaries: BTreeMap<String, BootstrapSummary>,
    pub comparisons: Vec<ComparisonResult>,
}

/// Bootstraps every model on shared resample rows, then tests the
/// reference's replicate means against each other model's. `m` defaults
/// to the number of non-reference models.
pub fn compare_models(
    per_model: &BTreeMap<String, Vec<f64>>,
    reference: &str,
    cfg: &BootstrapConfig,
    n_comparisons: Option<usize>,
) -> Result<ModelComparison, StatsError> {
    cfg.validate()?;
    let ref_scores = per_model
        .get(reference)
        .ok_or_else(|| StatsError::MissingReference(reference.to_string()))?;
    if ref_scores.is_empty() {
        return Err(StatsError::EmptyScores);
    }
    for (model, scores) in per_model {
        if scores.len() != ref_scores.len() {
            return Err(StatsError::InstanceSetMismatch {
                model: model.clone(),
                expected: ref_scores.len(),
                found: scores.len(),
            });
        }
    }
    let rows = resample_indices(ref_scores.len(), cfg);
    let summaries: BTreeMap<String, BootstrapSummary> = per_model
        .iter()
        .map(|(model, scores)| (model.clone(), bootstrap_with(scores, &rows, cfg.ci_level)))
        .collect();
    let m = n_comparisons.unwrap_or(per_model.len() - 1).max(1);
    let ref_means = &summaries[reference].replicate_means;
    let comparisons = summaries
        .iter()
        .filter(|(model, _)| model.as_str() != reference)
        .map(|(model, s)| {
            let p_raw = ranksum_test(ref_means, &s.replicate_means)?;
            let p_adjusted = bonferroni(p_raw, m);
            Ok(ComparisonResult {
                model_a: reference.to_string(),
                model_b: model.clone(),
                p_raw,
                p_adjusted,
                n_comparisons: m,
                marker: Marker::from_adjusted(p_adjusted),
            })
        })
        .collect::<Result<Vec<_>, StatsError>>()?;
    Ok(ModelComparison {
        reference: reference.to_string(),
        summaries,
        comparisons,
    })
}

/// One line of the comparison export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub task: String,
    pub model: String,
    pub mean: f64,
    pub sd: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_raw: Option<f64>,
    pub p_adjusted: Option<f64>,
    pub marker: Marker,
}

impl ComparisonRow {
    pub fn rows(task: &str, cmp: &ModelComparison) -> Vec<ComparisonRow> {
        cmp.summaries
            .iter()
            .map(|(model, s)| {
                let c = cmp.comparisons.iter().find(|c| &c.model_b == model);
                ComparisonRow {
                    task: task.to_string(),
                    model: model.clone(),
                    mean: s.mean,
                    sd: s.sd,
                    ci_low: s.ci_low,
                    ci_high: s.ci_high,
                    p_raw: c.map(|c| c.p_raw),
                    p_adjusted: c.map(|c| c.p_adjusted),
                    marker: c.map(|c| c.marker).unwrap_or_default(),
                }
            })
            .collect()
    }
}

pub const CSV_HEADER: [&str; 9] = ["task", "model", "mean", "sd", "ci_low", "ci_high", "p_raw", "p_adjusted", "marker"];

fn fmt6(x: f64) -> String {
    format!("{x:.6}")
}

/// Writes rows with six-decimal numbers; p columns are blank for the
/// reference model.
pub fn write_comparison_csv<W: Write>(out: W, rows: &[ComparisonRow]) -> Result<(), StatsError> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| StatsError::Csv(e.to_string());
    w.write_record(CSV_HEADER).map_err(err)?;
    for r in rows {
        w.write_record([
            r.task.clone(),
            r.model.clone(),
            fmt6(r.mean),
            fmt6(r.sd),
            fmt6(r.ci_low),
            fmt6(r.ci_high),
            r.p_raw.map(fmt6).unwrap_or_default(),
            r.p_adjusted.map(fmt6).unwrap_or_default(),
            r.marker.symbol().to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| StatsError::Csv(e.to_string()))
}
