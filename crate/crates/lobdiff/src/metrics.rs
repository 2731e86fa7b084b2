//! Distributional comparison of real and generated book sequences.
//!
//! Each book sequence reduces to per-state score series (spread, mid
//! returns, imbalance, volumes) and per-transition series (order flow
//! imbalance). Two sequences are compared score by score with an L1
//! distance over shared histograms and the 1-D Wasserstein-1 distance,
//! each dressed with a percentile-bootstrap confidence interval, then
//! averaged into a summary.

use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::book::{BookState, Side};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("empty score series for {0}")]
    EmptySeries(String),
    #[error("depth {depth} exceeds book levels {levels}")]
    DepthTooLarge { depth: usize, levels: usize },
    #[error("need at least {need} states, found {found}")]
    TooFewStates { need: usize, found: usize },
    #[error("{0}")]
    BadArgument(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// One scalar score per state (or per transition), plus how many inputs
/// had to be skipped because the score was undefined there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub name: String,
    pub values: Vec<f64>,
    pub skipped: usize,
}

/// Best ask minus best bid, in ticks. States missing either side are
/// skipped and counted.
pub fn spread(states: &[BookState]) -> ScoreSeries {
    let mut values = Vec::with_capacity(states.len());
    let mut skipped = 0;
    for s in states {
        match (s.best_bid(), s.best_ask()) {
            (Some(b), Some(a)) => values.push((a.price - b.price) as f64),
            _ => skipped += 1,
        }
    }
    ScoreSeries { name: "spread".into(), values, skipped }
}

/// Arithmetic mid-price changes over `lag` states, in ticks. Pairs with
/// an undefined mid on either end are skipped.
pub fn mid_returns(states: &[BookState], lag: usize) -> Result<ScoreSeries, MetricError> {
    if lag == 0 {
        return Err(MetricError::BadArgument("lag must be at least 1".into()));
    }
    let name = format!("mid_return_lag{lag}");
    let mut values = Vec::new();
    let mut skipped = 0;
    if states.len() > lag {
        for t in lag..states.len() {
            match (states[t].mid(), states[t - lag].mid()) {
                (Some(now), Some(then)) => values.push(now - then),
                _ => skipped += 1,
            }
        }
    }
    Ok(ScoreSeries { name, values, skipped })
}

/// `(sum bid sizes - sum ask sizes) / (sum bid sizes + sum ask sizes)`
/// over the top `depth` levels, in `[-1, 1]`. States with no resting size
/// in range are skipped.
pub fn book_imbalance(states: &[BookState], depth: usize) -> Result<ScoreSeries, MetricError> {
    if depth == 0 {
        return Err(MetricError::BadArgument("depth must be at least 1".into()));
    }
    let mut values = Vec::with_capacity(states.len());
    let mut skipped = 0;
    for s in states {
        if depth > s.levels() {
            return Err(MetricError::DepthTooLarge { depth, levels: s.levels() });
        }
        let bid: i64 = s.bids[..depth].iter().map(|q| q.size).sum();
        let ask: i64 = s.asks[..depth].iter().map(|q| q.size).sum();
        if bid + ask == 0 {
            skipped += 1;
        } else {
            values.push((bid - ask) as f64 / (bid + ask) as f64);
        }
    }
    Ok(ScoreSeries { name: format!("imbalance_d{depth}"), values, skipped })
}

/// Per-level signed flow between two quotes on the same side. A higher
/// bid price contributes the full new size, an equal price contributes
/// the size change, a lower price withdraws the old size; asks mirror
/// with the inequalities reversed. Absent levels carry size 0 at the
/// sentinel price, so comparisons against them behave like +/- infinity.
fn level_flow(prev: &crate::book::LevelQuote, cur: &crate::book::LevelQuote, side: Side) -> f64 {
    let improved = match side {
        Side::Bid => cur.price > prev.price,
        Side::Ask => cur.price < prev.price,
    };
    if improved {
        cur.size as f64
    } else if cur.price == prev.price {
        (cur.size - prev.size) as f64
    } else {
        -(prev.size as f64)
    }
}

/// Order flow imbalance per transition: bid flow minus ask flow, summed
/// over the top `depth` levels.
pub fn ofi(states: &[BookState], depth: usize) -> Result<ScoreSeries, MetricError> {
    if depth == 0 {
        return Err(MetricError::BadArgument("depth must be at least 1".into()));
    }
    if states.len() < 2 {
        return Err(MetricError::TooFewStates { need: 2, found: states.len() });
    }
    let mut values = Vec::with_capacity(states.len() - 1);
    for w in states.windows(2) {
        let (prev, cur) = (&w[0], &w[1]);
        if depth > prev.levels() || depth > cur.levels() {
            return Err(MetricError::DepthTooLarge { depth, levels: prev.levels().min(cur.levels()) });
        }
        let mut e = 0.0;
        for l in 0..depth {
            e += level_flow(&prev.bids[l], &cur.bids[l], Side::Bid);
            e -= level_flow(&prev.asks[l], &cur.asks[l], Side::Ask);
        }
        values.push(e);
    }
    Ok(ScoreSeries { name: format!("ofi_d{depth}"), values, skipped: 0 })
}

/// Resting size at one level of one side, per state; absent levels count
/// as zero.
pub fn volume_at_level(states: &[BookState], level: usize, side: Side) -> Result<ScoreSeries, MetricError> {
    let mut values = Vec::with_capacity(states.len());
    for s in states {
        if level >= s.levels() {
            return Err(MetricError::DepthTooLarge { depth: level + 1, levels: s.levels() });
        }
        let q = match side {
            Side::Bid => &s.bids[level],
            Side::Ask => &s.asks[level],
        };
        values.push(q.size as f64);
    }
    let side_name = match side {
        Side::Bid => "bid",
        Side::Ask => "ask",
    };
    Ok(ScoreSeries { name: format!("{side_name}_volume_l{level}"), values, skipped: 0 })
}

/// Normalized histograms of both samples over shared equal-width bins
/// spanning the pooled range. Returns `(edges, p_real, q_gen)` with
/// `edges.len() == bins + 1`.
pub fn shared_histograms(real: &[f64], gen: &[f64], bins: usize) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), MetricError> {
    if real.is_empty() || gen.is_empty() {
        return Err(MetricError::EmptySeries("histogram input".into()));
    }
    if bins == 0 {
        return Err(MetricError::BadArgument("bins must be at least 1".into()));
    }
    let lo = real.iter().chain(gen).copied().fold(f64::INFINITY, f64::min);
    let hi = real.iter().chain(gen).copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    let fill = |vals: &[f64]| {
        let mut h = vec![0.0; bins];
        for &v in vals {
            let idx = (((v - lo) / width) as usize).min(bins - 1);
            h[idx] += 1.0;
        }
        let n = vals.len() as f64;
        h.iter_mut().for_each(|c| *c /= n);
        h
    };
    Ok((edges, fill(real), fill(gen)))
}

/// Total variation style histogram distance: `sum_b |p_b - q_b|` over the
/// shared bins, in `[0, 2]`.
pub fn l1_distance(real: &[f64], gen: &[f64], bins: usize) -> Result<f64, MetricError> {
    let (_, p, q) = shared_histograms(real, gen, bins)?;
    Ok(p.iter().zip(q.iter()).map(|(a, b)| (a - b).abs()).sum())
}

/// Wasserstein-1 between the empirical distributions: the integral of
/// the absolute CDF difference, exact for unequal sample counts.
pub fn wasserstein1(real: &[f64], gen: &[f64]) -> Result<f64, MetricError> {
    if real.is_empty() || gen.is_empty() {
        return Err(MetricError::EmptySeries("wasserstein input".into()));
    }
    let mut a = real.to_vec();
    let mut b = gen.to_vec();
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut total = 0.0;
    let mut prev_x = f64::NAN;
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(&x1), Some(&x2)) => x1.min(x2),
            (Some(&x1), None) => x1,
            (None, Some(&x2)) => x2,
            (None, None) => unreachable!(),
        };
        if prev_x.is_finite() && x > prev_x {
            let fa = i as f64 / na;
            let fb = j as f64 / nb;
            total += (fa - fb).abs() * (x - prev_x);
        }
        while i < a.len() && a[i] == x {
            i += 1;
        }
        while j < b.len() && b[j] == x {
            j += 1;
        }
        prev_x = x;
    }
    Ok(total)
}

/// Percentile bootstrap interval for a two-sample distance statistic.
/// Both samples are resampled with replacement; the interval is clamped
/// to contain the point estimate so reports never contradict themselves.
pub fn bootstrap_ci<F>(
    stat: F,
    real: &[f64],
    gen: &[f64],
    resamples: usize,
    level: f64,
    rng: &mut impl Rng,
) -> Result<(f64, f64), MetricError>
where
    F: Fn(&[f64], &[f64]) -> Result<f64, MetricError>,
{
    if resamples < 100 {
        return Err(MetricError::BadArgument(format!("resamples {resamples} below 100")));
    }
    if !(0.0..1.0).contains(&level) || level <= 0.0 {
        return Err(MetricError::BadArgument(format!("level {level} outside (0, 1)")));
    }
    let point = stat(real, gen)?;
    let mut draws = Vec::with_capacity(resamples);
    let mut ra = vec![0.0; real.len()];
    let mut rb = vec![0.0; gen.len()];
    for _ in 0..resamples {
        for slot in ra.iter_mut() {
            *slot = real[rng.random_range(0..real.len())];
        }
        for slot in rb.iter_mut() {
            *slot = gen[rng.random_range(0..gen.len())];
        }
        draws.push(stat(&ra, &rb)?);
    }
    draws.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let alpha = 1.0 - level;
    let q = |p: f64| {
        let h = (draws.len() - 1) as f64 * p;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        draws[lo] + (draws[hi] - draws[lo]) * (h - lo as f64)
    };
    let low = q(alpha / 2.0).min(point);
    let high = q(1.0 - alpha / 2.0).max(point);
    Ok((low, high))
}

/// Evaluation knobs. `bucket_count` switches on conditioning by position:
/// each series splits into that many contiguous index buckets scored
/// separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub depth: usize,
    pub mid_lag: usize,
    pub volume_level: usize,
    pub bins: usize,
    pub resamples: usize,
    pub ci_level: f64,
    pub seed: u64,
    pub bucket_count: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            depth: 1,
            mid_lag: 1,
            volume_level: 0,
            bins: 50,
            resamples: 1000,
            ci_level: 0.95,
            seed: 0,
            bucket_count: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub name: String,
    pub l1: f64,
    pub l1_ci: (f64, f64),
    pub wasserstein: f64,
    pub wasserstein_ci: (f64, f64),
    pub n_real: usize,
    pub n_gen: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricFailure {
    pub name: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metrics: Vec<MetricResult>,
    pub failures: Vec<MetricFailure>,
    /// Unweighted means over the successful metrics.
    pub mean_l1: f64,
    pub mean_wasserstein: f64,
}

/// The standard score battery for one sequence.
pub fn compute_series(states: &[BookState], cfg: &EvalConfig) -> Vec<Result<ScoreSeries, MetricError>> {
    vec![
        Ok(spread(states)),
        mid_returns(states, cfg.mid_lag),
        book_imbalance(states, cfg.depth),
        ofi(states, cfg.depth),
        volume_at_level(states, cfg.volume_level, Side::Bid),
        volume_at_level(states, cfg.volume_level, Side::Ask),
    ]
}

fn split_buckets(series: &ScoreSeries, k: usize) -> Vec<ScoreSeries> {
    let n = series.values.len();
    (0..k)
        .map(|i| {
            let lo = i * n / k;
            let hi = (i + 1) * n / k;
            ScoreSeries {
                name: format!("{}[bucket {}/{}]", series.name, i + 1, k),
                values: series.values[lo..hi].to_vec(),
                skipped: 0,
            }
        })
        .collect()
}

/// Per-segment score series pooled by metric: values concatenate, skip
/// counts add. Lets disjoint generated files contribute without creating
/// artificial transitions at file boundaries.
pub fn pool_series(segments: &[Vec<BookState>], cfg: &EvalConfig) -> Vec<Result<ScoreSeries, MetricError>> {
    let mut pooled: Vec<Result<ScoreSeries, MetricError>> = Vec::new();
    for segment in segments {
        let series = compute_series(segment, cfg);
        if pooled.is_empty() {
            pooled = series;
            continue;
        }
        for (acc, next) in pooled.iter_mut().zip(series) {
            match (&mut *acc, next) {
                (Ok(a), Ok(b)) => {
                    a.values.extend(b.values);
                    a.skipped += b.skipped;
                }
                (Ok(_), Err(e)) => *acc = Err(e),
                (Err(_), _) => {}
            }
        }
    }
    pooled
}

fn report_from_series(
    real_series: Vec<Result<ScoreSeries, MetricError>>,
    gen_series: Vec<Result<ScoreSeries, MetricError>>,
    cfg: &EvalConfig,
) -> MetricReport {
    let mut pairs: Vec<Result<(ScoreSeries, ScoreSeries), MetricFailure>> = Vec::new();
    for (r, g) in real_series.into_iter().zip(gen_series) {
        match (r, g) {
            (Ok(r), Ok(g)) => {
                if let Some(k) = cfg.bucket_count {
                    for (rb, gb) in split_buckets(&r, k).into_iter().zip(split_buckets(&g, k)) {
                        pairs.push(Ok((rb, gb)));
                    }
                } else {
                    pairs.push(Ok((r, g)));
                }
            }
            (Err(e), _) => pairs.push(Err(MetricFailure { name: "real".into(), reason: e.to_string() })),
            (_, Err(e)) => pairs.push(Err(MetricFailure { name: "gen".into(), reason: e.to_string() })),
        }
    }
    let mut metrics = Vec::new();
    let mut failures = Vec::new();
    for (i, pair) in pairs.into_iter().enumerate() {
        let (r, g) = match pair {
            Ok(p) => p,
            Err(f) => {
                failures.push(f);
                continue;
            }
        };
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let outcome = (|| -> Result<MetricResult, MetricError> {
            let l1 = l1_distance(&r.values, &g.values, cfg.bins)?;
            let w1 = wasserstein1(&r.values, &g.values)?;
            let l1_ci = bootstrap_ci(
                |a, b| l1_distance(a, b, cfg.bins),
                &r.values,
                &g.values,
                cfg.resamples,
                cfg.ci_level,
                &mut rng,
            )?;
            let w1_ci =
                bootstrap_ci(|a, b| wasserstein1(a, b), &r.values, &g.values, cfg.resamples, cfg.ci_level, &mut rng)?;
            Ok(MetricResult {
                name: r.name.clone(),
                l1,
                l1_ci,
                wasserstein: w1,
                wasserstein_ci: w1_ci,
                n_real: r.values.len(),
                n_gen: g.values.len(),
            })
        })();
        match outcome {
            Ok(m) => metrics.push(m),
            Err(e) => failures.push(MetricFailure { name: r.name, reason: e.to_string() }),
        }
    }
    let count = metrics.len().max(1) as f64;
    let mean_l1 = metrics.iter().map(|m| m.l1).sum::<f64>() / count;
    let mean_wasserstein = metrics.iter().map(|m| m.wasserstein).sum::<f64>() / count;
    MetricReport { metrics, failures, mean_l1, mean_wasserstein }
}

/// Scores both sequences, computes both distances with bootstrap
/// intervals per metric, and aggregates the unweighted means. Metrics
/// that cannot be computed are recorded as failures; the report is still
/// produced.
pub fn evaluate(real: &[BookState], gen: &[BookState], cfg: &EvalConfig) -> Result<MetricReport, MetricError> {
    if real.is_empty() || gen.is_empty() {
        return Err(MetricError::EmptySeries("evaluate inputs".into()));
    }
    Ok(report_from_series(compute_series(real, cfg), compute_series(gen, cfg), cfg))
}

/// [`evaluate`] against generated data split into independent segments
/// (for example one file per sampled future).
pub fn evaluate_segments(
    real: &[BookState],
    segments: &[Vec<BookState>],
    cfg: &EvalConfig,
) -> Result<MetricReport, MetricError> {
    if real.is_empty() || segments.iter().all(|s| s.is_empty()) {
        return Err(MetricError::EmptySeries("evaluate inputs".into()));
    }
    Ok(report_from_series(compute_series(real, cfg), pool_series(segments, cfg), cfg))
}

/// Flat CSV of `(metric, loss_type, value, ci_low, ci_high, n_real, n_gen)`.
pub fn write_report_csv<W: Write>(mut w: W, report: &MetricReport) -> Result<(), MetricError> {
    writeln!(w, "metric,loss_type,value,ci_low,ci_high,n_real,n_gen")?;
    for m in &report.metrics {
        writeln!(w, "{},l1,{},{},{},{},{}", m.name, m.l1, m.l1_ci.0, m.l1_ci.1, m.n_real, m.n_gen)?;
        writeln!(
            w,
            "{},wasserstein,{},{},{},{},{}",
            m.name, m.wasserstein, m.wasserstein_ci.0, m.wasserstein_ci.1, m.n_real, m.n_gen
        )?;
    }
    writeln!(w, "summary,mean_l1,{},,,,", report.mean_l1)?;
    writeln!(w, "summary,mean_wasserstein,{},,,,", report.mean_wasserstein)?;
    Ok(())
}

/// Plot-ready histogram CSV: one row per bin and metric.
pub fn write_histogram_csv<W: Write>(
    mut w: W,
    name: &str,
    real: &[f64],
    gen: &[f64],
    bins: usize,
) -> Result<(), MetricError> {
    let (edges, p, q) = shared_histograms(real, gen, bins)?;
    writeln!(w, "metric,bin_lo,bin_hi,p_real,p_gen")?;
    for i in 0..p.len() {
        writeln!(w, "{},{},{},{},{}", name, edges[i], edges[i + 1], p[i], q[i])?;
    }
    Ok(())
}
