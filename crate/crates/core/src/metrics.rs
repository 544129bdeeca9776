//! Aggregation of traces into rollout metrics and cross-run comparisons.
//!
//! Jitter is the coefficient of variation (population standard deviation
//! over mean) of the intervals between consecutive emissions.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envsim::Evaluation;
use crate::trace::{Engine, Mode, TimeUnit, Trace, WriteSource};

/// Bumped whenever a metrics field changes meaning or is removed.
pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("trace has no emissions")]
    EmptyTrace,
    #[error("baseline run {0:?} not found")]
    BaselineMissing(String),
    #[error("incompatible runs: {0}")]
    Incompatible(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Summary {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let (mut min, mut max, mut sum, mut n) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
        for v in values {
            min = min.min(v);
            max = max.max(v);
            sum += v;
            n += 1;
        }
        if n == 0 {
            return Self::default();
        }
        Self {
            min,
            mean: sum / n as f64,
            max,
        }
    }
}

/// Perception outputs that no generation cycle consumed (decoupled mode).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Redundancy {
    pub published: u64,
    pub fetched: u64,
    pub unread: u64,
    /// `unread / published`.
    pub ratio: f64,
    /// `unread / fetched`: wasted perception runs per consumed one.
    pub per_fetch: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub seeds: usize,
    /// True iff every seed met the success threshold.
    pub success: bool,
    pub success_rate: f64,
    /// Mean over seeds of each seed's mean tracking error.
    pub mean_error: f64,
    pub per_seed_errors: Vec<f64>,
}

impl Accuracy {
    pub fn from_evaluations(evals: &[Evaluation]) -> Self {
        let n = evals.len().max(1) as f64;
        let successes = evals.iter().filter(|e| e.success).count();
        Self {
            seeds: evals.len(),
            success: successes == evals.len(),
            success_rate: successes as f64 / n,
            mean_error: evals.iter().map(|e| e.mean_error).sum::<f64>() / n,
            per_seed_errors: evals.iter().map(|e| e.mean_error).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutMetrics {
    pub schema_version: u32,
    pub mode: Mode,
    pub engine: Engine,
    pub time_unit: TimeUnit,
    pub emissions: u64,
    pub first_emission: u64,
    pub last_emission: u64,
    /// Actions per second of (virtual or wall) time.
    pub throughput: f64,
    pub intervals: Vec<u64>,
    pub mean_interval: f64,
    pub jitter: f64,
    pub jct: Vec<u64>,
    pub mean_jct: f64,
    /// Mean JCT in units of one sequential request.
    pub observation_age: f64,
    /// Context age over every generation iteration of every action.
    pub staleness: Summary,
    /// Context age of each action's final iteration.
    pub final_stage_staleness: Summary,
    /// Frames before the first emission.
    pub fill_frames: u64,
    pub frames: u64,
    pub redundancy: Option<Redundancy>,
    pub charged_prefills: u64,
    pub work: u64,
    pub overrun_frames: u64,
    pub skipped_ticks: u64,
    pub accuracy: Option<Accuracy>,
    pub config: serde_json::Value,
}

/// Population coefficient of variation; 0 for fewer than two values.
pub fn coefficient_of_variation(values: &[u64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

/// Aggregates a finished trace. Pure: equal traces give equal metrics.
pub fn summarize(trace: &Trace) -> Result<RolloutMetrics, MetricsError> {
    let emissions: Vec<_> = trace.records.iter().filter(|r| r.emission.is_some()).collect();
    let first = emissions.first().ok_or(MetricsError::EmptyTrace)?;
    let times: Vec<u64> = emissions.iter().map(|r| r.end).collect();
    let intervals: Vec<u64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    let per_second = trace.header.time_unit.per_second();
    let (first_t, last_t) = (times[0], *times.last().expect("non-empty"));
    let throughput = if times.len() >= 2 {
        (times.len() - 1) as f64 * per_second / (last_t - first_t).max(1) as f64
    } else {
        per_second / last_t.max(1) as f64
    };
    let mean_interval = if intervals.is_empty() {
        0.0
    } else {
        intervals.iter().sum::<u64>() as f64 / intervals.len() as f64
    };
    let jct: Vec<u64> = emissions
        .iter()
        .map(|r| r.emission.as_ref().expect("filtered").request.jct)
        .collect();
    let mean_jct = jct.iter().sum::<u64>() as f64 / jct.len() as f64;
    let staleness = Summary::of(
        emissions
            .iter()
            .flat_map(|r| r.emission.as_ref().expect("filtered").staleness.iter().copied()),
    );
    let final_stage_staleness = Summary::of(
        emissions
            .iter()
            .filter_map(|r| r.emission.as_ref().expect("filtered").staleness.last().copied()),
    );
    let redundancy = (trace.header.mode == Mode::Dec).then(|| {
        let published: BTreeSet<u64> = trace
            .records
            .iter()
            .flat_map(|r| &r.writes)
            .filter(|w| w.source == WriteSource::Perception)
            .map(|w| w.version)
            .collect();
        let fetched: BTreeSet<u64> = trace
            .records
            .iter()
            .flat_map(|r| &r.reads)
            .map(|r| r.version)
            .filter(|v| published.contains(v))
            .collect();
        let unread = (published.len() - fetched.len()) as u64;
        Redundancy {
            published: published.len() as u64,
            fetched: fetched.len() as u64,
            unread,
            ratio: unread as f64 / published.len().max(1) as f64,
            per_fetch: unread as f64 / fetched.len().max(1) as f64,
        }
    });
    Ok(RolloutMetrics {
        schema_version: METRICS_SCHEMA_VERSION,
        mode: trace.header.mode,
        engine: trace.header.engine,
        time_unit: trace.header.time_unit,
        emissions: times.len() as u64,
        first_emission: first_t,
        last_emission: last_t,
        throughput,
        jitter: coefficient_of_variation(&intervals),
        intervals,
        mean_interval,
        mean_jct,
        observation_age: mean_jct / trace.header.reference_period.max(1) as f64,
        jct,
        staleness,
        final_stage_staleness,
        fill_frames: first.frame,
        frames: trace.records.len() as u64,
        redundancy,
        charged_prefills: trace.records.iter().map(|r| r.charged_prefills as u64).sum(),
        work: trace.records.iter().map(|r| r.work).sum(),
        overrun_frames: trace.records.iter().filter(|r| r.overrun).count() as u64,
        skipped_ticks: trace.records.iter().map(|r| r.skipped_ticks).sum(),
        accuracy: None,
        config: trace.header.config.clone(),
    })
}

/// Steady-state throughput of `a` over that of `b`, computed from integer
/// emission counts and spans so that exact ratios come out exact.
pub fn speedup(a: &RolloutMetrics, b: &RolloutMetrics) -> f64 {
    let span = |m: &RolloutMetrics| (m.last_emission - m.first_emission) as u128;
    let steps = |m: &RolloutMetrics| m.emissions.saturating_sub(1) as u128;
    let (num, den) = (steps(a) * span(b), steps(b) * span(a));
    if num == 0 || den == 0 {
        return a.throughput / b.throughput;
    }
    let g = gcd(num, den);
    (num / g) as f64 / (den / g) as f64
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Renders a ratio with three decimals, e.g. 102.7% as `1.027`.
pub fn format_ratio(ratio: f64) -> String {
    format!("{ratio:.3}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub mode: Mode,
    pub throughput: f64,
    pub speedup: f64,
    pub jitter: f64,
    pub mean_jct: f64,
    pub mean_staleness: f64,
    pub mean_error: Option<f64>,
    /// Baseline error over this run's error; above 1 means more accurate.
    pub accuracy_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub schema_version: u32,
    pub baseline: String,
    pub rows: Vec<ComparisonRow>,
}

/// Ratios of every run against the run labelled `baseline`.
pub fn compare(runs: &[(String, RolloutMetrics)], baseline: &str) -> Result<Comparison, MetricsError> {
    let (_, base) = runs
        .iter()
        .find(|(label, _)| label == baseline)
        .ok_or_else(|| MetricsError::BaselineMissing(baseline.to_string()))?;
    if let Some((label, m)) = runs
        .iter()
        .find(|(_, m)| m.engine != base.engine || m.time_unit != base.time_unit)
    {
        return Err(MetricsError::Incompatible(format!(
            "run {label:?} uses the {} engine but baseline {baseline:?} uses {}",
            m.engine.name(),
            base.engine.name()
        )));
    }
    let base_error = base.accuracy.as_ref().map(|a| a.mean_error);
    let rows = runs
        .iter()
        .map(|(label, m)| {
            let mean_error = m.accuracy.as_ref().map(|a| a.mean_error);
            let accuracy_ratio = match (base_error, mean_error) {
                (Some(b), Some(e)) if std::ptr::eq(m, base) || b == e => Some(1.0),
                (Some(b), Some(e)) if e > 0.0 => Some(b / e),
                _ => None,
            };
            ComparisonRow {
                label: label.clone(),
                mode: m.mode,
                throughput: m.throughput,
                speedup: if std::ptr::eq(m, base) { 1.0 } else { speedup(m, base) },
                jitter: m.jitter,
                mean_jct: m.mean_jct,
                mean_staleness: m.staleness.mean,
                mean_error,
                accuracy_ratio,
            }
        })
        .collect();
    Ok(Comparison {
        schema_version: METRICS_SCHEMA_VERSION,
        baseline: baseline.to_string(),
        rows,
    })
}

const COMPARISON_HEADER: &str =
    "label,mode,throughput,speedup,jitter,mean_jct,mean_staleness,mean_error,accuracy_ratio";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# comparison v{}; baseline={}; jitter=stddev/mean of inter-emission intervals\n{COMPARISON_HEADER}\n",
            self.schema_version, self.baseline
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.label,
                r.mode.name(),
                r.throughput,
                r.speedup,
                r.jitter,
                r.mean_jct,
                r.mean_staleness,
                opt(r.mean_error),
                opt(r.accuracy_ratio)
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serializes")
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let header = [
            "label",
            "mode",
            "throughput/s",
            "speedup",
            "jitter",
            "mean_jct",
            "staleness",
            "error",
            "acc_ratio",
        ];
        let rows: Vec<[String; 9]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.label.clone(),
                    r.mode.name().to_string(),
                    format!("{:.3}", r.throughput),
                    format_ratio(r.speedup),
                    format!("{:.4}", r.jitter),
                    format!("{:.1}", r.mean_jct),
                    format!("{:.2}", r.mean_staleness),
                    r.mean_error.map(|e| format!("{e:.4}")).unwrap_or_else(|| "-".into()),
                    r.accuracy_ratio.map(format_ratio).unwrap_or_else(|| "-".into()),
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| {
                rows.iter()
                    .map(|r| r[i].len())
                    .chain([header[i].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        let line = |cells: Vec<&str>, out: &mut String| {
            let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            let _ = writeln!(out, "{}", padded.join("  ").trim_end());
        };
        line(header.to_vec(), &mut out);
        for r in &rows {
            line(r.iter().map(String::as_str).collect(), &mut out);
        }
        out
    }
}

const METRICS_HEADER: &str =
    "mode,engine,time_unit,emissions,throughput,mean_interval,jitter,mean_jct,observation_age,\
staleness_min,staleness_mean,staleness_max,final_staleness_mean,fill_frames,frames,redundancy_ratio,\
redundant_per_fetch,charged_prefills,work,overrun_frames,skipped_ticks,success_rate,mean_error";

impl RolloutMetrics {
    /// One-row CSV preceded by a versioned comment line.
    pub fn to_csv(&self) -> String {
        let red = self.redundancy;
        let acc = self.accuracy.as_ref();
        format!(
            "# metrics v{}; jitter=stddev/mean of inter-emission intervals; time_unit={}\n{METRICS_HEADER}\n\
             {},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            self.schema_version,
            self.time_unit.name(),
            self.mode.name(),
            self.engine.name(),
            self.time_unit.name(),
            self.emissions,
            self.throughput,
            self.mean_interval,
            self.jitter,
            self.mean_jct,
            self.observation_age,
            self.staleness.min,
            self.staleness.mean,
            self.staleness.max,
            self.final_stage_staleness.mean,
            self.fill_frames,
            self.frames,
            opt(red.map(|r| r.ratio)),
            opt(red.map(|r| r.per_fetch)),
            self.charged_prefills,
            self.work,
            self.overrun_frames,
            self.skipped_ticks,
            opt(acc.map(|a| a.success_rate)),
            opt(acc.map(|a| a.mean_error)),
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}
