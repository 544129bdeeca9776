//! Stage planning for the frame pipeline.
//!
//! Perception layers are split into contiguous ranges that minimise the most
//! expensive stage. Generation iterations are split either uniformly or with
//! exponential skew weights `e^{i * alpha}`, using rounded cumulative
//! boundaries so the counts always sum to the iteration budget.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Upper bound on the layer count accepted by the exact partitioner.
pub const MAX_PERCEPTION_LAYERS: usize = 64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PartitionError {
    #[error("cannot split {layers} perception layers into {stages} stages")]
    TooManyStages { layers: usize, stages: usize },
    #[error("invalid generation stage count: {iterations} iterations over {stages} stages (alpha = {alpha})")]
    InvalidStageCount { iterations: u32, stages: usize, alpha: f64 },
    #[error("perception layer {index} has non-positive cost")]
    NonPositiveCost { index: usize },
    #[error("perception has {0} layers, more than the supported {MAX_PERCEPTION_LAYERS}")]
    TooManyLayers(usize),
}

/// Mapping of perception layers and generation iterations onto pipeline stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    /// Half-open layer index ranges, one per perception stage.
    pub perception_stages: Vec<Range<usize>>,
    /// Iterations executed by each generation stage, in stage order.
    pub generation_stages: Vec<u32>,
    pub alpha: f64,
}

impl StagePlan {
    pub fn new(
        layer_costs: &[u64],
        pp_perception: usize,
        iterations: u32,
        pp_generation: usize,
        alpha: f64,
    ) -> Result<Self, PartitionError> {
        Ok(Self {
            perception_stages: split_perception(layer_costs, pp_perception)?,
            generation_stages: split_generation(iterations, pp_generation, alpha)?,
            alpha,
        })
    }

    pub fn pp_perception(&self) -> usize {
        self.perception_stages.len()
    }

    pub fn pp_generation(&self) -> usize {
        self.generation_stages.len()
    }

    /// Frames a request spends in the pipeline (`pp_perception + pp_generation`).
    pub fn depth(&self) -> usize {
        self.pp_perception() + self.pp_generation()
    }

    /// Summed layer cost of every perception stage.
    pub fn perception_stage_costs(&self, layer_costs: &[u64]) -> Vec<u64> {
        self.perception_stages
            .iter()
            .map(|r| layer_costs[r.clone()].iter().sum())
            .collect()
    }

    /// First iteration index handled by each generation stage.
    pub fn generation_offsets(&self) -> Vec<u32> {
        let mut acc = 0;
        self.generation_stages
            .iter()
            .map(|&c| {
                let start = acc;
                acc += c;
                start
            })
            .collect()
    }
}

/// Contiguous split of `costs` into `stages` ranges minimising the maximum
/// stage cost.
///
/// Ties on the maximum are broken by the smaller sum of squared stage costs,
/// then by the earliest boundaries, so the result is canonical.
pub fn split_perception(costs: &[u64], stages: usize) -> Result<Vec<Range<usize>>, PartitionError> {
    let n = costs.len();
    if n > MAX_PERCEPTION_LAYERS {
        return Err(PartitionError::TooManyLayers(n));
    }
    if let Some(index) = costs.iter().position(|&c| c == 0) {
        return Err(PartitionError::NonPositiveCost { index });
    }
    if stages == 0 || stages > n {
        return Err(PartitionError::TooManyStages { layers: n, stages });
    }

    let prefix: Vec<u64> = std::iter::once(0)
        .chain(costs.iter().scan(0u64, |acc, &c| {
            *acc += c;
            Some(*acc)
        }))
        .collect();
    let span = |a: usize, b: usize| prefix[b] - prefix[a];

    // best[k][i]: optimal (max, sum of squares) for the first i layers in k stages.
    const NONE: (u64, u128) = (u64::MAX, u128::MAX);
    let mut best = vec![vec![NONE; n + 1]; stages + 1];
    let mut cut = vec![vec![0usize; n + 1]; stages + 1];
    best[0][0] = (0, 0);
    for k in 1..=stages {
        for i in k..=n {
            for j in (k - 1)..i {
                let prev = best[k - 1][j];
                if prev == NONE {
                    continue;
                }
                let c = span(j, i);
                let cand = (prev.0.max(c), prev.1 + (c as u128) * (c as u128));
                if cand < best[k][i] {
                    best[k][i] = cand;
                    cut[k][i] = j;
                }
            }
        }
    }

    let mut ranges = Vec::with_capacity(stages);
    let mut end = n;
    for k in (1..=stages).rev() {
        let start = cut[k][end];
        ranges.push(start..end);
        end = start;
    }
    ranges.reverse();
    Ok(ranges)
}

/// Iteration counts per generation stage with skew weights `e^{i * alpha}`,
/// `i = 1..=stages`.
pub fn split_generation(iterations: u32, stages: usize, alpha: f64) -> Result<Vec<u32>, PartitionError> {
    split_generation_with_base(iterations, stages, alpha, 1)
}

/// Same as [`split_generation`] with the weight exponent starting at `base`.
/// The result does not depend on `base`; the parameter exists so that claim
/// can be checked.
pub fn split_generation_with_base(
    iterations: u32,
    stages: usize,
    alpha: f64,
    base: i32,
) -> Result<Vec<u32>, PartitionError> {
    let invalid = || PartitionError::InvalidStageCount {
        iterations,
        stages,
        alpha,
    };
    if stages == 0 || iterations == 0 || !alpha.is_finite() {
        return Err(invalid());
    }
    if alpha == 0.0 {
        if (iterations as usize) < stages {
            return Err(invalid());
        }
        // Exact integer path: counts differ by at most one.
        return Ok(cumulative_counts(iterations, stages, |i| {
            (iterations as u128 * i as u128, stages as u128)
        }));
    }

    let weights: Vec<f64> = (0..stages).map(|i| ((i as i32 + base) as f64 * alpha).exp()).collect();
    let total: f64 = weights.iter().sum();
    if !total.is_finite() {
        return Err(invalid());
    }
    let mut running = 0.0;
    let mut boundaries = Vec::with_capacity(stages);
    for (i, w) in weights.iter().enumerate() {
        running += w;
        let b = if i + 1 == stages {
            iterations
        } else {
            round_boundary(iterations as f64 * running / total).min(iterations)
        };
        boundaries.push(b);
    }
    Ok(to_counts(&boundaries))
}

fn cumulative_counts(iterations: u32, stages: usize, frac: impl Fn(usize) -> (u128, u128)) -> Vec<u32> {
    let boundaries: Vec<u32> = (1..=stages)
        .map(|i| {
            if i == stages {
                return iterations;
            }
            let (num, den) = frac(i);
            round_ratio(num, den) as u32
        })
        .collect();
    to_counts(&boundaries)
}

fn to_counts(boundaries: &[u32]) -> Vec<u32> {
    let mut prev = 0;
    boundaries
        .iter()
        .map(|&b| {
            let b = b.max(prev);
            let c = b - prev;
            prev = b;
            c
        })
        .collect()
}

#[cfg(not(feature = "fault-truncate-rounding"))]
fn round_boundary(x: f64) -> u32 {
    (x + 0.5).floor() as u32
}

#[cfg(feature = "fault-truncate-rounding")]
fn round_boundary(x: f64) -> u32 {
    x.floor() as u32
}

#[cfg(not(feature = "fault-truncate-rounding"))]
fn round_ratio(num: u128, den: u128) -> u128 {
    (2 * num + den) / (2 * den)
}

#[cfg(feature = "fault-truncate-rounding")]
fn round_ratio(num: u128, den: u128) -> u128 {
    num / den
}
