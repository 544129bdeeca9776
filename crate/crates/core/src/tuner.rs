//! Hierarchical search over pipeline shapes.
//!
//! Every `(pp_perception, pp_generation)` with `pp_perception + pp_generation
//! <= l_max` is measured for throughput in virtual time; points meeting the
//! requirement are rolled out over the evaluation seeds and ranked by
//! accuracy, then throughput, then smaller depth. The skewness `alpha` of the
//! winner is tuned last. Logs are sorted by grid point, so parallel
//! evaluation does not change the result.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::ContextKind;
use crate::envsim::EnvConfig;
use crate::executor::{ExecError, Executor, PipelineConfig, RunSpec};
use crate::metrics::Accuracy;
use crate::par::{self, Strategy};
use crate::policy::Policy;

/// Seeds used when a request does not name any.
pub const DEFAULT_SEEDS: u64 = 20;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TuneError {
    #[error("invalid tune request: {0}")]
    InvalidRequest(String),
    #[error(
        "no configuration reaches {requirement} actions/s; best is ({}, {}) at {:.3} actions/s",
        best.config.pp_perception, best.config.pp_generation, best.throughput
    )]
    NoFeasibleConfig { requirement: f64, best: Box<TuneEntry> },
    #[error(transparent)]
    Exec(#[from] ExecError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneRequest {
    /// Required actions per virtual second.
    pub throughput_requirement: f64,
    /// Largest total pipeline depth searched.
    pub l_max: usize,
    pub alpha_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub policy: Policy,
    pub env: EnvConfig,
    /// Template for every searched configuration; its degrees and alpha are overwritten.
    pub base: PipelineConfig,
}

impl TuneRequest {
    pub fn new(policy: Policy, env: EnvConfig, throughput_requirement: f64) -> Self {
        Self {
            throughput_requirement,
            l_max: 6,
            alpha_grid: vec![0.0],
            seeds: (0..DEFAULT_SEEDS).collect(),
            policy,
            env,
            base: PipelineConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), TuneError> {
        let bad = |m: String| Err(TuneError::InvalidRequest(m));
        if self.l_max < 2 {
            return bad(format!("l_max {} < 2", self.l_max));
        }
        if !(self.throughput_requirement > 0.0 && self.throughput_requirement.is_finite()) {
            return bad(format!(
                "throughput requirement {} must be positive",
                self.throughput_requirement
            ));
        }
        if self.alpha_grid.is_empty() || self.alpha_grid.iter().any(|a| !a.is_finite()) {
            return bad("alpha grid must be non-empty and finite".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one evaluation seed is required".into());
        }
        Ok(())
    }

    /// Every grid point the search must visit, in canonical order.
    pub fn grid(&self) -> Vec<(usize, usize)> {
        let layers = self.policy.perception.layers.len();
        let iterations = self.policy.generation.iterations as usize;
        let mut points = Vec::new();
        for p in 1..=layers.min(self.l_max - 1) {
            for g in 1..=iterations.min(self.l_max - p) {
                points.push((p, g));
            }
        }
        points
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneEntry {
    pub config: PipelineConfig,
    pub throughput: f64,
    pub feasible: bool,
    /// Present only for feasible points.
    pub accuracy: Option<Accuracy>,
}

impl TuneEntry {
    fn depth(&self) -> usize {
        self.config.depth()
    }
}

/// Accuracy first (success rate, then mean error), then throughput, then smaller depth.
fn rank(a: &TuneEntry, b: &TuneEntry) -> Ordering {
    let acc = |e: &TuneEntry| {
        e.accuracy
            .as_ref()
            .map_or((0.0, f64::INFINITY), |a| (a.success_rate, a.mean_error))
    };
    let (sa, ea) = acc(a);
    let (sb, eb) = acc(b);
    sb.total_cmp(&sa)
        .then(ea.total_cmp(&eb))
        .then(b.throughput.total_cmp(&a.throughput))
        .then(a.depth().cmp(&b.depth()))
        .then((a.config.pp_perception, a.config.pp_generation).cmp(&(b.config.pp_perception, b.config.pp_generation)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum AlphaOutcome {
    Tuned {
        config: PipelineConfig,
        log: Vec<TuneEntry>,
    },
    /// Merged autoregressive stages share one prefill, so the split has no effect.
    NotApplicable { config: PipelineConfig },
}

impl AlphaOutcome {
    pub fn config(&self) -> &PipelineConfig {
        match self {
            AlphaOutcome::Tuned { config, .. } | AlphaOutcome::NotApplicable { config } => config,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub throughput_requirement: f64,
    pub seeds: Vec<u64>,
    /// Feasible points, best first.
    pub ranked: Vec<TuneEntry>,
    /// Every grid point, sorted by `(pp_perception, pp_generation)`.
    pub log: Vec<TuneEntry>,
    pub alpha: AlphaOutcome,
    pub chosen: PipelineConfig,
}

impl TuneResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tune results serialize")
    }

    /// Aligned summary; feasible rows are starred and the chosen one marked.
    pub fn to_text(&self) -> String {
        let mut out = format!("throughput requirement: {} actions/s\n", self.throughput_requirement);
        let _ = writeln!(
            out,
            "{:<2}{:>5}{:>5}{:>7}{:>14}{:>10}{:>12}",
            "", "pp_p", "pp_g", "alpha", "throughput", "success", "mean_error"
        );
        for e in &self.log {
            let mark = if (e.config.pp_perception, e.config.pp_generation)
                == (self.chosen.pp_perception, self.chosen.pp_generation)
            {
                ">"
            } else if e.feasible {
                "*"
            } else {
                ""
            };
            let (success, error) = e.accuracy.as_ref().map_or(("-".to_string(), "-".to_string()), |a| {
                (format!("{:.2}", a.success_rate), format!("{:.4}", a.mean_error))
            });
            let _ = writeln!(
                out,
                "{:<2}{:>5}{:>5}{:>7.2}{:>14.3}{:>10}{:>12}",
                mark, e.config.pp_perception, e.config.pp_generation, e.config.alpha, e.throughput, success, error
            );
        }
        let _ = writeln!(
            out,
            "chosen: pp=({}, {}) alpha={}",
            self.chosen.pp_perception, self.chosen.pp_generation, self.chosen.alpha
        );
        out
    }
}

/// Search driver bound to one request.
pub struct Tuner<'a> {
    req: &'a TuneRequest,
    exec: Executor,
    strategy: Strategy,
}

impl<'a> Tuner<'a> {
    pub fn new(req: &'a TuneRequest) -> Result<Self, TuneError> {
        req.validate()?;
        Ok(Self {
            exec: Executor::new(req.policy.clone(), req.env.clone())?,
            req,
            strategy: Strategy::default(),
        })
    }

    pub fn with_strategy(mut self, strategy: Strategy) -> Self {
        self.strategy = strategy;
        self
    }

    /// Virtual-time throughput of `cfg` in actions per second.
    pub fn throughput(&self, cfg: &PipelineConfig) -> Result<f64, TuneError> {
        let out = self.exec.run_pipelined(cfg)?;
        Ok(out.metrics().map(|m| m.throughput).unwrap_or(0.0))
    }

    fn evaluate(&self, cfg: PipelineConfig, strategy: Strategy) -> Result<TuneEntry, TuneError> {
        let throughput = self.throughput(&cfg)?;
        let feasible = throughput >= self.req.throughput_requirement;
        let accuracy = if feasible {
            Some(
                self.exec
                    .accuracy(&RunSpec::Pipe(cfg.clone()), &self.req.seeds, strategy)?,
            )
        } else {
            None
        };
        Ok(TuneEntry {
            config: cfg,
            throughput,
            feasible,
            accuracy,
        })
    }

    /// Grid points run in parallel; seeds within a point run sequentially.
    fn evaluate_all(&self, configs: &[PipelineConfig]) -> Result<Vec<TuneEntry>, TuneError> {
        par::map_with(self.strategy, configs, |cfg| {
            self.evaluate(cfg.clone(), Strategy::Sequential)
        })
        .into_iter()
        .collect()
    }

    pub fn grid_search(&self) -> Result<TuneResult, TuneError> {
        let configs: Vec<PipelineConfig> = self
            .req
            .grid()
            .into_iter()
            .map(|(p, g)| PipelineConfig {
                pp_perception: p,
                pp_generation: g,
                ..self.req.base.clone()
            })
            .collect();
        let log = self.evaluate_all(&configs)?;
        let mut ranked: Vec<TuneEntry> = log.iter().filter(|e| e.feasible).cloned().collect();
        ranked.sort_by(rank);
        let Some(best) = ranked.first() else {
            let best = log
                .iter()
                .max_by(|a, b| a.throughput.total_cmp(&b.throughput).then(b.depth().cmp(&a.depth())))
                .cloned()
                .ok_or_else(|| TuneError::InvalidRequest("empty grid".into()))?;
            return Err(TuneError::NoFeasibleConfig {
                requirement: self.req.throughput_requirement,
                best: Box::new(best),
            });
        };
        let alpha = self.finetune_alpha(&best.config)?;
        Ok(TuneResult {
            throughput_requirement: self.req.throughput_requirement,
            seeds: self.req.seeds.clone(),
            chosen: alpha.config().clone(),
            ranked,
            log,
            alpha,
        })
    }

    /// Picks the most accurate alpha from the request's grid whose throughput
    /// still meets the requirement. `base` stays chosen when nothing beats it.
    pub fn finetune_alpha(&self, base: &PipelineConfig) -> Result<AlphaOutcome, TuneError> {
        if base.merge_autoregressive && self.req.policy.kind() == ContextKind::Autoregressive {
            return Ok(AlphaOutcome::NotApplicable { config: base.clone() });
        }
        let mut alphas = self.req.alpha_grid.clone();
        alphas.sort_by(f64::total_cmp);
        alphas.dedup();
        let configs: Vec<PipelineConfig> = alphas.iter().map(|&a| base.clone().with_alpha(a)).collect();
        let log = self.evaluate_all(&configs)?;
        let base_entry = match log.iter().find(|e| e.config == *base) {
            Some(e) => e.clone(),
            None => self.evaluate(base.clone(), self.strategy)?,
        };
        let best = log
            .iter()
            .filter(|e| e.feasible)
            .chain(std::iter::once(&base_entry).filter(|e| e.feasible))
            .min_by(|a, b| rank(a, b))
            .map_or_else(|| base.clone(), |e| e.config.clone());
        Ok(AlphaOutcome::Tuned { config: best, log })
    }
}

/// Runs the full search for `req`.
pub fn grid_search(req: &TuneRequest) -> Result<TuneResult, TuneError> {
    Tuner::new(req)?.grid_search()
}

/// Tunes only the skewness of `base`.
pub fn finetune_alpha(base: &PipelineConfig, alpha_grid: &[f64], req: &TuneRequest) -> Result<AlphaOutcome, TuneError> {
    let req = TuneRequest {
        alpha_grid: alpha_grid.to_vec(),
        ..req.clone()
    };
    Tuner::new(&req)?.finetune_alpha(base)
}
