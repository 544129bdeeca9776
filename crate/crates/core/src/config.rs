//! Experiment configuration shared by the command-line runner and tests.
//!
//! The format is any serde text format; the CLI uses TOML. Unknown keys are
//! rejected everywhere and `schema_version` must be present. Fields absent
//! from the file take the defaults documented on each type.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::ContextKind;
use crate::envsim::EnvConfig;
use crate::executor::wall::WallConfig;
use crate::executor::{ExecError, Executor, ParallelConfig, PipelineConfig, RunSpec};
use crate::policy::{GenerationModel, PerceptionModel, Policy, TokenCodec};
use crate::trace::{Engine, Mode};
use crate::transformer::{prefill_cost_units, TransformerConfig};
use crate::tuner::TuneRequest;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("unsupported schema_version {0} (expected {SCHEMA_VERSION})")]
    UnsupportedSchema(u32),
    #[error("{key}: {message}")]
    Invalid { key: String, message: String },
}

fn invalid<T>(key: &str, message: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid {
        key: key.to_string(),
        message: message.into(),
    })
}

/// Derives autoregressive step costs from the toy transformer's flop counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerCosts {
    #[serde(default)]
    pub model: TransformerConfig,
    /// Flops executed per virtual cost unit.
    pub flops_per_unit: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySpec {
    pub kind: ContextKind,
    /// Defaults to `[5, 5, 5, 5]` (conditioning) or `[10, 10]` (autoregressive).
    pub perception_costs: Option<Vec<u64>>,
    /// Refinement steps `n` of a conditioning policy.
    pub iterations: u32,
    pub eta: f64,
    pub step_cost: u64,
    /// Action tokens `l_a` of an autoregressive policy.
    pub action_len: usize,
    /// Defaults to 20, or to the transformer-derived cost when `transformer` is set.
    pub prefill_cost: Option<u64>,
    /// Defaults to 10, or to the transformer-derived cost when `transformer` is set.
    pub decode_cost: Option<u64>,
    pub transformer: Option<TransformerCosts>,
    pub max_step: f64,
}

impl Default for PolicySpec {
    fn default() -> Self {
        Self {
            kind: ContextKind::Conditioning,
            perception_costs: None,
            iterations: 100,
            eta: 0.08,
            step_cost: 1,
            action_len: TokenCodec::SCHEMA_LEN,
            prefill_cost: None,
            decode_cost: None,
            transformer: None,
            max_step: 0.5,
        }
    }
}

impl PolicySpec {
    pub fn build(&self) -> Result<Policy, ConfigError> {
        let costs = self.perception_costs.clone().unwrap_or_else(|| match self.kind {
            ContextKind::Conditioning => vec![5; 4],
            ContextKind::Autoregressive => vec![10; 2],
        });
        if costs.is_empty() || costs.contains(&0) {
            return invalid("policy.perception_costs", "needs at least one positive cost");
        }
        if !(self.max_step > 0.0 && self.max_step.is_finite()) {
            return invalid("policy.max_step", "must be positive");
        }
        let generation = match self.kind {
            ContextKind::Conditioning => {
                if self.iterations == 0 {
                    return invalid("policy.iterations", "must be positive");
                }
                if !(self.eta > 0.0 && self.eta <= 1.0) {
                    return invalid("policy.eta", format!("{} is outside (0, 1]", self.eta));
                }
                if self.step_cost == 0 {
                    return invalid("policy.step_cost", "must be positive");
                }
                GenerationModel::refinement(self.iterations, self.eta, self.step_cost, self.max_step)
            }
            ContextKind::Autoregressive => {
                if self.action_len < TokenCodec::SCHEMA_LEN {
                    return invalid(
                        "policy.action_len",
                        format!(
                            "{} is below the {}-token schema",
                            self.action_len,
                            TokenCodec::SCHEMA_LEN
                        ),
                    );
                }
                let (mut prefill, mut decode) = (20, 10);
                if let Some(t) = &self.transformer {
                    if t.flops_per_unit == 0 {
                        return invalid("policy.transformer.flops_per_unit", "must be positive");
                    }
                    if let Err(e) = t.model.validate() {
                        return invalid("policy.transformer.model", e.to_string());
                    }
                    // Vision token, language token and the full action prefix.
                    let m = 2 + self.action_len;
                    prefill = prefill_cost_units(&t.model, m, t.flops_per_unit);
                    decode = t.model.decode_flops(m).div_ceil(t.flops_per_unit).max(1);
                }
                let prefill = self.prefill_cost.unwrap_or(prefill);
                let decode = self.decode_cost.unwrap_or(decode);
                if prefill == 0 || decode == 0 {
                    return invalid("policy.prefill_cost", "prefill and decode costs must be positive");
                }
                GenerationModel::autoregressive_with_len(self.action_len, prefill, decode, self.max_step)
            }
        };
        let policy = Policy {
            perception: PerceptionModel::tracking(self.kind, &costs),
            generation,
        };
        if let Err(e) = policy.validate() {
            return invalid("policy", e.to_string());
        }
        Ok(policy)
    }
}

/// Throughput target of `percgen tune`: absolute, or relative to sequential execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuneSpec {
    /// Actions per virtual second.
    pub throughput: Option<f64>,
    /// Multiple of sequential throughput.
    pub speedup: Option<f64>,
    pub l_max: usize,
    pub alpha_grid: Vec<f64>,
    /// Defaults to the experiment seeds when they number at least two, else to 0..20.
    pub seeds: Option<Vec<u64>>,
}

impl Default for TuneSpec {
    fn default() -> Self {
        Self {
            throughput: None,
            speedup: None,
            l_max: 6,
            alpha_grid: vec![0.0],
            seeds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    /// Artifact directory; the CLI falls back to its output root.
    pub dir: Option<String>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_mode() -> Mode {
    Mode::Pipe
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default)]
    pub engine: Engine,
    /// Environment seeds; virtual-time runs evaluate accuracy over all of them.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub policy: PolicySpec,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub parallel: ParallelConfig,
    /// Context age of the uniform-age diagnostic mode.
    #[serde(default)]
    pub uniform_age: u64,
    #[serde(default)]
    pub wall: WallConfig,
    #[serde(default)]
    pub tune: TuneSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            mode: default_mode(),
            engine: Engine::default(),
            seeds: default_seeds(),
            policy: PolicySpec::default(),
            env: EnvConfig::default(),
            pipeline: PipelineConfig::default(),
            parallel: ParallelConfig::default(),
            uniform_age: 0,
            wall: WallConfig::default(),
            tune: TuneSpec::default(),
            output: OutputSpec::default(),
        }
    }
}

fn exec_key(e: &ExecError, fallback: &str) -> String {
    match e {
        ExecError::Env(_) => "env".into(),
        ExecError::Policy(_) => "policy".into(),
        _ => fallback.into(),
    }
}

impl ExperimentConfig {
    /// Checks every section the selected mode uses.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::UnsupportedSchema(self.schema_version));
        }
        if self.seeds.is_empty() {
            return invalid("seeds", "at least one seed is required");
        }
        if self.pipeline.engine != Engine::VirtualTime && self.pipeline.engine != self.engine {
            return invalid(
                "pipeline.engine",
                "conflicts with the top-level engine; set `engine` only",
            );
        }
        let policy = self.policy.build()?;
        if let Err(e) = self.env.validate() {
            return invalid("env", e.to_string());
        }
        match self.mode {
            Mode::Pipe => {
                if let Err(e) = self.pipeline.plan(&policy) {
                    return invalid(&exec_key(&e, "pipeline"), e.to_string());
                }
            }
            Mode::Par if self.parallel.workers == 0 || self.parallel.capacity == 0 => {
                return invalid("parallel", "workers and capacity must be positive");
            }
            Mode::Dec | Mode::UniformAge if self.engine == Engine::WallClock => {
                return invalid("engine", format!("mode {} runs only in virtual time", self.mode.name()));
            }
            _ => {}
        }
        if self.tune.throughput.is_some() && self.tune.speedup.is_some() {
            return invalid("tune", "set either throughput or speedup, not both");
        }
        Ok(())
    }

    pub fn policy(&self) -> Result<Policy, ConfigError> {
        self.policy.build()
    }

    pub fn run_spec(&self) -> RunSpec {
        match self.mode {
            Mode::Seq => RunSpec::Seq,
            Mode::Dec => RunSpec::Dec,
            Mode::Par => RunSpec::Par(self.parallel),
            Mode::Pipe => RunSpec::Pipe(PipelineConfig {
                engine: self.engine,
                ..self.pipeline.clone()
            }),
            Mode::UniformAge => RunSpec::UniformAge { age: self.uniform_age },
        }
    }

    /// Executor for the first seed.
    pub fn executor(&self) -> Result<Executor, ConfigError> {
        self.validate()?;
        let env = self.env.with_seed(self.seeds[0]);
        Executor::new(self.policy()?, env).or_else(|e| invalid(&exec_key(&e, "policy"), e.to_string()))
    }

    pub fn tune_request(&self) -> Result<TuneRequest, ConfigError> {
        self.validate()?;
        let policy = self.policy()?;
        let sequential = 1000.0 / policy.sequential_cost() as f64;
        let requirement = match (self.tune.throughput, self.tune.speedup) {
            (Some(t), None) => t,
            (None, Some(s)) => s * sequential,
            (None, None) => return invalid("tune.throughput", "a throughput or speedup requirement is required"),
            (Some(_), Some(_)) => unreachable!("rejected by validate"),
        };
        let seeds = match &self.tune.seeds {
            Some(s) => s.clone(),
            None if self.seeds.len() >= 2 => self.seeds.clone(),
            None => (0..crate::tuner::DEFAULT_SEEDS).collect(),
        };
        let req = TuneRequest {
            throughput_requirement: requirement,
            l_max: self.tune.l_max,
            alpha_grid: self.tune.alpha_grid.clone(),
            seeds,
            policy,
            env: self.env.clone(),
            base: self.pipeline.clone(),
        };
        req.validate().or_else(|e| invalid("tune", e.to_string()))?;
        Ok(req)
    }
}
