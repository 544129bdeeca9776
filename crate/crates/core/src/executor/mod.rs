//! Frame executor and baseline modes.
//!
//! The virtual-time engine here is single-threaded and exact: every stage's
//! duration is its declared cost, timestamps are integer ticks and a run is a
//! pure function of `(policy, env config, run spec)`. [`wall`] holds the
//! threaded wall-clock engine used for interference and jitter measurements.
//!
//! Pipelined schedule, with `d = -fetch_offset`: a request born in frame `b`
//! runs perception stage `s` in frame `b + s - 1` and publishes its context
//! in frame `b + pp_p - 1`. Its generation stage `s` runs in frame
//! `b + pp_p - 1 + d + s - 1` and reads the context of that frame minus `d`,
//! so the first generation stage always consumes the request's own
//! perception output and later stages consume newer ones. The action is
//! emitted at the end of the frame running the last generation stage.

pub mod wall;

use std::collections::BTreeMap;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{ContextError, ContextKind, ContextStore, ReadPolicy};
use crate::envsim::{EnvConfig, EnvError, Evaluation, TrackingEnv};
use crate::metrics::{self, MetricsError, RolloutMetrics};
use crate::par::{self, Strategy};
use crate::partition::{PartitionError, StagePlan};
use crate::policy::{
    egocentric, ActionOutput, ActionValues, GenerationModel, IterationState, Observation, Policy, PolicyError,
};
use crate::trace::{
    ContextRead, ContextWrite, Emission, Engine, Mode, Phase, RequestRecord, StageActivation, TimeUnit, Trace,
    TraceHeader, TraceRecord, WriteSource, TRACE_FORMAT_VERSION,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExecError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("deadlock: generation stage {stage} in frame {frame} waits on the context of frame {target}, which is never published")]
    DeadlockDetected { frame: u64, stage: u32, target: i64 },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FramePolicy {
    /// A frame lasts exactly as long as its slowest stage.
    #[default]
    AsFastAsPossible,
    /// Frames start on multiples of `interval` ticks.
    FixedInterval { interval: u64 },
}

/// What a fixed-interval frame does when its stages take longer than the interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OverrunPolicy {
    /// The frame ends when its work ends; later ticks shift.
    #[default]
    Stretch,
    /// The frame ends on the next tick after its work ends; skipped ticks are counted.
    Drop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub pp_perception: usize,
    pub pp_generation: usize,
    /// Defaults to 0 for conditioning policies and -1 for autoregressive ones.
    pub fetch_offset: Option<i64>,
    pub alpha: f64,
    pub frame_policy: FramePolicy,
    pub overrun: OverrunPolicy,
    pub engine: Engine,
    pub merge_autoregressive: bool,
    /// Ring capacity of the context store.
    pub store_capacity: usize,
    pub read_policy: ReadPolicy,
    /// Work units the device completes per tick across all concurrent
    /// stages; unbounded when absent.
    pub device_capacity: Option<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            pp_perception: 1,
            pp_generation: 1,
            fetch_offset: None,
            alpha: 0.0,
            frame_policy: FramePolicy::default(),
            overrun: OverrunPolicy::default(),
            engine: Engine::default(),
            merge_autoregressive: false,
            store_capacity: 2,
            read_policy: ReadPolicy::default(),
            device_capacity: None,
        }
    }
}

impl PipelineConfig {
    pub fn new(pp_perception: usize, pp_generation: usize) -> Self {
        Self {
            pp_perception,
            pp_generation,
            ..Self::default()
        }
    }

    pub fn with_offset(mut self, offset: i64) -> Self {
        self.fetch_offset = Some(offset);
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn depth(&self) -> usize {
        self.pp_perception + self.pp_generation
    }

    pub fn offset_for(&self, kind: ContextKind) -> i64 {
        self.fetch_offset.unwrap_or(match kind {
            ContextKind::Conditioning => 0,
            ContextKind::Autoregressive => -1,
        })
    }

    /// Validates the configuration against `policy` and computes its stage plan.
    pub fn plan(&self, policy: &Policy) -> Result<StagePlan, ExecError> {
        let bad = |m: String| Err(ExecError::ConfigInvalid(m));
        if self.pp_perception == 0 || self.pp_generation == 0 {
            return bad(format!(
                "pipeline degrees must be positive (pp_perception = {}, pp_generation = {})",
                self.pp_perception, self.pp_generation
            ));
        }
        if self.store_capacity < 2 {
            return bad(format!("store_capacity {} < 2", self.store_capacity));
        }
        let offset = self.offset_for(policy.kind());
        if offset > 0 {
            return bad(format!("fetch_offset {offset} must not be positive"));
        }
        if offset.unsigned_abs() as usize >= self.store_capacity {
            return bad(format!(
                "|fetch_offset| = {} must be below the store capacity {}",
                offset.unsigned_abs(),
                self.store_capacity
            ));
        }
        if let FramePolicy::FixedInterval { interval: 0 } = self.frame_policy {
            return bad("frame interval must be positive".into());
        }
        if let Some(c) = self.device_capacity {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("device_capacity {c} must be positive and finite"));
            }
        }
        if !self.alpha.is_finite() {
            return bad("alpha must be finite".into());
        }
        policy.validate()?;
        Ok(StagePlan::new(
            &policy.perception.layer_costs(),
            self.pp_perception,
            policy.generation.iterations,
            self.pp_generation,
            self.alpha,
        )?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParallelConfig {
    pub workers: usize,
    /// Requests the shared device runs at full speed; more concurrent
    /// requests share it equally.
    pub capacity: u32,
}

impl Default for ParallelConfig {
    fn default() -> Self {
        Self {
            workers: 2,
            capacity: 1,
        }
    }
}

/// One execution mode with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RunSpec {
    Seq,
    Dec,
    Par(ParallelConfig),
    Pipe(PipelineConfig),
    /// Every request consumes the context captured `age` frames earlier.
    UniformAge {
        age: u64,
    },
}

impl RunSpec {
    pub fn mode(&self) -> Mode {
        match self {
            RunSpec::Seq => Mode::Seq,
            RunSpec::Dec => Mode::Dec,
            RunSpec::Par(_) => Mode::Par,
            RunSpec::Pipe(_) => Mode::Pipe,
            RunSpec::UniformAge { .. } => Mode::UniformAge,
        }
    }
}

/// Result of one rollout.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: Trace,
    pub env: TrackingEnv,
    pub evaluation: Evaluation,
}

impl RunOutput {
    /// Emitted actions in emission order.
    pub fn actions(&self) -> Vec<ActionOutput> {
        self.trace
            .emissions()
            .map(|e| ActionOutput {
                values: match &e.tokens {
                    Some(t) => ActionValues::Tokens(t.clone()),
                    None => ActionValues::Continuous(e.action.clone()),
                },
                action: e.action.clone(),
                emitted_frame: e.request.completion_frame,
                staleness_profile: e.staleness.clone(),
            })
            .collect()
    }

    pub fn requests(&self) -> Vec<RequestRecord> {
        self.trace.requests()
    }

    /// Timing metrics from the trace plus this rollout's accuracy.
    pub fn metrics(&self) -> Result<RolloutMetrics, MetricsError> {
        let mut m = metrics::summarize(&self.trace)?;
        m.accuracy = Some(metrics::Accuracy::from_evaluations(std::slice::from_ref(
            &self.evaluation,
        )));
        Ok(m)
    }
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// A request between its first generation stage and its emission.
struct InFlight {
    observation_id: u64,
    birth_frame: u64,
    capture_time: u64,
    state: IterationState,
    /// Agent position the iteration state is expressed relative to.
    base: Vec<f64>,
    versions: Vec<u64>,
    /// Frame whose context each iteration consumed.
    context_frames: Vec<u64>,
}

impl InFlight {
    fn new(gen: &GenerationModel, observation_id: u64, birth_frame: u64, capture_time: u64, agent: &[f64]) -> Self {
        Self {
            observation_id,
            birth_frame,
            capture_time,
            state: gen.initial_state(),
            base: agent.to_vec(),
            versions: Vec::new(),
            context_frames: Vec::new(),
        }
    }

    /// Runs `count` iterations on `ctx`, observed with the agent at
    /// `observed_at`, after rebasing onto the current agent position.
    #[allow(clippy::too_many_arguments)]
    fn stage(
        &mut self,
        gen: &GenerationModel,
        ctx: &crate::context::PublicContext,
        observed_at: &[f64],
        agent: &[f64],
        count: u32,
        context_frame: u64,
        version: u64,
    ) -> Result<(), PolicyError> {
        gen.rebase(&mut self.state, &sub(agent, &self.base));
        self.base = agent.to_vec();
        let local = egocentric(ctx, &sub(agent, observed_at));
        for _ in 0..count {
            gen.generate_step(&mut self.state, &local)?;
            self.context_frames.push(context_frame);
        }
        self.versions.push(version);
        Ok(())
    }

    fn finish(
        self,
        gen: &GenerationModel,
        agent: &[f64],
        completion_frame: u64,
        completion_time: u64,
    ) -> Result<Emission, PolicyError> {
        let out = gen.finish_rebased(&self.state, &sub(agent, &self.base))?;
        let tokens = match out.values {
            ActionValues::Tokens(t) => Some(t),
            ActionValues::Continuous(_) => None,
        };
        Ok(Emission {
            request: RequestRecord {
                observation_id: self.observation_id,
                birth_frame: self.birth_frame,
                completion_frame,
                capture_time: self.capture_time,
                completion_time,
                jct: completion_time - self.capture_time,
                context_versions: self.versions,
            },
            action: out.action,
            tokens,
            staleness: self
                .context_frames
                .iter()
                .map(|&c| completion_frame.saturating_sub(c) as f64)
                .collect(),
        })
    }
}

/// Environment plus the agent position recorded at every capture.
struct Rollout {
    env: TrackingEnv,
    observed_at: BTreeMap<u64, Vec<f64>>,
}

impl Rollout {
    fn new(cfg: &EnvConfig) -> Result<Self, ExecError> {
        Ok(Self {
            env: TrackingEnv::new(cfg.clone())?,
            observed_at: BTreeMap::new(),
        })
    }

    fn horizon(&self) -> u64 {
        self.env.config().horizon()
    }

    fn capture(&mut self, tick: u64, id: u64) -> Result<Observation, ExecError> {
        let obs = self.env.observe_at(tick, id)?;
        self.observed_at.insert(id, obs.agent_position.clone());
        Ok(obs)
    }

    fn observed_at(&self, id: u64) -> Vec<f64> {
        self.observed_at[&id].clone()
    }

    fn agent(&self) -> Vec<f64> {
        self.env.agent().to_vec()
    }

    fn emit(&mut self, emission: &Emission) -> Result<(), ExecError> {
        self.env
            .apply_action_at(emission.request.completion_time, &emission.action)?;
        Ok(())
    }

    /// Drops capture records older than `keep_from`.
    fn prune(&mut self, keep_from: u64) {
        self.observed_at = self.observed_at.split_off(&keep_from);
    }
}

/// Deterministic virtual-time executor for one policy and environment.
#[derive(Debug, Clone)]
pub struct Executor {
    policy: Policy,
    env: EnvConfig,
}

impl Executor {
    pub fn new(policy: Policy, env: EnvConfig) -> Result<Self, ExecError> {
        policy.validate()?;
        env.validate()?;
        Ok(Self { policy, env })
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn env_config(&self) -> &EnvConfig {
        &self.env
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            policy: self.policy.clone(),
            env: self.env.with_seed(seed),
        }
    }

    /// Runs `spec` once per seed, in seed order.
    pub fn run_seeds(&self, spec: &RunSpec, seeds: &[u64], strategy: Strategy) -> Result<Vec<RunOutput>, ExecError> {
        par::map_with(strategy, seeds, |&seed| self.with_seed(seed).run(spec))
            .into_iter()
            .collect()
    }

    /// Accuracy of `spec` over `seeds`.
    pub fn accuracy(&self, spec: &RunSpec, seeds: &[u64], strategy: Strategy) -> Result<metrics::Accuracy, ExecError> {
        let evals: Vec<Evaluation> = self
            .run_seeds(spec, seeds, strategy)?
            .into_iter()
            .map(|o| o.evaluation)
            .collect();
        Ok(metrics::Accuracy::from_evaluations(&evals))
    }

    pub fn run(&self, spec: &RunSpec) -> Result<RunOutput, ExecError> {
        match spec {
            RunSpec::Seq => self.run_sequential(),
            RunSpec::Dec => self.run_decoupled(),
            RunSpec::Par(p) => self.run_parallel(*p),
            RunSpec::Pipe(p) if p.engine == Engine::WallClock => self.run_wall(spec, &wall::WallConfig::default()),
            RunSpec::Pipe(p) => self.run_pipelined(p),
            RunSpec::UniformAge { age } => self.run_uniform_age(*age),
        }
    }

    fn header(&self, spec: &RunSpec, generation_stages: u32) -> TraceHeader {
        TraceHeader {
            format_version: TRACE_FORMAT_VERSION,
            mode: spec.mode(),
            engine: Engine::VirtualTime,
            time_unit: TimeUnit::Tick,
            reference_period: self.policy.sequential_cost(),
            generation_stages,
            config: serde_json::json!({
                "run": spec,
                "policy": self.policy,
                "env": self.env,
            }),
        }
    }

    fn finish_run(&self, header: TraceHeader, records: Vec<TraceRecord>, rollout: Rollout) -> RunOutput {
        let evaluation = rollout.env.evaluate();
        RunOutput {
            trace: Trace { header, records },
            env: rollout.env,
            evaluation,
        }
    }

    fn store(&self, capacity: usize, read_policy: ReadPolicy) -> Result<ContextStore, ExecError> {
        Ok(ContextStore::new(
            capacity,
            self.policy.generation.action_len(),
            read_policy,
        )?)
    }

    fn perception_activation(&self, request: u64) -> StageActivation {
        StageActivation {
            phase: Phase::Perception,
            stage: 1,
            request,
            units: self.policy.perception.layers.len() as u32,
            work: self.policy.perception.total_cost(),
        }
    }

    fn generation_activation(&self, request: u64) -> StageActivation {
        StageActivation {
            phase: Phase::Generation,
            stage: 1,
            request,
            units: self.policy.generation.iterations,
            work: self.policy.generation.sequential_cost(),
        }
    }

    fn sequential_prefills(&self) -> u32 {
        u32::from(self.policy.kind() == ContextKind::Autoregressive)
    }

    /// One request at a time; observations arriving mid-request are never
    /// captured.
    pub fn run_sequential(&self) -> Result<RunOutput, ExecError> {
        let spec = RunSpec::Seq;
        let mut rollout = Rollout::new(&self.env)?;
        let store = self.store(2, ReadPolicy::LiveLatest)?;
        let gen = &self.policy.generation;
        let cost = self.policy.sequential_cost();
        let mut records = Vec::new();
        let (mut t, mut k) = (0, 0);
        while t < rollout.horizon() {
            let obs = rollout.capture(t, k)?;
            let mut rec = TraceRecord::new(k, t);
            let version = store.publish(self.policy.perception.perceive(&obs)?, k)?;
            rec.writes.push(ContextWrite {
                frame: k,
                version: version.0,
                source: WriteSource::Perception,
                time: t + self.policy.perception.total_cost(),
            });
            let fetched = store.fetch(k, 0)?;
            rec.reads.push(ContextRead {
                stage: 1,
                request: k,
                frame: k,
                version: fetched.version.0,
            });
            let agent = rollout.agent();
            let mut req = InFlight::new(gen, k, k, t, &agent);
            req.stage(
                gen,
                &fetched.context,
                &obs.agent_position,
                &agent,
                gen.iterations,
                k,
                fetched.version.0,
            )?;
            rec.end = t + cost;
            let emission = req.finish(gen, &rollout.agent(), k, rec.end)?;
            rollout.emit(&emission)?;
            rec.activations = vec![self.perception_activation(k), self.generation_activation(k)];
            rec.work = cost;
            rec.charged_prefills = self.sequential_prefills();
            rec.emission = Some(emission);
            records.push(rec);
            rollout.prune(k);
            t += cost;
            k += 1;
        }
        Ok(self.finish_run(self.header(&spec, 1), records, rollout))
    }

    /// Perception and generation loop independently; every generation cycle
    /// reads the newest published context.
    pub fn run_decoupled(&self) -> Result<RunOutput, ExecError> {
        let spec = RunSpec::Dec;
        let mut rollout = Rollout::new(&self.env)?;
        let store = self.store(2, ReadPolicy::LiveLatest)?;
        let gen = &self.policy.generation;
        let p = self.policy.perception.total_cost();
        let g = gen.sequential_cost();
        let horizon = rollout.horizon();

        // Contexts computed but not yet visible: (publish time, frame, context).
        let mut pending = std::collections::VecDeque::new();
        // Cycle during which each perception frame was published.
        let mut produced_cycle: BTreeMap<u64, u64> = BTreeMap::new();
        let mut activations = Vec::new();
        let mut writes = Vec::new();
        let mut records: Vec<TraceRecord> = Vec::new();
        let mut current: Option<(TraceRecord, InFlight)> = None;
        let mut next_capture = 0u64;
        let mut k = 0u64;
        let mut cycle_start = p;
        let mut cycle = 0u64;

        loop {
            let publish_at = pending.front().map(|(t, _, _)| *t);
            let capture_at = (next_capture < horizon).then_some(next_capture);
            let boundary_at = (current.is_some() || cycle_start < horizon).then_some(cycle_start);
            // Publication, then emission and cycle start, then capture.
            let next = [publish_at, boundary_at, capture_at].into_iter().flatten().min();
            let Some(now) = next else { break };
            if publish_at == Some(now) {
                let (time, frame, ctx) = pending.pop_front().expect("front exists");
                let version = store.publish(ctx, frame)?;
                writes.push(ContextWrite {
                    frame,
                    version: version.0,
                    source: WriteSource::Perception,
                    time,
                });
                produced_cycle.insert(frame, cycle.saturating_sub(1));
            } else if boundary_at == Some(now) {
                if let Some((mut rec, req)) = current.take() {
                    rec.end = now;
                    let emission = req.finish(gen, &rollout.agent(), cycle - 1, now)?;
                    rollout.emit(&emission)?;
                    rec.emission = Some(emission);
                    records.push(rec);
                }
                if now >= horizon {
                    break;
                }
                let frame = store
                    .last_published_frame()
                    .expect("first cycle starts after the first publication");
                let fetched = store.fetch(frame, 0)?;
                let mut rec = TraceRecord::new(cycle, now);
                rec.reads.push(ContextRead {
                    stage: 1,
                    request: fetched.context.source_observation_id,
                    frame,
                    version: fetched.version.0,
                });
                rec.activations.append(&mut activations);
                rec.activations
                    .push(self.generation_activation(fetched.context.source_observation_id));
                rec.writes.append(&mut writes);
                rec.work = g;
                rec.charged_prefills = self.sequential_prefills();
                let agent = rollout.agent();
                let observed = rollout.observed_at(fetched.context.source_observation_id);
                let mut req = InFlight::new(gen, fetched.context.source_observation_id, cycle, now, &agent);
                req.capture_time = fetched.context.source_observation_id * p;
                req.stage(
                    gen,
                    &fetched.context,
                    &observed,
                    &agent,
                    gen.iterations,
                    produced_cycle[&frame],
                    fetched.version.0,
                )?;
                current = Some((rec, req));
                cycle += 1;
                cycle_start = now + g;
            } else {
                let obs = rollout.capture(now, k)?;
                pending.push_back((now + p, k, self.policy.perception.perceive(&obs)?));
                activations.push(self.perception_activation(k));
                k += 1;
                next_capture = now + p;
            }
        }
        if let Some(last) = records.last_mut() {
            // Perception work finished before the final emission still counts.
            last.writes.extend(writes.into_iter().filter(|w| w.time <= last.end));
        }
        Ok(self.finish_run(self.header(&spec, 1), records, rollout))
    }

    /// `workers` independent serial requests sharing a processor-sharing
    /// device. Requests are dispatched staggered by `R / W` at start-up and
    /// re-dispatched as soon as they complete.
    pub fn run_parallel(&self, cfg: ParallelConfig) -> Result<RunOutput, ExecError> {
        if cfg.workers == 0 || cfg.capacity == 0 {
            return Err(ExecError::ConfigInvalid("workers and capacity must be positive".into()));
        }
        let spec = RunSpec::Par(cfg);
        let mut rollout = Rollout::new(&self.env)?;
        let gen = &self.policy.generation;
        let cost = self.policy.sequential_cost() as i64;
        let horizon = rollout.horizon();
        let w = cfg.workers as i64;
        let capacity = Ratio::from_integer(cfg.capacity as i64);
        let one = Ratio::from_integer(1);

        struct Job {
            id: u64,
            obs: Observation,
            dispatched: u64,
            remaining: Ratio<i64>,
        }
        let mut jobs: Vec<Job> = Vec::new();
        let mut records = Vec::new();
        let mut t = Ratio::from_integer(0i64);
        let mut staggered = 0i64;
        let mut next_id = 0u64;

        let tick = |r: Ratio<i64>| r.round().to_integer() as u64;
        let mut dispatch = |rollout: &mut Rollout, jobs: &mut Vec<Job>, at: Ratio<i64>| -> Result<(), ExecError> {
            let at_tick = tick(at);
            if at_tick < horizon {
                let obs = rollout.capture(at_tick, next_id)?;
                jobs.push(Job {
                    id: next_id,
                    obs,
                    dispatched: at_tick,
                    remaining: Ratio::from_integer(cost),
                });
                next_id += 1;
            }
            Ok(())
        };

        loop {
            let rate = if jobs.is_empty() {
                Ratio::from_integer(0)
            } else {
                (capacity / Ratio::from_integer(jobs.len() as i64)).min(one)
            };
            let complete_at = jobs.iter().map(|j| j.remaining).min().map(|r| t + r / rate);
            let stagger_at = (staggered < w).then(|| Ratio::new(staggered * cost, w));
            let take_stagger = match (stagger_at, complete_at) {
                (Some(s), Some(c)) => s < c,
                (Some(_), None) => true,
                _ => false,
            };
            let now = if take_stagger {
                stagger_at.expect("checked")
            } else if let Some(c) = complete_at {
                c
            } else {
                break;
            };
            for j in &mut jobs {
                j.remaining -= (now - t) * rate;
            }
            t = now;
            if take_stagger {
                staggered += 1;
                dispatch(&mut rollout, &mut jobs, t)?;
                continue;
            }
            let (done, running): (Vec<Job>, Vec<Job>) =
                jobs.drain(..).partition(|j| j.remaining == Ratio::from_integer(0));
            jobs = running;
            for job in done {
                let end = tick(t);
                let ctx = self.policy.perception.perceive(&job.obs)?;
                let mut req = InFlight::new(gen, job.id, job.id, job.dispatched, &job.obs.agent_position);
                req.stage(
                    gen,
                    &ctx,
                    &job.obs.agent_position,
                    &job.obs.agent_position,
                    gen.iterations,
                    job.id,
                    0,
                )?;
                let emission = req.finish(gen, &rollout.agent(), job.id, end)?;
                rollout.emit(&emission)?;
                let mut rec = TraceRecord::new(records.len() as u64, job.dispatched);
                rec.end = end;
                rec.activations = vec![self.perception_activation(job.id), self.generation_activation(job.id)];
                rec.work = cost as u64;
                rec.charged_prefills = self.sequential_prefills();
                rec.emission = Some(emission);
                records.push(rec);
                dispatch(&mut rollout, &mut jobs, t)?;
            }
        }
        Ok(self.finish_run(self.header(&spec, 1), records, rollout))
    }

    /// Diagnostic mode: frame `f` emits an action computed from the context
    /// captured in frame `f - age` (clamped at frame 0).
    pub fn run_uniform_age(&self, age: u64) -> Result<RunOutput, ExecError> {
        let spec = RunSpec::UniformAge { age };
        let mut rollout = Rollout::new(&self.env)?;
        let store = self.store(age as usize + 2, ReadPolicy::LiveLatest)?;
        let gen = &self.policy.generation;
        let cost = self.policy.sequential_cost();
        let mut records = Vec::new();
        let (mut t, mut f) = (0, 0u64);
        while t < rollout.horizon() {
            let obs = rollout.capture(t, f)?;
            let mut rec = TraceRecord::new(f, t);
            let version = store.publish(self.policy.perception.perceive(&obs)?, f)?;
            rec.writes.push(ContextWrite {
                frame: f,
                version: version.0,
                source: WriteSource::Perception,
                time: t + self.policy.perception.total_cost(),
            });
            let lag = age.min(f);
            let fetched = store.fetch(f, -(lag as i64))?;
            let source = fetched.context.source_observation_id;
            rec.reads.push(ContextRead {
                stage: 1,
                request: source,
                frame: f - lag,
                version: fetched.version.0,
            });
            let agent = rollout.agent();
            let mut req = InFlight::new(gen, source, f, t, &agent);
            req.capture_time = t.saturating_sub(lag * cost);
            req.stage(
                gen,
                &fetched.context,
                &rollout.observed_at(source),
                &agent,
                gen.iterations,
                f - lag,
                fetched.version.0,
            )?;
            rec.end = t + cost;
            let emission = req.finish(gen, &rollout.agent(), f, rec.end)?;
            rollout.emit(&emission)?;
            rec.activations = vec![self.perception_activation(f), self.generation_activation(source)];
            rec.work = cost;
            rec.charged_prefills = self.sequential_prefills();
            rec.emission = Some(emission);
            records.push(rec);
            rollout.prune(f.saturating_sub(age));
            t += cost;
            f += 1;
        }
        Ok(self.finish_run(self.header(&spec, 1), records, rollout))
    }

    /// Frame-based pipelined execution; see the module docs for the schedule.
    pub fn run_pipelined(&self, cfg: &PipelineConfig) -> Result<RunOutput, ExecError> {
        let plan = cfg.plan(&self.policy)?;
        let spec = RunSpec::Pipe(cfg.clone());
        let mut rollout = Rollout::new(&self.env)?;
        let store = self.store(cfg.store_capacity, cfg.read_policy)?;
        let gen = &self.policy.generation;
        let kind = self.policy.kind();
        let offset = cfg.offset_for(kind);
        let lag = offset.unsigned_abs();
        let pp_p = plan.pp_perception() as u64;
        let pp_g = plan.pp_generation() as u64;
        let layer_costs = self.policy.perception.layer_costs();
        let perception_costs = plan.perception_stage_costs(&layer_costs);
        let merged = cfg.merge_autoregressive && kind == ContextKind::Autoregressive;
        let charges_prefills = kind == ContextKind::Autoregressive;
        // Frame in which request `b` runs generation stage `s` is `b + first_gen + s - 1`.
        let first_gen = pp_p - 1 + lag;

        let mut perceiving = BTreeMap::new();
        let mut generating: BTreeMap<u64, InFlight> = BTreeMap::new();
        let mut frame_starts = Vec::new();
        let mut records = Vec::new();
        let (mut t, mut f) = (0u64, 0u64);

        while t < rollout.horizon() {
            store.begin_frame(f);
            frame_starts.push(t);
            let mut rec = TraceRecord::new(f, t);
            let obs = rollout.capture(t, f)?;
            perceiving.insert(f, self.policy.perception.start(&obs)?);

            let mut perception_work = Vec::new();
            let mut last_stage_work = 0;
            for s in 1..=pp_p {
                let Some(b) = f.checked_sub(s - 1) else { break };
                let mut state = perceiving.remove(&b).expect("perception state in flight");
                let range = plan.perception_stages[s as usize - 1].clone();
                self.policy.perception.run_layers(&mut state, range.clone())?;
                let work = perception_costs[s as usize - 1];
                perception_work.push(work);
                rec.activations.push(StageActivation {
                    phase: Phase::Perception,
                    stage: s as u32,
                    request: b,
                    units: range.len() as u32,
                    work,
                });
                if s == pp_p {
                    last_stage_work = work;
                    let version = store.publish(self.policy.perception.finalize(state)?, f)?;
                    rec.writes.push(ContextWrite {
                        frame: f,
                        version: version.0,
                        source: WriteSource::Perception,
                        time: t,
                    });
                } else {
                    perceiving.insert(b, state);
                }
            }

            let agent = rollout.agent();
            let mut generation_work = Vec::new();
            let mut finishing = None;
            for s in 1..=pp_g {
                let Some(b) = f.checked_sub(first_gen + s - 1) else {
                    break;
                };
                let count = plan.generation_stages[s as usize - 1];
                if s == 1 {
                    generating.insert(b, InFlight::new(gen, b, b, frame_starts[b as usize], &agent));
                }
                let fetched = store.fetch(f, offset).map_err(|e| match e {
                    ContextError::NotYetPublished(target) => ExecError::DeadlockDetected {
                        frame: f,
                        stage: s as u32,
                        target,
                    },
                    other => other.into(),
                })?;
                let context_frame = f - lag;
                let observed = rollout.observed_at(fetched.context.source_observation_id);
                let req = generating.get_mut(&b).expect("request in flight");
                req.stage(
                    gen,
                    &fetched.context,
                    &observed,
                    &agent,
                    count,
                    context_frame,
                    fetched.version.0,
                )?;
                rec.reads.push(ContextRead {
                    stage: s as u32,
                    request: b,
                    frame: context_frame,
                    version: fetched.version.0,
                });
                let work = gen.stage_cost(count);
                generation_work.push((count, work));
                rec.activations.push(StageActivation {
                    phase: Phase::Generation,
                    stage: s as u32,
                    request: b,
                    units: count,
                    work,
                });
                if s == pp_g {
                    finishing = Some(b);
                }
            }

            if kind == ContextKind::Autoregressive && store.last_published_frame().is_some() {
                let newest = finishing
                    .and_then(|b| generating.get(&b))
                    .or_else(|| generating.values().next());
                if let Some(IterationState::Tokens { tokens }) = newest.map(|r| &r.state) {
                    let version = store.update_action_tokens(f, tokens)?;
                    rec.writes.push(ContextWrite {
                        frame: f,
                        version: version.0,
                        source: WriteSource::ActionTokens,
                        time: t,
                    });
                }
            }

            // Merged autoregressive stages share one prefill over the longest prefix.
            let (generation_critical, generation_total, prefills) = if merged {
                let slots = generation_work.iter().map(|(c, _)| *c).max().unwrap_or(0);
                let cost = gen.stage_cost(slots);
                (cost, cost, u32::from(slots > 0))
            } else {
                let max = generation_work.iter().map(|(_, w)| *w).max().unwrap_or(0);
                let total = generation_work.iter().map(|(_, w)| *w).sum();
                (max, total, generation_work.len() as u32)
            };
            let max_perception = perception_work.iter().copied().max().unwrap_or(0);
            let critical = if offset == 0 {
                max_perception.max(last_stage_work + generation_critical)
            } else {
                max_perception.max(generation_critical)
            };
            let total: u64 = perception_work.iter().sum::<u64>() + generation_total;
            let busy = match cfg.device_capacity {
                Some(c) => critical.max((total as f64 / c).ceil() as u64),
                None => critical,
            }
            .max(1);
            let duration = match cfg.frame_policy {
                FramePolicy::AsFastAsPossible => busy,
                FramePolicy::FixedInterval { interval } if busy <= interval => interval,
                FramePolicy::FixedInterval { interval } => {
                    rec.overrun = true;
                    match cfg.overrun {
                        OverrunPolicy::Stretch => busy,
                        OverrunPolicy::Drop => {
                            let d = busy.div_ceil(interval) * interval;
                            rec.skipped_ticks = d - interval;
                            d
                        }
                    }
                }
            };
            rec.end = t + duration;
            rec.work = total;
            rec.charged_prefills = if charges_prefills { prefills } else { 0 };

            if let Some(b) = finishing {
                let req = generating.remove(&b).expect("finishing request");
                let emission = req.finish(gen, &rollout.agent(), f, rec.end)?;
                rollout.emit(&emission)?;
                rec.emission = Some(emission);
            }
            records.push(rec);
            rollout.prune(f.saturating_sub(pp_p + pp_g + lag + cfg.store_capacity as u64));
            t += duration;
            f += 1;
        }
        Ok(self.finish_run(self.header(&spec, pp_g as u32), records, rollout))
    }
}
