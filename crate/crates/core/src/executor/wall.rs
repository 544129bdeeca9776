//! Threaded wall-clock engine.
//!
//! Stage work is real: every cost unit holds one permit of a shared
//! [`Device`] while busy-spinning for `unit_ns`, so concurrent stages and
//! parallel workers contend for the device as they would for an accelerator.
//! Timestamps are nanoseconds since the run started. The environment stays on
//! the coordinating thread; workers receive observations and return emissions
//! over channels. Results depend on the host and are never compared exactly.

use std::collections::BTreeMap;
use std::sync::mpsc;
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{
    ExecError, Executor, FramePolicy, InFlight, OverrunPolicy, ParallelConfig, PipelineConfig, Rollout, RunOutput,
    RunSpec,
};
use crate::context::{ContextError, ContextKind, ContextStore};
use crate::policy::{IterationState, Observation, PerceptionState};
use crate::trace::{
    ContextRead, ContextWrite, Emission, Engine, Phase, StageActivation, TimeUnit, TraceHeader, TraceRecord,
    WriteSource,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WallConfig {
    /// Busy time of one cost unit.
    pub unit_ns: u64,
    /// Cost units the device runs at once.
    pub device_capacity: usize,
    /// The run stops after this many emissions.
    pub emissions: u64,
    /// A generation stage waiting longer than this for its context reports a deadlock.
    pub fetch_timeout_ms: u64,
}

impl Default for WallConfig {
    fn default() -> Self {
        Self {
            unit_ns: 20_000,
            device_capacity: 1,
            emissions: 48,
            fetch_timeout_ms: 2_000,
        }
    }
}

impl WallConfig {
    fn validate(&self) -> Result<(), ExecError> {
        if self.unit_ns == 0 || self.device_capacity == 0 || self.emissions == 0 {
            return Err(ExecError::ConfigInvalid(
                "unit_ns, device_capacity and emissions must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Shared compute device with a fixed number of concurrent unit slots.
#[derive(Debug)]
pub struct Device {
    free: Mutex<usize>,
    released: Condvar,
    unit: Duration,
}

impl Device {
    pub fn new(capacity: usize, unit: Duration) -> Self {
        Self {
            free: Mutex::new(capacity),
            released: Condvar::new(),
            unit,
        }
    }

    /// Runs `units` cost units, taking a slot for each one.
    pub fn execute(&self, units: u64) {
        for _ in 0..units {
            {
                let mut free = self.free.lock().unwrap();
                while *free == 0 {
                    free = self.released.wait(free).unwrap();
                }
                *free -= 1;
            }
            spin(self.unit);
            *self.free.lock().unwrap() += 1;
            self.released.notify_one();
        }
    }
}

fn spin(d: Duration) {
    let end = Instant::now() + d;
    while Instant::now() < end {
        std::hint::spin_loop();
    }
}

/// Sleeps until `deadline`, spinning through the last stretch for precision.
fn sleep_until(deadline: Instant) {
    const SPIN: Duration = Duration::from_micros(200);
    let now = Instant::now();
    if deadline > now + SPIN {
        thread::sleep(deadline - now - SPIN);
    }
    spin(deadline.saturating_duration_since(Instant::now()));
}

struct Clock {
    start: Instant,
    unit_ns: u64,
}

impl Clock {
    fn ns(&self) -> u64 {
        self.start.elapsed().as_nanos() as u64
    }

    /// Environment tick containing nanosecond `ns`.
    fn tick(&self, ns: u64) -> u64 {
        ns / self.unit_ns
    }

    fn at(&self, ns: u64) -> Instant {
        self.start + Duration::from_nanos(ns)
    }
}

/// Applies an emission to the environment at its completion tick, never
/// before an already applied action.
fn apply(rollout: &mut Rollout, clock: &Clock, emission: &Emission) -> Result<(), ExecError> {
    let last = rollout.env.actions().last().map_or(0, |a| a.tick);
    let tick = clock.tick(emission.request.completion_time).max(last);
    rollout.env.apply_action_at(tick, &emission.action)?;
    Ok(())
}

enum Msg {
    Ready(usize),
    Done(usize, Box<TraceRecord>),
    Failed(ExecError),
}

impl Executor {
    /// Runs `spec` on the wall-clock engine. Decoupled and uniform-age modes
    /// exist only in virtual time.
    pub fn run_wall(&self, spec: &RunSpec, cfg: &WallConfig) -> Result<RunOutput, ExecError> {
        cfg.validate()?;
        match spec {
            RunSpec::Seq => self.wall_sequential(cfg),
            RunSpec::Par(p) => self.wall_parallel(*p, cfg),
            RunSpec::Pipe(p) => self.wall_pipelined(p, cfg),
            RunSpec::Dec | RunSpec::UniformAge { .. } => Err(ExecError::ConfigInvalid(format!(
                "mode {} has no wall-clock engine",
                spec.mode().name()
            ))),
        }
    }

    fn wall_header(&self, spec: &RunSpec, cfg: &WallConfig, generation_stages: u32) -> TraceHeader {
        let mut header = self.header(spec, generation_stages);
        header.engine = Engine::WallClock;
        header.time_unit = TimeUnit::Nanosecond;
        header.reference_period = self.policy.sequential_cost() * cfg.unit_ns;
        header.config["wall"] = serde_json::to_value(cfg).expect("plain struct");
        header
    }

    fn device(&self, cfg: &WallConfig) -> Device {
        Device::new(cfg.device_capacity, Duration::from_nanos(cfg.unit_ns))
    }

    fn wall_sequential(&self, cfg: &WallConfig) -> Result<RunOutput, ExecError> {
        let spec = RunSpec::Seq;
        let mut rollout = Rollout::new(&self.env)?;
        let device = self.device(cfg);
        let gen = &self.policy.generation;
        let clock = Clock {
            start: Instant::now(),
            unit_ns: cfg.unit_ns,
        };
        let mut records = Vec::new();
        for k in 0..cfg.emissions {
            let start = clock.ns();
            let tick = clock.tick(start);
            if tick >= rollout.horizon() {
                break;
            }
            let obs = rollout.capture(tick, k)?;
            let ctx = self.policy.perception.perceive(&obs)?;
            device.execute(self.policy.perception.total_cost());
            let agent = rollout.agent();
            let mut req = InFlight::new(gen, k, k, start, &agent);
            req.stage(gen, &ctx, &obs.agent_position, &agent, gen.iterations, k, 0)?;
            device.execute(gen.sequential_cost());
            let mut rec = TraceRecord::new(k, start);
            rec.end = clock.ns();
            let emission = req.finish(gen, &rollout.agent(), k, rec.end)?;
            apply(&mut rollout, &clock, &emission)?;
            rec.activations = vec![self.perception_activation(k), self.generation_activation(k)];
            rec.work = self.policy.sequential_cost();
            rec.charged_prefills = self.sequential_prefills();
            rec.emission = Some(emission);
            records.push(rec);
            rollout.prune(k);
        }
        Ok(self.finish_run(self.wall_header(&spec, cfg, 1), records, rollout))
    }

    /// Workers start together and take a new observation as soon as they
    /// finish, so emissions bunch up whenever the device is oversubscribed.
    fn wall_parallel(&self, par: ParallelConfig, cfg: &WallConfig) -> Result<RunOutput, ExecError> {
        if par.workers == 0 || par.capacity == 0 {
            return Err(ExecError::ConfigInvalid("workers and capacity must be positive".into()));
        }
        let spec = RunSpec::Par(par);
        let mut rollout = Rollout::new(&self.env)?;
        let device = Device::new(
            cfg.device_capacity * par.capacity as usize,
            Duration::from_nanos(cfg.unit_ns),
        );
        let clock = Clock {
            start: Instant::now(),
            unit_ns: cfg.unit_ns,
        };
        let (to_main, inbox) = mpsc::channel::<Msg>();
        let mut records: Vec<TraceRecord> = Vec::new();
        let mut failure = None;

        thread::scope(|scope| {
            let mut jobs = Vec::new();
            for worker in 0..par.workers {
                let (tx, rx) = mpsc::channel::<Option<(Observation, u64)>>();
                jobs.push(tx);
                let to_main = to_main.clone();
                let (device, clock) = (&device, &clock);
                scope.spawn(move || {
                    let _ = to_main.send(Msg::Ready(worker));
                    while let Ok(Some((obs, dispatched))) = rx.recv() {
                        match self.wall_request(&obs, dispatched, device, clock) {
                            Ok(rec) => {
                                let _ = to_main.send(Msg::Done(worker, Box::new(rec)));
                            }
                            Err(e) => {
                                let _ = to_main.send(Msg::Failed(e));
                                return;
                            }
                        }
                    }
                });
            }
            drop(to_main);

            let mut issued = 0u64;
            let mut active = par.workers;
            while active > 0 {
                let Ok(msg) = inbox.recv() else { break };
                let worker = match msg {
                    Msg::Ready(w) => w,
                    Msg::Done(w, rec) => {
                        if let Err(e) = apply(&mut rollout, &clock, rec.emission.as_ref().expect("worker emits")) {
                            failure.get_or_insert(e);
                        }
                        records.push(*rec);
                        w
                    }
                    Msg::Failed(e) => {
                        failure.get_or_insert(e);
                        active -= 1;
                        continue;
                    }
                };
                let now = clock.ns();
                let tick = clock.tick(now);
                let next = if failure.is_none() && issued < cfg.emissions && tick < rollout.horizon() {
                    match rollout.capture(tick, issued) {
                        Ok(obs) => Some((obs, now)),
                        Err(e) => {
                            failure.get_or_insert(e);
                            None
                        }
                    }
                } else {
                    None
                };
                if next.is_some() {
                    issued += 1;
                } else {
                    active -= 1;
                }
                let _ = jobs[worker].send(next);
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        for (i, rec) in records.iter_mut().enumerate() {
            rec.frame = i as u64;
        }
        Ok(self.finish_run(self.wall_header(&spec, cfg, 1), records, rollout))
    }

    fn wall_request(
        &self,
        obs: &Observation,
        dispatched: u64,
        device: &Device,
        clock: &Clock,
    ) -> Result<TraceRecord, ExecError> {
        let gen = &self.policy.generation;
        let ctx = self.policy.perception.perceive(obs)?;
        device.execute(self.policy.perception.total_cost());
        let mut req = InFlight::new(gen, obs.id, obs.id, dispatched, &obs.agent_position);
        req.stage(
            gen,
            &ctx,
            &obs.agent_position,
            &obs.agent_position,
            gen.iterations,
            obs.id,
            0,
        )?;
        device.execute(gen.sequential_cost());
        let mut rec = TraceRecord::new(obs.id, dispatched);
        rec.end = clock.ns();
        rec.emission = Some(req.finish(gen, &obs.agent_position, obs.id, rec.end)?);
        rec.activations = vec![self.perception_activation(obs.id), self.generation_activation(obs.id)];
        rec.work = self.policy.sequential_cost();
        rec.charged_prefills = self.sequential_prefills();
        Ok(rec)
    }

    /// Every stage of a frame runs on its own thread; the frame ends when all
    /// of them have finished (and, under a fixed interval, at the next tick).
    fn wall_pipelined(&self, cfg: &PipelineConfig, wall: &WallConfig) -> Result<RunOutput, ExecError> {
        let plan = cfg.plan(&self.policy)?;
        let spec = RunSpec::Pipe(cfg.clone());
        let mut rollout = Rollout::new(&self.env)?;
        let store = ContextStore::new(cfg.store_capacity, self.policy.generation.action_len(), cfg.read_policy)?;
        let device = self.device(wall);
        let gen = &self.policy.generation;
        let kind = self.policy.kind();
        let offset = cfg.offset_for(kind);
        let lag = offset.unsigned_abs();
        let pp_p = plan.pp_perception() as u64;
        let pp_g = plan.pp_generation() as u64;
        let perception_costs = plan.perception_stage_costs(&self.policy.perception.layer_costs());
        let merged = cfg.merge_autoregressive && kind == ContextKind::Autoregressive;
        let first_gen = pp_p - 1 + lag;
        let timeout = Duration::from_millis(wall.fetch_timeout_ms);
        let interval_ns = match cfg.frame_policy {
            FramePolicy::FixedInterval { interval } => Some(interval * wall.unit_ns),
            FramePolicy::AsFastAsPossible => None,
        };
        let clock = Clock {
            start: Instant::now(),
            unit_ns: wall.unit_ns,
        };

        let mut perceiving: BTreeMap<u64, PerceptionState> = BTreeMap::new();
        let mut generating: BTreeMap<u64, InFlight> = BTreeMap::new();
        let mut frame_starts = Vec::new();
        let mut records = Vec::new();
        let mut emitted = 0;
        let mut start_ns = 0u64;
        let mut f = 0u64;

        while emitted < wall.emissions {
            if interval_ns.is_some() {
                sleep_until(clock.at(start_ns));
            } else {
                start_ns = clock.ns();
            }
            let tick = clock.tick(start_ns);
            if tick >= rollout.horizon() {
                break;
            }
            store.begin_frame(f);
            frame_starts.push(start_ns);
            let mut rec = TraceRecord::new(f, start_ns);
            let obs = rollout.capture(tick, f)?;
            perceiving.insert(f, self.policy.perception.start(&obs)?);

            let perception_tasks: Vec<(u64, u64, PerceptionState)> = (1..=pp_p)
                .filter_map(|s| f.checked_sub(s - 1).map(|b| (s, b)))
                .map(|(s, b)| (s, b, perceiving.remove(&b).expect("perception state in flight")))
                .collect();
            let agent = rollout.agent();
            let mut generation_tasks = Vec::new();
            for s in 1..=pp_g {
                let Some(b) = f.checked_sub(first_gen + s - 1) else {
                    break;
                };
                let req = if s == 1 {
                    InFlight::new(gen, b, b, frame_starts[b as usize], &agent)
                } else {
                    generating.remove(&b).expect("request in flight")
                };
                generation_tasks.push((s, b, req));
            }
            let slots = generation_tasks
                .iter()
                .map(|(s, _, _)| plan.generation_stages[*s as usize - 1])
                .max()
                .unwrap_or(0);

            let observed = &rollout.observed_at;
            let (store, device) = (&store, &device);
            type PerceptionDone = Result<(u64, u64, Option<PerceptionState>, Option<u64>), ExecError>;
            type GenerationDone = Result<(u64, u64, InFlight, u64), ExecError>;
            let (perception_done, generation_done): (Vec<PerceptionDone>, Vec<GenerationDone>) =
                thread::scope(|scope| {
                    let p_handles: Vec<_> = perception_tasks
                        .into_iter()
                        .map(|(s, b, mut state)| {
                            let range = plan.perception_stages[s as usize - 1].clone();
                            let work = perception_costs[s as usize - 1];
                            scope.spawn(move || -> PerceptionDone {
                                self.policy.perception.run_layers(&mut state, range)?;
                                device.execute(work);
                                if s == pp_p {
                                    let version = store.publish(self.policy.perception.finalize(state)?, f)?;
                                    Ok((s, b, None, Some(version.0)))
                                } else {
                                    Ok((s, b, Some(state), None))
                                }
                            })
                        })
                        .collect();
                    let g_handles: Vec<_> = generation_tasks
                        .into_iter()
                        .map(|(s, b, mut req)| {
                            let count = plan.generation_stages[s as usize - 1];
                            let agent = agent.clone();
                            scope.spawn(move || -> GenerationDone {
                                let fetched = store.wait_fetch(f, offset, timeout).map_err(|e| match e {
                                    ContextError::Timeout(target) => ExecError::DeadlockDetected {
                                        frame: f,
                                        stage: s as u32,
                                        target: target as i64,
                                    },
                                    other => other.into(),
                                })?;
                                let source = fetched.context.source_observation_id;
                                req.stage(
                                    gen,
                                    &fetched.context,
                                    &observed[&source],
                                    &agent,
                                    count,
                                    f - lag,
                                    fetched.version.0,
                                )?;
                                if !merged {
                                    device.execute(gen.stage_cost(count));
                                }
                                Ok((s, b, req, fetched.version.0))
                            })
                        })
                        .collect();
                    if merged {
                        device.execute(gen.stage_cost(slots));
                    }
                    (
                        p_handles
                            .into_iter()
                            .map(|h| h.join().expect("stage thread panicked"))
                            .collect(),
                        g_handles
                            .into_iter()
                            .map(|h| h.join().expect("stage thread panicked"))
                            .collect(),
                    )
                });

            let mut work = 0;
            for done in perception_done {
                let (s, b, state, version) = done?;
                let w = perception_costs[s as usize - 1];
                work += w;
                rec.activations.push(StageActivation {
                    phase: Phase::Perception,
                    stage: s as u32,
                    request: b,
                    units: plan.perception_stages[s as usize - 1].len() as u32,
                    work: w,
                });
                if let Some(state) = state {
                    perceiving.insert(b, state);
                }
                if let Some(version) = version {
                    rec.writes.push(ContextWrite {
                        frame: f,
                        version,
                        source: WriteSource::Perception,
                        time: start_ns,
                    });
                }
            }
            let mut finishing = None;
            let mut prefills = 0;
            for done in generation_done {
                let (s, b, req, version) = done?;
                let count = plan.generation_stages[s as usize - 1];
                let w = gen.stage_cost(count);
                prefills += 1;
                if !merged {
                    work += w;
                }
                rec.reads.push(ContextRead {
                    stage: s as u32,
                    request: b,
                    frame: f - lag,
                    version,
                });
                rec.activations.push(StageActivation {
                    phase: Phase::Generation,
                    stage: s as u32,
                    request: b,
                    units: count,
                    work: w,
                });
                if s == pp_g {
                    finishing = Some(b);
                }
                generating.insert(b, req);
            }
            if merged {
                work += gen.stage_cost(slots);
                prefills = u32::from(slots > 0);
            }
            rec.work = work;
            rec.charged_prefills = if kind == ContextKind::Autoregressive {
                prefills
            } else {
                0
            };

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
                        time: clock.ns(),
                    });
                }
            }

            let busy_end = clock.ns();
            let end = match interval_ns {
                None => busy_end,
                Some(interval) if busy_end <= start_ns + interval => start_ns + interval,
                Some(interval) => {
                    rec.overrun = true;
                    match cfg.overrun {
                        OverrunPolicy::Stretch => busy_end,
                        OverrunPolicy::Drop => {
                            let span = (busy_end - start_ns).div_ceil(interval) * interval;
                            rec.skipped_ticks = (span - interval) / wall.unit_ns;
                            start_ns + span
                        }
                    }
                }
            };
            if interval_ns.is_some() {
                sleep_until(clock.at(end));
            }
            rec.end = end;
            if let Some(b) = finishing {
                let req = generating.remove(&b).expect("finishing request");
                let emission = req.finish(gen, &rollout.agent(), f, end)?;
                apply(&mut rollout, &clock, &emission)?;
                rec.emission = Some(emission);
                emitted += 1;
            }
            records.push(rec);
            rollout.prune(f.saturating_sub(pp_p + pp_g + lag + cfg.store_capacity as u64));
            start_ns = end;
            f += 1;
        }
        Ok(self.finish_run(self.wall_header(&spec, wall, pp_g as u32), records, rollout))
    }
}
