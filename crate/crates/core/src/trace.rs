//! Per-frame trace records shared by every engine.
//!
//! A trace is a header line followed by one record per frame (pipelined mode)
//! or per request/cycle (sequential, decoupled and parallel modes), written as
//! JSON lines. Virtual-time timestamps are integer cost units; wall-clock
//! timestamps are nanoseconds since the run started.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

/// Bumped whenever a field changes meaning or is removed.
pub const TRACE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Seq,
    Dec,
    Par,
    Pipe,
    /// Diagnostic: every request consumes a context exactly `k` frames old.
    UniformAge,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Seq => "seq",
            Mode::Dec => "dec",
            Mode::Par => "par",
            Mode::Pipe => "pipe",
            Mode::UniformAge => "uniform_age",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    #[default]
    VirtualTime,
    WallClock,
}

impl Engine {
    pub fn name(self) -> &'static str {
        match self {
            Engine::VirtualTime => "virtual_time",
            Engine::WallClock => "wall_clock",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeUnit {
    /// One virtual cost unit, reported as one virtual millisecond.
    Tick,
    Nanosecond,
}

impl TimeUnit {
    pub fn name(self) -> &'static str {
        match self {
            TimeUnit::Tick => "tick",
            TimeUnit::Nanosecond => "nanosecond",
        }
    }

    pub fn per_second(self) -> f64 {
        match self {
            TimeUnit::Tick => 1e3,
            TimeUnit::Nanosecond => 1e9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format_version: u32,
    pub mode: Mode,
    pub engine: Engine,
    pub time_unit: TimeUnit,
    /// Duration of one sequential request, the unit of observation age.
    pub reference_period: u64,
    /// Generation stages per request (1 outside pipelined mode).
    pub generation_stages: u32,
    /// Resolved configuration echo.
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Perception,
    Generation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageActivation {
    pub phase: Phase,
    /// 1-based stage index within its phase.
    pub stage: u32,
    /// Observation id of the request this stage works for.
    pub request: u64,
    /// Layers (perception) or iterations (generation) executed.
    pub units: u32,
    pub work: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextRead {
    pub stage: u32,
    pub request: u64,
    /// Frame whose context was read.
    pub frame: u64,
    pub version: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WriteSource {
    Perception,
    ActionTokens,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextWrite {
    pub frame: u64,
    pub version: u64,
    pub source: WriteSource,
    pub time: u64,
}

/// Life of one request, from observation capture to action emission.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub observation_id: u64,
    pub birth_frame: u64,
    pub completion_frame: u64,
    pub capture_time: u64,
    pub completion_time: u64,
    pub jct: u64,
    /// Context version consumed by each generation stage.
    pub context_versions: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Emission {
    pub request: RequestRecord,
    pub action: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<u32>>,
    /// Context age in frames for every generation iteration.
    pub staleness: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub frame: u64,
    pub start: u64,
    pub end: u64,
    pub activations: Vec<StageActivation>,
    pub reads: Vec<ContextRead>,
    pub writes: Vec<ContextWrite>,
    pub emission: Option<Emission>,
    /// Work charged to the device in this frame.
    pub work: u64,
    /// Prefill computations charged in this frame (autoregressive only).
    pub charged_prefills: u32,
    /// Ticks lost to frame overruns under the drop policy.
    pub skipped_ticks: u64,
    pub overrun: bool,
}

impl TraceRecord {
    pub fn new(frame: u64, start: u64) -> Self {
        Self {
            frame,
            start,
            end: start,
            activations: Vec::new(),
            reads: Vec::new(),
            writes: Vec::new(),
            emission: None,
            work: 0,
            charged_prefills: 0,
            skipped_ticks: 0,
            overrun: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub header: TraceHeader,
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn emissions(&self) -> impl Iterator<Item = &Emission> {
        self.records.iter().filter_map(|r| r.emission.as_ref())
    }

    pub fn requests(&self) -> Vec<RequestRecord> {
        self.emissions().map(|e| e.request.clone()).collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, serde_json::Error> {
        let mut lines = r.lines().map(|l| l.map_err(serde_json::Error::io));
        let header_line = lines.next().ok_or_else(|| serde::de::Error::custom("empty trace"))??;
        let header = serde_json::from_str(&header_line)?;
        let mut records = Vec::new();
        for line in lines {
            let line = line?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { header, records })
    }
}
