//! `percgen`: run, tune, verify and compare pipeline experiments.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context as _};
use clap::{Args, Parser, Subcommand};
use percgen_core::config::{ConfigError, ExperimentConfig};
use percgen_core::metrics::{self, RolloutMetrics};
use percgen_core::par::Strategy;
use percgen_core::trace::Engine;
use percgen_core::tuner::{self, TuneError};
use percgen_core::verify;
use serde::Serialize;

const DEFAULT_OUT: &str = "percgen-out";

#[derive(Parser)]
#[command(
    name = "percgen",
    version,
    about = "Pipelined perception/generation executor and experiment harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one experiment and write its trace, metrics and manifest.
    Run(ConfigArgs),
    /// Search pipeline shapes that meet a throughput requirement.
    Tune(ConfigArgs),
    /// Run the built-in property checks.
    Verify,
    /// Compare saved metrics files against a baseline.
    Report(ReportArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment file, or a run manifest to replay; defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set pipeline.pp_generation=4`. Repeatable;
    /// applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Artifact directory; defaults to `output.dir`, then `$PERCGEN_OUT/<name>`.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Root for default artifact directories.
    #[arg(long, env = "PERCGEN_OUT", default_value = DEFAULT_OUT)]
    out_root: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// `metrics.json` files or the run directories holding them.
    #[arg(required = true)]
    paths: Vec<PathBuf>,
    /// Label of the baseline run; defaults to the first path.
    #[arg(long)]
    baseline: Option<String>,
    /// Directory for comparison.csv and comparison.json.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
    Infeasible(anyhow::Error),
    Verify(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Verify(_) => 1,
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
            Failure::Infeasible(_) => 4,
        }
    }
}

fn config_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn runtime_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

/// Writes to stdout; a closed pipe (`percgen ... | head`) is not an error.
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    if let Err(e) = out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        if e.kind() != std::io::ErrorKind::BrokenPipe {
            eprintln!("writing output: {e}");
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Tune(args) => cmd_tune(&args),
        Command::Verify => cmd_verify(),
        Command::Report(args) => cmd_report(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Config(e) => eprintln!("config error: {e:#}"),
                Failure::Runtime(e) => eprintln!("runtime error: {e:#}"),
                Failure::Infeasible(e) => eprintln!("{e:#}"),
                Failure::Verify(names) => eprintln!("verification failed: {names}"),
            }
            ExitCode::from(f.code())
        }
    }
}

/// Parses `text` as a TOML value, falling back to a bare string.
fn parse_override_value(text: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {text}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

fn apply_override(table: &mut toml::Table, spec: &str) -> anyhow::Result<()> {
    let (key, value) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override {spec:?} is not KEY=VALUE"))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(anyhow!("override key {key:?} is malformed"));
    }
    let (last, parents) = path.split_last().expect("split yields at least one part");
    let mut node = table;
    for p in parents {
        node = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| anyhow!("override key {key:?}: {p} is not a table"))?;
    }
    node.insert(last.to_string(), parse_override_value(value.trim()));
    Ok(())
}

/// The resolved config embedded in a run manifest.
fn manifest_config(text: &str) -> anyhow::Result<toml::Table> {
    fn strip_nulls(v: &mut serde_json::Value) {
        match v {
            serde_json::Value::Object(m) => {
                m.retain(|_, x| !x.is_null());
                m.values_mut().for_each(strip_nulls);
            }
            serde_json::Value::Array(a) => a.iter_mut().for_each(strip_nulls),
            _ => {}
        }
    }
    let mut doc: serde_json::Value = serde_json::from_str(text)?;
    let mut cfg = doc
        .get_mut("resolved_config")
        .map(serde_json::Value::take)
        .ok_or_else(|| anyhow!("no resolved_config in manifest"))?;
    strip_nulls(&mut cfg);
    Ok(serde_json::from_value(cfg)?)
}

/// File, then `--set` overrides, then defaults for anything left unset.
fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, Failure> {
    let mut table = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(config_err)?;
            if path.extension().is_some_and(|e| e == "json") {
                manifest_config(&text)
            } else {
                toml::from_str::<toml::Table>(&text).map_err(anyhow::Error::from)
            }
            .with_context(|| format!("parsing {}", path.display()))
            .map_err(config_err)?
        }
        None => {
            let mut t = toml::Table::new();
            t.insert(
                "schema_version".into(),
                toml::Value::Integer(percgen_core::config::SCHEMA_VERSION.into()),
            );
            t
        }
    };
    for o in &args.overrides {
        apply_override(&mut table, o).map_err(config_err)?;
    }
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
        let key = e.path().to_string();
        config_err(anyhow!("{key}: {}", e.into_inner().message().trim()))
    })?;
    cfg.validate().map_err(|e: ConfigError| config_err(e))?;
    Ok(cfg)
}

fn output_dir(args: &ConfigArgs, cfg: &ExperimentConfig, command: &str) -> PathBuf {
    if let Some(out) = &args.out {
        return out.clone();
    }
    if let Some(dir) = &cfg.output.dir {
        return PathBuf::from(dir);
    }
    let stem = args
        .config
        .as_ref()
        .and_then(|p| p.file_stem())
        .map_or_else(|| "default".to_string(), |s| s.to_string_lossy().into_owned());
    args.out_root.join(format!("{stem}-{command}-{}", cfg.mode.name()))
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config_path: Option<String>,
    overrides: &'a [String],
    seeds: &'a [u64],
    artifacts: Vec<&'a str>,
    resolved_config: &'a ExperimentConfig,
}

fn write_artifacts(dir: &Path, files: &[(&str, String)]) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (name, content) in files {
        fs::write(dir.join(name), content).with_context(|| format!("writing {name}"))?;
    }
    Ok(())
}

/// The resolved configuration with the output location cleared, so that a
/// rerun from it never overwrites the original artifacts.
fn resolved_toml(cfg: &ExperimentConfig) -> anyhow::Result<(ExperimentConfig, String)> {
    let mut resolved = cfg.clone();
    resolved.output.dir = None;
    let text = toml::to_string(&resolved).context("serializing the resolved config")?;
    Ok((resolved, text))
}

fn manifest(
    args: &ConfigArgs,
    command: &str,
    cfg: &ExperimentConfig,
    artifacts: &[(&str, String)],
) -> anyhow::Result<String> {
    let m = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
        config_path: args.config.as_ref().map(|p| p.display().to_string()),
        overrides: &args.overrides,
        seeds: &cfg.seeds,
        artifacts: artifacts.iter().map(|(n, _)| *n).chain(["manifest.json"]).collect(),
        resolved_config: cfg,
    };
    Ok(serde_json::to_string_pretty(&m)?)
}

fn cmd_run(args: &ConfigArgs) -> Result<(), Failure> {
    let cfg = load_config(args)?;
    let exec = cfg.executor().map_err(config_err)?;
    let spec = cfg.run_spec();
    let (out, metrics) = if cfg.engine == Engine::WallClock {
        let out = exec.run_wall(&spec, &cfg.wall).map_err(runtime_err)?;
        let m = out.metrics().map_err(runtime_err)?;
        (out, m)
    } else {
        let mut runs = exec
            .run_seeds(&spec, &cfg.seeds, Strategy::default())
            .map_err(runtime_err)?;
        let evals: Vec<_> = runs.iter().map(|r| r.evaluation.clone()).collect();
        let first = runs.swap_remove(0);
        let mut m = metrics::summarize(&first.trace).map_err(runtime_err)?;
        m.accuracy = Some(metrics::Accuracy::from_evaluations(&evals));
        (first, m)
    };

    let dir = output_dir(args, &cfg, "run");
    let (resolved, resolved_text) = resolved_toml(&cfg).map_err(runtime_err)?;
    let mut files = vec![
        ("trace.jsonl", out.trace.to_jsonl()),
        ("metrics.json", metrics.to_json()),
        ("metrics.csv", metrics.to_csv()),
        ("episode.csv", out.env.episode_csv()),
        ("config.resolved.toml", resolved_text),
    ];
    let manifest = manifest(args, "run", &resolved, &files).map_err(runtime_err)?;
    files.push(("manifest.json", manifest));
    write_artifacts(&dir, &files).map_err(runtime_err)?;
    emit(&summary(&metrics));
    emit(&format!("artifacts: {}\n", dir.display()));
    Ok(())
}

fn summary(m: &RolloutMetrics) -> String {
    let unit = match m.engine {
        Engine::VirtualTime => "virtual",
        Engine::WallClock => "wall",
    };
    let mut s = format!(
        "mode {}: {} actions, throughput {:.3}/s ({unit}), jitter {:.4}, mean JCT {:.3} ms, fill {} frames\n",
        m.mode.name(),
        m.emissions,
        m.throughput,
        m.jitter,
        m.mean_jct * 1e3 / m.time_unit.per_second(),
        m.fill_frames
    );
    s += &format!(
        "staleness min/mean/max {:.2}/{:.2}/{:.2} frames\n",
        m.staleness.min, m.staleness.mean, m.staleness.max
    );
    if let Some(r) = &m.redundancy {
        s += &format!(
            "redundant perception runs {} of {} ({:.3})\n",
            r.unread, r.published, r.ratio
        );
    }
    if let Some(a) = &m.accuracy {
        s += &format!(
            "accuracy over {} seeds: mean error {:.4}, success rate {:.2}\n",
            a.seeds, a.mean_error, a.success_rate
        );
    }
    s
}

fn cmd_tune(args: &ConfigArgs) -> Result<(), Failure> {
    let cfg = load_config(args)?;
    let req = cfg.tune_request().map_err(config_err)?;
    let dir = output_dir(args, &cfg, "tune");
    match tuner::grid_search(&req) {
        Ok(result) => {
            let (resolved, resolved_text) = resolved_toml(&cfg).map_err(runtime_err)?;
            let mut files = vec![
                ("tune_result.json", result.to_json()),
                ("tune_summary.txt", result.to_text()),
                ("config.resolved.toml", resolved_text),
            ];
            let manifest = manifest(args, "tune", &resolved, &files).map_err(runtime_err)?;
            files.push(("manifest.json", manifest));
            write_artifacts(&dir, &files).map_err(runtime_err)?;
            emit(&result.to_text());
            emit(&format!("artifacts: {}\n", dir.display()));
            Ok(())
        }
        Err(e @ TuneError::NoFeasibleConfig { .. }) => {
            if let TuneError::NoFeasibleConfig { best, .. } = &e {
                let diag = serde_json::to_string_pretty(best).map_err(runtime_err)?;
                write_artifacts(&dir, &[("tune.infeasible.json", diag)]).map_err(runtime_err)?;
            }
            Err(Failure::Infeasible(e.into()))
        }
        Err(e @ TuneError::InvalidRequest(_)) => Err(config_err(e)),
        Err(e) => Err(runtime_err(e)),
    }
}

fn cmd_verify() -> Result<(), Failure> {
    let checks = verify::run_all();
    emit(&verify::format_table(&checks));
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        emit(&format!("all {} checks passed\n", checks.len()));
        Ok(())
    } else {
        Err(Failure::Verify(failed.join(", ")))
    }
}

fn cmd_report(args: &ReportArgs) -> Result<(), Failure> {
    let mut runs: Vec<(String, RolloutMetrics)> = Vec::new();
    let mut labels = BTreeSet::new();
    for path in &args.paths {
        let file = if path.is_dir() {
            path.join("metrics.json")
        } else {
            path.clone()
        };
        let text = fs::read_to_string(&file)
            .with_context(|| format!("reading {}", file.display()))
            .map_err(config_err)?;
        let m: RolloutMetrics = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", file.display()))
            .map_err(config_err)?;
        let base = file
            .parent()
            .and_then(|p| p.file_name())
            .map_or_else(|| file.display().to_string(), |n| n.to_string_lossy().into_owned());
        let mut label = base.clone();
        let mut i = 2;
        while !labels.insert(label.clone()) {
            label = format!("{base}#{i}");
            i += 1;
        }
        runs.push((label, m));
    }
    let baseline = args.baseline.clone().unwrap_or_else(|| runs[0].0.clone());
    let cmp = metrics::compare(&runs, &baseline).map_err(config_err)?;
    if let Some(dir) = &args.out {
        write_artifacts(
            dir,
            &[("comparison.csv", cmp.to_csv()), ("comparison.json", cmp.to_json())],
        )
        .map_err(runtime_err)?;
    }
    emit(&cmp.to_text());
    Ok(())
}
