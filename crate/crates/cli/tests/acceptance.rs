//! Acceptance criteria, one line per criterion. Exits non-zero if any fails.

use std::cell::Cell;
use std::fmt::Display;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use percgen_core::context::ContextKind;
use percgen_core::envsim::EnvConfig;
use percgen_core::executor::wall::WallConfig;
use percgen_core::executor::{Executor, FramePolicy, ParallelConfig, PipelineConfig, RunSpec};
use percgen_core::metrics::{self, RolloutMetrics};
use percgen_core::par::Strategy as Sweep;
use percgen_core::partition::split_generation;
use percgen_core::policy::{GenerationModel, PerceptionModel, Policy};
use percgen_core::trace::Phase;
use percgen_core::transformer::{relative_error, CausalTransformer, TransformerConfig};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: impl Display) -> Outcome {
    if ok {
        Ok(detail.to_string())
    } else {
        Err(detail.to_string())
    }
}

fn err(e: impl Display) -> String {
    e.to_string()
}

fn metrics_of(ex: &Executor, spec: RunSpec) -> Result<RolloutMetrics, String> {
    ex.run(&spec).map_err(err)?.metrics().map_err(err)
}

fn seeds() -> Vec<u64> {
    (0..20).collect()
}

fn partition_goldens() -> Outcome {
    let start = Instant::now();
    let uniform = split_generation(100, 4, 0.0).map_err(err)?;
    let half = split_generation(100, 4, 0.5).map_err(err)?;
    let skewed = split_generation(100, 5, 1.0).map_err(err)?;
    let five = split_generation(100, 5, 0.0).map_err(err)?;
    let elapsed = start.elapsed();
    let ok = uniform == [25, 25, 25, 25]
        && half.last() == Some(&46)
        && skewed.last() == Some(&64)
        && five == [20; 5]
        && elapsed < Duration::from_millis(1);
    check(
        ok,
        format!("{uniform:?} {half:?} {skewed:?} {five:?} in {}us", elapsed.as_micros()),
    )
}

fn merge_equivalence() -> Outcome {
    const TOL: f64 = 1e-5;
    let start = Instant::now();
    let mut runner = TestRunner::new(PropConfig {
        cases: 128,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let model = CausalTransformer::new(TransformerConfig::default()).map_err(err)?;
    let vocab = model.config().vocab_size as u32;
    // Each case seeds its own token sequence and split point.
    let triples = any::<u64>().prop_map(move |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = rng.random_range(2..=24);
        let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(0..vocab)).collect();
        let split = rng.random_range(1..len);
        (tokens, split)
    });
    let worst = Cell::new(0.0f64);
    runner
        .run(&triples, |(tokens, split)| {
            let (merged, _) = model.prefill(&tokens).unwrap();
            let (separate, _) = model.prefill(&tokens[..split]).unwrap();
            for (p, h) in separate.iter().enumerate() {
                let e = relative_error(&merged[p], h);
                worst.set(worst.get().max(e));
                prop_assert!(e <= TOL, "position {p}: relative error {e:e}");
            }
            Ok(())
        })
        .map_err(|e| format!("merge: {e}"))?;
    let isolation = percgen_core::verify::causal_isolation(100, 3);
    let elapsed = start.elapsed();
    check(
        isolation.passed && elapsed < Duration::from_secs(30),
        format!(
            "128 triples, worst {:.2e}; {}; {:.1}s",
            worst.get(),
            isolation.detail,
            elapsed.as_secs_f64()
        ),
    )
}

fn throughput_law() -> Outcome {
    let mut details = Vec::new();
    let mut ok = true;
    for (pp_p, pp_g) in [(3, 3), (1, 5), (2, 4), (5, 1)] {
        let policy = Policy::balanced(pp_p, 10, 10 * pp_g as u32);
        let ex = Executor::new(policy, EnvConfig::default()).map_err(err)?;
        let seq = metrics_of(&ex, RunSpec::Seq)?;
        let pipe = metrics_of(&ex, RunSpec::Pipe(PipelineConfig::new(pp_p, pp_g).with_offset(-1)))?;
        let speedup = metrics::speedup(&pipe, &seq);
        let depth = (pp_p + pp_g) as u64;
        ok &= speedup == depth as f64 && pipe.fill_frames == depth - 1;
        details.push(format!("({pp_p},{pp_g}) {speedup}x fill {}", pipe.fill_frames));
    }
    check(ok, details.join(", "))
}

fn staleness_accounting() -> Outcome {
    let ex = Executor::new(Policy::refinement_default(), EnvConfig::default()).map_err(err)?;
    let lagged = metrics_of(&ex, RunSpec::Pipe(PipelineConfig::new(2, 4).with_offset(-1)))?;
    let fresh = metrics_of(&ex, RunSpec::Pipe(PipelineConfig::new(2, 4).with_offset(0)))?;
    let one = metrics_of(
        &ex,
        RunSpec::Par(ParallelConfig {
            workers: 1,
            capacity: 1,
        }),
    )?;
    let two = metrics_of(
        &ex,
        RunSpec::Par(ParallelConfig {
            workers: 2,
            capacity: 1,
        }),
    )?;
    let ratio = two.observation_age / one.observation_age;
    let ok = lagged.final_stage_staleness.min == 1.0
        && lagged.final_stage_staleness.max == 1.0
        && fresh.final_stage_staleness.max == 0.0
        && (ratio - 2.0).abs() <= 0.05;
    check(
        ok,
        format!(
            "offset -1 age {}..{}, offset 0 age {}..{}, PAR W=2 age ratio {ratio:.3}",
            lagged.final_stage_staleness.min,
            lagged.final_stage_staleness.max,
            fresh.final_stage_staleness.min,
            fresh.final_stage_staleness.max
        ),
    )
}

fn accuracy_orderings() -> Outcome {
    let start = Instant::now();
    let seeds = seeds();
    let ex = Executor::new(Policy::refinement_default(), EnvConfig::default()).map_err(err)?;
    let error = |ex: &Executor, spec: RunSpec| -> Result<f64, String> {
        Ok(ex.accuracy(&spec, &seeds, Sweep::default()).map_err(err)?.mean_error)
    };
    let seq = error(&ex, RunSpec::Seq)?;
    let pipe = error(&ex, RunSpec::Pipe(PipelineConfig::new(1, 4).with_offset(-1)))?;
    let par = error(
        &ex,
        RunSpec::Par(ParallelConfig {
            workers: 3,
            capacity: 1,
        }),
    )?;
    let noisy: Vec<f64> = (0..=5)
        .map(|age| error(&ex, RunSpec::UniformAge { age }))
        .collect::<Result<_, _>>()?;
    let quiet = Executor::new(
        Policy::refinement_default(),
        EnvConfig {
            noise_sigma: 0.0,
            ..EnvConfig::default()
        },
    )
    .map_err(err)?;
    let noiseless: Vec<f64> = (0..=5)
        .map(|age| error(&quiet, RunSpec::UniformAge { age }))
        .collect::<Result<_, _>>()?;
    let elapsed = start.elapsed();
    let ok = pipe <= 1.10 * seq
        && par >= 1.50 * seq
        && noisy.windows(2).all(|w| w[0] <= w[1])
        && noiseless.windows(2).all(|w| w[0] < w[1])
        && elapsed < Duration::from_secs(60);
    check(
        ok,
        format!(
            "SEQ {seq:.4}, PIPE {pipe:.4} ({:.3}x), PAR W=3 {par:.4} ({:.3}x), noiseless ages 0..5 {:?}; {:.1}s",
            pipe / seq,
            par / seq,
            noiseless.iter().map(|e| format!("{e:.3}")).collect::<Vec<_>>(),
            elapsed.as_secs_f64()
        ),
    )
}

fn skew_tradeoff() -> Outcome {
    let seeds = seeds();
    let ex = Executor::new(Policy::refinement_default(), EnvConfig::fast_target()).map_err(err)?;
    let measure = |alpha: f64| -> Result<(f64, f64), String> {
        let mut cfg = PipelineConfig::new(1, 5).with_offset(0).with_alpha(alpha);
        cfg.device_capacity = Some(1.5);
        let spec = RunSpec::Pipe(cfg);
        let error = ex.accuracy(&spec, &seeds, Sweep::default()).map_err(err)?.mean_error;
        Ok((error, metrics_of(&ex, spec)?.throughput))
    };
    let (e0, t0) = measure(0.0)?;
    let (e1, t1) = measure(1.0)?;
    check(
        e1 < e0 && t1 >= 0.85 * t0,
        format!(
            "alpha 0: error {e0:.4} at {t0:.3}/s; alpha 1: error {e1:.4} at {t1:.3}/s (ratio {:.3})",
            t1 / t0
        ),
    )
}

fn jitter_ordering() -> Outcome {
    let ex = Executor::new(Policy::refinement_default(), EnvConfig::default()).map_err(err)?;
    // Coarse units keep scheduler noise small against a frame.
    let wall = WallConfig {
        unit_ns: 100_000,
        emissions: 40,
        ..WallConfig::default()
    };
    let run = |spec: RunSpec| -> Result<f64, String> {
        Ok(ex.run_wall(&spec, &wall).map_err(err)?.metrics().map_err(err)?.jitter)
    };
    let pipe = run(RunSpec::Pipe(PipelineConfig::new(2, 4).with_offset(-1)))?;
    let par = run(RunSpec::Par(ParallelConfig {
        workers: 4,
        capacity: 1,
    }))?;
    let mut fixed = PipelineConfig::new(2, 4).with_offset(-1);
    fixed.frame_policy = FramePolicy::FixedInterval { interval: 30 };
    let virtual_jitter = metrics_of(&ex, RunSpec::Pipe(fixed))?.jitter;
    check(
        pipe < par && virtual_jitter == 0.0,
        format!("wall PIPE {pipe:.4} < PAR W=4 {par:.4}; virtual fixed-interval {virtual_jitter}"),
    )
}

fn ar_policy(action_len: usize) -> Policy {
    Policy {
        perception: PerceptionModel::tracking(ContextKind::Autoregressive, &[10, 10]),
        generation: GenerationModel::autoregressive_with_len(action_len, 20, 10, 0.5),
    }
}

fn merged_generation() -> Outcome {
    let mut details = Vec::new();
    let mut ok = true;
    let env = EnvConfig {
        frame_period: 100,
        ..EnvConfig::default()
    };
    let ex = Executor::new(ar_policy(7), env.clone()).map_err(err)?;
    for (merge, expected) in [(true, 1u32), (false, 7)] {
        let mut cfg = PipelineConfig::new(1, 7);
        cfg.merge_autoregressive = merge;
        let out = ex.run(&RunSpec::Pipe(cfg)).map_err(err)?;
        let charged: Vec<u32> = out
            .trace
            .records
            .iter()
            .filter(|r| r.activations.iter().filter(|a| a.phase == Phase::Generation).count() == 7)
            .map(|r| r.charged_prefills)
            .collect();
        ok &= !charged.is_empty() && charged.iter().all(|&c| c == expected);
        details.push(format!("merge={merge}: {expected} prefill per full frame"));
    }
    let mut merged = Vec::new();
    let mut sequential = Vec::new();
    for l_a in [7usize, 14, 28] {
        let ex = Executor::new(ar_policy(l_a), env.clone()).map_err(err)?;
        let mut cfg = PipelineConfig::new(1, l_a);
        cfg.merge_autoregressive = true;
        cfg.device_capacity = Some(1.0);
        merged.push(metrics_of(&ex, RunSpec::Pipe(cfg))?.throughput);
        let seq = metrics_of(&ex, RunSpec::Seq)?;
        // Perception 20, one prefill of 20, then l_a - 1 decodes of 10.
        sequential.push(seq.throughput);
        ok &= seq.throughput == 1000.0 / (30 + 10 * l_a as u64) as f64;
    }
    ok &= merged.windows(2).all(|w| w[0] == w[1]);
    details.push(format!(
        "merged throughput over l_a 7/14/28 {merged:?}, sequential {sequential:?}"
    ));
    check(ok, details.join("; "))
}

fn percgen(args: &[&str], out_root: &Path) -> Result<std::process::Output, String> {
    Command::new(env!("CARGO_BIN_EXE_percgen"))
        .args(args)
        .env("PERCGEN_OUT", out_root)
        .output()
        .map_err(err)
}

fn reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().map_err(err)?;
    let root = tmp.path();
    let first = root.join("first");
    let replay = root.join("replay");
    let run = percgen(
        &[
            "run",
            "--set",
            "seeds=[5,6]",
            "--set",
            "pipeline.pp_perception=2",
            "--set",
            "pipeline.pp_generation=4",
            "--out",
            first.to_str().unwrap(),
        ],
        root,
    )?;
    if !run.status.success() {
        return Err(String::from_utf8_lossy(&run.stderr).into_owned());
    }
    let manifest = first.join("manifest.json");
    let again = percgen(
        &[
            "run",
            "--config",
            manifest.to_str().unwrap(),
            "--out",
            replay.to_str().unwrap(),
        ],
        root,
    )?;
    if !again.status.success() {
        return Err(String::from_utf8_lossy(&again.stderr).into_owned());
    }
    let mut identical = true;
    for name in ["trace.jsonl", "metrics.json", "metrics.csv", "episode.csv"] {
        identical &= std::fs::read(first.join(name)).map_err(err)? == std::fs::read(replay.join(name)).map_err(err)?;
    }
    let verify = percgen(&["verify"], root)?;
    check(
        identical && verify.status.success(),
        format!(
            "replay from manifest identical: {identical}; verify exit {}",
            verify.status.code().unwrap_or(-1)
        ),
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("partition goldens", partition_goldens),
        ("prefill merge equivalence", merge_equivalence),
        ("throughput law", throughput_law),
        ("staleness accounting", staleness_accounting),
        ("accuracy orderings", accuracy_orderings),
        ("skewness trade-off", skew_tradeoff),
        ("jitter ordering", jitter_ordering),
        ("merged generation cost", merged_generation),
        ("determinism and reproducibility", reproducibility),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let (status, detail) = match f() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {} {status} {name}: {detail}", i + 1);
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
