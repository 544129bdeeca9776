//! Closed-loop target tracking in virtual time.
//!
//! Time is measured in integer ticks; one environment frame lasts
//! `frame_period` ticks. The target moves continuously, the agent position is
//! piecewise constant and jumps whenever an action is applied. Tracking error
//! is averaged over every tick, so it is insensitive to when in a frame an
//! action lands.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::Observation;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("episode over: tick {tick} is past the horizon {horizon}")]
    EpisodeOver { tick: u64, horizon: u64 },
    #[error("action norm {norm} exceeds max step {max_step}")]
    ActionNormExceeded { norm: f64, max_step: f64 },
    #[error("actions must be applied in time order (tick {tick} after {last})")]
    OutOfOrder { tick: u64, last: u64 },
    #[error("expected a 2-d vector, got {0} components")]
    ShapeMismatch(usize),
    #[error("invalid environment config: {0}")]
    Invalid(String),
}

/// Slack on the action-norm check for rounding in clipped actions.
pub const NORM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetPath {
    /// Counter-clockwise circle centred on the origin, starting at `(radius, 0)`.
    Circle {
        radius: f64,
        degrees_per_frame: f64,
    },
    /// Gaussian random walk from the origin with per-frame, per-axis std
    /// `step_sigma`, linearly interpolated within frames.
    RandomWalk {
        step_sigma: f64,
    },
    Stationary {
        x: f64,
        y: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub path: TargetPath,
    /// Standard deviation of the per-axis observation noise.
    pub noise_sigma: f64,
    pub max_step: f64,
    /// Success iff the mean error is at most this.
    pub success_threshold: f64,
    pub episode_frames: u64,
    /// Ticks per environment frame.
    pub frame_period: u64,
    /// Frames excluded from the error average while controllers converge.
    pub settle_frames: u64,
    pub seed: u64,
    /// Defaults to the target position at tick 0.
    pub initial_agent: Option<[f64; 2]>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            path: TargetPath::Circle {
                radius: 1.0,
                degrees_per_frame: 15.0,
            },
            noise_sigma: 0.02,
            max_step: 0.5,
            success_threshold: 0.5,
            episode_frames: 300,
            frame_period: 120,
            settle_frames: 30,
            seed: 0,
            initial_agent: None,
        }
    }
}

impl EnvConfig {
    /// Faster target used for the skew experiments: 30 degrees per frame.
    pub fn fast_target() -> Self {
        Self {
            path: TargetPath::Circle {
                radius: 1.0,
                degrees_per_frame: 30.0,
            },
            ..Self::default()
        }
    }

    pub fn horizon(&self) -> u64 {
        self.episode_frames * self.frame_period
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::Invalid(m.to_string()));
        if self.frame_period == 0 || self.episode_frames == 0 {
            return bad("frame_period and episode_frames must be positive");
        }
        if self.settle_frames >= self.episode_frames {
            return bad("settle_frames must be smaller than episode_frames");
        }
        if !(0.0..).contains(&self.noise_sigma)
            || self.max_step.is_nan()
            || self.max_step <= 0.0
            || !(0.0..).contains(&self.success_threshold)
        {
            return bad("noise_sigma and success_threshold must be non-negative, max_step positive");
        }
        match self.path {
            TargetPath::Circle {
                radius,
                degrees_per_frame,
            } if radius.is_nan() || radius <= 0.0 || !degrees_per_frame.is_finite() => {
                bad("circle needs a positive radius and a finite angular velocity")
            }
            TargetPath::RandomWalk { step_sigma } if !(0.0..).contains(&step_sigma) => {
                bad("step_sigma must be non-negative")
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedAction {
    pub tick: u64,
    pub action: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub success: bool,
    pub mean_error: f64,
    /// Tick-averaged error of every frame, including settle frames.
    pub per_frame_errors: Vec<f64>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn to_pair(v: &[f64]) -> Result<[f64; 2], EnvError> {
    match v {
        [x, y] => Ok([*x, *y]),
        _ => Err(EnvError::ShapeMismatch(v.len())),
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

#[derive(Debug, Clone)]
pub struct TrackingEnv {
    cfg: EnvConfig,
    walk: Vec<[f64; 2]>,
    agent: [f64; 2],
    actions: Vec<TimedAction>,
}

impl TrackingEnv {
    pub fn new(cfg: EnvConfig) -> Result<Self, EnvError> {
        cfg.validate()?;
        let walk = match cfg.path {
            TargetPath::RandomWalk { step_sigma } => {
                let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ 0x5741_4c4b));
                let step = Normal::new(0.0, step_sigma).map_err(|e| EnvError::Invalid(e.to_string()))?;
                let mut p = [0.0, 0.0];
                let mut walk = vec![p];
                for _ in 0..=cfg.episode_frames {
                    p = [p[0] + step.sample(&mut rng), p[1] + step.sample(&mut rng)];
                    walk.push(p);
                }
                walk
            }
            _ => Vec::new(),
        };
        let mut env = Self {
            cfg,
            walk,
            agent: [0.0, 0.0],
            actions: Vec::new(),
        };
        env.agent = env.cfg.initial_agent.unwrap_or_else(|| env.target_at(0.0));
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn agent(&self) -> [f64; 2] {
        self.agent
    }

    pub fn actions(&self) -> &[TimedAction] {
        &self.actions
    }

    /// Noise-free target position at fractional tick `t`.
    pub fn target_at(&self, t: f64) -> [f64; 2] {
        let frames = t / self.cfg.frame_period as f64;
        match self.cfg.path {
            TargetPath::Circle {
                radius,
                degrees_per_frame,
            } => {
                let theta = degrees_per_frame.to_radians() * frames;
                [radius * theta.cos(), radius * theta.sin()]
            }
            TargetPath::RandomWalk { .. } => {
                let i = (frames.floor() as usize).min(self.walk.len() - 2);
                let w = frames - i as f64;
                let (a, b) = (self.walk[i], self.walk[i + 1]);
                [a[0] + w * (b[0] - a[0]), a[1] + w * (b[1] - a[1])]
            }
            TargetPath::Stationary { x, y } => [x, y],
        }
    }

    /// Observation captured at `tick`, with noise seeded by `(seed, id)`.
    pub fn observe_at(&self, tick: u64, id: u64) -> Result<Observation, EnvError> {
        let horizon = self.cfg.horizon();
        if tick >= horizon {
            return Err(EnvError::EpisodeOver { tick, horizon });
        }
        let p = self.target_at(tick as f64);
        let noise = if self.cfg.noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix(self.cfg.seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ id));
            let n = Normal::new(0.0, self.cfg.noise_sigma).expect("validated sigma");
            [n.sample(&mut rng), n.sample(&mut rng)]
        } else {
            [0.0, 0.0]
        };
        Ok(Observation {
            id,
            target_estimate: vec![p[0] + noise[0], p[1] + noise[1]],
            agent_position: self.agent.to_vec(),
        })
    }

    /// Observation at the start of environment frame `frame`, with id `frame`.
    pub fn observe(&self, frame: u64) -> Result<Observation, EnvError> {
        self.observe_at(frame * self.cfg.frame_period, frame)
    }

    /// Moves the agent by `action` at `tick`. Actions past the horizon are
    /// accepted but do not affect the evaluation.
    pub fn apply_action_at(&mut self, tick: u64, action: &[f64]) -> Result<(), EnvError> {
        let action = to_pair(action)?;
        let norm = action[0].hypot(action[1]);
        if norm > self.cfg.max_step + NORM_TOLERANCE {
            return Err(EnvError::ActionNormExceeded {
                norm,
                max_step: self.cfg.max_step,
            });
        }
        if let Some(last) = self.actions.last() {
            if tick < last.tick {
                return Err(EnvError::OutOfOrder { tick, last: last.tick });
            }
        }
        self.agent = [self.agent[0] + action[0], self.agent[1] + action[1]];
        self.actions.push(TimedAction { tick, action });
        Ok(())
    }

    /// Applies `action` at the end of the last recorded action's tick.
    pub fn apply_action(&mut self, action: &[f64]) -> Result<(), EnvError> {
        let tick = self.actions.last().map_or(0, |a| a.tick);
        self.apply_action_at(tick, action)
    }

    pub fn evaluate(&self) -> Evaluation {
        evaluate(&self.cfg, &self.actions)
    }

    /// Per-frame CSV: frame, target, agent at the frame start, summed action
    /// applied during the frame, and the frame's mean error.
    pub fn episode_csv(&self) -> String {
        let eval = self.evaluate();
        let period = self.cfg.frame_period;
        let mut out = String::from("frame,target_x,target_y,agent_x,agent_y,action_x,action_y,error\n");
        let mut agent = self.cfg.initial_agent.unwrap_or_else(|| self.target_at(0.0));
        let mut next = 0;
        for (frame, err) in eval.per_frame_errors.iter().enumerate() {
            let start = frame as u64 * period;
            while next < self.actions.len() && self.actions[next].tick <= start {
                let a = self.actions[next].action;
                agent = [agent[0] + a[0], agent[1] + a[1]];
                next += 1;
            }
            let mut moved = [0.0, 0.0];
            for a in self.actions[next..].iter().take_while(|a| a.tick <= start + period) {
                moved = [moved[0] + a.action[0], moved[1] + a.action[1]];
            }
            let p = self.target_at(start as f64);
            let _ = writeln!(
                out,
                "{frame},{},{},{},{},{},{},{}",
                p[0], p[1], agent[0], agent[1], moved[0], moved[1], err
            );
        }
        out
    }
}

/// Replays `actions` against the target path and averages the error over
/// every tick after the settle frames.
pub fn evaluate(cfg: &EnvConfig, actions: &[TimedAction]) -> Evaluation {
    let env = TrackingEnv::new(cfg.clone()).expect("config validated by the caller");
    let period = cfg.frame_period;
    let mut agent = env.agent;
    let mut next = 0;
    let mut per_frame_errors = Vec::with_capacity(cfg.episode_frames as usize);
    for frame in 0..cfg.episode_frames {
        let mut sum = 0.0;
        for tick in frame * period..(frame + 1) * period {
            while next < actions.len() && actions[next].tick <= tick {
                let a = actions[next].action;
                agent = [agent[0] + a[0], agent[1] + a[1]];
                next += 1;
            }
            sum += dist(env.target_at(tick as f64), agent);
        }
        per_frame_errors.push(sum / period as f64);
    }
    let scored = &per_frame_errors[cfg.settle_frames as usize..];
    let mean_error = scored.iter().sum::<f64>() / scored.len() as f64;
    Evaluation {
        success: mean_error <= cfg.success_threshold,
        mean_error,
        per_frame_errors,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn noiseless() -> EnvConfig {
        EnvConfig {
            noise_sigma: 0.0,
            ..EnvConfig::default()
        }
    }

    fn stationary(x: f64, y: f64) -> EnvConfig {
        EnvConfig {
            path: TargetPath::Stationary { x, y },
            noise_sigma: 0.0,
            initial_agent: Some([0.0, 0.0]),
            episode_frames: 10,
            settle_frames: 0,
            ..EnvConfig::default()
        }
    }

    #[test]
    fn noiseless_observation_is_exact() {
        let env = TrackingEnv::new(noiseless()).unwrap();
        let o = env.observe(4).unwrap();
        let theta = 60f64.to_radians();
        assert_abs_diff_eq!(o.target_estimate[0], theta.cos(), epsilon = 1e-12);
        assert_abs_diff_eq!(o.target_estimate[1], theta.sin(), epsilon = 1e-12);
        assert_eq!(o.id, 4);
        assert_eq!(o.agent_position, vec![1.0, 0.0]);
    }

    #[test]
    fn observations_are_seeded() {
        let a = TrackingEnv::new(EnvConfig::default()).unwrap();
        let b = TrackingEnv::new(EnvConfig::default()).unwrap();
        let c = TrackingEnv::new(EnvConfig::default().with_seed(1)).unwrap();
        for f in 0..20 {
            assert_eq!(a.observe(f).unwrap(), b.observe(f).unwrap());
        }
        assert_ne!(a.observe(3).unwrap(), c.observe(3).unwrap());
    }

    #[test]
    fn observe_past_horizon() {
        let env = TrackingEnv::new(noiseless()).unwrap();
        assert!(matches!(env.observe(300), Err(EnvError::EpisodeOver { .. })));
    }

    #[test]
    fn direct_hit_and_no_op() {
        let mut env = TrackingEnv::new(stationary(0.3, 0.4)).unwrap();
        let before = dist(env.target_at(0.0), env.agent());
        env.apply_action_at(0, &[0.0, 0.0]).unwrap();
        assert_eq!(dist(env.target_at(0.0), env.agent()), before);
        env.apply_action_at(0, &[0.3, 0.4]).unwrap();
        assert!(dist(env.target_at(0.0), env.agent()) < 1e-12);
        let eval = env.evaluate();
        assert!(eval.success);
        assert!(eval.mean_error < 1e-12);
    }

    #[test]
    fn action_norm_checked() {
        let mut env = TrackingEnv::new(stationary(1.0, 0.0)).unwrap();
        assert!(matches!(
            env.apply_action_at(0, &[0.6, 0.0]),
            Err(EnvError::ActionNormExceeded { .. })
        ));
        assert!(matches!(env.apply_action(&[0.1]), Err(EnvError::ShapeMismatch(1))));
    }

    #[test]
    fn idle_agent_fails_on_moving_target() {
        let cfg = EnvConfig {
            success_threshold: 0.9,
            // Scores exactly eleven revolutions at 15 degrees per frame.
            settle_frames: 36,
            ..noiseless()
        };
        let env = TrackingEnv::new(cfg).unwrap();
        let eval = env.evaluate();
        assert!(!eval.success);
        // Mean chord length from a fixed point on the unit circle is 4/pi.
        assert_abs_diff_eq!(eval.mean_error, 4.0 / std::f64::consts::PI, epsilon = 5e-3);
    }

    #[test]
    fn angular_lag_geometry() {
        let env = TrackingEnv::new(noiseless()).unwrap();
        let omega = 15f64.to_radians();
        for k in 1..6u64 {
            let now = env.target_at((20 * 120) as f64);
            let past = env.target_at(((20 - k) * 120) as f64);
            assert_abs_diff_eq!(dist(now, past), 2.0 * (k as f64 * omega / 2.0).sin(), epsilon = 1e-12);
        }
    }

    #[test]
    fn random_walk_is_seeded_and_continuous() {
        let cfg = EnvConfig {
            path: TargetPath::RandomWalk { step_sigma: 0.1 },
            ..EnvConfig::default()
        };
        let a = TrackingEnv::new(cfg.clone()).unwrap();
        let b = TrackingEnv::new(cfg).unwrap();
        assert_eq!(a.target_at(1234.0), b.target_at(1234.0));
        let (p, q) = (a.target_at(239.999), a.target_at(240.0));
        assert!(dist(p, q) < 1e-3);
    }

    #[test]
    fn csv_has_one_row_per_frame() {
        let mut env = TrackingEnv::new(stationary(0.2, 0.0)).unwrap();
        env.apply_action_at(60, &[0.2, 0.0]).unwrap();
        let csv = env.episode_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 11);
        assert!(lines[1].starts_with("0,0.2,0,0,0,0.2,0,"));
    }

    #[test]
    fn rejects_out_of_order_actions() {
        let mut env = TrackingEnv::new(stationary(1.0, 0.0)).unwrap();
        env.apply_action_at(10, &[0.1, 0.0]).unwrap();
        assert!(matches!(
            env.apply_action_at(5, &[0.1, 0.0]),
            Err(EnvError::OutOfOrder { .. })
        ));
    }
}
