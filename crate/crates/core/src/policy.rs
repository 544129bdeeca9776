//! Perception and generation models scheduled by the executor.
//!
//! Two policy families share one interface:
//!
//! * **Refinement** (conditioning kind): perception produces a conditioning
//!   vector `c`; each generation iteration contracts the state toward it,
//!   `x <- x + eta * (c - x)`, and the finished state is clipped to the
//!   maximum action norm.
//! * **Scripted autoregressive**: perception produces vision and language
//!   tokens; each iteration emits one discrete action token quantising the
//!   displacement carried by the first vision token.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{ContextError, ContextKind, ContextPayload, PublicContext};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("shape mismatch: expected dimension {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("context kind mismatch: model expects {expected:?}, context is {found:?}")]
    KindMismatch { expected: ContextKind, found: ContextKind },
    #[error("generation incomplete: {applied} of {required} iterations applied")]
    IncompleteGeneration { applied: u32, required: u32 },
    #[error("action sequence already complete ({0} tokens)")]
    SequenceComplete(usize),
    #[error("invalid policy configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Context(#[from] ContextError),
}

/// One camera/proprioception sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub id: u64,
    /// Noisy estimate of the target position.
    pub target_estimate: Vec<f64>,
    /// Agent position at capture time.
    pub agent_position: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayerOp {
    /// `target_estimate - agent_position`; must be the first layer.
    Displacement,
    /// Elementwise `gain * v + bias`.
    Affine {
        gain: f64,
        bias: f64,
    },
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub cost: u64,
    pub op: LayerOp,
}

/// Latent carried between perception stages.
#[derive(Debug, Clone, PartialEq)]
pub struct PerceptionState {
    pub observation_id: u64,
    /// Next layer to apply.
    pub next_layer: usize,
    pub latent: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceptionModel {
    pub dim: usize,
    pub layers: Vec<Layer>,
    pub output_kind: ContextKind,
    /// Language embedding attached to autoregressive contexts.
    #[serde(default = "default_instruction")]
    pub instruction: Vec<f64>,
}

fn default_instruction() -> Vec<f64> {
    vec![1.0, 0.0]
}

impl PerceptionModel {
    /// Toy perception for the tracking task: one displacement layer followed
    /// by identity layers, each with the given cost.
    pub fn tracking(output_kind: ContextKind, layer_costs: &[u64]) -> Self {
        let layers = layer_costs
            .iter()
            .enumerate()
            .map(|(i, &cost)| Layer {
                cost,
                op: if i == 0 {
                    LayerOp::Displacement
                } else {
                    LayerOp::Identity
                },
            })
            .collect();
        Self {
            dim: 2,
            layers,
            output_kind,
            instruction: default_instruction(),
        }
    }

    pub fn layer_costs(&self) -> Vec<u64> {
        self.layers.iter().map(|l| l.cost).collect()
    }

    pub fn total_cost(&self) -> u64 {
        self.layers.iter().map(|l| l.cost).sum()
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.layers.is_empty() {
            return Err(PolicyError::Invalid("perception needs at least one layer".into()));
        }
        if self.dim == 0 {
            return Err(PolicyError::Invalid("perception dimension must be positive".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.cost == 0 {
                return Err(PolicyError::Invalid(format!("perception layer {i} has zero cost")));
            }
            let first = i == 0;
            if first != matches!(l.op, LayerOp::Displacement) {
                return Err(PolicyError::Invalid(
                    "exactly the first perception layer must be a displacement layer".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn start(&self, obs: &Observation) -> Result<PerceptionState, PolicyError> {
        for got in [obs.target_estimate.len(), obs.agent_position.len()] {
            if got != self.dim {
                return Err(PolicyError::ShapeMismatch {
                    expected: self.dim,
                    got,
                });
            }
        }
        let mut latent = obs.target_estimate.clone();
        latent.extend_from_slice(&obs.agent_position);
        Ok(PerceptionState {
            observation_id: obs.id,
            next_layer: 0,
            latent,
        })
    }

    /// Applies layers `range` to `state`. Stages must be applied in order.
    pub fn run_layers(&self, state: &mut PerceptionState, range: std::ops::Range<usize>) -> Result<(), PolicyError> {
        if range.start != state.next_layer || range.end > self.layers.len() {
            return Err(PolicyError::Invalid(format!(
                "layer range {range:?} does not continue from layer {}",
                state.next_layer
            )));
        }
        for layer in &self.layers[range.clone()] {
            match layer.op {
                LayerOp::Displacement => {
                    let (target, agent) = state.latent.split_at(self.dim);
                    state.latent = target.iter().zip(agent).map(|(t, a)| t - a).collect();
                }
                LayerOp::Affine { gain, bias } => {
                    for v in &mut state.latent {
                        *v = gain * *v + bias;
                    }
                }
                LayerOp::Identity => {}
            }
        }
        state.next_layer = range.end;
        Ok(())
    }

    /// Wraps the final latent into a public context.
    pub fn finalize(&self, state: PerceptionState) -> Result<PublicContext, PolicyError> {
        if state.next_layer != self.layers.len() {
            return Err(PolicyError::Invalid(format!(
                "perception stopped at layer {} of {}",
                state.next_layer,
                self.layers.len()
            )));
        }
        Ok(match self.output_kind {
            ContextKind::Conditioning => PublicContext::conditioning(state.latent, state.observation_id),
            ContextKind::Autoregressive => PublicContext::autoregressive(
                vec![state.latent],
                vec![self.instruction.clone()],
                Vec::new(),
                state.observation_id,
            ),
        })
    }

    pub fn perceive(&self, obs: &Observation) -> Result<PublicContext, PolicyError> {
        let mut state = self.start(obs)?;
        self.run_layers(&mut state, 0..self.layers.len())?;
        self.finalize(state)
    }
}

/// Fixed token schema: three tokens per axis (sign, high nibble, low nibble)
/// for x then y, followed by stop tokens up to `action_len`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenCodec {
    /// Displacement magnitude mapped to the top bucket.
    pub range: f64,
    /// Tokens per action, at least [`TokenCodec::SCHEMA_LEN`].
    #[serde(default = "default_action_len")]
    pub action_len: usize,
}

fn default_action_len() -> usize {
    TokenCodec::SCHEMA_LEN
}

impl TokenCodec {
    /// Six displacement tokens plus one stop token.
    pub const SCHEMA_LEN: usize = 7;
    pub const STOP: u32 = 16;
    pub const LEVELS: u32 = 255;

    pub fn bucket_width(&self) -> f64 {
        self.range / Self::LEVELS as f64
    }

    fn quantize(&self, v: f64) -> (u32, u32) {
        let q = (v.abs() / self.bucket_width()).round().min(Self::LEVELS as f64) as u32;
        let sign = u32::from(v < 0.0 && q > 0);
        (sign, q)
    }

    /// Token at `position` (0-based) for the given displacement.
    pub fn token_at(&self, displacement: &[f64], position: usize) -> Result<u32, PolicyError> {
        if displacement.len() < 2 {
            return Err(PolicyError::ShapeMismatch {
                expected: 2,
                got: displacement.len(),
            });
        }
        if position >= self.action_len {
            return Err(PolicyError::SequenceComplete(position));
        }
        if position >= 6 {
            return Ok(Self::STOP);
        }
        let (sign, q) = self.quantize(displacement[position / 3]);
        Ok(match position % 3 {
            0 => sign,
            1 => q >> 4,
            _ => q & 0xf,
        })
    }

    pub fn encode(&self, displacement: &[f64]) -> Result<Vec<u32>, PolicyError> {
        (0..self.action_len).map(|i| self.token_at(displacement, i)).collect()
    }

    /// Displacement encoded by a complete token sequence.
    pub fn decode(&self, tokens: &[u32]) -> Result<Vec<f64>, PolicyError> {
        if tokens.len() != self.action_len {
            return Err(PolicyError::IncompleteGeneration {
                applied: tokens.len() as u32,
                required: self.action_len as u32,
            });
        }
        Ok((0..2)
            .map(|axis| {
                let t = &tokens[axis * 3..axis * 3 + 3];
                let q = ((t[1] & 0xf) << 4 | (t[2] & 0xf)) as f64;
                let sign = if t[0] == 1 { -1.0 } else { 1.0 };
                sign * q * self.bucket_width()
            })
            .collect())
    }
}

impl Default for TokenCodec {
    fn default() -> Self {
        Self {
            range: 1.0,
            action_len: Self::SCHEMA_LEN,
        }
    }
}

/// Next action token for an autoregressive context: the token at position
/// `|action_tokens|` of the quantised displacement in the first vision token.
pub fn scripted_ar_policy(ctx: &PublicContext, codec: &TokenCodec) -> Result<u32, PolicyError> {
    match &ctx.payload {
        ContextPayload::Autoregressive {
            vision_tokens,
            action_tokens,
            ..
        } => {
            if action_tokens.len() >= codec.action_len {
                return Err(PolicyError::SequenceComplete(action_tokens.len()));
            }
            let displacement = vision_tokens
                .first()
                .ok_or(PolicyError::ShapeMismatch { expected: 1, got: 0 })?;
            codec.token_at(displacement, action_tokens.len())
        }
        ContextPayload::Conditioning { .. } => Err(PolicyError::KindMismatch {
            expected: ContextKind::Autoregressive,
            found: ContextKind::Conditioning,
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialState {
    #[default]
    Zero,
    /// Standard Gaussian noise from the given seed.
    Noise { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum GenerationFamily {
    Refinement {
        eta: f64,
        dim: usize,
        #[serde(default)]
        initial: InitialState,
    },
    Autoregressive {
        #[serde(default)]
        codec: TokenCodec,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationModel {
    pub family: GenerationFamily,
    /// Total iterations: refinement steps, or action tokens.
    pub iterations: u32,
    /// Cost of one iteration when the context cannot be cached (a refinement
    /// step, or a full prefill for autoregressive decoding).
    pub step_cost: u64,
    /// Cost of a cached decode step; sequential autoregressive requests pay one
    /// prefill plus `iterations - 1` of these.
    #[serde(default)]
    pub decode_cost: Option<u64>,
    /// Norm bound applied to the finished action.
    pub max_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum IterationState {
    Refinement { x: Vec<f64>, applied: u32 },
    Tokens { tokens: Vec<u32> },
}

impl IterationState {
    pub fn applied(&self) -> u32 {
        match self {
            IterationState::Refinement { applied, .. } => *applied,
            IterationState::Tokens { tokens } => tokens.len() as u32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ActionValues {
    Continuous(Vec<f64>),
    Tokens(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionOutput {
    pub values: ActionValues,
    /// Displacement handed to the environment, already norm-clipped.
    pub action: Vec<f64>,
    pub emitted_frame: u64,
    /// Context age in frames for every generation iteration.
    pub staleness_profile: Vec<f64>,
}

impl GenerationModel {
    pub fn refinement(iterations: u32, eta: f64, step_cost: u64, max_step: f64) -> Self {
        Self {
            family: GenerationFamily::Refinement {
                eta,
                dim: 2,
                initial: InitialState::Zero,
            },
            iterations,
            step_cost,
            decode_cost: None,
            max_step,
        }
    }

    pub fn autoregressive(prefill_cost: u64, decode_cost: u64, max_step: f64) -> Self {
        Self::autoregressive_with_len(TokenCodec::SCHEMA_LEN, prefill_cost, decode_cost, max_step)
    }

    pub fn autoregressive_with_len(action_len: usize, prefill_cost: u64, decode_cost: u64, max_step: f64) -> Self {
        Self {
            family: GenerationFamily::Autoregressive {
                codec: TokenCodec {
                    action_len,
                    ..TokenCodec::default()
                },
            },
            iterations: action_len as u32,
            step_cost: prefill_cost,
            decode_cost: Some(decode_cost),
            max_step,
        }
    }

    pub fn kind(&self) -> ContextKind {
        match self.family {
            GenerationFamily::Refinement { .. } => ContextKind::Conditioning,
            GenerationFamily::Autoregressive { .. } => ContextKind::Autoregressive,
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.iterations == 0 {
            return Err(PolicyError::Invalid("generation needs at least one iteration".into()));
        }
        if self.step_cost == 0 || self.decode_cost == Some(0) {
            return Err(PolicyError::Invalid("generation costs must be positive".into()));
        }
        if self.max_step.is_nan() || self.max_step <= 0.0 {
            return Err(PolicyError::Invalid("max_step must be positive".into()));
        }
        match &self.family {
            GenerationFamily::Refinement { eta, dim, .. } => {
                if !(*eta > 0.0 && *eta < 1.0) {
                    return Err(PolicyError::Invalid(format!("eta {eta} outside (0, 1)")));
                }
                if *dim == 0 {
                    return Err(PolicyError::Invalid("refinement dimension must be positive".into()));
                }
            }
            GenerationFamily::Autoregressive { codec } => {
                if codec.action_len < TokenCodec::SCHEMA_LEN {
                    return Err(PolicyError::Invalid(format!(
                        "action length {} is shorter than the {}-token schema",
                        codec.action_len,
                        TokenCodec::SCHEMA_LEN
                    )));
                }
                if self.iterations as usize != codec.action_len {
                    return Err(PolicyError::Invalid(format!(
                        "autoregressive iterations {} must equal the action length {}",
                        self.iterations, codec.action_len
                    )));
                }
                if codec.range.is_nan() || codec.range <= 0.0 {
                    return Err(PolicyError::Invalid("token codec range must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// Work charged for one complete generation in the sequential modes.
    pub fn sequential_cost(&self) -> u64 {
        self.stage_cost(self.iterations)
    }

    /// Work of `count` consecutive iterations on one context: a prefill plus
    /// cached decodes for autoregressive generation, `count` steps otherwise.
    pub fn stage_cost(&self, count: u32) -> u64 {
        match (self.decode_cost, count) {
            (_, 0) => 0,
            (Some(d), n) => self.step_cost + (n as u64 - 1) * d,
            (None, n) => n as u64 * self.step_cost,
        }
    }

    pub fn initial_state(&self) -> IterationState {
        match &self.family {
            GenerationFamily::Refinement { dim, initial, .. } => {
                let x = match initial {
                    InitialState::Zero => vec![0.0; *dim],
                    InitialState::Noise { seed } => {
                        let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                        (0..*dim).map(|_| StandardNormal.sample(&mut rng)).collect()
                    }
                };
                IterationState::Refinement { x, applied: 0 }
            }
            GenerationFamily::Autoregressive { .. } => IterationState::Tokens { tokens: Vec::new() },
        }
    }

    fn check_kind(&self, ctx: &PublicContext) -> Result<(), PolicyError> {
        if ctx.kind() != self.kind() {
            return Err(PolicyError::KindMismatch {
                expected: self.kind(),
                found: ctx.kind(),
            });
        }
        Ok(())
    }

    /// One generation iteration on `ctx`.
    pub fn generate_step(&self, state: &mut IterationState, ctx: &PublicContext) -> Result<(), PolicyError> {
        self.check_kind(ctx)?;
        match (&self.family, state) {
            (GenerationFamily::Refinement { eta, .. }, IterationState::Refinement { x, applied }) => {
                let c = ctx.conditioning_vector().expect("kind checked");
                if c.len() != x.len() {
                    return Err(PolicyError::ShapeMismatch {
                        expected: x.len(),
                        got: c.len(),
                    });
                }
                for (xi, ci) in x.iter_mut().zip(c) {
                    *xi += eta * (ci - *xi);
                }
                *applied += 1;
                Ok(())
            }
            (GenerationFamily::Autoregressive { codec }, IterationState::Tokens { tokens }) => {
                let prefixed = ctx.with_action_tokens(tokens)?;
                let token = scripted_ar_policy(&prefixed, codec)?;
                tokens.push(token);
                Ok(())
            }
            _ => Err(PolicyError::Invalid(
                "iteration state does not match the model family".into(),
            )),
        }
    }

    /// Re-expresses an in-flight state after the agent moved by `shift`.
    /// Token states are discrete and left unchanged.
    pub fn rebase(&self, state: &mut IterationState, shift: &[f64]) {
        if let IterationState::Refinement { x, .. } = state {
            for (xi, s) in x.iter_mut().zip(shift) {
                *xi -= s;
            }
        }
    }

    /// Displacement the finished state encodes, before clipping.
    pub fn raw_action(&self, state: &IterationState) -> Result<Vec<f64>, PolicyError> {
        if state.applied() < self.iterations {
            return Err(PolicyError::IncompleteGeneration {
                applied: state.applied(),
                required: self.iterations,
            });
        }
        match (&self.family, state) {
            (GenerationFamily::Refinement { .. }, IterationState::Refinement { x, .. }) => Ok(x.clone()),
            (GenerationFamily::Autoregressive { codec }, IterationState::Tokens { tokens }) => codec.decode(tokens),
            _ => Err(PolicyError::Invalid(
                "iteration state does not match the model family".into(),
            )),
        }
    }

    pub fn finish(&self, state: &IterationState) -> Result<ActionOutput, PolicyError> {
        self.finish_rebased(state, &[])
    }

    /// Finishes after the agent moved by `shift` since the state was last
    /// rebased; the decoded displacement is corrected before clipping.
    pub fn finish_rebased(&self, state: &IterationState, shift: &[f64]) -> Result<ActionOutput, PolicyError> {
        let mut raw = self.raw_action(state)?;
        for (r, s) in raw.iter_mut().zip(shift) {
            *r -= s;
        }
        let action = clip_norm(&raw, self.max_step);
        let values = match state {
            IterationState::Refinement { .. } => ActionValues::Continuous(action.clone()),
            IterationState::Tokens { tokens } => ActionValues::Tokens(tokens.clone()),
        };
        Ok(ActionOutput {
            values,
            action,
            emitted_frame: 0,
            staleness_profile: Vec::new(),
        })
    }

    /// Tokens per action for autoregressive models, 0 otherwise.
    pub fn action_len(&self) -> usize {
        match &self.family {
            GenerationFamily::Autoregressive { codec } => codec.action_len,
            GenerationFamily::Refinement { .. } => 0,
        }
    }
}

pub fn clip_norm(v: &[f64], max: f64) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= max || norm == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x * max / norm).collect()
    }
}

/// Shifts the displacement a context carries by the agent motion since it
/// was observed, so generation always reasons relative to the current pose.
pub fn egocentric(ctx: &PublicContext, shift: &[f64]) -> PublicContext {
    if shift.iter().all(|s| *s == 0.0) {
        return ctx.clone();
    }
    let mut out = ctx.clone();
    let target = match &mut out.payload {
        ContextPayload::Conditioning { conditioning } => Some(conditioning),
        ContextPayload::Autoregressive { vision_tokens, .. } => vision_tokens.first_mut(),
    };
    if let Some(v) = target {
        for (x, s) in v.iter_mut().zip(shift) {
            *x -= s;
        }
    }
    out.seal();
    out
}

/// Perception plus generation; immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub perception: PerceptionModel,
    pub generation: GenerationModel,
}

impl Policy {
    /// Default refinement policy: four perception layers of cost 5 and 100
    /// refinement steps of cost 1, so a sequential request costs 120.
    pub fn refinement_default() -> Self {
        Self {
            perception: PerceptionModel::tracking(ContextKind::Conditioning, &[5, 5, 5, 5]),
            generation: GenerationModel::refinement(100, 0.08, 1, 0.5),
        }
    }

    /// Default scripted autoregressive policy.
    pub fn autoregressive_default() -> Self {
        Self {
            perception: PerceptionModel::tracking(ContextKind::Autoregressive, &[10, 10]),
            generation: GenerationModel::autoregressive(20, 10, 0.5),
        }
    }

    /// Refinement policy with `layers` perception layers of `layer_cost` and
    /// `iterations` unit-cost steps. The step size keeps the total contraction
    /// of the default policy regardless of `iterations`.
    pub fn balanced(layers: usize, layer_cost: u64, iterations: u32) -> Self {
        let eta = 1.0 - 0.92f64.powf(100.0 / iterations.max(1) as f64);
        Self {
            perception: PerceptionModel::tracking(ContextKind::Conditioning, &vec![layer_cost; layers]),
            generation: GenerationModel::refinement(iterations, eta, 1, 0.5),
        }
    }

    pub fn kind(&self) -> ContextKind {
        self.generation.kind()
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        self.perception.validate()?;
        self.generation.validate()?;
        if self.perception.output_kind != self.generation.kind() {
            return Err(PolicyError::KindMismatch {
                expected: self.generation.kind(),
                found: self.perception.output_kind,
            });
        }
        Ok(())
    }

    /// Work of one request executed end to end.
    pub fn sequential_cost(&self) -> u64 {
        self.perception.total_cost() + self.generation.sequential_cost()
    }

    /// Runs one request without pipelining.
    pub fn act(&self, obs: &Observation) -> Result<ActionOutput, PolicyError> {
        let ctx = self.perception.perceive(obs)?;
        let mut state = self.generation.initial_state();
        for _ in 0..self.generation.iterations {
            self.generation.generate_step(&mut state, &ctx)?;
        }
        let mut out = self.generation.finish(&state)?;
        out.staleness_profile = vec![0.0; self.generation.iterations as usize];
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn obs(target: [f64; 2], agent: [f64; 2]) -> Observation {
        Observation {
            id: 7,
            target_estimate: target.to_vec(),
            agent_position: agent.to_vec(),
        }
    }

    fn cond(c: &[f64]) -> PublicContext {
        PublicContext::conditioning(c.to_vec(), 0)
    }

    #[test]
    fn perceive_tracking_displacement() {
        let p = PerceptionModel::tracking(ContextKind::Conditioning, &[1, 1, 1]);
        let ctx = p.perceive(&obs([1.5, -0.5], [0.5, 0.5])).unwrap();
        assert_eq!(ctx.conditioning_vector().unwrap(), &[1.0, -1.0]);
        assert_eq!(ctx.source_observation_id, 7);
        let zero = p.perceive(&obs([0.3, 0.2], [0.3, 0.2])).unwrap();
        assert_eq!(zero.conditioning_vector().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn perceive_shape_mismatch() {
        let p = PerceptionModel::tracking(ContextKind::Conditioning, &[1]);
        let bad = Observation {
            id: 0,
            target_estimate: vec![1.0, 2.0, 3.0],
            agent_position: vec![0.0, 0.0],
        };
        assert_eq!(
            p.perceive(&bad),
            Err(PolicyError::ShapeMismatch { expected: 2, got: 3 })
        );
    }

    #[test]
    fn autoregressive_perception_layout() {
        let p = PerceptionModel::tracking(ContextKind::Autoregressive, &[1, 1]);
        let ctx = p.perceive(&obs([1.0, 1.0], [0.0, 0.5])).unwrap();
        assert_eq!(ctx.vision_tokens().unwrap(), &[vec![1.0, 0.5]]);
        assert!(ctx.action_tokens().unwrap().is_empty());
    }

    #[test]
    fn one_refinement_step() {
        let g = GenerationModel::refinement(10, 0.1, 1, 1.0);
        let mut s = g.initial_state();
        g.generate_step(&mut s, &cond(&[1.0, 0.0])).unwrap();
        match s {
            IterationState::Refinement { x, applied } => {
                assert_abs_diff_eq!(x[0], 0.1, epsilon = 1e-15);
                assert_eq!(x[1], 0.0);
                assert_eq!(applied, 1);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn refinement_fixed_point() {
        let g = GenerationModel::refinement(10, 0.1, 1, 1.0);
        let mut s = IterationState::Refinement {
            x: vec![0.3, -0.2],
            applied: 0,
        };
        g.generate_step(&mut s, &cond(&[0.3, -0.2])).unwrap();
        assert_eq!(
            s,
            IterationState::Refinement {
                x: vec![0.3, -0.2],
                applied: 1
            }
        );
    }

    #[test]
    fn kind_mismatch() {
        let g = GenerationModel::refinement(10, 0.1, 1, 1.0);
        let mut s = g.initial_state();
        let ar = PublicContext::autoregressive(vec![vec![0.0, 0.0]], vec![], vec![], 0);
        assert!(matches!(
            g.generate_step(&mut s, &ar),
            Err(PolicyError::KindMismatch { .. })
        ));
    }

    #[test]
    fn finish_clips_norm() {
        let g = GenerationModel::refinement(1, 0.1, 1, 1.0);
        let s = IterationState::Refinement {
            x: vec![3.0, 4.0],
            applied: 1,
        };
        let out = g.finish(&s).unwrap();
        assert_abs_diff_eq!(out.action[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(out.action[1], 0.8, epsilon = 1e-15);
        let small = IterationState::Refinement {
            x: vec![0.1, 0.0],
            applied: 1,
        };
        assert_eq!(g.finish(&small).unwrap().action, vec![0.1, 0.0]);
    }

    #[test]
    fn finish_requires_all_iterations() {
        let g = GenerationModel::refinement(3, 0.1, 1, 1.0);
        let mut s = g.initial_state();
        g.generate_step(&mut s, &cond(&[1.0, 1.0])).unwrap();
        assert_eq!(
            g.finish(&s).unwrap_err(),
            PolicyError::IncompleteGeneration {
                applied: 1,
                required: 3
            }
        );
    }

    #[test]
    fn full_rollout_matches_closed_form() {
        let eta = 0.08;
        let n = 100;
        let g = GenerationModel::refinement(n, eta, 1, 0.5);
        let c = [0.3, -0.4];
        let mut s = g.initial_state();
        for _ in 0..n {
            g.generate_step(&mut s, &cond(&c)).unwrap();
        }
        let k = 1.0 - (1.0 - eta).powi(n as i32);
        let expected = clip_norm(&[c[0] * k, c[1] * k], 0.5);
        let got = g.finish(&s).unwrap().action;
        assert_abs_diff_eq!(got[0], expected[0], epsilon = 1e-12);
        assert_abs_diff_eq!(got[1], expected[1], epsilon = 1e-12);
    }

    #[test]
    fn noise_initial_state_is_seeded() {
        let mut g = GenerationModel::refinement(5, 0.1, 1, 1.0);
        g.family = GenerationFamily::Refinement {
            eta: 0.1,
            dim: 2,
            initial: InitialState::Noise { seed: 3 },
        };
        assert_eq!(g.initial_state(), g.initial_state());
        assert_ne!(
            g.initial_state(),
            GenerationModel::refinement(5, 0.1, 1, 1.0).initial_state()
        );
    }

    #[test]
    fn scripted_tokens_null_action() {
        let codec = TokenCodec::default();
        assert_eq!(
            codec.encode(&[0.0, 0.0]).unwrap(),
            vec![0, 0, 0, 0, 0, 0, TokenCodec::STOP]
        );
    }

    #[test]
    fn scripted_policy_is_deterministic_and_bounded() {
        let codec = TokenCodec::default();
        let ctx = PublicContext::autoregressive(vec![vec![0.25, -0.5]], vec![], vec![1, 2], 0);
        let a = scripted_ar_policy(&ctx, &codec).unwrap();
        assert_eq!(a, scripted_ar_policy(&ctx, &codec).unwrap());
        // Position 2 is the low nibble of |x| = 0.25 -> q = 64 -> 0x40.
        assert_eq!(a, 0);
        let full = ctx.with_action_tokens(&[0; 7]).unwrap();
        assert_eq!(scripted_ar_policy(&full, &codec), Err(PolicyError::SequenceComplete(7)));
    }

    #[test]
    fn autoregressive_generation_produces_schema() {
        let g = GenerationModel::autoregressive(20, 10, 1.0);
        let ctx = PublicContext::autoregressive(vec![vec![-0.5, 0.25]], vec![vec![1.0, 0.0]], vec![], 0);
        let mut s = g.initial_state();
        for _ in 0..7 {
            g.generate_step(&mut s, &ctx).unwrap();
        }
        let out = g.finish(&s).unwrap();
        assert_eq!(
            out.values,
            ActionValues::Tokens(vec![1, 8, 0, 0, 4, 0, TokenCodec::STOP])
        );
        assert_abs_diff_eq!(out.action[0], -128.0 / 255.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out.action[1], 64.0 / 255.0, epsilon = 1e-12);
        assert!(g.generate_step(&mut s, &ctx).is_err());
    }

    #[test]
    fn sequential_costs() {
        let p = Policy::refinement_default();
        assert_eq!(p.sequential_cost(), 120);
        let ar = Policy::autoregressive_default();
        assert_eq!(ar.sequential_cost(), 20 + 20 + 6 * 10);
        ar.validate().unwrap();
        p.validate().unwrap();
    }

    #[test]
    fn context_switch_closed_form() {
        // Switching from c1 to c2 after k of n steps ends at
        // c2 + (1-eta)^(n-k) * ((1-(1-eta)^k) c1 - c2).
        let eta: f64 = 0.08;
        let n = 100;
        let g = GenerationModel::refinement(n, eta, 1, 10.0);
        let (c1, c2) = ([1.0, 0.0], [0.0, 1.0]);
        let mut prev_weight = f64::INFINITY;
        for k in [10u32, 40, 70, 95] {
            let mut s = g.initial_state();
            for i in 0..n {
                let c = if i < k { &c1 } else { &c2 };
                g.generate_step(&mut s, &cond(c)).unwrap();
            }
            let x = g.raw_action(&s).unwrap();
            let r = (1.0 - eta).powi((n - k) as i32);
            let q = 1.0 - (1.0 - eta).powi(k as i32);
            assert_abs_diff_eq!(x[0], r * q * c1[0], epsilon = 1e-12);
            assert_abs_diff_eq!(x[1], c2[1] - r * c2[1], epsilon = 1e-12);
            // The later context's share 1-(1-eta)^(n-k) shrinks as n-k shrinks.
            assert!(x[1] < prev_weight);
            prev_weight = x[1];
        }
    }

    #[test]
    fn egocentric_shift() {
        let ctx = cond(&[1.0, 1.0]);
        let moved = egocentric(&ctx, &[0.25, -0.5]);
        assert_eq!(moved.conditioning_vector().unwrap(), &[0.75, 1.5]);
        assert!(moved.is_consistent());
    }

    proptest! {
        #[test]
        fn staged_perception_equals_monolithic(
            gains in prop::collection::vec((-2.0f64..2.0, -1.0f64..1.0), 0..8),
            cut_seed in prop::collection::vec(any::<bool>(), 8),
            t in prop::array::uniform2(-5.0f64..5.0),
            a in prop::array::uniform2(-5.0f64..5.0),
        ) {
            let mut layers = vec![Layer { cost: 1, op: LayerOp::Displacement }];
            layers.extend(gains.iter().map(|&(gain, bias)| Layer { cost: 1, op: LayerOp::Affine { gain, bias } }));
            let model = PerceptionModel { dim: 2, layers, output_kind: ContextKind::Conditioning, instruction: vec![] };
            let o = obs(t, a);
            let whole = model.perceive(&o).unwrap();

            let mut state = model.start(&o).unwrap();
            let mut start = 0;
            for end in 1..=model.layers.len() {
                if end == model.layers.len() || cut_seed[end % 8] {
                    model.run_layers(&mut state, start..end).unwrap();
                    start = end;
                }
            }
            let staged = model.finalize(state).unwrap();
            let bits = |c: &PublicContext| c.conditioning_vector().unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&whole), bits(&staged));
        }

        #[test]
        fn token_round_trip_within_one_bucket(x in -1.0f64..1.0, y in -1.0f64..1.0) {
            let codec = TokenCodec::default();
            let tokens = codec.encode(&[x, y]).unwrap();
            prop_assert_eq!(tokens.len(), 7);
            let back = codec.decode(&tokens).unwrap();
            prop_assert!((back[0] - x).abs() <= codec.bucket_width());
            prop_assert!((back[1] - y).abs() <= codec.bucket_width());
        }

        #[test]
        fn iterated_steps_match_closed_form(k in 0u32..200, cx in -3.0f64..3.0, cy in -3.0f64..3.0) {
            let eta = 0.08;
            let g = GenerationModel::refinement(200, eta, 1, 10.0);
            let mut s = g.initial_state();
            for _ in 0..k {
                g.generate_step(&mut s, &cond(&[cx, cy])).unwrap();
            }
            let IterationState::Refinement { x, .. } = s else { unreachable!() };
            let f = 1.0 - (1.0f64 - eta).powi(k as i32);
            prop_assert!((x[0] - cx * f).abs() <= 1e-12 * (1.0 + cx.abs()));
            prop_assert!((x[1] - cy * f).abs() <= 1e-12 * (1.0 + cy.abs()));
        }
    }
}
