//! Environment dispatch and the seeded rollout loop shared by training,
//! evaluation, correlation, and detection.

use serde::{Deserialize, Serialize};

use crate::covid::{CovidAction, CovidEpisode, CovidStepInfo, SeirParams};
use crate::error::{Error, Result};
use crate::policy::{policy_act, policy_dist, ActMode, Action, ActionDistribution, PolicyParams, PolicySpec};
use crate::rewards::{RewardPair, RewardSample};
use crate::seed;
use crate::traffic::{quantize_action, TrafficConfig, TrafficState, TrafficStepInfo};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    Traffic,
    Covid,
}

impl std::fmt::Display for EnvKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EnvKind::Traffic => "traffic",
            EnvKind::Covid => "covid",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EnvConfig {
    Traffic(TrafficConfig),
    Covid(SeirParams),
}

impl EnvConfig {
    pub fn kind(&self) -> EnvKind {
        match self {
            EnvConfig::Traffic(_) => EnvKind::Traffic,
            EnvConfig::Covid(_) => EnvKind::Covid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            EnvConfig::Traffic(c) => c.validate(),
            EnvConfig::Covid(c) => c.validate(),
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            EnvConfig::Traffic(c) => c.horizon,
            EnvConfig::Covid(c) => c.horizon,
        }
    }

    /// Same environment, different episode seed.
    pub fn with_seed(&self, s: u64) -> Self {
        let mut out = self.clone();
        match &mut out {
            EnvConfig::Traffic(c) => c.seed = s,
            EnvConfig::Covid(c) => c.seed = s,
        }
        out
    }

    /// Action bounds the policy head should use.
    pub fn action_bounds(&self) -> [f64; 2] {
        match self {
            EnvConfig::Traffic(c) => c.av_accel_bounds,
            EnvConfig::Covid(_) => [0.0, 2.0],
        }
    }

    pub fn default_for(kind: EnvKind) -> Self {
        match kind {
            EnvKind::Traffic => EnvConfig::Traffic(TrafficConfig::default()),
            EnvKind::Covid => EnvConfig::Covid(SeirParams::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "env", rename_all = "kebab-case")]
pub enum StepInfo {
    Traffic(TrafficStepInfo),
    Covid(CovidStepInfo),
}

// One live episode per rollout, so the size gap between variants is harmless.
#[allow(clippy::large_enum_variant)]
pub enum Episode {
    Traffic(TrafficState),
    Covid(CovidEpisode),
}

impl Episode {
    pub fn new(env: &EnvConfig) -> Result<Self> {
        Ok(match env {
            EnvConfig::Traffic(c) => Episode::Traffic(TrafficState::reset(c)?),
            EnvConfig::Covid(c) => Episode::Covid(CovidEpisode::new(c)?),
        })
    }

    pub fn is_done(&self) -> bool {
        match self {
            Episode::Traffic(s) => s.is_done(),
            Episode::Covid(e) => e.is_done(),
        }
    }

    /// Whether the controlled agent still acts (the AV may have left the road).
    pub fn agent_active(&self) -> bool {
        match self {
            Episode::Traffic(s) => s.av_active(),
            Episode::Covid(_) => true,
        }
    }

    pub fn features(&self) -> Vec<f64> {
        match self {
            Episode::Traffic(s) => s.observe().0.to_vec(),
            Episode::Covid(e) => e.observe().features(e.params.population).to_vec(),
        }
    }

    pub fn step(&mut self, action: Option<Action>) -> Result<StepInfo> {
        match (self, action) {
            (Episode::Traffic(s), Some(Action::Continuous(a))) => Ok(StepInfo::Traffic(s.step(a)?)),
            (Episode::Traffic(s), None) => Ok(StepInfo::Traffic(s.step(0.0)?)),
            (Episode::Covid(e), Some(Action::Discrete(i))) => {
                let a = CovidAction::from_index(i).ok_or_else(|| Error::Invalid(format!("covid action {i}")))?;
                Ok(StepInfo::Covid(e.step(a)))
            }
            (Episode::Covid(e), None) => Ok(StepInfo::Covid(e.step(CovidAction::Maintain))),
            _ => Err(Error::Incompatible("action kind does not match environment".into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionMode {
    Sample,
    Deterministic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutOptions {
    pub seed: u64,
    pub mode: ActionMode,
    /// Action quantum for continuous actions; 0 disables quantization.
    pub epsilon: f64,
    /// Record every `record_stride`-th agent step; `None` records nothing.
    pub record_stride: Option<usize>,
}

impl RolloutOptions {
    pub fn sampled(seed: u64) -> Self {
        Self {
            seed,
            mode: ActionMode::Sample,
            epsilon: 0.0,
            record_stride: None,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn recording(mut self, stride: usize) -> Self {
        self.record_stride = Some(stride.max(1));
        self
    }

    pub fn deterministic(mut self) -> Self {
        self.mode = ActionMode::Deterministic;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub observation: Vec<f64>,
    pub action: Action,
    pub distribution: ActionDistribution,
    pub proxy: f64,
    #[serde(rename = "true")]
    pub truth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutOutcome {
    pub totals: RewardSample,
    pub steps: usize,
    pub terminated_early: bool,
    pub records: Vec<StepRecord>,
    pub per_step: Vec<RewardSample>,
}

/// Runs one episode of `params` in `env`. The episode's environment stream and
/// the policy's sampling stream are both derived from `opts.seed`.
pub fn rollout(
    spec: &PolicySpec,
    params: &PolicyParams,
    env: &EnvConfig,
    rewards: &RewardPair,
    opts: &RolloutOptions,
) -> Result<RolloutOutcome> {
    if spec.env != env.kind() || rewards.env() != env.kind() {
        return Err(Error::Incompatible(format!(
            "policy for {}, reward for {}, environment {}",
            spec.env,
            rewards.env(),
            env.kind()
        )));
    }
    let mut episode = Episode::new(&env.with_seed(seed::derive(opts.seed, &[1])))?;
    let mut rng = seed::rng(opts.seed, &[2]);
    let mut totals = RewardSample::default();
    let mut per_step = Vec::with_capacity(env.horizon());
    let mut records = Vec::new();
    let mut agent_steps = 0usize;
    let mut t = 0usize;
    while !episode.is_done() {
        let decision = if episode.agent_active() {
            let obs = episode.features();
            let dist = policy_dist(spec, params, &obs)?;
            let mode = match opts.mode {
                ActionMode::Sample => ActMode::Sample(&mut rng),
                ActionMode::Deterministic => ActMode::Deterministic,
            };
            let action = match policy_act(&dist, mode) {
                Action::Continuous(a) => Action::Continuous(quantize_action(a, opts.epsilon)),
                a => a,
            };
            let keep = opts.record_stride.is_some_and(|s| agent_steps.is_multiple_of(s));
            agent_steps += 1;
            Some((action, keep.then_some((obs, dist))))
        } else {
            None
        };
        let info = episode.step(decision.as_ref().map(|d| d.0))?;
        let sample = rewards.evaluate(&info)?;
        totals += sample;
        per_step.push(sample);
        if let Some((action, Some((observation, distribution)))) = decision {
            records.push(StepRecord {
                step: t,
                observation,
                action,
                distribution,
                proxy: sample.proxy,
                truth: sample.truth,
            });
        }
        t += 1;
    }
    Ok(RolloutOutcome {
        totals,
        steps: t,
        terminated_early: t < env.horizon(),
        records,
        per_step,
    })
}
