//! Capability sweeps, phase-transition flagging and proxy/true correlation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{param_count, PolicyParams, PolicySpec};
use crate::rewards::{RewardPair, RewardSample};
use crate::rollout::{rollout, ActionMode, EnvConfig, EnvKind, RolloutOptions};
use crate::seed;
use crate::trainer::{evaluate, train, Evaluation, TrainConfig, TrainRun};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "values", rename_all = "kebab-case")]
pub enum SweepAxis {
    ModelSize(Vec<Vec<usize>>),
    TrainingSteps(Vec<usize>),
    /// Action quanta, coarsest first.
    ActionResolution(Vec<f64>),
    /// Testing rates of the epidemic observation model.
    ObservationFidelity(Vec<f64>),
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::ModelSize(_) => "model-size",
            SweepAxis::TrainingSteps(_) => "train-steps",
            SweepAxis::ActionResolution(_) => "action-resolution",
            SweepAxis::ObservationFidelity(_) => "obs-fidelity",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SweepAxis::ModelSize(v) => v.len(),
            SweepAxis::TrainingSteps(v) => v.len(),
            SweepAxis::ActionResolution(v) => v.len(),
            SweepAxis::ObservationFidelity(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Display form of the `i`-th value, as written to sweep tables.
    pub fn label(&self, i: usize) -> String {
        match self {
            SweepAxis::ModelSize(v) => {
                let inner: Vec<String> = v[i].iter().map(|w| w.to_string()).collect();
                format!("[{}]", inner.join(","))
            }
            SweepAxis::TrainingSteps(v) => v[i].to_string(),
            SweepAxis::ActionResolution(v) => v[i].to_string(),
            SweepAxis::ObservationFidelity(v) => v[i].to_string(),
        }
    }

    /// Values must be ordered by increasing capability.
    pub fn validate(&self, env: EnvKind) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Config(format!("{} axis has no values", self.name())));
        }
        let ordered = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("{} values must be {what}", self.name())))
            }
        };
        match self {
            SweepAxis::ModelSize(v) => {
                let counts: Vec<usize> = v
                    .iter()
                    .map(|h| param_count(&PolicySpec::new(env, h.clone())))
                    .collect();
                ordered(counts.windows(2).all(|w| w[0] <= w[1]), "ordered by parameter count")
            }
            SweepAxis::TrainingSteps(v) => ordered(v.windows(2).all(|w| w[0] <= w[1]), "increasing"),
            SweepAxis::ActionResolution(v) => {
                if v.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
                    return Err(Error::Config("action quanta must be finite and non-negative".into()));
                }
                // 0 means unquantized, the finest resolution of all.
                let key = |e: f64| if e == 0.0 { f64::INFINITY } else { -e };
                ordered(v.windows(2).all(|w| key(w[0]) <= key(w[1])), "decreasing (0 last)")
            }
            SweepAxis::ObservationFidelity(v) => {
                if env != EnvKind::Covid {
                    return Err(Error::Config(
                        "obs-fidelity axis applies to the covid environment only".into(),
                    ));
                }
                if v.iter().any(|r| !(0.0..=1.0).contains(r)) {
                    return Err(Error::Config("testing rates must lie in [0, 1]".into()));
                }
                ordered(v.windows(2).all(|w| w[0] <= w[1]), "increasing")
            }
        }
    }
}

/// Everything a sweep point starts from before the axis knob is applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepBase {
    pub env: EnvConfig,
    pub policy: PolicySpec,
    pub train: TrainConfig,
    pub epsilon: f64,
    pub eval_rollouts: usize,
}

impl SweepBase {
    pub fn new(env: EnvConfig, policy: PolicySpec, train: TrainConfig) -> Self {
        let eval_rollouts = default_eval_rollouts(env.kind());
        Self {
            env,
            policy,
            train,
            epsilon: 0.0,
            eval_rollouts,
        }
    }

    fn at(&self, axis: &SweepAxis, i: usize) -> SweepBase {
        let mut point = self.clone();
        match axis {
            SweepAxis::ModelSize(v) => point.policy.hidden_widths = v[i].clone(),
            SweepAxis::TrainingSteps(v) => point.train.generations = v[i],
            SweepAxis::ActionResolution(v) => point.epsilon = v[i],
            SweepAxis::ObservationFidelity(v) => {
                if let EnvConfig::Covid(p) = &mut point.env {
                    p.testing_rate = v[i];
                }
            }
        }
        point
    }
}

/// Rollouts averaged when reporting a policy: 5 for traffic, 32 for covid.
pub fn default_eval_rollouts(env: EnvKind) -> usize {
    match env {
        EnvKind::Traffic => 5,
        EnvKind::Covid => 32,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis_value: String,
    pub param_count: usize,
    pub eval: Option<Evaluation>,
    /// Generation of the highest-proxy checkpoint.
    pub trained_generation: Option<usize>,
    pub error: Option<String>,
    /// In-memory only; the sidecar keeps evaluations, not training traces.
    #[serde(skip)]
    pub run: Option<TrainRun>,
    #[serde(skip)]
    pub spec: Option<PolicySpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: String,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn phase_transition(&self, theta: f64) -> Option<usize> {
        let ok: Vec<(usize, Evaluation)> = self
            .rows
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.eval.map(|e| (i, e)))
            .collect();
        let proxy: Vec<f64> = ok.iter().map(|(_, e)| e.mean_proxy).collect();
        let truth: Vec<f64> = ok.iter().map(|(_, e)| e.mean_true).collect();
        detect_phase_transition(&proxy, &truth, theta).map(|k| ok[k].0)
    }
}

/// Trains and evaluates one policy per axis value. Every row trains from the
/// same seed, so rows differ only in the swept knob, and is evaluated from
/// `derive(seed_value, [0x5EE9])`. A failing row records its error and the
/// sweep moves on.
pub fn run_sweep(axis: &SweepAxis, base: &SweepBase, rewards: &RewardPair, seed_value: u64) -> Result<SweepResult> {
    axis.validate(base.env.kind())?;
    rewards.validate()?;
    let eval_seed = seed::derive(seed_value, &[0x5EE9]);
    let rows = (0..axis.len())
        .map(|i| {
            let point = base.at(axis, i);
            let cfg = TrainConfig {
                seed: seed_value,
                ..point.train.clone()
            };
            let outcome = train(&point.policy, &point.env, rewards, &cfg, point.epsilon).and_then(|run| {
                let params = &run.trained().params;
                let e = evaluate(
                    &point.policy,
                    params,
                    &point.env,
                    rewards,
                    point.eval_rollouts,
                    eval_seed,
                    point.epsilon,
                )?;
                Ok((run, e))
            });
            let (run, eval, error) = match outcome {
                Ok((run, e)) => (Some(run), Some(e), None),
                Err(e) => (None, None, Some(e.to_string())),
            };
            SweepRow {
                axis_value: axis.label(i),
                param_count: param_count(&point.policy),
                eval,
                trained_generation: run.as_ref().map(|r| r.trained().generation),
                error,
                run,
                spec: Some(point.policy.clone()),
            }
        })
        .collect();
    Ok(SweepResult {
        axis: axis.name().to_string(),
        rows,
    })
}

/// Sample Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Dimension {
            expected: xs.len(),
            got: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::Invalid("pearson needs at least two pairs".into()));
    }
    // Test constancy directly: the mean of equal values can be off by an ulp,
    // which would leave tiny nonzero deviations behind.
    let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
    if constant(xs) {
        return Err(Error::ZeroVariance("first sample"));
    }
    if constant(ys) {
        return Err(Error::ZeroVariance("second sample"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(Error::ZeroVariance("first sample"));
    }
    if syy == 0.0 {
        return Err(Error::ZeroVariance("second sample"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrelationUnit {
    /// One sample per rollout: episode totals.
    Episode,
    /// One sample per environment step.
    Step,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationOptions {
    pub rollouts: usize,
    pub unit: CorrelationUnit,
    pub mode: ActionMode,
    pub epsilon: f64,
}

impl Default for CorrelationOptions {
    fn default() -> Self {
        Self {
            rollouts: 30,
            unit: CorrelationUnit::Episode,
            mode: ActionMode::Sample,
            epsilon: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Correlation {
    pub rho: f64,
    pub samples: Vec<RewardSample>,
}

/// Collects the paired samples; kept separate so callers can log them even
/// when the correlation itself is undefined.
pub fn correlation_samples(
    spec: &PolicySpec,
    params: &PolicyParams,
    env: &EnvConfig,
    rewards: &RewardPair,
    seed_value: u64,
    opts: &CorrelationOptions,
) -> Result<Vec<RewardSample>> {
    let per_rollout: Vec<Vec<RewardSample>> = (0..opts.rollouts as u64)
        .into_par_iter()
        .map(|r| {
            let mut ro = RolloutOptions::sampled(seed::derive(seed_value, &[0xC0, r])).with_epsilon(opts.epsilon);
            ro.mode = opts.mode;
            let out = rollout(spec, params, env, rewards, &ro)?;
            Ok(match opts.unit {
                CorrelationUnit::Episode => vec![out.totals],
                CorrelationUnit::Step => out.per_step,
            })
        })
        .collect::<Result<_>>()?;
    Ok(per_rollout.into_iter().flatten().collect())
}

pub fn proxy_true_correlation(
    spec: &PolicySpec,
    params: &PolicyParams,
    env: &EnvConfig,
    rewards: &RewardPair,
    seed_value: u64,
    opts: &CorrelationOptions,
) -> Result<Correlation> {
    let samples = correlation_samples(spec, params, env, rewards, seed_value, opts)?;
    let xs: Vec<f64> = samples.iter().map(|s| s.proxy).collect();
    let ys: Vec<f64> = samples.iter().map(|s| s.truth).collect();
    let rho = pearson(&xs, &ys)?;
    Ok(Correlation { rho, samples })
}

/// Index of the first row whose true reward fell by more than
/// `theta · (max − min)` from the previous row while the proxy did not fall.
pub fn detect_phase_transition(proxy: &[f64], truth: &[f64], theta: f64) -> Option<usize> {
    if truth.len() < 3 || proxy.len() != truth.len() {
        return None;
    }
    let max = truth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = truth.iter().copied().fold(f64::INFINITY, f64::min);
    let range = max - min;
    if !(range > 0.0) {
        return None;
    }
    (1..truth.len()).find(|&i| truth[i - 1] - truth[i] > theta * range && proxy[i] >= proxy[i - 1])
}
