//! Cross-entropy-method policy search with checkpoint bookkeeping.
//!
//! Each generation samples a population around the incumbent mean, scores
//! every member on the same rollout seeds, refits the mean and per-parameter
//! spread to the elite set, and adds a decaying exploration term to the spread.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{policy_init, PolicyParams, PolicySpec};
use crate::rewards::{RewardPair, RewardSample};
use crate::rollout::{rollout, EnvConfig, EnvKind, RolloutOptions};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub population: usize,
    pub elite_frac: f64,
    pub generations: usize,
    pub init_noise_std: f64,
    pub noise_decay: f64,
    pub rollouts_per_eval: usize,
    /// Write a periodic checkpoint every this many generations (0 = never).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            population: 64,
            elite_frac: 0.25,
            generations: 100,
            init_noise_std: 0.1,
            noise_decay: 0.995,
            rollouts_per_eval: 5,
            checkpoint_every: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn for_env(env: EnvKind) -> Self {
        Self {
            rollouts_per_eval: match env {
                EnvKind::Traffic => 5,
                EnvKind::Covid => 8,
            },
            ..Self::default()
        }
    }

    pub fn elite_count(&self) -> usize {
        (self.population as f64 * self.elite_frac).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.elite_frac > 0.0 && self.elite_frac <= 1.0) {
            return Err(Error::Config(format!(
                "elite_frac must lie in (0, 1], got {}",
                self.elite_frac
            )));
        }
        if self.elite_count() < 1 {
            return Err(Error::Config("population * elite_frac must be at least 1".into()));
        }
        if !(self.noise_decay > 0.0 && self.noise_decay <= 1.0) {
            return Err(Error::Config("noise_decay must lie in (0, 1]".into()));
        }
        if !(self.init_noise_std >= 0.0 && self.init_noise_std.is_finite()) {
            return Err(Error::Config("init_noise_std must be finite and non-negative".into()));
        }
        if self.rollouts_per_eval == 0 {
            return Err(Error::Config("rollouts_per_eval must be at least 1".into()));
        }
        Ok(())
    }
}

/// Something CEM can score: mean proxy and true reward of a parameter vector
/// over the given rollout seeds.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn evaluate(&self, params: &[f64], seeds: &[u64]) -> Result<RewardSample>;
}

/// Rollout-based objective for a policy architecture in an environment.
pub struct PolicyObjective<'a> {
    pub spec: &'a PolicySpec,
    pub env: &'a EnvConfig,
    pub rewards: &'a RewardPair,
    /// Action quantum applied at rollout time.
    pub epsilon: f64,
}

impl Objective for PolicyObjective<'_> {
    fn dim(&self) -> usize {
        crate::policy::param_count(self.spec)
    }

    fn evaluate(&self, params: &[f64], seeds: &[u64]) -> Result<RewardSample> {
        let params = PolicyParams(params.to_vec());
        let mut total = RewardSample::default();
        for &s in seeds {
            let opts = RolloutOptions::sampled(s).with_epsilon(self.epsilon);
            total += rollout(self.spec, &params, self.env, self.rewards, &opts)?.totals;
        }
        let n = seeds.len() as f64;
        Ok(RewardSample {
            proxy: total.proxy / n,
            truth: total.truth / n,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointTag {
    Early,
    Trained,
    Periodic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub generation: usize,
    pub params: PolicyParams,
    pub mean_proxy: f64,
    pub mean_true: f64,
    pub tags: Vec<CheckpointTag>,
}

impl Checkpoint {
    pub fn has(&self, tag: CheckpointTag) -> bool {
        self.tags.contains(&tag)
    }
}

/// Per-generation statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    pub mean_proxy: f64,
    pub mean_true: f64,
    /// Absent for the final generation, which samples no population.
    pub population_mean_proxy: Option<f64>,
    pub elite_mean_proxy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    /// One entry per generation boundary, the initial parameters first.
    pub checkpoints: Vec<Checkpoint>,
    pub curve: Vec<GenerationStats>,
}

impl TrainRun {
    pub fn tagged(&self, tag: CheckpointTag) -> &Checkpoint {
        self.checkpoints
            .iter()
            .find(|c| c.has(tag))
            .expect("early and trained checkpoints always exist")
    }

    pub fn trained(&self) -> &Checkpoint {
        self.tagged(CheckpointTag::Trained)
    }

    pub fn early(&self) -> &Checkpoint {
        self.tagged(CheckpointTag::Early)
    }
}

/// Runs CEM from `init`. The incumbent (current mean) is scored on a fixed
/// set of evaluation seeds at every generation boundary.
pub fn cem(objective: &dyn Objective, init: Vec<f64>, cfg: &TrainConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let dim = objective.dim();
    if init.len() != dim {
        return Err(Error::Dimension {
            expected: dim,
            got: init.len(),
        });
    }
    let eval_seeds: Vec<u64> = (0..cfg.rollouts_per_eval as u64)
        .map(|r| seed::derive(cfg.seed, &[0xE7A1, r]))
        .collect();
    let n_elite = cfg.elite_count();

    let mut mean = init;
    let mut spread = vec![cfg.init_noise_std; dim];
    let mut checkpoints = Vec::with_capacity(cfg.generations + 1);
    let mut curve = Vec::with_capacity(cfg.generations + 1);

    for generation in 0..=cfg.generations {
        let incumbent = objective.evaluate(&mean, &eval_seeds)?;
        if !(incumbent.proxy.is_finite() && incumbent.truth.is_finite()) {
            return Err(Error::NonFiniteReward {
                generation,
                member: usize::MAX,
            });
        }
        checkpoints.push(Checkpoint {
            generation,
            params: PolicyParams(mean.clone()),
            mean_proxy: incumbent.proxy,
            mean_true: incumbent.truth,
            tags: Vec::new(),
        });
        let mut stats = GenerationStats {
            generation,
            mean_proxy: incumbent.proxy,
            mean_true: incumbent.truth,
            population_mean_proxy: None,
            elite_mean_proxy: None,
        };
        if generation == cfg.generations {
            curve.push(stats);
            break;
        }

        let pop_seeds: Vec<u64> = (0..cfg.rollouts_per_eval as u64)
            .map(|r| seed::derive(cfg.seed, &[0x90B, generation as u64, r]))
            .collect();
        let members: Vec<Vec<f64>> = (0..cfg.population)
            .map(|k| {
                let mut rng = seed::rng(cfg.seed, &[0x5A3D, generation as u64, k as u64]);
                mean.iter()
                    .zip(&spread)
                    .map(|(m, s)| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        m + s * z
                    })
                    .collect()
            })
            .collect();
        // Ordered collect keeps results independent of scheduling.
        let scores: Vec<RewardSample> = members
            .par_iter()
            .map(|p| objective.evaluate(p, &pop_seeds))
            .collect::<Result<_>>()?;
        if let Some(member) = scores.iter().position(|s| !s.proxy.is_finite()) {
            return Err(Error::NonFiniteReward { generation, member });
        }

        let mut order: Vec<usize> = (0..cfg.population).collect();
        order.sort_by(|&a, &b| scores[b].proxy.total_cmp(&scores[a].proxy).then(a.cmp(&b)));
        let elite = &order[..n_elite];

        stats.population_mean_proxy = Some(scores.iter().map(|s| s.proxy).sum::<f64>() / cfg.population as f64);
        stats.elite_mean_proxy = Some(elite.iter().map(|&k| scores[k].proxy).sum::<f64>() / n_elite as f64);
        curve.push(stats);

        let extra = cfg.init_noise_std * cfg.noise_decay.powi(generation as i32 + 1);
        for j in 0..dim {
            let mu = elite.iter().map(|&k| members[k][j]).sum::<f64>() / n_elite as f64;
            let var = elite.iter().map(|&k| (members[k][j] - mu).powi(2)).sum::<f64>() / n_elite as f64;
            mean[j] = mu;
            spread[j] = (var + extra * extra).sqrt();
        }
    }

    tag_checkpoints(&mut checkpoints, cfg);
    Ok(TrainRun { checkpoints, curve })
}

fn tag_checkpoints(checkpoints: &mut [Checkpoint], cfg: &TrainConfig) {
    // Early: the first checkpoint taken before 1% of training has elapsed.
    checkpoints[0].tags.push(CheckpointTag::Early);
    let mut best = 0;
    for (i, c) in checkpoints.iter().enumerate() {
        if c.mean_proxy > checkpoints[best].mean_proxy {
            best = i;
        }
    }
    checkpoints[best].tags.push(CheckpointTag::Trained);
    if cfg.checkpoint_every > 0 {
        for c in checkpoints.iter_mut() {
            if c.generation > 0 && c.generation % cfg.checkpoint_every == 0 && c.tags.is_empty() {
                c.tags.push(CheckpointTag::Periodic);
            }
        }
    }
}

/// Trains a freshly initialized policy against `rewards.proxy`.
pub fn train(
    spec: &PolicySpec,
    env: &EnvConfig,
    rewards: &RewardPair,
    cfg: &TrainConfig,
    epsilon: f64,
) -> Result<TrainRun> {
    spec.validate()?;
    env.validate()?;
    rewards.validate()?;
    let init = policy_init(spec, seed::derive(cfg.seed, &[0x1A17]));
    let objective = PolicyObjective {
        spec,
        env,
        rewards,
        epsilon,
    };
    cem(&objective, init.0, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mean_proxy: f64,
    pub mean_true: f64,
    pub std_proxy: f64,
    pub std_true: f64,
}

/// Mean and (population) standard deviation of episode totals over
/// `n_rollouts` stochastic rollouts; rollout `r` uses seed
/// `derive(seed_value, [0xEBA1, r])`.
pub fn evaluate(
    spec: &PolicySpec,
    params: &PolicyParams,
    env: &EnvConfig,
    rewards: &RewardPair,
    n_rollouts: usize,
    seed_value: u64,
    epsilon: f64,
) -> Result<Evaluation> {
    if n_rollouts == 0 {
        return Err(Error::Invalid("n_rollouts must be at least 1".into()));
    }
    let totals: Vec<RewardSample> = (0..n_rollouts as u64)
        .into_par_iter()
        .map(|r| {
            let opts = RolloutOptions::sampled(seed::derive(seed_value, &[0xEBA1, r])).with_epsilon(epsilon);
            rollout(spec, params, env, rewards, &opts).map(|o| o.totals)
        })
        .collect::<Result<_>>()?;
    let n = n_rollouts as f64;
    let mp = totals.iter().map(|t| t.proxy).sum::<f64>() / n;
    let mt = totals.iter().map(|t| t.truth).sum::<f64>() / n;
    let sp = (totals.iter().map(|t| (t.proxy - mp).powi(2)).sum::<f64>() / n).sqrt();
    let st = (totals.iter().map(|t| (t.truth - mt).powi(2)).sum::<f64>() / n).sqrt();
    Ok(Evaluation {
        mean_proxy: mp,
        mean_true: mt,
        std_proxy: sp,
        std_true: st,
    })
}
