//! Feed-forward stochastic policies over a flat parameter vector.
//!
//! Layout: for each dense layer, the row-major weight matrix (outputs × inputs)
//! followed by the bias vector. The Gaussian head emits `[mean, log_std]`; the
//! categorical head emits three logits.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::covid::CovidObservation;
use crate::error::{Error, Result};
use crate::rollout::EnvKind;
use crate::seed;
use crate::traffic::TrafficObservation;

pub const MIN_STD: f64 = 1e-3;
pub const DEFAULT_BINS: usize = 51;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Head {
    Gaussian,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub env: EnvKind,
    pub hidden_widths: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Acceleration bounds for the Gaussian head; unused by categorical heads.
    #[serde(default = "default_bounds")]
    pub action_bounds: [f64; 2],
}

fn default_activation() -> Activation {
    Activation::Tanh
}

fn default_bounds() -> [f64; 2] {
    [-3.0, 3.0]
}

impl PolicySpec {
    pub fn new(env: EnvKind, hidden_widths: Vec<usize>) -> Self {
        Self {
            env,
            hidden_widths,
            activation: Activation::Tanh,
            action_bounds: default_bounds(),
        }
    }

    pub fn with_bounds(mut self, bounds: [f64; 2]) -> Self {
        self.action_bounds = bounds;
        self
    }

    pub fn head(&self) -> Head {
        match self.env {
            EnvKind::Traffic => Head::Gaussian,
            EnvKind::Covid => Head::Categorical,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self.env {
            EnvKind::Traffic => TrafficObservation::DIM,
            EnvKind::Covid => CovidObservation::DIM,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.head() {
            Head::Gaussian => 2,
            Head::Categorical => 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_widths.contains(&0) {
            return Err(Error::Config("hidden widths must be >= 1".into()));
        }
        let [lo, hi] = self.action_bounds;
        if self.head() == Head::Gaussian && !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config(format!("action bounds [{lo}, {hi}] are not increasing")));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of each dense layer, output head last.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim()];
        dims.extend(&self.hidden_widths);
        dims.push(self.output_dim());
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn action_range(&self) -> f64 {
        self.action_bounds[1] - self.action_bounds[0]
    }
}

pub fn param_count(spec: &PolicySpec) -> usize {
    spec.layers().iter().map(|(i, o)| i * o + o).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams(pub Vec<f64>);

impl PolicyParams {
    pub fn zeros(spec: &PolicySpec) -> Self {
        Self(vec![0.0; param_count(spec)])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Index of the log-std bias inside a Gaussian policy's parameter vector.
/// Uniform fan-in weights, zero biases. The Gaussian log-std row starts with
/// zero weights too, so every initial policy has unit action std.
pub fn policy_init(spec: &PolicySpec, seed_value: u64) -> PolicyParams {
    let mut rng = seed::rng(seed_value, &[0x1417]);
    let mut params = Vec::with_capacity(param_count(spec));
    let layers = spec.layers();
    for (k, &(fan_in, fan_out)) in layers.iter().enumerate() {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let last = k + 1 == layers.len();
        for row in 0..fan_out {
            for _ in 0..fan_in {
                let w = rng.random_range(-bound..bound);
                let log_std_row = last && spec.head() == Head::Gaussian && row == 1;
                params.push(if log_std_row { 0.0 } else { w });
            }
        }
        params.extend(std::iter::repeat_n(0.0, fan_out));
    }
    PolicyParams(params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ActionDistribution {
    Gaussian { mean: f64, std: f64 },
    Categorical { probs: Vec<f64> },
}

/// Forward pass. Hidden layers use tanh; the head is linear, followed by the
/// mean clamp and std floor (Gaussian) or a softmax (categorical).
pub fn policy_dist(spec: &PolicySpec, params: &PolicyParams, obs: &[f64]) -> Result<ActionDistribution> {
    if obs.len() != spec.input_dim() {
        return Err(Error::Dimension {
            expected: spec.input_dim(),
            got: obs.len(),
        });
    }
    let expected = param_count(spec);
    if params.len() != expected {
        return Err(Error::Dimension {
            expected,
            got: params.len(),
        });
    }
    let layers = spec.layers();
    let mut x = obs.to_vec();
    let mut offset = 0;
    for (k, &(fan_in, fan_out)) in layers.iter().enumerate() {
        let w = &params.0[offset..offset + fan_in * fan_out];
        let b = &params.0[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        offset += fan_in * fan_out + fan_out;
        let last = k + 1 == layers.len();
        x = (0..fan_out)
            .map(|r| {
                let z = w[r * fan_in..(r + 1) * fan_in]
                    .iter()
                    .zip(&x)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    + b[r];
                if last {
                    z
                } else {
                    z.tanh()
                }
            })
            .collect();
    }
    Ok(match spec.head() {
        Head::Gaussian => {
            let [lo, hi] = spec.action_bounds;
            let mean = if x[0].is_nan() { 0.0 } else { x[0].clamp(lo, hi) };
            let max_std = spec.action_range();
            let std = if x[1].is_nan() {
                MIN_STD
            } else {
                x[1].exp().clamp(MIN_STD, max_std)
            };
            ActionDistribution::Gaussian { mean, std }
        }
        Head::Categorical => ActionDistribution::Categorical { probs: softmax(&x) },
    })
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum Action {
    Continuous(f64),
    Discrete(usize),
}

pub enum ActMode<'a, R: Rng> {
    Sample(&'a mut R),
    Deterministic,
}

/// Deterministic mode picks the mean or the lowest-index argmax.
pub fn policy_act<R: Rng>(dist: &ActionDistribution, mode: ActMode<'_, R>) -> Action {
    match (dist, mode) {
        (ActionDistribution::Gaussian { mean, .. }, ActMode::Deterministic) => Action::Continuous(*mean),
        (ActionDistribution::Gaussian { mean, std }, ActMode::Sample(rng)) => {
            let z: f64 = StandardNormal.sample(rng);
            Action::Continuous(mean + std * z)
        }
        (ActionDistribution::Categorical { probs }, ActMode::Deterministic) => Action::Discrete(argmax(probs)),
        (ActionDistribution::Categorical { probs }, ActMode::Sample(rng)) => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return Action::Discrete(i);
                }
            }
            Action::Discrete(probs.len() - 1)
        }
    }
}

/// Lowest index among maximal entries.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Bins a Gaussian onto `bins` equal-width cells over `bounds`. Mass outside
/// the bounds is folded into the end cells; the result is renormalized.
pub fn dist_discretize(mean: f64, std: f64, bounds: [f64; 2], bins: usize) -> Result<Vec<f64>> {
    if bins < 2 {
        return Err(Error::Invalid(format!("need at least 2 bins, got {bins}")));
    }
    let [lo, hi] = bounds;
    if !(lo < hi) || !(std > 0.0) {
        return Err(Error::Invalid("discretization needs lo < hi and std > 0".into()));
    }
    let width = (hi - lo) / bins as f64;
    let cdf: Vec<f64> = (0..=bins)
        .map(|k| {
            let edge = if k == bins { hi } else { lo + k as f64 * width };
            normal_cdf((edge - mean) / std)
        })
        .collect();
    let mut mass: Vec<f64> = cdf.windows(2).map(|w| (w[1] - w[0]).max(0.0)).collect();
    mass[0] += cdf[0];
    mass[bins - 1] += 1.0 - cdf[bins];
    let total: f64 = mass.iter().sum();
    mass.iter_mut().for_each(|m| *m /= total);
    Ok(mass)
}

/// Categorical view of any distribution: Gaussians go through
/// [`dist_discretize`], categoricals pass through.
pub fn as_categorical(dist: &ActionDistribution, bounds: [f64; 2], bins: usize) -> Result<Vec<f64>> {
    match dist {
        ActionDistribution::Gaussian { mean, std } => dist_discretize(*mean, *std, bounds, bins),
        ActionDistribution::Categorical { probs } => Ok(probs.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn param_counts() {
        assert_eq!(param_count(&PolicySpec::new(EnvKind::Traffic, vec![4])), 38);
        assert_eq!(param_count(&PolicySpec::new(EnvKind::Traffic, vec![])), 14);
        assert_eq!(param_count(&PolicySpec::new(EnvKind::Covid, vec![16, 16])), 563);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let spec = PolicySpec::new(EnvKind::Traffic, vec![8, 4]);
        let a = policy_init(&spec, 3);
        assert_eq!(a, policy_init(&spec, 3));
        assert_ne!(a, policy_init(&spec, 4));
        let mut offset = 0;
        for (i, o) in spec.layers() {
            offset += i * o;
            assert!(a.0[offset..offset + o].iter().all(|&b| b == 0.0));
            offset += o;
        }
    }

    #[test]
    fn init_weights_within_fan_in_bounds() {
        let spec = PolicySpec::new(EnvKind::Covid, vec![5]);
        let layers = spec.layers();
        for s in 0..1000u64 {
            let p = policy_init(&spec, s);
            let mut offset = 0;
            for &(i, o) in &layers {
                let bound = 1.0 / (i as f64).sqrt();
                assert!(p.0[offset..offset + i * o].iter().all(|w| w.abs() <= bound));
                offset += i * o + o;
            }
        }
    }

    #[test]
    fn zero_network_outputs() {
        let t = PolicySpec::new(EnvKind::Traffic, vec![3]);
        let d = policy_dist(&t, &PolicyParams::zeros(&t), &[0.3; 6]).unwrap();
        assert_eq!(d, ActionDistribution::Gaussian { mean: 0.0, std: 1.0 });
        let c = PolicySpec::new(EnvKind::Covid, vec![]);
        let ActionDistribution::Categorical { probs } = policy_dist(&c, &PolicyParams::zeros(&c), &[0.5; 14]).unwrap()
        else {
            panic!()
        };
        for p in probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_layer_hand_fixture() {
        // Linear traffic head on obs = [1, 0.5, 0, 0, 0, 0]:
        // mean = 0.2*1 + 0.4*0.5 + 0.1 = 0.5; log_std = -1*1 + 2*0.5 + ln 0.25 = ln 0.25.
        let spec = PolicySpec::new(EnvKind::Traffic, vec![]);
        let mut p = vec![0.0; 14];
        p[0] = 0.2;
        p[1] = 0.4;
        p[6] = -1.0;
        p[7] = 2.0;
        p[12] = 0.1;
        p[13] = 0.25f64.ln();
        let d = policy_dist(&spec, &PolicyParams(p), &[1.0, 0.5, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let ActionDistribution::Gaussian { mean, std } = d else {
            panic!()
        };
        assert!((mean - 0.5).abs() < 1e-15);
        assert!((std - 0.25).abs() < 1e-15);
    }

    #[test]
    fn rejects_wrong_observation_size() {
        let spec = PolicySpec::new(EnvKind::Traffic, vec![]);
        let err = policy_dist(&spec, &PolicyParams::zeros(&spec), &[0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Dimension { expected: 6, got: 5 }));
    }

    #[test]
    fn mean_is_clamped_and_std_floored() {
        let spec = PolicySpec::new(EnvKind::Traffic, vec![]);
        let mut p = vec![0.0; 14];
        p[12] = 50.0;
        p[13] = -100.0;
        let d = policy_dist(&spec, &PolicyParams(p), &[0.0; 6]).unwrap();
        assert_eq!(
            d,
            ActionDistribution::Gaussian {
                mean: 3.0,
                std: MIN_STD
            }
        );
    }

    #[test]
    fn deterministic_actions() {
        let cat = ActionDistribution::Categorical {
            probs: vec![0.2, 0.5, 0.3],
        };
        assert_eq!(
            policy_act::<ChaCha8Rng>(&cat, ActMode::Deterministic),
            Action::Discrete(1)
        );
        let tie = ActionDistribution::Categorical {
            probs: vec![0.4, 0.4, 0.2],
        };
        assert_eq!(
            policy_act::<ChaCha8Rng>(&tie, ActMode::Deterministic),
            Action::Discrete(0)
        );
        let g = ActionDistribution::Gaussian { mean: 0.3, std: 0.1 };
        assert_eq!(
            policy_act::<ChaCha8Rng>(&g, ActMode::Deterministic),
            Action::Continuous(0.3)
        );
    }

    #[test]
    fn sampled_categorical_frequencies() {
        let probs = vec![0.2, 0.5, 0.3];
        let dist = ActionDistribution::Categorical { probs: probs.clone() };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 3];
        let n = 10_000;
        for _ in 0..n {
            let Action::Discrete(i) = policy_act(&dist, ActMode::Sample(&mut rng)) else {
                panic!()
            };
            counts[i] += 1;
        }
        for (c, p) in counts.iter().zip(probs) {
            assert!((*c as f64 / n as f64 - p).abs() < 0.02);
        }
    }

    #[test]
    fn discretize_three_bins_against_normal_table() {
        // Φ(1) = 0.841345, Φ(-1) = 0.158655; the tail beyond ±3 folds into the end bins.
        let m = dist_discretize(0.0, 1.0, [-3.0, 3.0], 3).unwrap();
        assert!((m[0] - 0.158655).abs() < 1e-5);
        assert!((m[1] - 0.682689).abs() < 1e-5);
        assert!((m[2] - 0.158655).abs() < 1e-5);
    }

    #[test]
    fn discretize_rejects_single_bin() {
        assert!(dist_discretize(0.0, 1.0, [-1.0, 1.0], 1).is_err());
    }

    proptest! {
        #[test]
        fn discretized_mass_sums_to_one(mean in -10.0..10.0f64, std in 1e-3..20.0f64, bins in 2usize..80) {
            let m = dist_discretize(mean, std, [-3.0, 3.0], bins).unwrap();
            prop_assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(m.iter().all(|x| *x >= 0.0));
        }

        #[test]
        fn centered_gaussian_is_symmetric(std in 0.01..5.0f64, bins in 2usize..60) {
            let m = dist_discretize(0.0, std, [-3.0, 3.0], bins).unwrap();
            for k in 0..bins {
                prop_assert!((m[k] - m[bins - 1 - k]).abs() < 1e-12);
            }
        }

        #[test]
        fn discretize_keeps_mode_bin(mean in -2.9..2.9f64, std in 0.01..1.0f64) {
            let bounds = [-3.0, 3.0];
            // Tails folded into the end cells could outweigh the mode for wide
            // Gaussians; require the mean to sit well inside.
            prop_assume!(mean - 3.0 * std > bounds[0] && mean + 3.0 * std < bounds[1]);
            let m = dist_discretize(mean, std, bounds, DEFAULT_BINS).unwrap();
            let width = 6.0 / DEFAULT_BINS as f64;
            let cell = (((mean - bounds[0]) / width).floor() as usize).min(DEFAULT_BINS - 1);
            let best = argmax(&m);
            prop_assert!(best == cell || (m[best] - m[cell]).abs() < 1e-12, "best {} cell {}", best, cell);
        }

        #[test]
        fn param_count_grows_with_width(widths in proptest::collection::vec(1usize..40, 0..4), which in 0usize..4) {
            prop_assume!(!widths.is_empty());
            let k = which % widths.len();
            let base = PolicySpec::new(EnvKind::Traffic, widths.clone());
            let mut wider = widths;
            wider[k] += 1;
            prop_assert!(param_count(&PolicySpec::new(EnvKind::Traffic, wider)) > param_count(&base));
        }

        #[test]
        fn forward_pass_is_pure(seed_value in 0u64..1000, obs in proptest::collection::vec(0.0..1.0f64, 14)) {
            let spec = PolicySpec::new(EnvKind::Covid, vec![6, 3]);
            let p = policy_init(&spec, seed_value);
            let a = policy_dist(&spec, &p, &obs).unwrap();
            let b = policy_dist(&spec, &p, &obs).unwrap();
            prop_assert_eq!(&a, &b);
            let ActionDistribution::Categorical { probs } = a else { unreachable!() };
            prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
