//! SEIR epidemic with five regulation stages. The policy sees noisy daily
//! test counts and its own stage history, never the true compartments.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const STAGES: usize = 5;
pub const MAX_STAGE: u8 = (STAGES - 1) as u8;
/// Days of history in an observation.
pub const WINDOW: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeirParams {
    pub population: f64,
    /// Transmission rate per stage (1/day), strictly decreasing.
    pub beta_by_stage: [f64; STAGES],
    /// Incubation rate (1/day).
    pub sigma: f64,
    /// Recovery rate (1/day).
    pub gamma: f64,
    /// Fraction of infected persons detected per daily test round.
    pub testing_rate: f64,
    pub initial_infected: f64,
    /// Fraction of infected persons needing intensive care.
    pub icu_fraction: f64,
    pub dt: f64,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for SeirParams {
    fn default() -> Self {
        Self {
            population: 100_000.0,
            beta_by_stage: [0.40, 0.30, 0.22, 0.16, 0.10],
            sigma: 0.2,
            gamma: 0.1,
            testing_rate: 0.25,
            initial_infected: 50.0,
            icu_fraction: 0.05,
            dt: 1.0,
            horizon: 200,
            seed: 0,
        }
    }
}

impl SeirParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.population > 0.0 && self.population.is_finite()) {
            return bad("population must be positive".into());
        }
        if self.beta_by_stage.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return bad("beta_by_stage entries must be finite and non-negative".into());
        }
        if self.beta_by_stage.windows(2).any(|w| w[1] >= w[0]) {
            return bad(format!(
                "beta_by_stage must be strictly decreasing, got {:?}",
                self.beta_by_stage
            ));
        }
        for (name, v) in [("sigma", self.sigma), ("gamma", self.gamma)] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(format!("{name} must lie in (0, 1], got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.testing_rate) {
            return bad(format!("testing_rate must lie in [0, 1], got {}", self.testing_rate));
        }
        if !(0.0..=self.population).contains(&self.initial_infected) {
            return bad("initial_infected must lie in [0, population]".into());
        }
        if !(0.0..=1.0).contains(&self.icu_fraction) {
            return bad("icu_fraction must lie in [0, 1]".into());
        }
        if !(self.dt > 0.0) || self.horizon == 0 {
            return bad("dt and horizon must be positive".into());
        }
        Ok(())
    }

    /// Observed cases at which regulation stops being politically costly.
    pub fn case_threshold(&self) -> f64 {
        0.001 * self.population
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeirState {
    pub s: f64,
    pub e: f64,
    pub i: f64,
    pub r: f64,
    pub stage: u8,
    pub day: usize,
    pub observed_cases_history: Vec<f64>,
    pub stage_history: Vec<u8>,
}

impl SeirState {
    pub fn initial(params: &SeirParams) -> Self {
        Self {
            s: params.population - params.initial_infected,
            e: 0.0,
            i: params.initial_infected,
            r: 0.0,
            stage: 0,
            day: 0,
            observed_cases_history: Vec::new(),
            stage_history: Vec::new(),
        }
    }

    pub fn total(&self) -> f64 {
        self.s + self.e + self.i + self.r
    }

    /// Everyone who has ever been infected.
    pub fn cumulative_infections(&self) -> f64 {
        self.e + self.i + self.r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovidAction {
    Decrease,
    Maintain,
    Increase,
}

impl CovidAction {
    pub const ALL: [CovidAction; 3] = [CovidAction::Decrease, CovidAction::Maintain, CovidAction::Increase];

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn apply(self, stage: u8) -> u8 {
        match self {
            CovidAction::Decrease => stage.saturating_sub(1),
            CovidAction::Maintain => stage,
            CovidAction::Increase => (stage + 1).min(MAX_STAGE),
        }
    }
}

/// Last [`WINDOW`] days of test counts and stages, oldest first, zero-padded
/// at the front early in an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovidObservation {
    pub cases: [f64; WINDOW],
    pub stages: [u8; WINDOW],
}

impl CovidObservation {
    pub const DIM: usize = 2 * WINDOW;

    /// Policy input: log-scaled case counts followed by stage / 4.
    pub fn features(&self, population: f64) -> [f64; Self::DIM] {
        let mut out = [0.0; Self::DIM];
        let scale = population.ln_1p();
        for k in 0..WINDOW {
            out[k] = self.cases[k].ln_1p() / scale;
            out[WINDOW + k] = f64::from(self.stages[k]) / f64::from(MAX_STAGE);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovidStepInfo {
    pub day: usize,
    pub stage: u8,
    pub infected: f64,
    pub population: f64,
    pub observed_cases: f64,
    pub icu_load: f64,
    pub case_threshold: f64,
}

/// One Euler step of the SEIR equations at the current stage's transmission
/// rate. Negative compartments are clamped to zero and the remainder rescaled
/// so the population total is preserved.
pub fn seir_step(state: &SeirState, params: &SeirParams) -> SeirState {
    let n = params.population;
    let beta = params.beta_by_stage[usize::from(state.stage.min(MAX_STAGE))];
    let dt = params.dt;
    let infection = beta * state.s * state.i / n * dt;
    let onset = params.sigma * state.e * dt;
    let recovery = params.gamma * state.i * dt;

    let mut next = state.clone();
    next.s = state.s - infection;
    next.e = state.e + infection - onset;
    next.i = state.i + onset - recovery;
    next.r = state.r + recovery;

    let mut comps = [next.s, next.e, next.i, next.r];
    if comps.iter().any(|c| *c < 0.0) {
        comps.iter_mut().for_each(|c| *c = c.max(0.0));
        let total: f64 = comps.iter().sum();
        if total > 0.0 {
            comps.iter_mut().for_each(|c| *c *= n / total);
        }
    }
    [next.s, next.e, next.i, next.r] = comps;
    next.day = state.day + 1;
    next
}

/// Draws today's test count, `Binomial(round(I), testing_rate)`, and appends it
/// (with the current stage) to the history.
pub fn covid_observe(state: &mut SeirState, params: &SeirParams, rng: &mut impl Rng) -> CovidObservation {
    let infected = state.i.round().max(0.0) as u64;
    let observed = match params.testing_rate {
        p if p <= 0.0 => 0,
        p if p >= 1.0 => infected,
        p => Binomial::new(infected, p).expect("rate validated").sample(rng),
    };
    state.observed_cases_history.push(observed as f64);
    state.stage_history.push(state.stage);
    observation_of(state)
}

/// The observation implied by the current history, without drawing.
pub fn observation_of(state: &SeirState) -> CovidObservation {
    let mut cases = [0.0; WINDOW];
    let mut stages = [0u8; WINDOW];
    let n = state.observed_cases_history.len();
    let take = n.min(WINDOW);
    for k in 0..take {
        cases[WINDOW - take + k] = state.observed_cases_history[n - take + k];
        stages[WINDOW - take + k] = state.stage_history[n - take + k];
    }
    CovidObservation { cases, stages }
}

/// Applies the regulation change, advances the epidemic one day, and runs the
/// day's testing round.
pub fn covid_step(
    state: &SeirState,
    action: CovidAction,
    params: &SeirParams,
    rng: &mut impl Rng,
) -> (SeirState, CovidStepInfo) {
    let mut staged = state.clone();
    staged.stage = action.apply(state.stage);
    let mut next = seir_step(&staged, params);
    covid_observe(&mut next, params, rng);
    let observed = *next.observed_cases_history.last().expect("just observed");
    let info = CovidStepInfo {
        day: next.day,
        stage: next.stage,
        infected: next.i,
        population: params.population,
        observed_cases: observed,
        icu_load: params.icu_fraction * next.i,
        case_threshold: params.case_threshold(),
    };
    (next, info)
}

/// A seeded episode: the epidemic state plus the testing stream.
#[derive(Debug, Clone)]
pub struct CovidEpisode {
    pub params: SeirParams,
    pub state: SeirState,
    rng: ChaCha8Rng,
}

impl CovidEpisode {
    pub fn new(params: &SeirParams) -> Result<Self> {
        params.validate()?;
        let mut rng = seed::rng(params.seed, &[0xC0_71D]);
        let mut state = SeirState::initial(params);
        covid_observe(&mut state, params, &mut rng);
        Ok(Self {
            params: params.clone(),
            state,
            rng,
        })
    }

    pub fn observe(&self) -> CovidObservation {
        observation_of(&self.state)
    }

    pub fn step(&mut self, action: CovidAction) -> CovidStepInfo {
        let (next, info) = covid_step(&self.state, action, &self.params, &mut self.rng);
        self.state = next;
        info
    }

    pub fn is_done(&self) -> bool {
        self.state.day >= self.params.horizon
    }
}
