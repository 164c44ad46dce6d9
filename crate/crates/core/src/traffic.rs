//! Single-lane merge network: a straightaway with one on-ramp. Human cars
//! follow the Intelligent Driver Model; the autonomous vehicle (AV) applies
//! whatever acceleration the policy commands.
//!
//! Coordinates: main-road positions run from 0 to `main_length`; ramp
//! positions run from 0 to `ramp_length`, with the ramp end joining the main
//! road at `merge_position`. A vehicle's position is its front bumper.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdmParams {
    /// Desired velocity (m/s).
    pub v0: f64,
    /// Safe time headway (s).
    pub time_headway: f64,
    /// Maximum acceleration (m/s²).
    pub a_max: f64,
    /// Comfortable deceleration (m/s²).
    pub b: f64,
    /// Acceleration exponent.
    pub delta: f64,
    /// Minimum standstill gap (m).
    pub s0: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            v0: 30.0,
            time_headway: 1.5,
            a_max: 1.0,
            b: 2.0,
            delta: 4.0,
            s0: 2.0,
        }
    }
}

impl IdmParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("v0", self.v0),
            ("time_headway", self.time_headway),
            ("a_max", self.a_max),
            ("b", self.b),
            ("delta", self.delta),
            ("s0", self.s0),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::Config(format!("idm.{name} must be positive, got {value}")));
            }
        }
        if self.delta < 1.0 {
            return Err(Error::Config(format!("idm.delta must be >= 1, got {}", self.delta)));
        }
        Ok(())
    }
}

/// Gap and speed of the vehicle ahead, as seen by the IDM.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Leader {
    /// Bumper-to-bumper distance (m).
    pub gap: f64,
    pub velocity: f64,
}

/// IDM acceleration for a car at `velocity` behind `leader`.
///
/// Without a leader the interaction term is dropped and only the free-road
/// term remains. A non-positive gap means two cars overlap, which is reported
/// as a collision.
pub fn idm_accel(velocity: f64, leader: Option<Leader>, params: &IdmParams) -> Result<f64> {
    let free = 1.0 - (velocity / params.v0).powf(params.delta);
    let Some(leader) = leader else {
        return Ok(params.a_max * free);
    };
    if !(leader.gap > 0.0) {
        return Err(Error::Collision {
            follower: usize::MAX,
            leader: usize::MAX,
            edge: "idm",
            gap: leader.gap,
        });
    }
    let dv = velocity - leader.velocity;
    // Dynamic part floored at zero so a fast-receding leader never pulls s* below s0.
    let dynamic = velocity * params.time_headway + velocity * dv / (2.0 * (params.a_max * params.b).sqrt());
    let s_star = params.s0 + dynamic.max(0.0);
    Ok(params.a_max * (free - (s_star / leader.gap).powi(2)))
}

/// [`idm_accel`] expressed over vehicle states.
pub fn idm_acceleration(
    ego: &VehicleState,
    leader: Option<&VehicleState>,
    params: &IdmParams,
    car_length: f64,
) -> Result<f64> {
    let leader = leader.map(|l| Leader {
        gap: l.position - ego.position - car_length,
        velocity: l.velocity,
    });
    idm_accel(ego.velocity, leader, params).map_err(|e| match e {
        Error::Collision { gap, .. } => Error::Collision {
            follower: ego.id,
            leader: usize::MAX,
            edge: ego.edge.name(),
            gap,
        },
        other => other,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Edge {
    Main,
    Ramp,
    MergedDone,
}

impl Edge {
    pub fn name(self) -> &'static str {
        match self {
            Edge::Main => "main",
            Edge::Ramp => "ramp",
            Edge::MergedDone => "merged-done",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: usize,
    pub edge: Edge,
    pub position: f64,
    pub velocity: f64,
    pub is_av: bool,
    pub last_accel: f64,
    pub spawn_time: f64,
    pub finish_time: Option<f64>,
}

impl VehicleState {
    pub fn is_active(&self) -> bool {
        self.edge != Edge::MergedDone
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrafficConfig {
    pub main_length: f64,
    pub ramp_length: f64,
    pub merge_position: f64,
    pub n_human: usize,
    pub car_length: f64,
    pub dt: f64,
    pub horizon: usize,
    pub idm: IdmParams,
    /// `[a_min, a_max]` for the AV (m/s²).
    pub av_accel_bounds: [f64; 2],
    /// Half-width (m) of the uniform per-car perturbation of spawn positions.
    pub spawn_jitter: f64,
    pub seed: u64,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        Self {
            main_length: 400.0,
            ramp_length: 50.0,
            merge_position: 200.0,
            n_human: 12,
            car_length: 5.0,
            dt: 0.1,
            horizon: 270,
            idm: IdmParams::default(),
            av_accel_bounds: [-3.0, 3.0],
            spawn_jitter: 0.0,
            seed: 0,
        }
    }
}

impl TrafficConfig {
    pub fn validate(&self) -> Result<()> {
        self.idm.validate()?;
        let cfg = |m: String| Err(Error::Config(m));
        if !(self.main_length > 0.0 && self.ramp_length > 0.0) {
            return cfg("road lengths must be positive".into());
        }
        if !(self.merge_position > 0.0 && self.merge_position < self.main_length) {
            return cfg(format!(
                "merge_position {} must lie strictly inside (0, {})",
                self.merge_position, self.main_length
            ));
        }
        if !(self.dt > 0.0) || self.horizon == 0 {
            return cfg("dt and horizon must be positive".into());
        }
        if !(self.car_length > 0.0) {
            return cfg("car_length must be positive".into());
        }
        let [lo, hi] = self.av_accel_bounds;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return cfg(format!("av_accel_bounds [{lo}, {hi}] must be an increasing pair"));
        }
        if !(self.spawn_jitter >= 0.0) {
            return cfg("spawn_jitter must be non-negative".into());
        }
        if self.n_human > 0 {
            let spacing = self.spacing();
            let min = self.idm.s0 + self.car_length;
            if spacing - 2.0 * self.spawn_jitter < min {
                return cfg(format!(
                    "spawn spacing {spacing:.3} m (less jitter) is below s0 + car_length = {min:.3} m"
                ));
            }
        }
        Ok(())
    }

    pub fn spacing(&self) -> f64 {
        self.main_length / self.n_human.max(1) as f64
    }

    pub fn accel_range(&self) -> f64 {
        self.av_accel_bounds[1] - self.av_accel_bounds[0]
    }

    pub fn initial_count(&self) -> usize {
        self.n_human + 1
    }

    /// Maps a position on `edge` into main-road coordinates; the ramp is laid
    /// out as if it ran alongside the main road, ending at the merge point.
    fn project(&self, edge: Edge, position: f64) -> f64 {
        match edge {
            Edge::Ramp => position - self.ramp_length + self.merge_position,
            _ => position,
        }
    }
}

/// Per-vehicle record carried by [`TrafficStepInfo`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleSample {
    pub id: usize,
    pub edge: Edge,
    pub position: f64,
    pub velocity: f64,
    pub accel: f64,
    pub is_av: bool,
}

/// Everything the reward functions may look at after one step.
///
/// `vehicles` lists every vehicle that was active when the step began, with its
/// post-step edge; vehicles that completed the route this step appear with
/// edge `MergedDone` and are also listed in `completions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficStepInfo {
    pub time: f64,
    pub initial_count: usize,
    pub vehicles: Vec<VehicleSample>,
    pub completions: Vec<usize>,
}

impl TrafficStepInfo {
    pub fn active(&self) -> impl Iterator<Item = &VehicleSample> {
        self.vehicles.iter().filter(|v| v.edge != Edge::MergedDone)
    }

    pub fn active_count(&self) -> usize {
        self.active().count()
    }

    pub fn mean_abs_accel(&self) -> f64 {
        if self.vehicles.is_empty() {
            return 0.0;
        }
        self.vehicles.iter().map(|v| v.accel.abs()).sum::<f64>() / self.vehicles.len() as f64
    }
}

/// Six-slot AV observation: own position, own velocity, leader position,
/// leader velocity, follower position, follower velocity.
///
/// Positions are in main-road coordinates divided by `main_length` (the ramp
/// is projected so its end coincides with the merge point); velocities are
/// divided by `v0`. All slots are clamped to `[0, 1]`; an absent neighbour
/// reads 1.0 in both its slots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficObservation(pub [f64; 6]);

impl TrafficObservation {
    pub const DIM: usize = 6;

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficState {
    pub config: TrafficConfig,
    pub vehicles: Vec<VehicleState>,
    pub time: f64,
    pub steps: usize,
}

pub fn traffic_reset(config: &TrafficConfig) -> Result<TrafficState> {
    TrafficState::reset(config)
}

impl TrafficState {
    pub fn reset(config: &TrafficConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(config.seed, &[0x7AFF1C]);
        let spacing = config.spacing();
        let mut vehicles = Vec::with_capacity(config.n_human + 1);
        for i in 0..config.n_human {
            let jitter = if config.spawn_jitter > 0.0 {
                rng.random_range(-config.spawn_jitter..=config.spawn_jitter)
            } else {
                0.0
            };
            let position = (i as f64 * spacing + jitter).clamp(0.0, config.main_length);
            vehicles.push(VehicleState {
                id: i,
                edge: Edge::Main,
                position,
                velocity: config.idm.v0 / 2.0,
                is_av: false,
                last_accel: 0.0,
                spawn_time: 0.0,
                finish_time: None,
            });
        }
        vehicles.push(VehicleState {
            id: config.n_human,
            edge: Edge::Ramp,
            position: 0.0,
            velocity: 0.0,
            is_av: true,
            last_accel: 0.0,
            spawn_time: 0.0,
            finish_time: None,
        });
        let state = Self {
            config: config.clone(),
            vehicles,
            time: 0.0,
            steps: 0,
        };
        state.check_ordering()?;
        Ok(state)
    }

    pub fn av(&self) -> &VehicleState {
        self.vehicles
            .iter()
            .find(|v| v.is_av)
            .expect("state always holds one AV")
    }

    pub fn av_active(&self) -> bool {
        self.av().is_active()
    }

    pub fn active_count(&self) -> usize {
        self.vehicles.iter().filter(|v| v.is_active()).count()
    }

    pub fn finished_count(&self) -> usize {
        self.vehicles.len() - self.active_count()
    }

    /// The episode ends at the horizon or once every vehicle has left.
    pub fn is_done(&self) -> bool {
        self.steps >= self.config.horizon || self.active_count() == 0
    }

    /// Indices of vehicles on `edge`, front-most first.
    fn ordered(&self, edge: Edge) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.vehicles.len())
            .filter(|&i| self.vehicles[i].edge == edge)
            .collect();
        idx.sort_by(|&a, &b| {
            self.vehicles[b]
                .position
                .total_cmp(&self.vehicles[a].position)
                .then(a.cmp(&b))
        });
        idx
    }

    pub fn observe(&self) -> TrafficObservation {
        let cfg = &self.config;
        let av = self.av();
        let pos = |x: f64| (x / cfg.main_length).clamp(0.0, 1.0);
        let vel = |v: f64| (v / cfg.idm.v0).clamp(0.0, 1.0);
        let own_u = cfg.project(av.edge, av.position);

        let others = self
            .vehicles
            .iter()
            .filter(|v| v.is_active() && !v.is_av)
            .map(|v| (v, cfg.project(v.edge, v.position)));

        let (leader, follower) = match av.edge {
            Edge::Ramp => {
                // Only main-road traffic matters to a ramp car: the car nearest past
                // the merge point leads, the car nearest before it follows.
                let main = || others.clone().filter(|(v, _)| v.edge == Edge::Main);
                let leader = main()
                    .filter(|(_, u)| *u >= cfg.merge_position)
                    .min_by(|a, b| a.1.total_cmp(&b.1));
                let follower = main()
                    .filter(|(_, u)| *u < cfg.merge_position)
                    .max_by(|a, b| a.1.total_cmp(&b.1));
                (leader, follower)
            }
            _ => {
                let same = || others.clone().filter(|(v, _)| v.edge == av.edge);
                let leader = same().filter(|(_, u)| *u > own_u).min_by(|a, b| a.1.total_cmp(&b.1));
                let follower = same().filter(|(_, u)| *u <= own_u).max_by(|a, b| a.1.total_cmp(&b.1));
                (leader, follower)
            }
        };
        let slot = |n: Option<(&VehicleState, f64)>| match n {
            Some((v, u)) => (pos(u), vel(v.velocity)),
            None => (1.0, 1.0),
        };
        let (lp, lv) = slot(leader);
        let (fp, fv) = slot(follower);
        TrafficObservation([pos(own_u), vel(av.velocity), lp, lv, fp, fv])
    }

    /// Advances one `dt`. The AV action is clamped to `av_accel_bounds`.
    pub fn step(&mut self, av_action: f64) -> Result<TrafficStepInfo> {
        let cfg = self.config.clone();
        let dt = cfg.dt;
        let [a_lo, a_hi] = cfg.av_accel_bounds;
        let av_action = if av_action.is_nan() {
            0.0
        } else {
            av_action.clamp(a_lo, a_hi)
        };

        let started_active: Vec<usize> = (0..self.vehicles.len())
            .filter(|&i| self.vehicles[i].is_active())
            .collect();

        // Accelerations from the pre-step state.
        let mut accel = vec![0.0; self.vehicles.len()];
        let mut leader_of = vec![None; self.vehicles.len()];
        for edge in [Edge::Main, Edge::Ramp] {
            let order = self.ordered(edge);
            for (k, &i) in order.iter().enumerate() {
                let lead = if k > 0 { Some(order[k - 1]) } else { None };
                leader_of[i] = lead;
                let v = &self.vehicles[i];
                accel[i] = if v.is_av {
                    av_action
                } else {
                    idm_acceleration(v, lead.map(|j| &self.vehicles[j]), &cfg.idm, cfg.car_length)
                        .map_err(|e| with_leader(e, lead.map(|j| self.vehicles[j].id)))?
                };
            }
        }

        // Semi-implicit Euler, front-most first so the AV's collision guard
        // sees its leader's updated position.
        let old_velocity: Vec<f64> = self.vehicles.iter().map(|v| v.velocity).collect();
        for edge in [Edge::Main, Edge::Ramp] {
            for i in self.ordered(edge) {
                let mut v_new = (self.vehicles[i].velocity + accel[i] * dt).max(0.0);
                if self.vehicles[i].is_av {
                    if let Some(j) = leader_of[i] {
                        let room =
                            self.vehicles[j].position - cfg.car_length - AV_MIN_CLEARANCE - self.vehicles[i].position;
                        v_new = v_new.min((room / dt).max(0.0));
                    }
                }
                let veh = &mut self.vehicles[i];
                veh.velocity = v_new;
                veh.position += v_new * dt;
            }
        }

        let t_next = self.time + dt;
        // Ramp end: merge when the main road is clear around the insertion point,
        // otherwise hold at the ramp end.
        for i in self.ordered(Edge::Ramp) {
            if self.vehicles[i].position < cfg.ramp_length {
                continue;
            }
            let overshoot = self.vehicles[i].position - cfg.ramp_length;
            let insert_at = cfg.merge_position + overshoot;
            let clearance = cfg.idm.s0 + cfg.car_length;
            let clear = self
                .vehicles
                .iter()
                .filter(|v| v.edge == Edge::Main)
                .all(|v| (v.position - insert_at).abs() > clearance);
            let veh = &mut self.vehicles[i];
            if clear {
                veh.edge = Edge::Main;
                veh.position = insert_at;
            } else {
                veh.position = cfg.ramp_length;
                veh.velocity = 0.0;
            }
        }

        let mut completions = Vec::new();
        for veh in self.vehicles.iter_mut().filter(|v| v.edge == Edge::Main) {
            if veh.position >= cfg.main_length {
                veh.edge = Edge::MergedDone;
                veh.position = cfg.main_length;
                veh.finish_time = Some(t_next);
                completions.push(veh.id);
            }
        }

        for &i in &started_active {
            self.vehicles[i].last_accel = (self.vehicles[i].velocity - old_velocity[i]) / dt;
        }
        self.time = t_next;
        self.steps += 1;
        self.check_ordering()?;

        let vehicles = started_active
            .iter()
            .map(|&i| {
                let v = &self.vehicles[i];
                VehicleSample {
                    id: v.id,
                    edge: v.edge,
                    position: v.position,
                    velocity: v.velocity,
                    accel: v.last_accel,
                    is_av: v.is_av,
                }
            })
            .collect();
        Ok(TrafficStepInfo {
            time: self.time,
            initial_count: self.vehicles.len(),
            vehicles,
            completions,
        })
    }

    /// Every same-edge pair must keep a positive bumper-to-bumper gap.
    pub fn check_ordering(&self) -> Result<()> {
        for edge in [Edge::Main, Edge::Ramp] {
            let order = self.ordered(edge);
            for pair in order.windows(2) {
                let (lead, follow) = (&self.vehicles[pair[0]], &self.vehicles[pair[1]]);
                let gap = lead.position - follow.position - self.config.car_length;
                if !(gap > 0.0) {
                    return Err(Error::Collision {
                        follower: follow.id,
                        leader: lead.id,
                        edge: edge.name(),
                        gap,
                    });
                }
            }
        }
        Ok(())
    }

    /// Smallest same-edge bumper-to-bumper gap, if any edge holds two cars.
    pub fn min_gap(&self) -> Option<f64> {
        [Edge::Main, Edge::Ramp]
            .into_iter()
            .flat_map(|edge| {
                let order = self.ordered(edge);
                order
                    .windows(2)
                    .map(|p| self.vehicles[p[0]].position - self.vehicles[p[1]].position - self.config.car_length)
                    .collect::<Vec<_>>()
            })
            .min_by(f64::total_cmp)
    }
}

/// Extra distance the AV keeps to its leader beyond the car length.
const AV_MIN_CLEARANCE: f64 = 0.5;

fn with_leader(e: Error, leader_id: Option<usize>) -> Error {
    match e {
        Error::Collision {
            follower, edge, gap, ..
        } => Error::Collision {
            follower,
            leader: leader_id.unwrap_or(usize::MAX),
            edge,
            gap,
        },
        other => other,
    }
}

/// Rounds `a` to the nearest multiple of `epsilon`, ties away from zero.
/// `epsilon == 0` disables quantization.
pub fn quantize_action(a: f64, epsilon: f64) -> f64 {
    if epsilon <= 0.0 {
        return a;
    }
    (a / epsilon).round() * epsilon
}
