//! Property tests for the simulator, reward, trainer and detector invariants.

use proptest::prelude::*;

use rewardlab::covid::{CovidAction, CovidEpisode, SeirParams};
use rewardlab::policy::{policy_init, PolicySpec};
use rewardlab::polynomaly::{anomaly_score, BenchPolicy, DetectorConfig, Sampling};
use rewardlab::rewards::{RewardId, RewardPair, RewardRole, RewardSpec};
use rewardlab::rollout::{EnvConfig, EnvKind, StepInfo};
use rewardlab::traffic::{quantize_action, Edge, TrafficConfig, TrafficState, TrafficStepInfo};
use rewardlab::trainer::{train, CheckpointTag, TrainConfig};

fn traffic_cfg(seed: u64, jitter: f64) -> TrafficConfig {
    TrafficConfig {
        seed,
        spawn_jitter: jitter,
        ..TrafficConfig::default()
    }
}

fn drive(cfg: &TrafficConfig, actions: &[f64]) -> (Vec<TrafficState>, Vec<TrafficStepInfo>) {
    let mut state = TrafficState::reset(cfg).unwrap();
    let mut states = vec![state.clone()];
    let mut infos = Vec::new();
    for &a in actions.iter().cycle().take(cfg.horizon) {
        if state.is_done() {
            break;
        }
        infos.push(state.step(a).unwrap());
        states.push(state.clone());
    }
    (states, infos)
}

fn actions() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-3.0..3.0f64, 1..40)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn traffic_keeps_order_speed_and_count(seed in 0u64..10_000, jitter in 0.0..5.0f64, acts in actions()) {
        let cfg = traffic_cfg(seed, jitter);
        let (states, _) = drive(&cfg, &acts);
        for s in &states {
            prop_assert!(s.vehicles.iter().all(|v| v.velocity >= 0.0));
            prop_assert_eq!(s.active_count() + s.finished_count(), cfg.initial_count());
            for edge in [Edge::Main, Edge::Ramp] {
                let mut pos: Vec<f64> = s.vehicles.iter().filter(|v| v.edge == edge).map(|v| v.position).collect();
                pos.sort_by(f64::total_cmp);
                prop_assert!(pos.windows(2).all(|w| w[1] - w[0] - cfg.car_length > 0.0));
            }
        }
    }

    #[test]
    fn traffic_is_deterministic(seed in 0u64..10_000, acts in actions()) {
        let cfg = traffic_cfg(seed, 2.0);
        let (a, ia) = drive(&cfg, &acts);
        let (b, ib) = drive(&cfg, &acts);
        prop_assert_eq!(ia, ib);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn quantization_is_idempotent(a in -3.0..3.0f64, eps in prop_oneof![Just(0.0), 1e-3..2.0f64]) {
        let q = quantize_action(a, eps);
        prop_assert_eq!(quantize_action(q, eps), q);
    }

    #[test]
    fn seir_conserves_and_stays_in_range(seed in 0u64..10_000, acts in proptest::collection::vec(0usize..3, 1..30)) {
        let params = SeirParams { seed, ..SeirParams::default() };
        let mut ep = CovidEpisode::new(&params).unwrap();
        for &i in acts.iter().cycle().take(params.horizon) {
            let info = ep.step(CovidAction::from_index(i).unwrap());
            let st = &ep.state;
            prop_assert!((st.total() - params.population).abs() <= 1e-9 * params.population);
            prop_assert!(st.s >= 0.0 && st.e >= 0.0 && st.i >= 0.0 && st.r >= 0.0);
            prop_assert!(info.stage <= 4 && st.stage <= 4);
        }
    }

    #[test]
    fn misweighting_collapses_to_truth_at_true_coefficients(seed in 0u64..10_000, acts in actions()) {
        let (_, infos) = drive(&traffic_cfg(seed, 3.0), &acts);
        let proxy = RewardSpec::new(RewardId::TrafficMisweighting, RewardRole::Proxy).with_weight("lambda_accel", 0.1);
        let truth = RewardSpec::new(RewardId::TrafficTrue, RewardRole::True);
        for info in infos {
            let step = StepInfo::Traffic(info);
            prop_assert_eq!(proxy.evaluate(&step).unwrap(), truth.evaluate(&step).unwrap());
        }

        let params = SeirParams { seed, ..SeirParams::default() };
        let mut ep = CovidEpisode::new(&params).unwrap();
        let proxy = RewardSpec::new(RewardId::CovidMisweighting, RewardRole::Proxy).with_weight("lambda_health", 1.0);
        let truth = RewardSpec::new(RewardId::CovidTrue, RewardRole::True);
        for (t, _) in acts.iter().enumerate().take(60) {
            let step = StepInfo::Covid(ep.step(CovidAction::from_index(t % 3).unwrap()));
            prop_assert_eq!(proxy.evaluate(&step).unwrap(), truth.evaluate(&step).unwrap());
        }
    }

    #[test]
    fn full_window_scope_equals_velocity_proxy(seed in 0u64..10_000, acts in actions()) {
        let cfg = traffic_cfg(seed, 3.0);
        let (_, infos) = drive(&cfg, &acts);
        let scope = RewardSpec::new(RewardId::TrafficScope, RewardRole::Proxy)
            .with_weight("window_lo", 0.0)
            .with_weight("window_hi", cfg.main_length);
        let velocity = RewardSpec::new(RewardId::TrafficOntological, RewardRole::Proxy);
        for info in infos {
            let step = StepInfo::Traffic(info);
            let a = scope.evaluate(&step).unwrap();
            prop_assert_eq!(a, velocity.evaluate(&step).unwrap());
            // Pure: a second evaluation sees no hidden state.
            prop_assert_eq!(a, scope.evaluate(&step).unwrap());
        }
    }

    #[test]
    fn self_score_is_zero(seed in 0u64..1000, covid in any::<bool>()) {
        let kind = if covid { EnvKind::Covid } else { EnvKind::Traffic };
        let env = EnvConfig::default_for(kind);
        let spec = PolicySpec::new(kind, vec![4]).with_bounds(env.action_bounds());
        let p = BenchPolicy { params: policy_init(&spec, seed), spec };
        let sampling = Sampling { r: 2, s: 25 };
        for d in DetectorConfig::all() {
            prop_assert_eq!(anomaly_score(&p, &p, &env, sampling, &d, seed).unwrap(), 0.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn training_elites_and_trained_tag(seed in 0u64..10_000) {
        let env = EnvConfig::Covid(SeirParams { horizon: 30, ..SeirParams::default() });
        let spec = PolicySpec::new(EnvKind::Covid, vec![4]);
        let cfg = TrainConfig { population: 8, generations: 4, rollouts_per_eval: 2, checkpoint_every: 2, seed, ..TrainConfig::default() };
        let pair = RewardPair::for_proxy(RewardId::CovidOntological);
        let run = train(&spec, &env, &pair, &cfg, 0.0).unwrap();
        for g in &run.curve {
            if let (Some(pop), Some(elite)) = (g.population_mean_proxy, g.elite_mean_proxy) {
                prop_assert!(elite >= pop);
            }
        }
        let best = run.trained().mean_proxy;
        prop_assert!(run.checkpoints.iter().all(|c| c.mean_proxy <= best));
        prop_assert_eq!(run.checkpoints.iter().filter(|c| c.has(CheckpointTag::Trained)).count(), 1);
        prop_assert_eq!(&train(&spec, &env, &pair, &cfg, 0.0).unwrap(), &run);
    }
}
